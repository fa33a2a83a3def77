#include "ivoct/seg_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

#include "ivoct/nn/checkpoint.hpp"
#include "ivoct/nn/loss.hpp"

namespace ivoct {

using nn::Tensor;

void SegConfig::validate() const {
    if (input_rows < 2 || input_cols < 2) throw ConfigError("seg: input shape must be at least 2x2");
    if (encoder.empty()) throw ConfigError("seg: at least one encoder stage required");
    for (const auto& s : encoder)
        if (s.channels < 1 || s.stride < 1 || s.stride > 4) throw ConfigError("seg: invalid encoder stage");
    if (aspp_channels < 1) throw ConfigError("seg: aspp_channels must be >= 1");
    for (int r : aspp_rates)
        if (r < 1) throw ConfigError("seg: aspp rates must be >= 1");
    if (aspp_rates.empty() && !aspp_global) throw ConfigError("seg: ASPP needs at least one branch besides 1x1");
    if (classes != 2) throw ConfigError("seg: only two classes are supported");
    for (int axis = 0; axis < 2; ++axis)
        if (!full_receptive_field(*this, axis))
            throw ConfigError(std::string("seg: receptive field does not cover the input along ") +
                              (axis == 0 ? "rows (theta, " + std::to_string(input_rows) + " A-lines)"
                                         : "cols (r, " + std::to_string(input_cols) + " samples)"));
}

nlohmann::json to_json(const SegConfig& c) {
    nlohmann::json enc = nlohmann::json::array();
    for (const auto& s : c.encoder) enc.push_back({{"channels", s.channels}, {"stride", s.stride}});
    return {{"input_rows", c.input_rows},       {"input_cols", c.input_cols}, {"resize_input", c.resize_input},
            {"encoder", enc},                   {"aspp_channels", c.aspp_channels},
            {"aspp_rates", c.aspp_rates},       {"aspp_global", c.aspp_global},
            {"classes", c.classes}};
}

SegConfig seg_config_from_json(const nlohmann::json& j, SegConfig c) {
    try {
        for (auto it = j.begin(); it != j.end(); ++it) {
            const auto& k = it.key();
            if (k == "input_rows") c.input_rows = it->get<int>();
            else if (k == "input_cols") c.input_cols = it->get<int>();
            else if (k == "resize_input") c.resize_input = it->get<bool>();
            else if (k == "aspp_channels") c.aspp_channels = it->get<int>();
            else if (k == "aspp_rates") c.aspp_rates = it->get<std::vector<int>>();
            else if (k == "aspp_global") c.aspp_global = it->get<bool>();
            else if (k == "classes") c.classes = it->get<int>();
            else if (k == "encoder") {
                c.encoder.clear();
                for (const auto& s : *it) c.encoder.push_back({s.at("channels").get<int>(), s.at("stride").get<int>()});
            } else
                throw ConfigError("seg: unknown key '" + k + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("seg config: ") + e.what());
    }
    return c;
}

// ------------------------------------------------------------ receptive field

namespace {

using Support = std::vector<bool>;

int conv_out(int n, int k, int s, int d, int pad) { return (n + 2 * pad - d * (k - 1) - 1) / s + 1; }

Support conv_support(const Support& in, int k, int s, int d, int pad) {
    const int n = static_cast<int>(in.size());
    Support out(conv_out(n, k, s, d, pad), false);
    for (int o = 0; o < static_cast<int>(out.size()); ++o)
        for (int t = 0; t < k; ++t) {
            int src = o * s + t * d - pad;
            if (src >= 0 && src < n && in[src]) out[o] = true;
        }
    return out;
}

Support resize_support(const Support& in, int n_out) {
    auto taps = bilinear_taps(static_cast<int>(in.size()), n_out);
    Support out(n_out, false);
    for (int i = 0; i < n_out; ++i) out[i] = in[taps.lo[i]] || (taps.frac[i] > 0.0 && in[taps.hi[i]]);
    return out;
}

Support unite(Support a, const Support& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = a[i] || b[i];
    return a;
}

Support propagate(const SegConfig& cfg, int extent, int impulse) {
    Support x(extent, false);
    x[impulse] = true;
    std::vector<Support> skips;
    Support h = x;
    for (const auto& s : cfg.encoder) {
        h = conv_support(h, 3, s.stride, 1, 1);
        skips.push_back(h);
    }
    Support cat = h;  // 1x1 branch
    for (int r : cfg.aspp_rates) cat = unite(cat, conv_support(h, 3, 1, r, r));
    if (cfg.aspp_global && std::find(h.begin(), h.end(), true) != h.end()) cat.assign(h.size(), true);
    Support a = cat;
    for (int i = static_cast<int>(skips.size()) - 2; i >= 0; --i) {
        a = unite(resize_support(a, static_cast<int>(skips[i].size())), skips[i]);
        a = conv_support(a, 3, 1, 1, 1);
    }
    a = unite(resize_support(a, extent), x);
    return conv_support(a, 3, 1, 1, 1);
}

}  // namespace

bool full_receptive_field(const SegConfig& cfg, int axis) {
    const int extent = axis == 0 ? cfg.input_rows : cfg.input_cols;
    // Each encoder stage must leave at least one position.
    int n = extent;
    for (const auto& s : cfg.encoder) {
        n = conv_out(n, 3, s.stride, 1, 1);
        if (n < 1) return false;
    }
    for (int impulse : {0, extent - 1}) {
        auto out = propagate(cfg, extent, impulse);
        if (std::find(out.begin(), out.end(), false) != out.end()) return false;
    }
    return true;
}

// ------------------------------------------------------------ blocks

ConvBlock::ConvBlock(const std::string& name, int in, int out, int k, int stride, int dilation)
    : conv(name + ".conv", in, out, k, stride, dilation, -1, false), bn(name + ".bn", out) {}

Tensor ConvBlock::forward(const Tensor& x, bool training) { return relu.forward(bn.forward(conv.forward(x), training)); }

Tensor ConvBlock::backward(const Tensor& dy) { return conv.backward(bn.backward(relu.backward(dy))); }

void ConvBlock::collect(std::vector<nn::Param*>& params, std::vector<std::pair<std::string, Tensor*>>& state) {
    for (auto* p : conv.params()) params.push_back(p);
    for (auto* p : bn.params()) params.push_back(p);
    for (auto* p : conv.params()) state.emplace_back(p->name, &p->value);
    for (auto* p : bn.params()) state.emplace_back(p->name, &p->value);
    state.emplace_back(bn.name + ".running_mean", &bn.running_mean);
    state.emplace_back(bn.name + ".running_var", &bn.running_var);
}

// ------------------------------------------------------------ model

SegModel::SegModel(SegConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
    Rng rng(derive_seed(seed, 0x5e6d0001));
    for (auto& b : enc_) b.conv.init(rng);
    for (auto& b : aspp_) b.conv.init(rng);
    if (cfg_.aspp_global) gconv_.init(rng);
    proj_.conv.init(rng);
    for (auto& b : dec_) b.conv.init(rng);
    head_.init(rng);
}

void SegModel::build() {
    std::vector<int> rows{cfg_.input_rows}, cols{cfg_.input_cols};
    int ch = 1;
    for (std::size_t i = 0; i < cfg_.encoder.size(); ++i) {
        const auto& s = cfg_.encoder[i];
        enc_.emplace_back("enc" + std::to_string(i), ch, s.channels, 3, s.stride, 1);
        ch = s.channels;
        skip_channels_.push_back(ch);
        rows.push_back(conv_out(rows.back(), 3, s.stride, 1, 1));
        cols.push_back(conv_out(cols.back(), 3, s.stride, 1, 1));
    }
    aspp_.emplace_back("aspp.b1x1", ch, cfg_.aspp_channels, 1, 1, 1);
    for (int r : cfg_.aspp_rates) aspp_.emplace_back("aspp.rate" + std::to_string(r), ch, cfg_.aspp_channels, 3, 1, r);
    int cat = cfg_.aspp_channels * static_cast<int>(aspp_.size());
    if (cfg_.aspp_global) {
        gconv_ = nn::Conv2d("aspp.global.conv", ch, cfg_.aspp_channels, 1, 1, 1, 0, true);
        gup_ = nn::Resize(rows.back(), cols.back());
        cat += cfg_.aspp_channels;
    }
    proj_ = ConvBlock("aspp.proj", cat, cfg_.aspp_channels, 1, 1, 1);
    int a = cfg_.aspp_channels;
    for (int i = static_cast<int>(cfg_.encoder.size()) - 2; i >= 0; --i) {
        dec_up_.emplace_back(rows[i + 1], cols[i + 1]);
        dec_.emplace_back("dec" + std::to_string(i), a + skip_channels_[i], skip_channels_[i], 3, 1, 1);
        a = skip_channels_[i];
    }
    head_up_ = nn::Resize(cfg_.input_rows, cfg_.input_cols);
    head_ = nn::Conv2d("head", a + 1, cfg_.classes, 3, 1, 1, -1, true);
}

std::vector<nn::Param*> SegModel::params() {
    std::vector<nn::Param*> p;
    std::vector<std::pair<std::string, Tensor*>> s;
    for (auto& b : enc_) b.collect(p, s);
    for (auto& b : aspp_) b.collect(p, s);
    if (cfg_.aspp_global)
        for (auto* q : gconv_.params()) p.push_back(q);
    proj_.collect(p, s);
    for (auto& b : dec_) b.collect(p, s);
    for (auto* q : head_.params()) p.push_back(q);
    return p;
}

std::vector<std::pair<std::string, Tensor*>> SegModel::state() {
    std::vector<nn::Param*> p;
    std::vector<std::pair<std::string, Tensor*>> s;
    for (auto& b : enc_) b.collect(p, s);
    for (auto& b : aspp_) b.collect(p, s);
    if (cfg_.aspp_global)
        for (auto* q : gconv_.params()) s.emplace_back(q->name, &q->value);
    proj_.collect(p, s);
    for (auto& b : dec_) b.collect(p, s);
    for (auto* q : head_.params()) s.emplace_back(q->name, &q->value);
    return s;
}

std::size_t SegModel::parameter_count() {
    std::size_t n = 0;
    for (auto* p : params()) n += p->value.size();
    return n;
}

Tensor SegModel::forward(const Tensor& x, bool training) {
    require_shape(x, {x.n(), 1, cfg_.input_rows, cfg_.input_cols}, "SegModel::forward");
    std::vector<Tensor> skips;
    Tensor h = x;
    for (auto& b : enc_) {
        h = b.forward(h, training);
        skips.push_back(h);
    }
    Tensor cat = aspp_[0].forward(h, training);
    for (std::size_t b = 1; b < aspp_.size(); ++b) cat = nn::concat_channels(cat, aspp_[b].forward(h, training));
    if (cfg_.aspp_global) {
        Tensor g = gup_.forward(grelu_.forward(gconv_.forward(gap_.forward(h))));
        cat = nn::concat_channels(cat, g);
    }
    Tensor a = proj_.forward(cat, training);
    for (std::size_t j = 0; j < dec_.size(); ++j) {
        const std::size_t i = skips.size() - 2 - j;
        a = dec_[j].forward(nn::concat_channels(dec_up_[j].forward(a), skips[i]), training);
    }
    return head_.forward(nn::concat_channels(head_up_.forward(a), x));
}

Tensor SegModel::backward(const Tensor& dlogits) {
    const int a_head = head_.in_channels() - 1;
    auto [du, dx_head] = nn::split_channels(head_.backward(dlogits), a_head);
    Tensor da = head_up_.backward(du);
    std::vector<Tensor> dskip(enc_.size());
    // Backward through the decoder: the last applied stage first.
    for (std::size_t j = dec_.size(); j-- > 0;) {
        const std::size_t i = enc_.size() - 2 - j;
        Tensor dcat = dec_[j].backward(da);
        auto [dup, de] = nn::split_channels(dcat, dcat.c() - skip_channels_[i]);
        dskip[i] = std::move(de);
        da = dec_up_[j].backward(dup);
    }
    Tensor dcat = proj_.backward(da);
    const int bc = cfg_.aspp_channels;
    Tensor dh;
    Tensor rest = std::move(dcat);
    for (auto& b : aspp_) {
        auto [part, tail] = nn::split_channels(rest, bc);
        Tensor g = b.backward(part);
        if (dh.size() == 0) dh = std::move(g);
        else
            for (std::size_t q = 0; q < dh.size(); ++q) dh[q] += g[q];
        rest = std::move(tail);
    }
    if (cfg_.aspp_global) {
        Tensor g = gap_.backward(gconv_.backward(grelu_.backward(gup_.backward(rest))));
        for (std::size_t q = 0; q < dh.size(); ++q) dh[q] += g[q];
    }
    for (std::size_t i = enc_.size(); i-- > 0;) {
        if (dskip[i].size() > 0)
            for (std::size_t q = 0; q < dh.size(); ++q) dh[q] += dskip[i][q];
        dh = enc_[i].backward(dh);
    }
    for (std::size_t q = 0; q < dh.size(); ++q) dh[q] += dx_head[q];
    return dh;
}

void SegModel::save(const std::filesystem::path& path) {
    nn::NamedTensors named;
    for (auto& [n, t] : state()) named.emplace_back(n, t);
    nlohmann::json cfg{{"model", "segmentation"}, {"config", to_json(cfg_)}};
    nn::save_checkpoint(path, cfg, named);
}

SegModel SegModel::load(const std::filesystem::path& path) {
    auto ck = nn::load_checkpoint(path);
    if (ck.config.value("model", "") != "segmentation")
        throw FormatError("checkpoint " + path.string() + " is not a segmentation model");
    SegModel m(seg_config_from_json(ck.config.at("config")), 0);
    nn::restore_tensors(ck, m.state());
    return m;
}

// ------------------------------------------------------------ inference

std::vector<SegPrediction> predict_masks(SegModel& model, std::span<const Image> frames, std::span<const Mask> excluded,
                                         int batch_size) {
    const auto& cfg = model.config();
    if (!excluded.empty() && excluded.size() != frames.size())
        throw ContractError("predict_masks: one exclusion mask per frame required");
    if (batch_size < 1) throw ContractError("predict_masks: batch_size must be >= 1");
    std::vector<SegPrediction> out;
    out.reserve(frames.size());
    const int rows = cfg.input_rows, cols = cfg.input_cols;
    for (std::size_t b0 = 0; b0 < frames.size(); b0 += batch_size) {
        const std::size_t b1 = std::min(frames.size(), b0 + batch_size);
        Tensor x(static_cast<int>(b1 - b0), 1, rows, cols);
        for (std::size_t f = b0; f < b1; ++f) {
            const Image& img = frames[f];
            if (img.rows() != rows || img.cols() != cols) {
                if (!cfg.resize_input)
                    throw ContractError("predict_masks: frame " + std::to_string(img.rows()) + "x" +
                                        std::to_string(img.cols()) + " does not match network input " +
                                        std::to_string(rows) + "x" + std::to_string(cols));
                auto r = resize_bilinear(img, rows, cols);
                std::copy(r.data().begin(), r.data().end(), x.plane(static_cast<int>(f - b0), 0));
            } else {
                std::copy(img.data().begin(), img.data().end(), x.plane(static_cast<int>(f - b0), 0));
            }
        }
        Tensor p = nn::softmax_channels(model.forward(x, false));
        for (std::size_t f = b0; f < b1; ++f) {
            const int n = static_cast<int>(f - b0);
            Image pb(rows, cols), pv(rows, cols);
            std::copy(p.plane(n, 0), p.plane(n, 0) + pb.size(), pb.data().begin());
            std::copy(p.plane(n, 1), p.plane(n, 1) + pv.size(), pv.data().begin());
            const Image& img = frames[f];
            SegPrediction pr;
            pr.p_background = resize_bilinear(pb, img.rows(), img.cols());
            pr.p_vessel = resize_bilinear(pv, img.rows(), img.cols());
            pr.mask = Mask(img.rows(), img.cols(), 0);
            for (std::size_t q = 0; q < pr.mask.size(); ++q) {
                const bool ex = !excluded.empty() && excluded[f].data()[q];
                pr.mask.data()[q] = (!ex && pr.p_vessel.data()[q] > pr.p_background.data()[q]) ? 1 : 0;
            }
            out.push_back(std::move(pr));
        }
    }
    return out;
}

SegPrediction predict_mask(SegModel& model, const Image& frame, const Mask& excluded) {
    std::vector<Image> f{frame};
    std::vector<Mask> e{excluded};
    return std::move(predict_masks(model, f, e, 1).front());
}

// ------------------------------------------------------------ training

namespace {

struct Batch {
    Tensor x;
    std::vector<std::uint8_t> labels;
    std::vector<std::uint8_t> excluded;
};

Batch make_batch(const SegConfig& cfg, std::span<const SegSample> samples, std::span<const std::size_t> idx) {
    const int rows = cfg.input_rows, cols = cfg.input_cols;
    const std::size_t ps = static_cast<std::size_t>(rows) * cols;
    Batch b{Tensor(static_cast<int>(idx.size()), 1, rows, cols), std::vector<std::uint8_t>(idx.size() * ps),
            std::vector<std::uint8_t>(idx.size() * ps, 0)};
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& s = samples[idx[k]];
        if (!s.image || !s.mask) throw ContractError("train_segmentation: sample without image or mask");
        if (!s.image->same_shape(*s.mask) || (s.excluded && !s.excluded->same_shape(*s.mask)))
            throw ContractError("train_segmentation: image/mask/exclusion shapes differ");
        const bool fits = s.image->rows() == rows && s.image->cols() == cols;
        if (!fits && !cfg.resize_input)
            throw ContractError("train_segmentation: sample shape does not match network input");
        Image img = fits ? *s.image : resize_bilinear(*s.image, rows, cols);
        Mask m = fits ? *s.mask : resize_nearest(*s.mask, rows, cols);
        std::copy(img.data().begin(), img.data().end(), b.x.plane(static_cast<int>(k), 0));
        std::copy(m.data().begin(), m.data().end(), b.labels.begin() + k * ps);
        if (s.excluded) {
            Mask e = fits ? *s.excluded : resize_nearest(*s.excluded, rows, cols);
            std::copy(e.data().begin(), e.data().end(), b.excluded.begin() + k * ps);
        }
    }
    for (auto l : b.labels)
        if (l > 1) throw ContractError("train_segmentation: mask values must be 0/1");
    return b;
}

}  // namespace

SegTrainResult train_segmentation(SegModel& model, std::span<const SegSample> train, std::span<const SegSample> val,
                                  const SegTrainOptions& opt) {
    if (train.empty() || val.empty()) throw ContractError("train_segmentation: train and validation sets must be non-empty");
    if (opt.batch_size < 1) throw ConfigError("train_segmentation: batch_size must be >= 1");
    opt.sched.validate();
    const auto& cfg = model.config();

    // Class weights from included training pixels.
    std::vector<long long> counts(2, 0);
    for (std::size_t i = 0; i < train.size(); ++i) {
        std::size_t one[1] = {i};
        auto b = make_batch(cfg, train, one);
        for (std::size_t q = 0; q < b.labels.size(); ++q)
            if (!b.excluded[q]) ++counts[b.labels[q]];
    }
    SegTrainResult res;
    res.class_weights = nn::median_frequency_weights(counts);

    auto params = model.params();
    auto state = model.state();
    nn::Adam adam(params, nn::AdamConfig{.l2_lambda = opt.sched.l2_lambda});
    std::vector<Tensor> best;
    double best_loss = std::numeric_limits<double>::infinity();
    std::vector<double> val_hist;

    std::vector<std::size_t> order(train.size());
    std::vector<std::size_t> val_idx(val.size());
    std::iota(val_idx.begin(), val_idx.end(), 0);
    for (int epoch = 0;; ++epoch) {
        const double lr = nn::lr_piecewise(epoch, opt.sched);
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(opt.seed, 0x7a1e0000ULL + static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order);
        double loss_sum = 0.0;
        int steps = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += opt.batch_size, ++steps) {
            const std::size_t b1 = std::min(order.size(), b0 + opt.batch_size);
            auto batch = make_batch(cfg, train, std::span(order).subspan(b0, b1 - b0));
            adam.zero_grad();
            auto logits = model.forward(batch.x, true);
            auto r = nn::weighted_softmax_ce(logits, batch.labels, batch.excluded, res.class_weights);
            if (!std::isfinite(r.loss))
                throw TrainingError("segmentation: non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                                    std::to_string(steps + 1));
            model.backward(r.grad);
            try {
                adam.step(lr);
            } catch (const TrainingError& e) {
                throw TrainingError("segmentation: epoch " + std::to_string(epoch + 1) + ": " + e.what());
            }
            loss_sum += r.loss;
        }

        double vsum = 0.0;
        std::size_t vpix = 0;
        long long tp = 0, fp = 0, fn = 0;
        for (std::size_t b0 = 0; b0 < val_idx.size(); b0 += opt.batch_size) {
            const std::size_t b1 = std::min(val_idx.size(), b0 + opt.batch_size);
            auto batch = make_batch(cfg, val, std::span(val_idx).subspan(b0, b1 - b0));
            auto logits = model.forward(batch.x, false);
            auto r = nn::weighted_softmax_ce(logits, batch.labels, batch.excluded, res.class_weights);
            vsum += r.loss * static_cast<double>(r.included);
            vpix += r.included;
            const std::size_t ps = logits.plane_size();
            for (int n = 0; n < logits.n(); ++n)
                for (std::size_t q = 0; q < ps; ++q) {
                    const std::size_t i = static_cast<std::size_t>(n) * ps + q;
                    if (batch.excluded[i]) continue;
                    const bool pred = logits.plane(n, 1)[q] > logits.plane(n, 0)[q];
                    const bool truth = batch.labels[i] == 1;
                    tp += pred && truth;
                    fp += pred && !truth;
                    fn += !pred && truth;
                }
        }
        EpochRecord rec;
        rec.epoch = epoch + 1;
        rec.lr = lr;
        rec.train_loss = loss_sum / steps;
        rec.val_loss = vpix ? vsum / static_cast<double>(vpix) : 0.0;
        if (2 * tp + fp + fn > 0) rec.val_dice = 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
        if (!std::isfinite(rec.val_loss))
            throw TrainingError("segmentation: non-finite validation loss at epoch " + std::to_string(epoch + 1));
        res.history.push_back(rec);
        if (opt.on_epoch) opt.on_epoch(rec);
        if (rec.val_loss < best_loss) {
            best_loss = rec.val_loss;
            res.best_epoch = rec.epoch;
            best.clear();
            for (auto& [n, t] : state) best.push_back(*t);
        }
        val_hist.push_back(rec.val_loss);
        if (nn::early_stop(val_hist, opt.sched)) break;
    }
    if (opt.sched.restore_best)
        for (std::size_t k = 0; k < state.size(); ++k) *state[k].second = best[k];
    return res;
}

void write_history_csv(const std::filesystem::path& path, std::span<const EpochRecord> history) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << "epoch,lr,train_loss,val_loss,val_dice\n";
    char buf[256];
    for (const auto& r : history) {
        std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,", r.epoch, r.lr, r.train_loss, r.val_loss);
        f << buf;
        if (r.val_dice) {
            std::snprintf(buf, sizeof buf, "%.10g", *r.val_dice);
            f << buf;
        }
        f << '\n';
    }
    if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace ivoct
