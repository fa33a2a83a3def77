#include "ivoct/candidates.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "ivoct/nn/checkpoint.hpp"
#include "ivoct/nn/loss.hpp"

namespace ivoct {

using nn::Tensor;

// ------------------------------------------------------------ extraction

double polar_area_mm2(std::span<const std::pair<int, int>> pixels, const PolarGeometry& geom) {
    if (geom.alines < 1) throw ContractError("polar_area_mm2: alines must be positive");
    const double dtheta = 2.0 * std::numbers::pi / geom.alines;
    double area = 0.0;
    for (auto [a, r] : pixels) area += (geom.raw_sample(a, r) + 0.5) * geom.r_pixel_mm * geom.r_pixel_mm * dtheta;
    return area;
}

namespace {

// Grow [lo, hi] on one side so that c sits at the centre (to within half a pixel).
std::pair<int, int> centre_on(int lo, int hi, double c) {
    const double left = c - lo, right = hi - c;
    if (left > right) hi = static_cast<int>(std::ceil(c + left - 1e-9));
    else if (right > left) lo = static_cast<int>(std::floor(c - right + 1e-9));
    return {lo, hi};
}

}  // namespace

std::vector<Candidate> extract_candidates(const Mask& mask, const PolarGeometry& geom, int min_blob_px) {
    const int na = mask.rows(), nr = mask.cols();
    if (geom.alines != na) throw ContractError("extract_candidates: geometry A-line count differs from mask rows");
    if (!geom.shift.empty() && static_cast<int>(geom.shift.size()) != na)
        throw ContractError("extract_candidates: shift record length differs from mask rows");
    std::vector<char> seen(mask.size(), 0);
    std::vector<Candidate> out;
    std::vector<std::pair<int, int>> stack;
    for (int a0 = 0; a0 < na; ++a0)
        for (int r0 = 0; r0 < nr; ++r0) {
            if (!mask(a0, r0) || seen[static_cast<std::size_t>(a0) * nr + r0]) continue;
            Candidate c;
            stack.assign(1, {a0, r0});
            seen[static_cast<std::size_t>(a0) * nr + r0] = 1;
            while (!stack.empty()) {
                auto [a, r] = stack.back();
                stack.pop_back();
                c.pixels.emplace_back(a, r);
                for (int da = -1; da <= 1; ++da)
                    for (int dr = -1; dr <= 1; ++dr) {
                        const int b = wrap_index(a + da, na), s = r + dr;
                        if (s < 0 || s >= nr || !mask(b, s)) continue;
                        char& f = seen[static_cast<std::size_t>(b) * nr + s];
                        if (!f) {
                            f = 1;
                            stack.emplace_back(b, s);
                        }
                    }
            }
            if (static_cast<int>(c.pixels.size()) < min_blob_px) continue;
            std::sort(c.pixels.begin(), c.pixels.end());
            c.area_px = static_cast<int>(c.pixels.size());

            // Theta extent: complement of the largest circular gap of empty rows.
            std::vector<char> occ(na, 0);
            for (auto [a, r] : c.pixels) occ[a] = 1;
            int best_start = 0, best_len = 0;
            if (std::find(occ.begin(), occ.end(), 0) != occ.end()) {
                int first_occ = static_cast<int>(std::find(occ.begin(), occ.end(), 1) - occ.begin());
                int run = 0;
                for (int k = 1; k <= na; ++k) {
                    const int a = wrap_index(first_occ + k, na);
                    if (!occ[a]) {
                        ++run;
                    } else {
                        if (run > best_len) {
                            best_len = run;
                            best_start = wrap_index(a - run, na);
                        }
                        run = 0;
                    }
                }
            }
            const int ta0 = best_len ? wrap_index(best_start + best_len, na) : 0;
            const int trows = na - best_len;

            double su = 0.0, sr = 0.0, sraw = 0.0;
            int rmin = nr, rmax = -1;
            for (auto [a, r] : c.pixels) {
                su += wrap_index(a - ta0, na);
                sr += r;
                sraw += geom.raw_sample(a, r);
                rmin = std::min(rmin, r);
                rmax = std::max(rmax, r);
            }
            const double cu = su / c.area_px;
            c.centroid_r = sr / c.area_px;
            c.centroid_r_raw = sraw / c.area_px;
            c.centroid_a = std::fmod(ta0 + cu, static_cast<double>(na));

            auto [ulo, uhi] = centre_on(0, trows - 1, cu);
            if (uhi - ulo + 1 > na) {
                ulo = 0;
                uhi = na - 1;
            }
            auto [rlo, rhi] = centre_on(rmin, rmax, c.centroid_r);
            c.bbox = {wrap_index(ta0 + ulo, na), uhi - ulo + 1, rlo, rhi - rlo + 1};
            c.area_mm2 = polar_area_mm2(c.pixels, geom);
            out.push_back(std::move(c));
        }
    return out;
}

// ------------------------------------------------------------ patches

void ClassifierConfig::validate() const {
    if (patch_size < 8) throw ConfigError("classifier: patch_size must be >= 8");
    if (padding_px < 0) throw ConfigError("classifier: padding_px must be >= 0");
    if (filters.size() != 3) throw ConfigError("classifier: exactly three conv layers");
    for (int f : filters)
        if (f < 1) throw ConfigError("classifier: filter counts must be positive");
}

nlohmann::json to_json(const ClassifierConfig& c) {
    return {{"patch_size", c.patch_size}, {"padding_px", c.padding_px}, {"filters", c.filters}};
}

ClassifierConfig classifier_config_from_json(const nlohmann::json& j, ClassifierConfig c) {
    try {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "patch_size") c.patch_size = it->get<int>();
            else if (it.key() == "padding_px") c.padding_px = it->get<int>();
            else if (it.key() == "filters") c.filters = it->get<std::vector<int>>();
            else throw ConfigError("classifier: unknown key '" + it.key() + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("classifier config: ") + e.what());
    }
    c.validate();
    return c;
}

Image make_patch(const Image& img, const Candidate& c, const ClassifierConfig& cfg) {
    const auto& b = c.bbox;
    if (b.rows < 1 || b.cols < 1) throw ContractError("make_patch: degenerate bounding box");
    const int p = cfg.padding_px;
    Image crop(b.rows + 2 * p, b.cols + 2 * p);
    for (int i = 0; i < crop.rows(); ++i) {
        const int a = wrap_index(b.a0 - p + i, img.rows());
        for (int j = 0; j < crop.cols(); ++j) crop(i, j) = img(a, std::clamp(b.r0 - p + j, 0, img.cols() - 1));
    }
    return resize_bilinear(crop, cfg.patch_size, cfg.patch_size);
}

Image rotate_patch(const Image& patch, double degrees) {
    const int n = patch.rows();
    if (patch.cols() != n) throw ContractError("rotate_patch: patch must be square");
    const double t = degrees * std::numbers::pi / 180.0;
    auto snap = [](double v) { return std::abs(v - std::round(v)) < 1e-12 ? std::round(v) : v; };
    const double cs = snap(std::cos(t)), sn = snap(std::sin(t));
    const double c = (n - 1) / 2.0;
    Image out(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double di = i - c, dj = j - c;
            const double si = std::clamp(c + cs * di + sn * dj, 0.0, n - 1.0);
            const double sj = std::clamp(c - sn * di + cs * dj, 0.0, n - 1.0);
            const int i0 = std::min(static_cast<int>(std::floor(si)), n - 1), j0 = std::min(static_cast<int>(std::floor(sj)), n - 1);
            const int i1 = std::min(i0 + 1, n - 1), j1 = std::min(j0 + 1, n - 1);
            const double fi = si - i0, fj = sj - j0;
            double v = (1 - fi) * ((1 - fj) * patch(i0, j0) + fj * patch(i0, j1));
            if (fi > 0.0) v += fi * ((1 - fj) * patch(i1, j0) + fj * patch(i1, j1));
            out(i, j) = v;
        }
    return out;
}

std::vector<Image> rotate_patch_set(const Image& patch) {
    std::vector<Image> out;
    for (int deg = 30; deg <= 180; deg += 30) out.push_back(rotate_patch(patch, deg));
    return out;
}

std::vector<LabeledPatch> augment_training_set(std::span<const LabeledPatch> set) {
    std::vector<LabeledPatch> out;
    for (const auto& s : set) {
        out.push_back(s);
        if (s.label == 1)
            for (auto& r : rotate_patch_set(s.patch)) out.push_back({std::move(r), 1});
    }
    return out;
}

// ------------------------------------------------------------ classifier

CandidateClassifier::CandidateClassifier(ClassifierConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const auto& f = cfg_.filters;
    auto conv_out = [](int n) { return (n - 1) / 2 + 1; };
    int n = conv_out(cfg_.patch_size);
    if (n < 2) throw ConfigError("classifier: patch too small");
    n = conv_out(n / 2);
    if (n < 2) throw ConfigError("classifier: patch too small for the second pool");
    n = conv_out(n / 2);
    c1_ = nn::Conv2d("clf.conv1", 1, f[0], 3, 2, 1, 1, false);
    c2_ = nn::Conv2d("clf.conv2", f[0], f[1], 3, 2, 1, 1, false);
    c3_ = nn::Conv2d("clf.conv3", f[1], f[2], 3, 2, 1, 1, false);
    b1_ = nn::BatchNorm2d("clf.bn1", f[0]);
    b2_ = nn::BatchNorm2d("clf.bn2", f[1]);
    b3_ = nn::BatchNorm2d("clf.bn3", f[2]);
    fc_ = nn::Linear("clf.fc", f[2] * n * n, 2);
    Rng rng(derive_seed(seed, 0xc1a55001));
    c1_.init(rng);
    c2_.init(rng);
    c3_.init(rng);
    fc_.init(rng);
}

Tensor CandidateClassifier::forward(const Tensor& x, bool training) {
    require_shape(x, {x.n(), 1, cfg_.patch_size, cfg_.patch_size}, "CandidateClassifier::forward");
    Tensor h = p1_.forward(r1_.forward(b1_.forward(c1_.forward(x), training)));
    h = p2_.forward(r2_.forward(b2_.forward(c2_.forward(h), training)));
    h = r3_.forward(b3_.forward(c3_.forward(h), training));
    return fc_.forward(h);
}

Tensor CandidateClassifier::backward(const Tensor& d) {
    Tensor g = c3_.backward(b3_.backward(r3_.backward(fc_.backward(d))));
    g = c2_.backward(b2_.backward(r2_.backward(p2_.backward(g))));
    return c1_.backward(b1_.backward(r1_.backward(p1_.backward(g))));
}

std::vector<nn::Param*> CandidateClassifier::params() {
    std::vector<nn::Param*> p;
    for (auto* q : c1_.params()) p.push_back(q);
    for (auto* q : b1_.params()) p.push_back(q);
    for (auto* q : c2_.params()) p.push_back(q);
    for (auto* q : b2_.params()) p.push_back(q);
    for (auto* q : c3_.params()) p.push_back(q);
    for (auto* q : b3_.params()) p.push_back(q);
    for (auto* q : fc_.params()) p.push_back(q);
    return p;
}

std::vector<std::pair<std::string, Tensor*>> CandidateClassifier::state() {
    std::vector<std::pair<std::string, Tensor*>> s;
    for (auto* p : params()) s.emplace_back(p->name, &p->value);
    for (auto* b : {&b1_, &b2_, &b3_}) {
        s.emplace_back(b->name + ".running_mean", &b->running_mean);
        s.emplace_back(b->name + ".running_var", &b->running_var);
    }
    return s;
}

void CandidateClassifier::save(const std::filesystem::path& path) {
    nn::NamedTensors named;
    for (auto& [n, t] : state()) named.emplace_back(n, t);
    nn::save_checkpoint(path, {{"model", "candidate_classifier"}, {"config", to_json(cfg_)}}, named);
}

CandidateClassifier CandidateClassifier::load(const std::filesystem::path& path) {
    auto ck = nn::load_checkpoint(path);
    if (ck.config.value("model", "") != "candidate_classifier")
        throw FormatError("checkpoint " + path.string() + " is not a candidate classifier");
    CandidateClassifier m(classifier_config_from_json(ck.config.at("config")), 0);
    nn::restore_tensors(ck, m.state());
    return m;
}

namespace {

Tensor stack_patches(std::span<const LabeledPatch> set, std::span<const std::size_t> idx, int size,
                     std::vector<std::uint8_t>& labels) {
    Tensor x(static_cast<int>(idx.size()), 1, size, size);
    labels.resize(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& p = set[idx[k]];
        if (p.patch.rows() != size || p.patch.cols() != size) throw ContractError("classifier: patch size mismatch");
        std::copy(p.patch.data().begin(), p.patch.data().end(), x.plane(static_cast<int>(k), 0));
        labels[k] = static_cast<std::uint8_t>(p.label);
    }
    return x;
}

double eval_loss(CandidateClassifier& m, std::span<const LabeledPatch> set, int batch) {
    const std::vector<double> w{1.0, 1.0};
    std::vector<std::size_t> idx(set.size());
    std::iota(idx.begin(), idx.end(), 0);
    double total = 0.0;
    std::vector<std::uint8_t> labels;
    for (std::size_t b0 = 0; b0 < idx.size(); b0 += batch) {
        const std::size_t b1 = std::min(idx.size(), b0 + batch);
        auto x = stack_patches(set, std::span(idx).subspan(b0, b1 - b0), m.config().patch_size, labels);
        auto r = nn::weighted_softmax_ce(m.forward(x, false), labels, {}, w);
        total += r.loss * static_cast<double>(b1 - b0);
    }
    return total / static_cast<double>(set.size());
}

}  // namespace

ClassifierTrainResult train_classifier(CandidateClassifier& model, std::span<const LabeledPatch> train,
                                       std::span<const LabeledPatch> val, const ClassifierTrainOptions& opt) {
    opt.sched.validate();
    if (opt.batch_size < 2) throw ConfigError("train_classifier: batch_size must be >= 2");
    bool pos = false, neg = false;
    for (const auto& p : train) {
        if (p.label != 0 && p.label != 1) throw ContractError("train_classifier: labels must be 0/1");
        (p.label ? pos : neg) = true;
    }
    if (!pos || !neg) throw ConfigError("train_classifier: training set must contain both classes");

    const auto aug = augment_training_set(train);
    ClassifierTrainResult res;
    res.train_patches = aug.size();
    const std::vector<double> w{1.0, 1.0};
    auto params = model.params();
    auto state = model.state();
    nn::Adam adam(params, nn::AdamConfig{.l2_lambda = opt.sched.l2_lambda});
    std::vector<Tensor> best;
    double best_loss = std::numeric_limits<double>::infinity();
    std::vector<double> hist;
    std::vector<std::size_t> order(aug.size());
    std::vector<std::uint8_t> labels;
    for (int epoch = 0;; ++epoch) {
        const double lr = nn::lr_piecewise(epoch, opt.sched);
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(opt.seed, 0xc1f00000ULL + static_cast<std::uint64_t>(epoch)));
        rng.shuffle(order);
        // Batch boundaries; a trailing single sample joins the previous batch
        // because batch norm on 1x1 maps needs two samples.
        std::vector<std::size_t> starts;
        for (std::size_t b = 0; b < order.size(); b += opt.batch_size) starts.push_back(b);
        if (starts.size() > 1 && order.size() - starts.back() == 1) starts.pop_back();
        if (order.size() < 2) throw ConfigError("train_classifier: need at least two training patches");
        double sum = 0.0;
        for (std::size_t k = 0; k < starts.size(); ++k) {
            const std::size_t b0 = starts[k], b1 = k + 1 < starts.size() ? starts[k + 1] : order.size();
            auto x = stack_patches(aug, std::span(order).subspan(b0, b1 - b0), model.config().patch_size, labels);
            adam.zero_grad();
            auto r = nn::weighted_softmax_ce(model.forward(x, true), labels, {}, w);
            if (!std::isfinite(r.loss))
                throw TrainingError("classifier: non-finite loss at epoch " + std::to_string(epoch + 1));
            model.backward(r.grad);
            adam.step(lr);
            sum += r.loss * static_cast<double>(b1 - b0);
        }
        res.train_loss.push_back(sum / static_cast<double>(order.size()));
        const double vl = val.empty() ? res.train_loss.back() : eval_loss(model, val, opt.batch_size);
        res.val_loss.push_back(vl);
        if (vl < best_loss) {
            best_loss = vl;
            res.best_epoch = epoch + 1;
            best.clear();
            for (auto& [n, t] : state) best.push_back(*t);
        }
        hist.push_back(vl);
        if (nn::early_stop(hist, opt.sched)) break;
    }
    if (opt.sched.restore_best)
        for (std::size_t k = 0; k < state.size(); ++k) *state[k].second = best[k];
    return res;
}

std::vector<Verdict> classify_candidates(CandidateClassifier& model, std::span<const Image> patches, int batch_size) {
    std::vector<Verdict> out;
    const int s = model.config().patch_size;
    for (std::size_t b0 = 0; b0 < patches.size(); b0 += batch_size) {
        const std::size_t b1 = std::min(patches.size(), b0 + batch_size);
        Tensor x(static_cast<int>(b1 - b0), 1, s, s);
        for (std::size_t k = b0; k < b1; ++k) {
            if (patches[k].rows() != s || patches[k].cols() != s)
                throw ContractError("classify_candidates: patch size mismatch");
            std::copy(patches[k].data().begin(), patches[k].data().end(), x.plane(static_cast<int>(k - b0), 0));
        }
        auto p = nn::softmax_channels(model.forward(x, false));
        for (int n = 0; n < p.n(); ++n) out.push_back({p(n, 1, 0, 0) > p(n, 0, 0, 0) ? 1 : 0, p(n, 1, 0, 0)});
    }
    return out;
}

Mask refine_mask(const Mask& mask, std::span<const Candidate> candidates, std::span<const Verdict> verdicts) {
    if (candidates.size() != verdicts.size()) throw ContractError("refine_mask: one verdict per candidate required");
    Mask out = mask;
    for (std::size_t k = 0; k < candidates.size(); ++k)
        if (verdicts[k].label == 0)
            for (auto [a, r] : candidates[k].pixels) out(a, r) = 0;
    return out;
}

int overlap_label(const Candidate& c, const Mask& truth, double min_overlap) {
    int hit = 0;
    for (auto [a, r] : c.pixels) hit += truth(a, r) != 0;
    if (hit == 0) return 0;
    if (hit >= min_overlap * c.area_px) return 1;
    // Over-segmented blob: positive when it holds enough of a truth vessel it touches.
    const int rows = truth.rows(), cols = truth.cols();
    Mask inside(rows, cols, 0), seen(rows, cols, 0);
    for (auto [a, r] : c.pixels) inside(a, r) = 1;
    std::vector<std::pair<int, int>> stack;
    for (auto [a0, r0] : c.pixels) {
        if (!truth(a0, r0) || seen(a0, r0)) continue;
        int size = 0, held = 0;
        stack.assign(1, {a0, r0});
        seen(a0, r0) = 1;
        while (!stack.empty()) {
            auto [a, r] = stack.back();
            stack.pop_back();
            ++size;
            held += inside(a, r);
            for (int da = -1; da <= 1; ++da)
                for (int dr = -1; dr <= 1; ++dr) {
                    const int na = wrap_index(a + da, rows), nr = r + dr;
                    if (nr < 0 || nr >= cols || !truth(na, nr) || seen(na, nr)) continue;
                    seen(na, nr) = 1;
                    stack.push_back({na, nr});
                }
        }
        if (held >= min_overlap * size) return 1;
    }
    return 0;
}

void write_candidates_csv(const std::filesystem::path& path, std::span<const CandidateRow> rows) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << "frame,centroid_a,centroid_r,area_px,area_mm2,prob_vessel,label\n";
    char buf[256];
    for (const auto& r : rows) {
        const auto& c = *r.candidate;
        std::snprintf(buf, sizeof buf, "%d,%.4f,%.4f,%d,%.8f,%.6f,%d\n", r.frame, c.centroid_a, c.centroid_r_raw,
                      c.area_px, c.area_mm2, r.verdict.prob_vessel, r.verdict.label);
        f << buf;
    }
    if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace ivoct
