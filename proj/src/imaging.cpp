#include "ivoct/imaging.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

namespace ivoct {

namespace fs = std::filesystem;
using nlohmann::json;

void PullbackMeta::validate() const {
    if (alines_per_frame < 8) throw ConfigError("alines_per_frame must be >= 8");
    if (samples_per_aline < 1) throw ConfigError("samples_per_aline must be positive");
    if (!(r_pixel_um > 0.0) || !std::isfinite(r_pixel_um)) throw ConfigError("r_pixel_um must be > 0");
    if (!(frame_spacing_mm > 0.0) || !std::isfinite(frame_spacing_mm))
        throw ConfigError("frame_spacing_mm must be > 0");
    if (catheter_offset_px < 0 || catheter_offset_px >= samples_per_aline)
        throw ConfigError("catheter_offset_px must lie in [0, samples_per_aline)");
    if (pullback_speed_mm_s && frame_rate_fps) {
        if (!(*pullback_speed_mm_s > 0.0) || !(*frame_rate_fps > 0.0))
            throw ConfigError("pullback speed and frame rate must be > 0");
        double expected = *pullback_speed_mm_s / *frame_rate_fps;
        if (std::abs(expected - frame_spacing_mm) > 1e-9 * std::max(1.0, expected))
            throw ConfigError("frame_spacing_mm disagrees with pullback_speed_mm_s / frame_rate_fps");
    }
}

void validate_frame(const PolarFrame& frame, const PullbackMeta& meta) {
    if (frame.rows() != meta.alines_per_frame || frame.cols() != meta.samples_per_aline) {
        std::ostringstream os;
        os << "frame is " << frame.rows() << "x" << frame.cols() << ", expected "
           << meta.alines_per_frame << "x" << meta.samples_per_aline;
        throw CorruptInputError(os.str());
    }
    for (double v : frame.data()) {
        if (!std::isfinite(v)) throw CorruptInputError("frame contains a non-finite intensity");
        if (v < 0.0 || v > 1.0) throw CorruptInputError("frame intensity outside [0,1]");
    }
}

void validate_mask(const FrameMask& mask, const PolarFrame& frame) {
    if (!mask.same_shape(frame)) throw CorruptInputError("mask shape differs from its frame");
    for (auto v : mask.data())
        if (v > 1) throw CorruptInputError("mask value outside {0,1}");
}

std::uint16_t quantize16(double v) noexcept {
    double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint16_t>(std::lround(c * 65535.0));
}

double dequantize16(std::uint16_t q) noexcept { return static_cast<double>(q) / 65535.0; }

PolarFrame quantized(const PolarFrame& frame) {
    PolarFrame out(frame.rows(), frame.cols());
    std::transform(frame.data().begin(), frame.data().end(), out.data().begin(),
                   [](double v) { return dequantize16(quantize16(v)); });
    return out;
}

namespace {

std::ofstream open_out(const fs::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    return os;
}

void finish(std::ofstream& os, const fs::path& path) {
    os.flush();
    if (!os) throw IoError("write failed: " + path.string());
}

struct PgmHeader {
    int width = 0;
    int height = 0;
    int maxval = 0;
};

// Reads the P5 header, leaving the stream at the first raster byte.
PgmHeader read_pgm_header(std::istream& is, const fs::path& path) {
    auto next_token = [&]() {
        std::string tok;
        char ch;
        while (is.get(ch)) {
            if (ch == '#') {
                std::string discard;
                std::getline(is, discard);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(ch))) {
                if (!tok.empty()) break;
                continue;
            }
            tok.push_back(ch);
        }
        return tok;
    };
    if (next_token() != "P5") throw FormatError("not a binary PGM (P5): " + path.string());
    PgmHeader h;
    try {
        h.width = std::stoi(next_token());
        h.height = std::stoi(next_token());
        h.maxval = std::stoi(next_token());
    } catch (const std::exception&) {
        throw FormatError("malformed PGM header: " + path.string());
    }
    if (h.width <= 0 || h.height <= 0 || h.maxval <= 0 || h.maxval > 65535)
        throw FormatError("invalid PGM header values: " + path.string());
    return h;
}

}  // namespace

void write_pgm16(const fs::path& path, const Image& img) {
    auto os = open_out(path);
    os << "P5\n" << img.cols() << " " << img.rows() << "\n65535\n";
    std::vector<char> buf(img.size() * 2);
    for (std::size_t i = 0; i < img.size(); ++i) {
        std::uint16_t q = quantize16(img.data()[i]);
        buf[2 * i] = static_cast<char>(q >> 8);
        buf[2 * i + 1] = static_cast<char>(q & 0xff);
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    finish(os, path);
}

Image read_pgm16(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    auto h = read_pgm_header(is, path);
    if (h.maxval != 65535) throw FormatError("expected a 16-bit PGM (maxval 65535): " + path.string());
    std::vector<unsigned char> buf(static_cast<std::size_t>(h.width) * h.height * 2);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() != static_cast<std::streamsize>(buf.size()))
        throw CorruptInputError("truncated PGM raster: " + path.string());
    Image img(h.height, h.width);
    for (std::size_t i = 0; i < img.size(); ++i)
        img.data()[i] = dequantize16(static_cast<std::uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1]));
    return img;
}

void write_pgm8(const fs::path& path, const Mask& mask) {
    auto os = open_out(path);
    os << "P5\n" << mask.cols() << " " << mask.rows() << "\n255\n";
    os.write(reinterpret_cast<const char*>(mask.data().data()), static_cast<std::streamsize>(mask.size()));
    finish(os, path);
}

Mask read_pgm8(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path.string());
    auto h = read_pgm_header(is, path);
    if (h.maxval > 255) throw FormatError("expected an 8-bit PGM: " + path.string());
    Mask m(h.height, h.width);
    is.read(reinterpret_cast<char*>(m.data().data()), static_cast<std::streamsize>(m.size()));
    if (is.gcount() != static_cast<std::streamsize>(m.size()))
        throw CorruptInputError("truncated PGM raster: " + path.string());
    return m;
}

namespace {

std::string indexed_name(const char* prefix, int i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%05d.pgm", prefix, i);
    return buf;
}

std::vector<fs::path> list_sorted(const fs::path& dir, const std::string& prefix) {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        auto name = e.path().filename().string();
        if (name.size() > prefix.size() + 4 && name.starts_with(prefix) && name.ends_with(".pgm"))
            out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

template <typename T>
T required(const json& j, const char* key, const fs::path& path) {
    if (!j.contains(key)) throw FormatError(std::string("meta.json missing key '") + key + "': " + path.string());
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw FormatError(std::string("meta.json key '") + key + "' has the wrong type: " + path.string());
    }
}

}  // namespace

json to_json(const PullbackMeta& m) {
    json j;
    j["alines_per_frame"] = m.alines_per_frame;
    j["samples_per_aline"] = m.samples_per_aline;
    j["r_pixel_um"] = m.r_pixel_um;
    j["frame_spacing_mm"] = m.frame_spacing_mm;
    j["catheter_offset_px"] = m.catheter_offset_px;
    if (m.pullback_speed_mm_s) j["pullback_speed_mm_s"] = *m.pullback_speed_mm_s;
    if (m.frame_rate_fps) j["frame_rate_fps"] = *m.frame_rate_fps;
    return j;
}

PullbackMeta meta_from_json(const json& j, const fs::path& source) {
    PullbackMeta m;
    m.alines_per_frame = required<int>(j, "alines_per_frame", source);
    m.samples_per_aline = required<int>(j, "samples_per_aline", source);
    m.r_pixel_um = required<double>(j, "r_pixel_um", source);
    m.frame_spacing_mm = required<double>(j, "frame_spacing_mm", source);
    m.catheter_offset_px = required<int>(j, "catheter_offset_px", source);
    try {
        if (j.contains("pullback_speed_mm_s")) m.pullback_speed_mm_s = j.at("pullback_speed_mm_s").get<double>();
        if (j.contains("frame_rate_fps")) m.frame_rate_fps = j.at("frame_rate_fps").get<double>();
        m.validate();
    } catch (const json::exception& e) {
        throw FormatError(source.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(source.string() + ": " + e.what());
    }
    return m;
}

LoadedPullback load_pullback(const fs::path& dir) {
    auto meta_path = dir / "meta.json";
    if (!fs::is_regular_file(meta_path)) throw FormatError("missing sidecar meta.json in " + dir.string());
    json j;
    {
        std::ifstream is(meta_path);
        try {
            j = json::parse(is);
        } catch (const json::exception& e) {
            throw FormatError("cannot parse " + meta_path.string() + ": " + e.what());
        }
    }
    LoadedPullback out;
    auto& p = out.pullback;
    p.meta = meta_from_json(j, meta_path);
    const auto& m = p.meta;
    p.segment_id = required<std::string>(j, "segment_id", meta_path);

    for (const auto& f : list_sorted(dir, "frame_")) {
        Image img = read_pgm16(f);
        try {
            validate_frame(img, m);
        } catch (const CorruptInputError& e) {
            throw CorruptInputError(f.string() + ": " + e.what());
        }
        p.frames.push_back(std::move(img));
    }
    auto mask_files = list_sorted(dir, "mask_");
    if (!mask_files.empty()) {
        if (mask_files.size() != p.frames.size())
            throw CorruptInputError("mask count differs from frame count in " + dir.string());
        for (std::size_t i = 0; i < mask_files.size(); ++i) {
            Mask mk = read_pgm8(mask_files[i]);
            try {
                validate_mask(mk, p.frames[i]);
            } catch (const CorruptInputError& e) {
                throw CorruptInputError(mask_files[i].string() + ": " + e.what());
            }
            out.masks.push_back(std::move(mk));
        }
    }
    return out;
}

void save_pullback(const PolarPullback& p, const fs::path& dir, const std::vector<FrameMask>& masks) {
    p.meta.validate();
    if (!masks.empty() && masks.size() != p.frames.size())
        throw ContractError("mask list must be empty or match the frame count");
    for (std::size_t i = 0; i < p.frames.size(); ++i) {
        validate_frame(p.frames[i], p.meta);
        if (!masks.empty()) validate_mask(masks[i], p.frames[i]);
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());

    json j = to_json(p.meta);
    j["segment_id"] = p.segment_id;
    {
        auto path = dir / "meta.json";
        auto os = open_out(path);
        os << j.dump(2) << "\n";
        finish(os, path);
    }
    for (std::size_t i = 0; i < p.frames.size(); ++i) {
        write_pgm16(dir / indexed_name("frame", static_cast<int>(i)), p.frames[i]);
        if (!masks.empty()) write_pgm8(dir / indexed_name("mask", static_cast<int>(i)), masks[i]);
    }
}

double polar_bilinear(const PolarFrame& f, double aline, double sample) noexcept {
    const int rows = f.rows();
    const int cols = f.cols();
    double s = std::clamp(sample, 0.0, static_cast<double>(cols - 1));
    int s0 = static_cast<int>(std::floor(s));
    int s1 = std::min(s0 + 1, cols - 1);
    double ws = s - s0;
    double a_floor = std::floor(aline);
    double wa = aline - a_floor;
    int a0 = wrap_index(static_cast<int>(a_floor), rows);
    int a1 = wrap_index(a0 + 1, rows);
    double v0 = f(a0, s0) * (1.0 - ws) + f(a0, s1) * ws;
    double v1 = f(a1, s0) * (1.0 - ws) + f(a1, s1) * ws;
    return v0 * (1.0 - wa) + v1 * wa;
}

CartesianImage scan_convert(const PolarFrame& frame, const PullbackMeta& meta, int side_px,
                            double angle_offset_rad) {
    if (side_px < 2) throw ContractError("scan_convert: side_px must be >= 2");
    if (frame.rows() != meta.alines_per_frame || frame.cols() != meta.samples_per_aline)
        throw ContractError("scan_convert: frame does not match metadata");
    const double samples = meta.samples_per_aline;
    const double half = 0.5 * (side_px - 1);
    // Disk radius equals the sampled depth; it touches the image border.
    const double samples_per_px = samples / half;
    const double two_pi = 2.0 * std::numbers::pi;
    CartesianImage out;
    out.pixels = Image(side_px, side_px, 0.0);
    out.mm_per_pixel = samples_per_px * meta.r_pixel_mm();
    for (int i = 0; i < side_px; ++i) {
        for (int j = 0; j < side_px; ++j) {
            double x = j - half;
            double y = i - half;
            double rho = std::hypot(x, y) * samples_per_px;  // radius in sample units
            if (rho > samples) continue;
            double theta = std::atan2(y, x) + angle_offset_rad;
            theta -= two_pi * std::floor(theta / two_pi);
            double a = theta / two_pi * meta.alines_per_frame;
            out.pixels(i, j) = polar_bilinear(frame, a, rho - 0.5);
        }
    }
    return out;
}

}  // namespace ivoct

namespace ivoct {

double interval_iou(const AngularInterval& a, const AngularInterval& b, int alines) {
    int inter = 0;
    int uni = 0;
    for (int i = 0; i < alines; ++i) {
        bool ia = a.contains(i, alines);
        bool ib = b.contains(i, alines);
        inter += ia && ib;
        uni += ia || ib;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

BilinearTaps bilinear_taps(int in_size, int out_size) {
    if (in_size < 1 || out_size < 1) throw ContractError("bilinear_taps: sizes must be positive");
    BilinearTaps t;
    t.lo.resize(out_size);
    t.hi.resize(out_size);
    t.frac.resize(out_size);
    const double scale = static_cast<double>(in_size) / out_size;
    for (int i = 0; i < out_size; ++i) {
        double src = std::max(0.0, (i + 0.5) * scale - 0.5);
        int lo = static_cast<int>(std::floor(src));
        if (lo >= in_size - 1) {
            t.lo[i] = t.hi[i] = in_size - 1;
            t.frac[i] = 0.0;
        } else {
            t.lo[i] = lo;
            t.hi[i] = lo + 1;
            t.frac[i] = src - lo;
        }
    }
    return t;
}

Image resize_bilinear(const Image& img, int rows, int cols) {
    if (img.rows() == rows && img.cols() == cols) return img;
    auto ty = bilinear_taps(img.rows(), rows);
    auto tx = bilinear_taps(img.cols(), cols);
    Image out(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
            const double fx = tx.frac[j], fy = ty.frac[i];
            const double top = (1 - fx) * img(ty.lo[i], tx.lo[j]) + fx * img(ty.lo[i], tx.hi[j]);
            const double bot = (1 - fx) * img(ty.hi[i], tx.lo[j]) + fx * img(ty.hi[i], tx.hi[j]);
            out(i, j) = (1 - fy) * top + fy * bot;
        }
    return out;
}

Mask resize_nearest(const Mask& m, int rows, int cols) {
    if (m.rows() == rows && m.cols() == cols) return m;
    if (rows < 1 || cols < 1) throw ContractError("resize_nearest: sizes must be positive");
    Mask out(rows, cols);
    for (int i = 0; i < rows; ++i) {
        int si = std::min(m.rows() - 1, static_cast<int>((i + 0.5) * m.rows() / rows));
        for (int j = 0; j < cols; ++j) {
            int sj = std::min(m.cols() - 1, static_cast<int>((j + 0.5) * m.cols() / cols));
            out(i, j) = m(si, sj);
        }
    }
    return out;
}

}  // namespace ivoct
