#include "meg/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "meg/png_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace meg {

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

int parse_int_field(const std::string& s, const char* field, int row) {
    try {
        size_t pos = 0;
        const int v = std::stoi(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing chars");
        return v;
    } catch (const std::exception&) {
        throw ParseError("manifest row " + std::to_string(row) + ": bad " +
                         std::string(field) + " value '" + s + "'");
    }
}

constexpr const char* kManifestHeader = "subject,clip_dir,onset,apex,offset,label";

} // namespace

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest " + path);
    DatasetManifest m;
    m.root = fs::path(path).parent_path().string();

    std::string line;
    if (!std::getline(in, line))
        throw ParseError("manifest " + path + " is empty");
    {
        auto fields = split_csv_line(line);
        auto expect = split_csv_line(kManifestHeader);
        if (fields != expect)
            throw ParseError("manifest " + path + ": header must be '" +
                             kManifestHeader + "'");
    }

    std::set<std::string> seen_dirs;
    int row_no = 1;
    while (std::getline(in, line)) {
        ++row_no;
        if (line.empty() || line == "\r") continue;
        auto f = split_csv_line(line);
        if (f.size() != 6)
            throw ParseError("manifest row " + std::to_string(row_no) + ": got " +
                             std::to_string(f.size()) + " fields, expected 6");
        ManifestRow r;
        r.subject_id = f[0];
        r.clip_dir = f[1];
        r.onset = parse_int_field(f[2], "onset", row_no);
        if (!f[3].empty()) r.apex = parse_int_field(f[3], "apex", row_no);
        r.offset = parse_int_field(f[4], "offset", row_no);
        r.label = f[5];
        if (r.subject_id.empty() || r.clip_dir.empty() || r.label.empty())
            throw ParseError("manifest row " + std::to_string(row_no) +
                             ": empty subject/clip_dir/label");
        if (r.onset < 1)
            throw ParseError("manifest row " + std::to_string(row_no) +
                             ": onset must be >= 1");
        if (r.offset < r.onset)
            throw ParseError("manifest row " + std::to_string(row_no) +
                             ": offset " + std::to_string(r.offset) +
                             " < onset " + std::to_string(r.onset));
        if (r.apex && (*r.apex < r.onset || *r.apex > r.offset))
            throw ParseError("manifest row " + std::to_string(row_no) +
                             ": apex " + std::to_string(*r.apex) +
                             " outside [onset,offset]");
        if (!seen_dirs.insert(r.clip_dir).second)
            std::fprintf(stderr, "warning: manifest row %d: duplicate clip_dir '%s'\n",
                         row_no, r.clip_dir.c_str());
        m.rows.push_back(std::move(r));
    }
    if (m.rows.empty()) throw ParseError("manifest " + path + " has no rows");

    std::set<std::string> labels;
    for (const auto& r : m.rows) labels.insert(r.label);
    m.class_names.assign(labels.begin(), labels.end());
    for (auto& r : m.rows)
        r.label_id = int(std::lower_bound(m.class_names.begin(), m.class_names.end(),
                                          r.label) -
                         m.class_names.begin());
    return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write manifest " + path);
    out << kManifestHeader << "\n";
    for (const auto& r : m.rows) {
        out << r.subject_id << ',' << r.clip_dir << ',' << r.onset << ','
            << (r.apex ? std::to_string(*r.apex) : std::string()) << ','
            << r.offset << ',' << r.label << "\n";
    }
}

// ---------------------------------------------------------------------------
// clip loading
// ---------------------------------------------------------------------------

namespace {

// Numeric sort key: the trailing digit run of the stem.
std::optional<long> frame_number(const fs::path& p) {
    const std::string stem = p.stem().string();
    int end = int(stem.size());
    while (end > 0 && !std::isdigit(static_cast<unsigned char>(stem[end - 1])))
        --end;
    int begin = end;
    while (begin > 0 && std::isdigit(static_cast<unsigned char>(stem[begin - 1])))
        --begin;
    if (begin == end) return std::nullopt;
    try {
        return std::stol(stem.substr(size_t(begin), size_t(end - begin)));
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

} // namespace

std::vector<ImageU8> read_clip_frames(const std::string& clip_dir, int onset,
                                      int offset) {
    if (!fs::is_directory(clip_dir))
        throw IoError("clip directory " + clip_dir + " does not exist");
    std::vector<std::pair<long, fs::path>> files;
    for (const auto& entry : fs::directory_iterator(clip_dir)) {
        if (!entry.is_regular_file()) continue;
        if (entry.path().extension() != ".png") continue;
        if (auto n = frame_number(entry.path()))
            files.emplace_back(*n, entry.path());
    }
    std::sort(files.begin(), files.end());
    if (onset < 1 || offset < onset)
        throw ShapeError("read_clip_frames: bad range [" + std::to_string(onset) +
                         "," + std::to_string(offset) + "]");
    if (int(files.size()) < offset)
        throw IoError("clip " + clip_dir + " has " + std::to_string(files.size()) +
                      " frames, offset " + std::to_string(offset) +
                      " is out of range");

    std::vector<ImageU8> frames;
    frames.reserve(size_t(offset - onset + 1));
    for (int i = onset; i <= offset; ++i) {
        ImageU8 im = read_png(files[size_t(i - 1)].second.string());
        if (!frames.empty() && !im.same_dims(frames.front()))
            throw IoError("frame " + files[size_t(i - 1)].second.string() +
                          " size differs from the rest of the clip");
        frames.push_back(std::move(im));
    }
    return frames;
}

FrameSequence load_clip(const std::string& clip_dir, int onset, int offset,
                        std::optional<int> apex) {
    std::vector<ImageU8> raw = read_clip_frames(clip_dir, onset, offset);
    FrameSequence seq;
    seq.frames.reserve(raw.size());
    for (const auto& im : raw) seq.frames.push_back(to_float(im));
    if (apex) {
        if (*apex < onset || *apex > offset)
            throw ApexError("apex " + std::to_string(*apex) +
                            " outside [onset,offset]");
        seq.apex_index = *apex - onset + 1;
    }
    seq.clip_id = fs::path(clip_dir).filename().string();
    return seq;
}

FrameSequence load_clip(const DatasetManifest& m, const ManifestRow& row) {
    fs::path dir(row.clip_dir);
    if (dir.is_relative()) dir = fs::path(m.root) / dir;
    FrameSequence seq = load_clip(dir.string(), row.onset, row.offset, row.apex);
    seq.subject_id = row.subject_id;
    seq.label = row.label_id;
    seq.clip_id = row.subject_id + "_" + fs::path(row.clip_dir).filename().string();
    return seq;
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

ImageU8 hist_equalize(const ImageU8& im) {
    ImageU8 out(im.h, im.w, im.c);
    const int64_t n = int64_t(im.h) * im.w;
    for (int ch = 0; ch < im.c; ++ch) {
        int64_t hist[256] = {0};
        for (int i = 0; i < im.h; ++i)
            for (int j = 0; j < im.w; ++j) ++hist[im.at(i, j, ch)];
        int first = 0;
        while (first < 256 && hist[first] == 0) ++first;
        if (first >= 255 || hist[first] == n) {
            // constant channel: equalization is undefined, keep as-is
            for (int i = 0; i < im.h; ++i)
                for (int j = 0; j < im.w; ++j) out.at(i, j, ch) = im.at(i, j, ch);
            continue;
        }
        // lut(v) = round((cdf(v) - cdf(first)) * 255 / (n - cdf(first)))
        uint8_t lut[256] = {0};
        const double scale = 255.0 / double(n - hist[first]);
        int64_t cum = 0;
        for (int v = first + 1; v < 256; ++v) {
            cum += hist[v];
            lut[v] = uint8_t(std::lround(double(cum) * scale));
        }
        for (int i = 0; i < im.h; ++i)
            for (int j = 0; j < im.w; ++j) out.at(i, j, ch) = lut[im.at(i, j, ch)];
    }
    return out;
}

ImageU8 resize_bilinear(const ImageU8& im, int out_h, int out_w) {
    if (im.h < 2 || im.w < 2)
        throw ShapeError("resize_bilinear: input must be at least 2x2");
    if (out_h < 1 || out_w < 1)
        throw ShapeError("resize_bilinear: bad output size");
    if (out_h == im.h && out_w == im.w) return im;

    ImageU8 out(out_h, out_w, im.c);
    const double sy = double(im.h) / out_h;
    const double sx = double(im.w) / out_w;
    for (int i = 0; i < out_h; ++i) {
        double fy = (i + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, double(im.h - 1));
        const int y0 = int(fy);
        const int y1 = std::min(y0 + 1, im.h - 1);
        const double wy = fy - y0;
        for (int j = 0; j < out_w; ++j) {
            double fx = (j + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, double(im.w - 1));
            const int x0 = int(fx);
            const int x1 = std::min(x0 + 1, im.w - 1);
            const double wx = fx - x0;
            for (int ch = 0; ch < im.c; ++ch) {
                const double v =
                    (1 - wy) * ((1 - wx) * im.at(y0, x0, ch) + wx * im.at(y0, x1, ch)) +
                    wy * ((1 - wx) * im.at(y1, x0, ch) + wx * im.at(y1, x1, ch));
                out.at(i, j, ch) = uint8_t(std::lround(std::clamp(v, 0.0, 255.0)));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// synthetic micro-motion generator
// ---------------------------------------------------------------------------

void SynthSpec::validate() const {
    if (num_subjects < 1) throw ConfigError("synth: num_subjects must be >= 1");
    if (clips_per_subject < 1)
        throw ConfigError("synth: clips_per_subject must be >= 1");
    if (num_classes < 2 || num_classes > 5)
        throw ConfigError("synth: num_classes must be in [2,5], got " +
                          std::to_string(num_classes));
    if (min_frames < 4 || max_frames < min_frames)
        throw ConfigError("synth: need 4 <= min_frames <= max_frames");
    if (image_size < 32) throw ConfigError("synth: image_size must be >= 32");
    if (motion_amplitude < 0.0) throw ConfigError("synth: negative amplitude");
    if (noise_sigma < 0.0) throw ConfigError("synth: negative noise sigma");
}

std::vector<double> motion_envelope(int total_frames, int apex) {
    if (total_frames < 1 || apex < 1 || apex > total_frames)
        throw ApexError("motion_envelope: apex " + std::to_string(apex) +
                        " outside [1," + std::to_string(total_frames) + "]");
    std::vector<double> env(size_t(total_frames), 0.0);
    for (int t = 1; t <= total_frames; ++t) {
        double e;
        if (t <= apex)
            e = apex == 1 ? 1.0 : double(t - 1) / double(apex - 1);
        else
            e = double(total_frames - t) / double(total_frames - apex);
        env[size_t(t - 1)] = e;
    }
    return env;
}

namespace {

// A motion archetype: gaussian displacement blobs pinned to face regions,
// one archetype per class. Coordinates are fractions of the image size.
struct MotionBlob {
    double cr, cc; // center
    double dr, dc; // unit-ish displacement direction
};

struct Archetype {
    const char* name;
    std::vector<MotionBlob> blobs;
};

const std::vector<Archetype>& archetypes() {
    static const std::vector<Archetype> kinds = {
        {"brow_raise",
         {{0.36, 0.35, -1.0, 0.0}, {0.36, 0.65, -1.0, 0.0}}},
        {"mouth_pull",
         {{0.72, 0.37, -0.6, -0.8}, {0.72, 0.63, -0.6, 0.8}}},
        {"nose_wrinkle",
         {{0.54, 0.44, -0.35, 1.0}, {0.54, 0.56, -0.35, -1.0}}},
        {"chin_press", {{0.84, 0.50, 1.0, 0.0}}},
        {"lid_tight",
         {{0.44, 0.35, 0.7, 0.0}, {0.44, 0.65, 0.7, 0.0}}},
    };
    return kinds;
}

constexpr double kBlobSigmaFrac = 0.055;
constexpr double kMaskThreshold = 0.2;

// Soft-edged primitives on a double-valued canvas in [0,255].
void paint_ellipse(std::vector<double>& img, int S, double ci, double cj,
                   double ai, double aj, double value, double softness = 6.0) {
    for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) {
            const double e = std::pow((i - ci) / ai, 2) + std::pow((j - cj) / aj, 2);
            const double f = std::clamp((1.0 - e) * softness, 0.0, 1.0);
            double& px = img[size_t(i) * S + j];
            px = px * (1.0 - f) + value * f;
        }
}

std::vector<double> make_base_face(int S, Rng& rng) {
    std::vector<double> img(size_t(S) * S, 0.0);
    for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j)
            img[size_t(i) * S + j] = 95.0 + 18.0 * double(i) / S;

    paint_ellipse(img, S, 0.52 * S, 0.50 * S, 0.40 * S, 0.33 * S, 178.0);
    // brows, eyes, nose, mouth
    paint_ellipse(img, S, 0.36 * S, 0.35 * S, 0.016 * S, 0.065 * S, 82.0);
    paint_ellipse(img, S, 0.36 * S, 0.65 * S, 0.016 * S, 0.065 * S, 82.0);
    paint_ellipse(img, S, 0.44 * S, 0.35 * S, 0.026 * S, 0.048 * S, 58.0);
    paint_ellipse(img, S, 0.44 * S, 0.65 * S, 0.026 * S, 0.048 * S, 58.0);
    paint_ellipse(img, S, 0.56 * S, 0.50 * S, 0.10 * S, 0.018 * S, 132.0);
    paint_ellipse(img, S, 0.72 * S, 0.50 * S, 0.020 * S, 0.11 * S, 72.0);

    // subject-specific smooth texture
    for (int blob = 0; blob < 8; ++blob) {
        const double ci = rng.uniform(0.2, 0.85) * S;
        const double cj = rng.uniform(0.2, 0.8) * S;
        const double sigma = rng.uniform(double(S) / 18.0, double(S) / 7.0);
        const double amp = rng.uniform(-12.0, 12.0);
        const double inv = 1.0 / (2.0 * sigma * sigma);
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) {
                const double d2 = (i - ci) * (i - ci) + (j - cj) * (j - cj);
                img[size_t(i) * S + j] += amp * std::exp(-d2 * inv);
            }
    }
    for (auto& v : img) v = std::clamp(v, 0.0, 255.0);
    return img;
}

double bilinear_sample(const std::vector<double>& img, int S, double fi,
                       double fj) {
    fi = std::clamp(fi, 0.0, double(S - 1));
    fj = std::clamp(fj, 0.0, double(S - 1));
    const int i0 = int(fi), j0 = int(fj);
    const int i1 = std::min(i0 + 1, S - 1), j1 = std::min(j0 + 1, S - 1);
    const double wi = fi - i0, wj = fj - j0;
    return (1 - wi) * ((1 - wj) * img[size_t(i0) * S + j0] +
                       wj * img[size_t(i0) * S + j1]) +
           wi * ((1 - wj) * img[size_t(i1) * S + j0] +
                 wj * img[size_t(i1) * S + j1]);
}

} // namespace

std::vector<std::string> synth_class_names(int num_classes) {
    std::vector<std::string> names;
    for (int k = 0; k < num_classes; ++k)
        names.push_back(archetypes()[size_t(k)].name);
    return names;
}

SynthResult generate_synthetic(const SynthSpec& spec, const std::string& out_root) {
    spec.validate();
    const int S = spec.image_size;
    fs::create_directories(out_root);

    const auto& kinds = archetypes();
    SynthResult result;
    result.class_names = synth_class_names(spec.num_classes);

    // per-class displacement fields and masks
    fs::create_directories(fs::path(out_root) / "masks");
    std::vector<std::vector<double>> field_r(size_t(spec.num_classes)),
        field_c(size_t(spec.num_classes));
    const double sigma = kBlobSigmaFrac * S;
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int k = 0; k < spec.num_classes; ++k) {
        field_r[size_t(k)].assign(size_t(S) * S, 0.0);
        field_c[size_t(k)].assign(size_t(S) * S, 0.0);
        ImageU8 mask(S, S, 1);
        for (int i = 0; i < S; ++i)
            for (int j = 0; j < S; ++j) {
                double mag = 0.0, dr = 0.0, dc = 0.0;
                for (const MotionBlob& blob : kinds[size_t(k)].blobs) {
                    const double d2 = std::pow(i - blob.cr * S, 2) +
                                      std::pow(j - blob.cc * S, 2);
                    const double g = std::exp(-d2 * inv);
                    mag += g;
                    dr += g * blob.dr;
                    dc += g * blob.dc;
                }
                field_r[size_t(k)][size_t(i) * S + j] = dr;
                field_c[size_t(k)][size_t(i) * S + j] = dc;
                mask.at(i, j, 0) = mag > kMaskThreshold ? 255 : 0;
            }
        write_png(mask, (fs::path(out_root) / "masks" /
                         (result.class_names[size_t(k)] + ".png"))
                            .string());
    }

    DatasetManifest manifest;
    manifest.root = out_root;
    manifest.class_names = result.class_names;

    for (int s = 0; s < spec.num_subjects; ++s) {
        char subj[8];
        std::snprintf(subj, sizeof subj, "s%02d", s + 1);
        Rng subj_rng(Rng::derive(spec.seed, {1, uint64_t(s)}));
        const std::vector<double> base = make_base_face(S, subj_rng);
        double tint[3];
        for (double& t : tint) t = subj_rng.uniform(0.97, 1.03);

        for (int c = 0; c < spec.clips_per_subject; ++c) {
            const int klass = c % spec.num_classes;
            Rng clip_rng(Rng::derive(spec.seed, {2, uint64_t(s), uint64_t(c)}));
            const int T =
                clip_rng.uniform_int(spec.min_frames, spec.max_frames);
            const int lo = std::max(1, (4 * T + 9) / 10); // ~0.4T
            const int hi = std::max(lo, (6 * T) / 10);    // ~0.6T
            const int apex = clip_rng.uniform_int(lo, hi);
            const double amp =
                spec.motion_amplitude * clip_rng.uniform(0.85, 1.15);
            const std::vector<double> env = motion_envelope(T, apex);

            const std::string clip_name = "c" + std::to_string(c);
            const fs::path clip_dir = fs::path(out_root) / subj / clip_name;
            fs::create_directories(clip_dir);

            const auto& fr = field_r[size_t(klass)];
            const auto& fc_ = field_c[size_t(klass)];
            for (int t = 1; t <= T; ++t) {
                Rng noise_rng(Rng::derive(
                    spec.seed, {3, uint64_t(s), uint64_t(c), uint64_t(t)}));
                const double e = amp * env[size_t(t - 1)];
                ImageU8 frame(S, S, 3);
                for (int i = 0; i < S; ++i)
                    for (int j = 0; j < S; ++j) {
                        const size_t p = size_t(i) * S + j;
                        const double v =
                            e == 0.0 ? base[p]
                                     : bilinear_sample(base, S, i - e * fr[p],
                                                       j - e * fc_[p]);
                        for (int ch = 0; ch < 3; ++ch) {
                            const double noisy =
                                v * tint[ch] +
                                (spec.noise_sigma > 0.0
                                     ? noise_rng.normal(0.0, spec.noise_sigma)
                                     : 0.0);
                            frame.at(i, j, ch) =
                                uint8_t(std::lround(std::clamp(noisy, 0.0, 255.0)));
                        }
                    }
                char fname[16];
                std::snprintf(fname, sizeof fname, "%06d.png", t);
                write_png(frame, (clip_dir / fname).string());
            }

            ManifestRow row;
            row.subject_id = subj;
            row.clip_dir = std::string(subj) + "/" + clip_name;
            row.onset = 1;
            row.apex = apex;
            row.offset = T;
            row.label = result.class_names[size_t(klass)];
            row.label_id = klass;
            manifest.rows.push_back(std::move(row));
            ++result.clip_count;
        }
    }

    result.manifest_path = (fs::path(out_root) / "manifest.csv").string();
    save_manifest(manifest, result.manifest_path);

    DatasetManifest hidden = manifest;
    for (auto& r : hidden.rows) r.apex.reset();
    result.manifest_noapex_path =
        (fs::path(out_root) / "manifest_noapex.csv").string();
    save_manifest(hidden, result.manifest_noapex_path);

    json meta;
    meta["num_subjects"] = spec.num_subjects;
    meta["clips_per_subject"] = spec.clips_per_subject;
    meta["num_classes"] = spec.num_classes;
    meta["min_frames"] = spec.min_frames;
    meta["max_frames"] = spec.max_frames;
    meta["image_size"] = spec.image_size;
    meta["motion_amplitude"] = spec.motion_amplitude;
    meta["noise_sigma"] = spec.noise_sigma;
    meta["seed"] = spec.seed;
    meta["class_names"] = result.class_names;
    meta["masks_dir"] = "masks";
    result.meta_path = (fs::path(out_root) / "synth_meta.json").string();
    std::ofstream mf(result.meta_path);
    if (!mf) throw IoError("cannot write " + result.meta_path);
    mf << meta.dump(2) << "\n";

    return result;
}

} // namespace meg
