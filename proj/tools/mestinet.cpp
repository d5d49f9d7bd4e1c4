// mestinet — encode micro-motion clips into spatio-temporal images and
// train/evaluate the gradient-attention classifier on them.
//
// Exit codes: 0 success, 1 partial data failure, 2 usage/config error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "meg/data.hpp"
#include "meg/model.hpp"
#include "meg/png_io.hpp"
#include "meg/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace meg;

namespace {

// --config file values override built-in defaults; explicit flags override
// both. The file is applied by pre-filling bound variables before parsing.
json load_config_file(int argc, char** argv) {
    for (int i = 1; i < argc - 1; ++i)
        if (std::string(argv[i]) == "--config") {
            std::ifstream in(argv[i + 1]);
            if (!in)
                throw ConfigError("cannot open config file " +
                                  std::string(argv[i + 1]));
            json j = json::parse(in, nullptr, false);
            if (j.is_discarded())
                throw ConfigError("config file " + std::string(argv[i + 1]) +
                                  " is not valid JSON");
            return j;
        }
    return json::object();
}

template <typename T>
void jset(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

Tensor view_to_tensor(const ImageU8& view) {
    Tensor x({1, view.c, view.h, view.w});
    for (int ch = 0; ch < view.c; ++ch)
        for (int i = 0; i < view.h; ++i)
            for (int j = 0; j < view.w; ++j)
                x.at(0, ch, i, j) = view.at(i, j, ch) / 255.0;
    return x;
}

void write_effective_config(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (out) out << j.dump(2) << "\n";
}

void dump_raw(const MestiImage& img, const fs::path& base) {
    std::ofstream bin(base.string() + ".raw", std::ios::binary);
    if (!bin) throw IoError("cannot write " + base.string() + ".raw");
    std::vector<float> buf(img.raw.data.size(), 0.0f);
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = float(img.raw.data[i]);
    bin.write(reinterpret_cast<const char*>(buf.data()),
              std::streamsize(buf.size() * sizeof(float)));
    json side{{"H", img.raw.h}, {"W", img.raw.w},     {"C", img.raw.c},
              {"T", img.meta.t}, {"a", img.meta.a}};
    std::ofstream sj(base.string() + ".raw.json");
    sj << side.dump(2) << "\n";
}

std::vector<int> parse_int_list(const std::string& csv, const char* what) {
    std::vector<int> out;
    std::string cur;
    for (char ch : csv + ",") {
        if (ch == ',') {
            if (cur.empty()) continue;
            try {
                out.push_back(std::stoi(cur));
            } catch (const std::exception&) {
                throw ConfigError(std::string("bad ") + what + " list entry '" +
                                  cur + "'");
            }
            cur.clear();
        } else {
            cur += ch;
        }
    }
    return out;
}

// Default channel/stride plan for a given block count (64,128,256,512,...).
void default_block_plan(int blocks, std::vector<int>& channels,
                        std::vector<int>& strides) {
    channels.clear();
    strides.clear();
    int c = 64;
    for (int i = 0; i < blocks; ++i) {
        channels.push_back(c);
        strides.push_back(i == 0 ? 1 : 2);
        if (c < 512) c *= 2;
    }
}

// ---------------------------------------------------------------------------
// encode
// ---------------------------------------------------------------------------

struct EncodeArgs {
    std::string manifest, clip_dir, out_dir;
    std::string encoder = "mesti";
    std::string apex_fallback = "middle";
    bool dump_raw_maps = false;
    bool hist_eq = false;
};

int cmd_encode(const EncodeArgs& a) {
    if (a.encoder != "mesti" && a.encoder != "dynamic")
        throw ConfigError("--encoder must be mesti or dynamic");
    if (a.apex_fallback != "middle")
        throw ConfigError("--apex-fallback supports only 'middle'");
    if (a.manifest.empty() == a.clip_dir.empty())
        throw ConfigError("encode needs exactly one of --manifest / --clip-dir");
    fs::create_directories(a.out_dir);

    struct Job {
        std::string name;
        std::function<FrameSequence()> load;
    };
    std::vector<Job> jobs;
    if (!a.manifest.empty()) {
        DatasetManifest m = load_manifest(a.manifest);
        for (const ManifestRow& row : m.rows) {
            const std::string name =
                row.subject_id + "_" + fs::path(row.clip_dir).filename().string();
            jobs.push_back(Job{name, [m, row]() { return load_clip(m, row); }});
        }
    } else {
        const std::string name = fs::path(a.clip_dir).filename().string();
        const std::string dir = a.clip_dir;
        jobs.push_back(Job{name, [dir, name]() {
            int count = 0;
            if (fs::is_directory(dir))
                for (const auto& e : fs::directory_iterator(dir))
                    if (e.path().extension() == ".png") ++count;
            if (count == 0) throw IoError("no PNG frames in " + dir);
            FrameSequence seq = load_clip(dir, 1, count);
            seq.clip_id = name;
            return seq;
        }});
    }

    int failures = 0;
    for (const Job& job : jobs) {
        try {
            FrameSequence seq = job.load();
            if (a.hist_eq)
                for (ImageF& f : seq.frames) {
                    ImageU8 u(f.h, f.w, f.c);
                    for (size_t i = 0; i < u.data.size(); ++i)
                        u.data[i] = uint8_t(std::lround(
                            std::clamp(f.data[i] * 255.0, 0.0, 255.0)));
                    f = to_float(hist_equalize(u));
                }
            const MestiImage img = a.encoder == "mesti"
                                       ? encode_mesti(seq)
                                       : encode_dynamic_image(seq);
            const fs::path base =
                fs::path(a.out_dir) / (job.name + "_" + a.encoder);
            write_png(img.view, base.string() + ".png");
            if (a.dump_raw_maps) dump_raw(img, base);
        } catch (const std::exception& e) {
            std::cerr << "encode: clip '" << job.name << "' failed: " << e.what()
                      << "\n";
            ++failures;
        }
    }
    write_effective_config(fs::path(a.out_dir) / "encode_run.json",
                           json{{"encoder", a.encoder},
                                {"apex_fallback", a.apex_fallback},
                                {"hist_eq", a.hist_eq},
                                {"raw", a.dump_raw_maps},
                                {"clips", jobs.size()},
                                {"failures", failures}});
    if (jobs.empty() || failures == int(jobs.size())) return 1;
    return failures > 0 ? 1 : 0;
}

// ---------------------------------------------------------------------------
// attention-map
// ---------------------------------------------------------------------------

struct AttnArgs {
    std::string image, checkpoint, out = "attention.png";
    int size = 224;
    uint64_t seed = 1;
};

int cmd_attention_map(const AttnArgs& a) {
    ImageU8 input = read_png(a.image);

    MegaNetParams params;
    if (!a.checkpoint.empty()) {
        params = load_checkpoint(a.checkpoint);
        if (!params.gab)
            throw CheckpointError(
                "checkpoint was trained without the gradient attention block");
    } else {
        MegaNetConfig cfg;
        cfg.input_size = std::max(32, a.size);
        params = build_meganet(cfg, a.seed);
    }
    const int S = params.config.input_size;

    ImageU8 view = input;
    if (view.c == 1) {
        ImageU8 rgb(view.h, view.w, 3);
        for (int i = 0; i < view.h; ++i)
            for (int j = 0; j < view.w; ++j)
                for (int ch = 0; ch < 3; ++ch) rgb.at(i, j, ch) = view.at(i, j, 0);
        view = rgb;
    }
    view = resize_bilinear(view, S, S);

    Tensor x = view_to_tensor(view);
    Tape t;
    GabOut gab = gab_forward(t, t.input(x), *params.gab);
    const Tensor& attn = t.val(gab.attn);

    ImageF map(S, S, 1);
    for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) map.at(i, j, 0) = attn.at(0, 0, i, j);
    write_png(normalize_view(map), a.out);
    write_effective_config(fs::path(a.out).string() + ".json",
                           json{{"image", a.image},
                                {"checkpoint", a.checkpoint},
                                {"size", S},
                                {"seed", a.seed}});
    return 0;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string spec_file, out_dir;
    uint64_t seed = 0;
    bool seed_set = false;
};

int cmd_synth(const SynthArgs& a) {
    SynthSpec spec;
    if (!a.spec_file.empty()) {
        std::ifstream in(a.spec_file);
        if (!in) throw ConfigError("cannot open spec " + a.spec_file);
        json j = json::parse(in, nullptr, false);
        if (j.is_discarded())
            throw ConfigError("spec " + a.spec_file + " is not valid JSON");
        try {
            jset(j, "num_subjects", spec.num_subjects);
            jset(j, "clips_per_subject", spec.clips_per_subject);
            jset(j, "num_classes", spec.num_classes);
            jset(j, "min_frames", spec.min_frames);
            jset(j, "max_frames", spec.max_frames);
            jset(j, "image_size", spec.image_size);
            jset(j, "motion_amplitude", spec.motion_amplitude);
            jset(j, "noise_sigma", spec.noise_sigma);
            jset(j, "seed", spec.seed);
        } catch (const json::exception& e) {
            throw ConfigError("spec " + a.spec_file + ": " + e.what());
        }
    }
    if (a.seed_set) spec.seed = a.seed;
    SynthResult r = generate_synthetic(spec, a.out_dir);
    std::cout << "wrote " << r.clip_count << " clips under " << a.out_dir
              << "\nmanifest: " << r.manifest_path
              << "\nmanifest (apex hidden): " << r.manifest_noapex_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string manifest, out_dir, protocol = "loso";
    std::string channels_csv, strides_csv;
    MegaNetConfig model;
    TrainConfig train;
    int blocks = 0; // 0 = keep default plan
    int classes = 0;
    bool no_gab = false, no_self_attention = false, no_residual = false;
    bool save_checkpoints = true;
};

int cmd_train(TrainArgs& a) {
    if (a.protocol != "loso")
        throw ConfigError("--protocol supports only 'loso'");
    DatasetManifest manifest = load_manifest(a.manifest);

    if (a.blocks > 0)
        default_block_plan(a.blocks, a.model.block_channels, a.model.block_strides);
    if (!a.channels_csv.empty())
        a.model.block_channels = parse_int_list(a.channels_csv, "channel");
    if (!a.strides_csv.empty())
        a.model.block_strides = parse_int_list(a.strides_csv, "stride");
    a.model.num_blocks = int(a.model.block_channels.size());
    a.model.num_classes =
        a.classes > 0 ? a.classes : int(manifest.class_names.size());
    a.model.enable_gab = !a.no_gab;
    a.model.enable_self_attention = !a.no_self_attention;
    a.model.enable_residual = !a.no_residual;

    fs::create_directories(a.out_dir);
    const std::string ckpt_dir =
        a.save_checkpoints ? (fs::path(a.out_dir) / "checkpoints").string() : "";
    EvalReport report = train_loso(manifest, a.model, a.train, ckpt_dir);

    report.write_json((fs::path(a.out_dir) / "report.json").string());
    report.write_predictions_csv((fs::path(a.out_dir) / "predictions.csv").string());
    std::cout << "LOSO over " << report.per_fold.size() << " subjects: ACC "
              << report.metrics.acc << "  UF1 " << report.metrics.uf1 << "  UAR "
              << report.metrics.uar << "\nreport: "
              << (fs::path(a.out_dir) / "report.json").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string manifest, checkpoint, out;
    TrainConfig train; // encoder / hist_eq knobs reused
};

int cmd_eval(const EvalArgs& a) {
    DatasetManifest manifest = load_manifest(a.manifest);
    MegaNetParams params = load_checkpoint(a.checkpoint);
    const int K = params.config.num_classes;
    if (K != int(manifest.class_names.size()))
        throw ConfigError("checkpoint expects " + std::to_string(K) +
                          " classes, manifest has " +
                          std::to_string(manifest.class_names.size()));

    std::vector<std::vector<int64_t>> confusion(
        size_t(K), std::vector<int64_t>(size_t(K), 0));
    json preds = json::array();
    for (const ManifestRow& row : manifest.rows) {
        FrameSequence seq = load_clip(manifest, row);
        if (a.train.hist_eq) {
            // equalize on the 8-bit scale before pooling
            for (ImageF& f : seq.frames) {
                ImageU8 u(f.h, f.w, f.c);
                for (size_t i = 0; i < u.data.size(); ++i)
                    u.data[i] = uint8_t(
                        std::lround(std::clamp(f.data[i] * 255.0, 0.0, 255.0)));
                f = to_float(hist_equalize(u));
            }
        }
        const MestiImage img = a.train.encoder == "mesti"
                                   ? encode_mesti(seq)
                                   : encode_dynamic_image(seq);
        ImageU8 view = img.view;
        if (view.c == 1) {
            ImageU8 rgb(view.h, view.w, 3);
            for (int i = 0; i < view.h; ++i)
                for (int j = 0; j < view.w; ++j)
                    for (int ch = 0; ch < 3; ++ch)
                        rgb.at(i, j, ch) = view.at(i, j, 0);
            view = rgb;
        }
        view = resize_bilinear(view, params.config.input_size,
                               params.config.input_size);
        const Tensor probs = meganet_infer(params, view_to_tensor(view), Mode::Eval);
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (probs.v[size_t(k)] > probs.v[size_t(best)]) best = k;
        confusion[size_t(row.label_id)][size_t(best)] += 1;
        preds.push_back(json{{"clip", seq.clip_id},
                             {"true", row.label_id},
                             {"pred", best}});
    }

    const Metrics m = metrics_from_confusion(confusion);
    std::cout << "ACC " << m.acc << "  UF1 " << m.uf1 << "  UAR " << m.uar << "\n";
    json out{{"checkpoint", a.checkpoint},
             {"encoder", a.train.encoder},
             {"hist_eq", a.train.hist_eq},
             {"class_names", manifest.class_names},
             {"confusion", confusion},
             {"metrics",
              json{{"acc", m.acc}, {"uf1", m.uf1}, {"uar", m.uar}}},
             {"predictions", preds}};
    if (!a.out.empty()) {
        std::ofstream f(a.out);
        if (!f) throw IoError("cannot write " + a.out);
        f << out.dump(2) << "\n";
    }
    return 0;
}

int run(int argc, char** argv) {
    const json cfg = load_config_file(argc, argv);

    CLI::App app{"micro-expression spatio-temporal image encoder and "
                 "gradient-attention network"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path,
                   "JSON config file (flags take precedence)");

    EncodeArgs enc;
    jset(cfg, "encoder", enc.encoder);
    jset(cfg, "hist_eq", enc.hist_eq);
    auto* c_enc = app.add_subcommand("encode", "encode clips into images");
    c_enc->add_option("--manifest", enc.manifest, "dataset manifest CSV");
    c_enc->add_option("--clip-dir", enc.clip_dir, "single clip directory");
    c_enc->add_option("--encoder", enc.encoder, "mesti|dynamic");
    c_enc->add_option("--apex-fallback", enc.apex_fallback,
                      "apex fallback strategy (middle)");
    c_enc->add_option("--out", enc.out_dir, "output directory")
        ->envname("MESTINET_OUT")
        ->required();
    c_enc->add_flag("--raw", enc.dump_raw_maps, "dump f32 raw maps");
    c_enc->add_flag("--hist-eq,!--no-hist-eq", enc.hist_eq,
                    "equalize frames before pooling");

    AttnArgs attn;
    jset(cfg, "size", attn.size);
    jset(cfg, "seed", attn.seed);
    auto* c_attn = app.add_subcommand("attention-map",
                                      "render the gradient attention map");
    c_attn->add_option("image", attn.image, "input image (PNG)")->required();
    c_attn->add_option("--checkpoint", attn.checkpoint, "checkpoint directory");
    c_attn->add_option("--out", attn.out, "output PNG")->envname("MESTINET_OUT");
    c_attn->add_option("--size", attn.size, "input resolution without checkpoint");
    c_attn->add_option("--seed", attn.seed, "init seed without checkpoint");

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "generate a synthetic dataset");
    c_synth->add_option("spec", synth.spec_file, "generator spec JSON");
    c_synth->add_option("--out", synth.out_dir, "dataset root")
        ->envname("MESTINET_OUT")
        ->required();
    auto* seed_opt = c_synth->add_option("--seed", synth.seed, "override seed");

    TrainArgs tr;
    jset(cfg, "input_size", tr.model.input_size);
    jset(cfg, "dropout_rate", tr.model.dropout_rate);
    jset(cfg, "strict_literal_attention", tr.model.strict_literal_attention);
    jset(cfg, "lr", tr.train.lr);
    jset(cfg, "weight_decay", tr.train.weight_decay);
    jset(cfg, "epochs", tr.train.epochs);
    jset(cfg, "focal_gamma", tr.train.focal_gamma);
    jset(cfg, "batch_size", tr.train.batch_size);
    jset(cfg, "seed", tr.train.seed);
    jset(cfg, "augment", tr.train.augment);
    jset(cfg, "hist_eq", tr.train.hist_eq);
    jset(cfg, "encoder", tr.train.encoder);
    jset(cfg, "jobs", tr.train.jobs);
    jset(cfg, "blocks", tr.blocks);
    auto* c_train = app.add_subcommand("train", "LOSO training + evaluation");
    c_train->add_option("--manifest", tr.manifest, "dataset manifest CSV")
        ->required();
    c_train->add_option("--out", tr.out_dir, "output directory")
        ->envname("MESTINET_OUT")
        ->required();
    c_train->add_option("--protocol", tr.protocol, "evaluation protocol (loso)");
    c_train->add_option("--input-size", tr.model.input_size,
                        "square input resolution (224 or 112)");
    c_train->add_option("--classes", tr.classes, "class count override");
    c_train->add_option("--channels", tr.channels_csv,
                        "comma-separated block channels");
    c_train->add_option("--strides", tr.strides_csv,
                        "comma-separated block strides");
    c_train->add_option("--blocks", tr.blocks, "residual attention block count");
    c_train->add_flag("--no-gab", tr.no_gab, "disable the gradient attention block");
    c_train->add_flag("--no-self-attention", tr.no_self_attention,
                      "disable self-attention");
    c_train->add_flag("--no-residual", tr.no_residual,
                      "disable the residual shortcut");
    c_train->add_flag("--strict-literal-attention",
                      tr.model.strict_literal_attention,
                      "self-attention without the residual add");
    c_train->add_option("--dropout", tr.model.dropout_rate, "dropout rate");
    c_train->add_option("--epochs", tr.train.epochs, "training epochs");
    c_train->add_option("--batch", tr.train.batch_size, "batch size");
    c_train->add_option("--lr", tr.train.lr, "learning rate");
    c_train->add_option("--weight-decay", tr.train.weight_decay, "L2 decay");
    c_train->add_option("--focal-gamma", tr.train.focal_gamma, "focal exponent");
    c_train->add_option("--seed", tr.train.seed, "master seed");
    c_train->add_flag("--augment,!--no-augment", tr.train.augment,
                      "6x flip/rotation augmentation of the train split");
    c_train->add_flag("--hist-eq,!--no-hist-eq", tr.train.hist_eq,
                      "equalize frames before pooling");
    c_train->add_option("--encoder", tr.train.encoder, "mesti|dynamic");
    c_train->add_option("--jobs", tr.train.jobs, "parallel folds");
    c_train->add_flag("!--no-checkpoints", tr.save_checkpoints,
                      "skip per-fold checkpoints");

    EvalArgs ev;
    jset(cfg, "encoder", ev.train.encoder);
    jset(cfg, "hist_eq", ev.train.hist_eq);
    auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
    c_eval->add_option("--manifest", ev.manifest, "dataset manifest CSV")
        ->required();
    c_eval->add_option("--checkpoint", ev.checkpoint, "checkpoint directory")
        ->required();
    c_eval->add_option("--out", ev.out, "metrics JSON path")
        ->envname("MESTINET_OUT");
    c_eval->add_option("--encoder", ev.train.encoder, "mesti|dynamic");
    c_eval->add_flag("--hist-eq,!--no-hist-eq", ev.train.hist_eq,
                     "equalize frames before pooling");

    if (cfg.contains("seed")) {
        jset(cfg, "seed", synth.seed);
        synth.seed_set = true;
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e); // prints help or the parse error
        return code == 0 ? 0 : 2;
    }
    if (seed_opt->count() > 0) synth.seed_set = true;

    if (c_enc->parsed()) return cmd_encode(enc);
    if (c_attn->parsed()) return cmd_attention_map(attn);
    if (c_synth->parsed()) return cmd_synth(synth);
    if (c_train->parsed()) return cmd_train(tr);
    if (c_eval->parsed()) return cmd_eval(ev);
    return 2;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
