#include "meg/model.hpp"

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace meg {

void MegaNetConfig::validate() const {
    if (input_size < 32)
        throw ConfigError("input_size must be >= 32, got " +
                          std::to_string(input_size));
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
    if (num_classes < 2)
        throw ConfigError("num_classes must be >= 2, got " +
                          std::to_string(num_classes));
    if (num_blocks < 1) throw ConfigError("num_blocks must be >= 1");
    if (int(block_channels.size()) != num_blocks ||
        int(block_strides.size()) != num_blocks)
        throw ConfigError("num_blocks=" + std::to_string(num_blocks) +
                          " but got " + std::to_string(block_channels.size()) +
                          " channel and " + std::to_string(block_strides.size()) +
                          " stride entries");
    for (int s : block_strides)
        if (s != 1 && s != 2) throw ConfigError("block strides must be 1 or 2");
    if (enable_self_attention)
        for (int c : block_channels)
            if (c % 8 != 0)
                throw ConfigError(
                    "self-attention requires block channels divisible by 8, got " +
                    std::to_string(c));
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
        throw ConfigError("dropout_rate must be in [0,1)");
}

std::vector<ParamTensor*> MegaNetParams::all_params() {
    std::vector<ParamTensor*> out;
    if (gab) {
        out.push_back(&gab->w_g);
        out.push_back(&gab->b_g);
    }
    out.push_back(&stem_conv);
    for (ParamTensor* p : {&stem_bn.gamma, &stem_bn.beta, &stem_bn.running_mean,
                           &stem_bn.running_var})
        out.push_back(p);
    for (auto& blk : blocks) {
        out.push_back(&blk.conv1);
        for (ParamTensor* p : {&blk.bn1.gamma, &blk.bn1.beta,
                               &blk.bn1.running_mean, &blk.bn1.running_var})
            out.push_back(p);
        out.push_back(&blk.conv2);
        for (ParamTensor* p : {&blk.bn2.gamma, &blk.bn2.beta,
                               &blk.bn2.running_mean, &blk.bn2.running_var})
            out.push_back(p);
        if (blk.shortcut) out.push_back(&*blk.shortcut);
        if (blk.attn) {
            out.push_back(&blk.attn->wq);
            out.push_back(&blk.attn->wk);
            out.push_back(&blk.attn->wv);
            out.push_back(&blk.attn->gamma);
        }
    }
    out.push_back(&fc_w);
    out.push_back(&fc_b);
    return out;
}

std::vector<ParamTensor*> MegaNetParams::trainable_params() {
    std::vector<ParamTensor*> out;
    for (ParamTensor* p : all_params())
        if (p->trainable) out.push_back(p);
    return out;
}

MegaNetParams build_meganet(const MegaNetConfig& config, uint64_t seed) {
    config.validate();
    Rng rng(Rng::derive(seed, {0x6d65676100ull}));
    MegaNetParams p;
    p.config = config;

    if (config.enable_gab)
        p.gab = make_gab_params(config.input_channels, rng, "gab");

    {
        const Shape s{config.stem_channels, config.input_channels, 7, 7};
        const double bound = std::sqrt(6.0 / (double(s.c) * s.h * s.w));
        Tensor w = Tensor::uniform(s, rng, -bound, bound);
        w.snap_f32();
        p.stem_conv = ParamTensor{std::move(w), "stem.conv.w", true};
        p.stem_bn.gamma = ParamTensor{Tensor::full({1, config.stem_channels, 1, 1}, 1.0),
                                      "stem.bn.gamma", true};
        p.stem_bn.beta = ParamTensor{Tensor::zeros({1, config.stem_channels, 1, 1}),
                                     "stem.bn.beta", true};
        p.stem_bn.running_mean =
            ParamTensor{Tensor::zeros({1, config.stem_channels, 1, 1}),
                        "stem.bn.running_mean", false};
        p.stem_bn.running_var =
            ParamTensor{Tensor::full({1, config.stem_channels, 1, 1}, 1.0),
                        "stem.bn.running_var", false};
    }

    int c_in = config.stem_channels;
    for (int i = 0; i < config.num_blocks; ++i) {
        const int c_out = config.block_channels[size_t(i)];
        p.blocks.push_back(make_rab_params(
            c_in, c_out, config.block_strides[size_t(i)],
            config.enable_self_attention, config.dropout_rate, rng,
            "block" + std::to_string(i + 1)));
        c_in = c_out;
    }

    {
        // Xavier-uniform for the classifier head.
        const int K = config.num_classes;
        const Shape s{K, c_in, 1, 1};
        const double bound = std::sqrt(6.0 / double(c_in + K));
        Tensor w = Tensor::uniform(s, rng, -bound, bound);
        w.snap_f32();
        p.fc_w = ParamTensor{std::move(w), "fc.w", true};
        p.fc_b = ParamTensor{Tensor::zeros({1, K, 1, 1}), "fc.b", true};
    }
    return p;
}

Var meganet_forward(Tape& t, MegaNetParams& params, Var x, Mode mode, Rng& rng,
                    ForwardTrace* trace) {
    const MegaNetConfig& cfg = params.config;
    const Shape in = t.shape(x);
    if (in.c != cfg.input_channels || in.h != cfg.input_size ||
        in.w != cfg.input_size)
        throw ShapeError("meganet_forward: expected (B," +
                         std::to_string(cfg.input_channels) + "," +
                         std::to_string(cfg.input_size) + "," +
                         std::to_string(cfg.input_size) + "), got " + in.str());
    auto record = [&](const char* stage, Var v) {
        if (trace) trace->emplace_back(stage, t.shape(v));
    };

    Var cur = x;
    record("input", cur);
    if (cfg.enable_gab) {
        cur = gab_forward(t, cur, *params.gab).y;
        record("gab", cur);
    }
    cur = t.conv2d(cur, t.param(params.stem_conv), Var{}, 2, 3);
    cur = batchnorm(t, cur, params.stem_bn, mode);
    cur = t.relu(cur);
    record("stem", cur);
    cur = t.maxpool2d(cur, 3, 2, 1);
    record("stem_pool", cur);

    for (size_t i = 0; i < params.blocks.size(); ++i) {
        auto& blk = params.blocks[i];
        Var x_res = cfg.enable_residual ? residual_forward(t, cur, blk, mode)
                                        : residual_transform(t, cur, blk, mode);
        if (cfg.enable_self_attention)
            cur = self_attention(t, x_res, *blk.attn, rng, mode,
                                 cfg.strict_literal_attention);
        else
            cur = t.relu(x_res);
        record(("block" + std::to_string(i + 1)).c_str(), cur);
    }

    cur = t.global_avg_pool(cur);
    record("gap", cur);
    Var logits = t.fully_connected(cur, t.param(params.fc_w), t.param(params.fc_b));
    const int B = t.shape(logits).b;
    const int K = t.shape(logits).c;
    Var probs = t.reshape(
        t.softmax_lastdim(t.reshape(logits, Shape{B, 1, 1, K})), Shape{B, K, 1, 1});
    record("probs", probs);
    return probs;
}

Tensor meganet_infer(MegaNetParams& params, const Tensor& x, Mode mode,
                     Rng* rng) {
    Rng fallback(0);
    Tape t;
    Var probs = meganet_forward(t, params, t.input(x), mode,
                                rng ? *rng : fallback);
    return t.val(probs);
}

// ---------------------------------------------------------------------------
// checkpoint I/O
// ---------------------------------------------------------------------------

json config_to_json(const MegaNetConfig& c) {
    return json{{"input_size", c.input_size},
                {"input_channels", c.input_channels},
                {"num_classes", c.num_classes},
                {"stem_channels", c.stem_channels},
                {"block_channels", c.block_channels},
                {"block_strides", c.block_strides},
                {"num_blocks", c.num_blocks},
                {"enable_gab", c.enable_gab},
                {"enable_self_attention", c.enable_self_attention},
                {"enable_residual", c.enable_residual},
                {"strict_literal_attention", c.strict_literal_attention},
                {"dropout_rate", c.dropout_rate}};
}

MegaNetConfig config_from_json(const json& j) {
    MegaNetConfig c;
    c.input_size = j.at("input_size").get<int>();
    c.input_channels = j.at("input_channels").get<int>();
    c.num_classes = j.at("num_classes").get<int>();
    c.stem_channels = j.at("stem_channels").get<int>();
    c.block_channels = j.at("block_channels").get<std::vector<int>>();
    c.block_strides = j.at("block_strides").get<std::vector<int>>();
    c.num_blocks = j.at("num_blocks").get<int>();
    c.enable_gab = j.at("enable_gab").get<bool>();
    c.enable_self_attention = j.at("enable_self_attention").get<bool>();
    c.enable_residual = j.at("enable_residual").get<bool>();
    c.strict_literal_attention = j.at("strict_literal_attention").get<bool>();
    c.dropout_rate = j.at("dropout_rate").get<double>();
    return c;
}

namespace {

void require_little_endian() {
    if constexpr (std::endian::native != std::endian::little)
        throw CheckpointError("checkpoints are little-endian f32; this "
                              "platform is big-endian");
}

} // namespace

void save_checkpoint(MegaNetParams& params, const std::string& dir) {
    require_little_endian();
    fs::create_directories(dir);

    json manifest;
    manifest["version"] = 1;
    json tensors = json::array();
    int64_t offset = 0;

    std::ofstream bin(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!bin) throw IoError("cannot write " + dir + "/weights.bin");
    for (ParamTensor* p : params.all_params()) {
        const int64_t len = p->t.numel();
        tensors.push_back(json{{"name", p->name},
                               {"shape",
                                {p->t.shape.b, p->t.shape.c, p->t.shape.h,
                                 p->t.shape.w}},
                               {"dtype", "f32"},
                               {"offset", offset},
                               {"length", len}});
        std::vector<float> buf(size_t(len), 0.0f);
        for (int64_t i = 0; i < len; ++i) buf[size_t(i)] = float(p->t.v[size_t(i)]);
        bin.write(reinterpret_cast<const char*>(buf.data()),
                  std::streamsize(buf.size() * sizeof(float)));
        offset += len;
    }
    bin.close();

    manifest["tensors"] = std::move(tensors);
    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("cannot write " + dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";

    json cj = config_to_json(params.config);
    std::ofstream cf(fs::path(dir) / "config.json");
    if (!cf) throw IoError("cannot write " + dir + "/config.json");
    cf << cj.dump(2) << "\n";
}

MegaNetParams load_checkpoint(const std::string& dir) {
    require_little_endian();
    std::ifstream cf(fs::path(dir) / "config.json");
    if (!cf) throw CheckpointError("missing " + dir + "/config.json");
    json cj = json::parse(cf, nullptr, /*allow_exceptions=*/false);
    if (cj.is_discarded())
        throw CheckpointError("corrupt config.json in " + dir);
    MegaNetParams params = build_meganet(config_from_json(cj), 0);

    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw CheckpointError("missing " + dir + "/manifest.json");
    json manifest = json::parse(mf, nullptr, false);
    if (manifest.is_discarded())
        throw CheckpointError("corrupt manifest.json in " + dir);
    if (!manifest.contains("version") || manifest["version"].get<int>() != 1)
        throw CheckpointError("unknown checkpoint version in " + dir);

    std::unordered_map<std::string, ParamTensor*> by_name;
    for (ParamTensor* p : params.all_params()) by_name[p->name] = p;

    const auto bin_path = fs::path(dir) / "weights.bin";
    std::error_code ec;
    const int64_t file_bytes = int64_t(fs::file_size(bin_path, ec));
    if (ec) throw CheckpointError("missing " + dir + "/weights.bin");

    int64_t total = 0;
    for (const auto& entry : manifest.at("tensors")) total += entry.at("length").get<int64_t>();
    if (total * int64_t(sizeof(float)) != file_bytes)
        throw CheckpointError("weights.bin size mismatch: manifest declares " +
                              std::to_string(total * sizeof(float)) +
                              " bytes, file has " + std::to_string(file_bytes));

    std::ifstream bin(bin_path, std::ios::binary);
    std::unordered_map<std::string, bool> seen;
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw CheckpointError("manifest names unknown parameter '" + name +
                                  "'");
        ParamTensor* p = it->second;
        const auto shp = entry.at("shape").get<std::vector<int>>();
        if (shp.size() != 4 ||
            !(Shape{shp[0], shp[1], shp[2], shp[3]} == p->t.shape))
            throw CheckpointError("shape mismatch for parameter '" + name + "'");
        const int64_t len = entry.at("length").get<int64_t>();
        if (len != p->t.numel())
            throw CheckpointError("length mismatch for parameter '" + name + "'");
        const int64_t offset = entry.at("offset").get<int64_t>();
        bin.seekg(offset * int64_t(sizeof(float)));
        std::vector<float> buf(size_t(len), 0.0f);
        bin.read(reinterpret_cast<char*>(buf.data()),
                 std::streamsize(buf.size() * sizeof(float)));
        if (!bin)
            throw CheckpointError("weights.bin truncated while reading '" +
                                  name + "'");
        for (int64_t i = 0; i < len; ++i) p->t.v[size_t(i)] = real(buf[size_t(i)]);
        seen[name] = true;
    }
    for (auto& [name, p] : by_name)
        if (!seen.count(name))
            throw CheckpointError("checkpoint is missing parameter '" + name +
                                  "'");
    return params;
}

} // namespace meg
