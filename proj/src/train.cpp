#include "meg/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <thread>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace meg {

void TrainConfig::validate() const {
    if (lr <= 0.0) throw ConfigError("train: lr must be > 0");
    if (weight_decay < 0.0) throw ConfigError("train: negative weight decay");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (focal_gamma < 0.0) throw ConfigError("train: focal gamma must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (encoder != "mesti" && encoder != "dynamic")
        throw ConfigError("train: encoder must be 'mesti' or 'dynamic', got '" +
                          encoder + "'");
    if (jobs < 1) throw ConfigError("train: jobs must be >= 1");
}

double focal_loss_value(const Tensor& probs, const std::vector<int>& targets,
                        double gamma) {
    Tape t;
    return t.val(t.focal_loss(t.input(probs), targets, gamma)).v[0];
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

Adam::Adam(double lr, double weight_decay, double beta1, double beta2,
           double eps)
    : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::step(const std::vector<ParamTensor*>& params,
                const std::vector<const Tensor*>& grads) {
    if (params.size() != grads.size())
        throw ShapeError("adam: " + std::to_string(params.size()) +
                         " params vs " + std::to_string(grads.size()) +
                         " grads");
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i]->t.v.size(), 0.0);
            v_[i].assign(params[i]->t.v.size(), 0.0);
        }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, double(t_));
    const double bc2 = 1.0 - std::pow(b2_, double(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i]->t;
        const Tensor& g = *grads[i];
        if (g.v.size() != p.v.size())
            throw ShapeError("adam: grad size mismatch for '" +
                             params[i]->name + "'");
        for (size_t j = 0; j < p.v.size(); ++j) {
            const double gj = g.v[j] + wd_ * p.v[j]; // L2-coupled decay
            m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * gj;
            v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * gj * gj;
            const double mhat = m_[i][j] / bc1;
            const double vhat = v_[i][j] / bc2;
            p.v[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
        p.snap_f32();
    }
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

ImageU8 flip_horizontal(const ImageU8& im) {
    ImageU8 out(im.h, im.w, im.c);
    for (int i = 0; i < im.h; ++i)
        for (int j = 0; j < im.w; ++j)
            for (int ch = 0; ch < im.c; ++ch)
                out.at(i, j, ch) = im.at(i, im.w - 1 - j, ch);
    return out;
}

ImageU8 rotate_bilinear(const ImageU8& im, double degrees) {
    const double th = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    const double ci = (im.h - 1) / 2.0, cj = (im.w - 1) / 2.0;
    ImageU8 out(im.h, im.w, im.c);
    for (int i = 0; i < im.h; ++i)
        for (int j = 0; j < im.w; ++j) {
            // inverse map with edge replication
            double fi = ci + cs * (i - ci) + sn * (j - cj);
            double fj = cj - sn * (i - ci) + cs * (j - cj);
            fi = std::clamp(fi, 0.0, double(im.h - 1));
            fj = std::clamp(fj, 0.0, double(im.w - 1));
            const int i0 = int(fi), j0 = int(fj);
            const int i1 = std::min(i0 + 1, im.h - 1);
            const int j1 = std::min(j0 + 1, im.w - 1);
            const double wi = fi - i0, wj = fj - j0;
            for (int ch = 0; ch < im.c; ++ch) {
                const double v =
                    (1 - wi) * ((1 - wj) * im.at(i0, j0, ch) +
                                wj * im.at(i0, j1, ch)) +
                    wi * ((1 - wj) * im.at(i1, j0, ch) + wj * im.at(i1, j1, ch));
                out.at(i, j, ch) = uint8_t(std::lround(std::clamp(v, 0.0, 255.0)));
            }
        }
    return out;
}

std::vector<ImageU8> augment_clip(const ImageU8& view) {
    return {view,
            flip_horizontal(view),
            rotate_bilinear(view, 5.0),
            rotate_bilinear(view, -5.0),
            rotate_bilinear(view, 10.0),
            rotate_bilinear(view, -10.0)};
}

// ---------------------------------------------------------------------------
// LOSO protocol
// ---------------------------------------------------------------------------

std::vector<LosoFold> loso_folds(const DatasetManifest& m) {
    std::map<std::string, LosoFold> by_subject;
    for (int i = 0; i < int(m.rows.size()); ++i) {
        const std::string& s = m.rows[size_t(i)].subject_id;
        by_subject[s].held_out_subject = s;
        by_subject[s].test_rows.push_back(i);
    }
    if (by_subject.size() < 2)
        throw ProtocolError("LOSO needs at least 2 distinct subjects, got " +
                            std::to_string(by_subject.size()));
    std::vector<LosoFold> folds;
    for (auto& [subject, fold] : by_subject) {
        for (int i = 0; i < int(m.rows.size()); ++i)
            if (m.rows[size_t(i)].subject_id != subject)
                fold.train_rows.push_back(i);
        folds.push_back(std::move(fold));
    }
    return folds;
}

Metrics metrics_from_confusion(const std::vector<std::vector<int64_t>>& confusion) {
    const int K = int(confusion.size());
    if (K == 0) throw MetricsError("metrics: empty confusion matrix");
    int64_t total = 0, diag = 0;
    for (int i = 0; i < K; ++i) {
        if (int(confusion[size_t(i)].size()) != K)
            throw ShapeError("metrics: confusion matrix must be square");
        for (int j = 0; j < K; ++j) {
            if (confusion[size_t(i)][size_t(j)] < 0)
                throw MetricsError("metrics: negative confusion entry");
            total += confusion[size_t(i)][size_t(j)];
        }
        diag += confusion[size_t(i)][size_t(i)];
    }
    if (total == 0)
        throw MetricsError("metrics: confusion matrix has no samples");

    Metrics out;
    out.acc = double(diag) / double(total);
    double sum_recall = 0.0, sum_f1 = 0.0;
    for (int k = 0; k < K; ++k) {
        int64_t row = 0, col = 0;
        for (int j = 0; j < K; ++j) {
            row += confusion[size_t(k)][size_t(j)];
            col += confusion[size_t(j)][size_t(k)];
        }
        const int64_t tp = confusion[size_t(k)][size_t(k)];
        const double recall = row > 0 ? double(tp) / double(row) : 0.0;
        const double precision = col > 0 ? double(tp) / double(col) : 0.0;
        const double f1 = precision + recall > 0.0
                              ? 2.0 * precision * recall / (precision + recall)
                              : 0.0;
        sum_recall += recall;
        sum_f1 += f1;
    }
    out.uar = sum_recall / K;
    out.uf1 = sum_f1 / K;
    return out;
}

// ---------------------------------------------------------------------------
// end-to-end LOSO training
// ---------------------------------------------------------------------------

namespace {

struct Sample {
    ImageU8 view;
    int label = -1;
    std::string clip_id;
};

ImageU8 replicate_gray(const ImageU8& im, int channels) {
    if (im.c == channels) return im;
    if (im.c != 1)
        throw ShapeError("cannot adapt " + std::to_string(im.c) +
                         "-channel image to " + std::to_string(channels));
    ImageU8 out(im.h, im.w, channels);
    for (int i = 0; i < im.h; ++i)
        for (int j = 0; j < im.w; ++j)
            for (int ch = 0; ch < channels; ++ch)
                out.at(i, j, ch) = im.at(i, j, 0);
    return out;
}

// Encode one manifest row into the model-input view.
Sample encode_row(const DatasetManifest& m, const ManifestRow& row,
                  const TrainConfig& tc, const MegaNetConfig& mc) {
    fs::path dir(row.clip_dir);
    if (dir.is_relative()) dir = fs::path(m.root) / dir;
    std::vector<ImageU8> raw = read_clip_frames(dir.string(), row.onset, row.offset);
    if (tc.hist_eq)
        for (auto& f : raw) f = hist_equalize(f);

    FrameSequence seq;
    seq.frames.reserve(raw.size());
    for (const auto& f : raw) seq.frames.push_back(to_float(f));
    if (row.apex) seq.apex_index = *row.apex - row.onset + 1;
    seq.subject_id = row.subject_id;
    seq.label = row.label_id;
    seq.clip_id = row.subject_id + "_" + fs::path(row.clip_dir).filename().string();

    const MestiImage img =
        tc.encoder == "mesti" ? encode_mesti(seq) : encode_dynamic_image(seq);

    Sample s;
    s.view = resize_bilinear(replicate_gray(img.view, mc.input_channels),
                             mc.input_size, mc.input_size);
    s.label = row.label_id;
    s.clip_id = seq.clip_id;
    return s;
}

Tensor batch_tensor(const std::vector<Sample>& samples,
                    const std::vector<int>& idx, size_t begin, size_t end) {
    const ImageU8& first = samples[size_t(idx[begin])].view;
    Tensor x({int(end - begin), first.c, first.h, first.w});
    for (size_t b = begin; b < end; ++b) {
        const ImageU8& im = samples[size_t(idx[b])].view;
        for (int ch = 0; ch < im.c; ++ch)
            for (int i = 0; i < im.h; ++i)
                for (int j = 0; j < im.w; ++j)
                    x.at(int(b - begin), ch, i, j) = im.at(i, j, ch) / 255.0;
    }
    return x;
}

int argmax_row(const Tensor& probs, int row) {
    const int K = int(probs.numel() / probs.shape.b);
    int best = 0;
    for (int k = 1; k < K; ++k)
        if (probs.v[size_t(row) * K + k] > probs.v[size_t(row) * K + best])
            best = k;
    return best;
}

FoldReport run_fold(const DatasetManifest& manifest, const LosoFold& fold,
                    int fold_index, const MegaNetConfig& model_config,
                    const TrainConfig& tc, const std::string& checkpoint_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    const int K = int(manifest.class_names.size());
    Rng rng(Rng::derive(tc.seed, {0xF01D, uint64_t(fold_index)}));

    MegaNetParams params = build_meganet(
        model_config, Rng::derive(tc.seed, {0xB111D, uint64_t(fold_index)}));

    std::vector<Sample> train, test;
    for (int r : fold.train_rows) {
        Sample s = encode_row(manifest, manifest.rows[size_t(r)], tc, model_config);
        if (tc.augment) {
            for (ImageU8& v : augment_clip(s.view))
                train.push_back(Sample{std::move(v), s.label, s.clip_id});
        } else {
            train.push_back(std::move(s));
        }
    }
    for (int r : fold.test_rows)
        test.push_back(encode_row(manifest, manifest.rows[size_t(r)], tc, model_config));

    Adam opt(tc.lr, tc.weight_decay);
    std::vector<ParamTensor*> trainable = params.trainable_params();

    std::vector<int> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        rng.shuffle(order);
        for (size_t begin = 0; begin < order.size(); begin += size_t(tc.batch_size)) {
            const size_t end = std::min(order.size(), begin + size_t(tc.batch_size));
            Tensor x = batch_tensor(train, order, begin, end);
            std::vector<int> targets;
            for (size_t b = begin; b < end; ++b)
                targets.push_back(train[size_t(order[b])].label);

            Tape t;
            Var probs = meganet_forward(t, params, t.input(x), Mode::Train, rng);
            Var loss = t.focal_loss(probs, targets, tc.focal_gamma);
            t.backward(loss);

            std::vector<const Tensor*> grads;
            grads.reserve(trainable.size());
            for (ParamTensor* p : trainable) {
                Var v = t.find(*p);
                if (!v.valid())
                    throw std::logic_error("trainable parameter '" + p->name +
                                           "' missing from the forward tape");
                grads.push_back(&t.grad(v));
            }
            opt.step(trainable, grads);
        }
    }

    FoldReport report;
    report.held_out_subject = fold.held_out_subject;
    report.confusion.assign(size_t(K), std::vector<int64_t>(size_t(K), 0));
    std::vector<int> one{0};
    for (const Sample& s : test) {
        std::vector<Sample> single{s};
        Tensor x = batch_tensor(single, one, 0, 1);
        const Tensor probs = meganet_infer(params, x, Mode::Eval);
        const int pred = argmax_row(probs, 0);
        report.confusion[size_t(s.label)][size_t(pred)] += 1;
        report.predictions.push_back(Prediction{s.clip_id, s.label, pred});
    }

    if (!checkpoint_dir.empty()) {
        const fs::path dir =
            fs::path(checkpoint_dir) / ("fold_" + fold.held_out_subject);
        save_checkpoint(params, dir.string());
    }

    report.train_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    return report;
}

} // namespace

EvalReport train_loso(const DatasetManifest& manifest,
                      const MegaNetConfig& model_config,
                      const TrainConfig& train_config,
                      const std::string& checkpoint_dir) {
    model_config.validate();
    train_config.validate();
    if (int(manifest.class_names.size()) != model_config.num_classes)
        throw ConfigError("train_loso: manifest has " +
                          std::to_string(manifest.class_names.size()) +
                          " classes but model expects " +
                          std::to_string(model_config.num_classes));
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<LosoFold> folds = loso_folds(manifest);

    EvalReport report;
    report.model_config = model_config;
    report.train_config = train_config;
    report.class_names = manifest.class_names;
    report.per_fold.resize(folds.size());

    std::vector<std::exception_ptr> errors(folds.size());
    const int jobs = std::max(1, std::min(train_config.jobs, int(folds.size())));
    if (jobs == 1) {
        for (size_t f = 0; f < folds.size(); ++f) {
            try {
                report.per_fold[f] = run_fold(manifest, folds[f], int(f),
                                              model_config, train_config,
                                              checkpoint_dir);
            } catch (...) {
                errors[f] = std::current_exception();
            }
            if (errors[f]) break;
        }
    } else {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int w = 0; w < jobs; ++w)
            pool.emplace_back([&]() {
                for (;;) {
                    const size_t f = next.fetch_add(1);
                    if (f >= folds.size()) return;
                    try {
                        report.per_fold[f] = run_fold(manifest, folds[f], int(f),
                                                      model_config, train_config,
                                                      checkpoint_dir);
                    } catch (...) {
                        errors[f] = std::current_exception();
                    }
                }
            });
        for (auto& th : pool) th.join();
    }
    for (size_t f = 0; f < folds.size(); ++f)
        if (errors[f]) {
            try {
                std::rethrow_exception(errors[f]);
            } catch (const std::exception& e) {
                throw ProtocolError("fold '" + folds[f].held_out_subject +
                                    "': " + e.what());
            }
        }

    const int K = int(manifest.class_names.size());
    report.aggregate.assign(size_t(K), std::vector<int64_t>(size_t(K), 0));
    for (const FoldReport& fr : report.per_fold)
        for (int i = 0; i < K; ++i)
            for (int j = 0; j < K; ++j)
                report.aggregate[size_t(i)][size_t(j)] +=
                    fr.confusion[size_t(i)][size_t(j)];
    report.metrics = metrics_from_confusion(report.aggregate);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    return report;
}

// ---------------------------------------------------------------------------
// report serialization
// ---------------------------------------------------------------------------

namespace {

json train_config_json(const TrainConfig& c) {
    return json{{"lr", c.lr},
                {"weight_decay", c.weight_decay},
                {"epochs", c.epochs},
                {"focal_gamma", c.focal_gamma},
                {"batch_size", c.batch_size},
                {"seed", c.seed},
                {"augment", c.augment},
                {"hist_eq", c.hist_eq},
                {"encoder", c.encoder},
                {"jobs", c.jobs}};
}

} // namespace

std::string EvalReport::to_json(bool include_timing) const {
    json j;
    j["config"]["model"] = config_to_json(model_config);
    j["config"]["train"] = train_config_json(train_config);
    j["class_names"] = class_names;
    json folds = json::array();
    for (const FoldReport& fr : per_fold) {
        json fj;
        fj["held_out_subject"] = fr.held_out_subject;
        fj["confusion"] = fr.confusion;
        json preds = json::array();
        for (const Prediction& p : fr.predictions)
            preds.push_back(json{{"clip", p.clip_id},
                                 {"true", p.true_label},
                                 {"pred", p.predicted}});
        fj["predictions"] = std::move(preds);
        if (include_timing) fj["train_seconds"] = fr.train_seconds;
        folds.push_back(std::move(fj));
    }
    j["folds"] = std::move(folds);
    j["aggregate_confusion"] = aggregate;
    j["metrics"] = json{{"acc", metrics.acc}, {"uf1", metrics.uf1},
                        {"uar", metrics.uar}};
    if (include_timing) j["timing"] = json{{"wall_seconds", wall_seconds}};
    return j.dump(2);
}

void EvalReport::write_json(const std::string& path, bool include_timing) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report " + path);
    out << to_json(include_timing) << "\n";
}

void EvalReport::write_predictions_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write predictions " + path);
    out << "fold,clip,true,predicted\n";
    for (const FoldReport& fr : per_fold)
        for (const Prediction& p : fr.predictions)
            out << fr.held_out_subject << ',' << p.clip_id << ',' << p.true_label
                << ',' << p.predicted << "\n";
}

} // namespace meg
