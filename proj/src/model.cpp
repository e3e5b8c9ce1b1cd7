#include "mvtn/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_map>

#include <json.hpp>

#include "bytes.hpp"

namespace mvtn {

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'V', 'T', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

Tensor xavier(int fan_in, int fan_out, std::mt19937_64& rng) {
    double limit = std::sqrt(6.0 / (fan_in + fan_out));
    return Tensor::uniform({fan_in, fan_out}, -limit, limit, rng);
}

}  // namespace

PyramidSchedule ModelConfig::schedule() const {
    return pyramid_schedule(schedule_kind, d_model, stages);
}

void ModelConfig::validate() const {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2, got " + std::to_string(num_classes));
    if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    if (heads < 1) throw ConfigError("heads must be >= 1");
    if (ffn_mult < 1) throw ConfigError("ffn_mult must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0)
        throw ConfigError("dropout must lie in [0,1), got " + std::to_string(dropout));
    if (d_model % 2 != 0)
        throw ConfigError("d_model must be even for sinusoidal embeddings, got " +
                          std::to_string(d_model));
    if (!use_embeddings && feature_dim != d_model)
        throw ConfigError("without embeddings the features must already be d_model wide (" +
                          std::to_string(feature_dim) + " vs " + std::to_string(d_model) + ")");
    PyramidSchedule sched = schedule();
    for (int j = 0; j < stages; ++j) {
        int dj = sched.dims[static_cast<std::size_t>(j)];
        if (dj < heads || dj % heads != 0)
            throw ConfigError("stage " + std::to_string(j + 1) + " attention dim " +
                              std::to_string(dj) + " not divisible into " + std::to_string(heads) +
                              " heads");
    }
}

std::string to_json_string(const ModelConfig& c) {
    nlohmann::json j;
    j["d_model"] = c.d_model;
    j["stages"] = c.stages;
    j["heads"] = c.heads;
    j["ffn_mult"] = c.ffn_mult;
    j["schedule"] = to_string(c.schedule_kind);
    j["feature_dim"] = c.feature_dim;
    j["seq_len"] = c.seq_len;
    j["num_classes"] = c.num_classes;
    j["use_embeddings"] = c.use_embeddings;
    j["dropout"] = c.dropout;
    j["seed"] = c.seed;
    return j.dump();
}

ModelConfig model_config_from_json_string(const std::string& s) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(s);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config is not valid JSON: ") + e.what(), 0);
    }
    ModelConfig c;
    try {
        c.d_model = j.at("d_model").get<int>();
        c.stages = j.at("stages").get<int>();
        c.heads = j.at("heads").get<int>();
        c.ffn_mult = j.at("ffn_mult").get<int>();
        c.schedule_kind = schedule_kind_from_string(j.at("schedule").get<std::string>());
        c.feature_dim = j.at("feature_dim").get<int>();
        c.seq_len = j.at("seq_len").get<int>();
        c.num_classes = j.at("num_classes").get<int>();
        c.use_embeddings = j.at("use_embeddings").get<bool>();
        c.dropout = j.at("dropout").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config missing fields: ") + e.what(), 0);
    }
    return c;
}

ModelParams ModelParams::init(const ModelConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    PyramidSchedule sched = config.schedule();

    ModelParams p;
    if (config.use_embeddings) {
        p.embed_w = xavier(config.feature_dim, config.d_model, rng);
        p.embed_b = Tensor::zeros({config.d_model});
        p.class_token = Tensor::uniform({config.d_model}, -0.02, 0.02, rng);
    }
    int hidden = config.ffn_mult * config.d_model;
    for (int j = 0; j < config.stages; ++j) {
        StageParams s;
        s.sra = SraParams::init(config.d_model, sched.dims[static_cast<std::size_t>(j)],
                                config.heads, rng);
        s.norm1_gain = Tensor::full({config.d_model}, 1.0);
        s.norm1_bias = Tensor::zeros({config.d_model});
        s.norm2_gain = Tensor::full({config.d_model}, 1.0);
        s.norm2_bias = Tensor::zeros({config.d_model});
        s.ffn_w1 = xavier(config.d_model, hidden, rng);
        s.ffn_b1 = Tensor::zeros({hidden});
        s.ffn_w2 = xavier(hidden, config.d_model, rng);
        s.ffn_b2 = Tensor::zeros({config.d_model});
        p.stages.push_back(std::move(s));
    }
    p.final_norm_gain = Tensor::full({config.d_model}, 1.0);
    p.final_norm_bias = Tensor::zeros({config.d_model});
    p.head_w = xavier(config.d_model, config.num_classes, rng);
    p.head_b = Tensor::zeros({config.num_classes});

    p.for_each([](const std::string&, Tensor& t) { t.requires_grad = true; });
    return p;
}

std::int64_t ModelParams::scalar_count() const {
    std::int64_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
}

ModelVars put_on_tape(Tape& tape, const ModelParams& p, int override_index, Var override_var,
                      std::vector<Var>* order_out) {
    std::unordered_map<const Tensor*, Var> registered;
    int idx = 0;
    p.for_each([&](const std::string&, const Tensor& t) {
        Var v = (idx == override_index) ? override_var : tape.input(t);
        registered[&t] = v;
        if (order_out) order_out->push_back(v);
        ++idx;
    });
    auto at = [&](const Tensor& t) { return registered.at(&t); };

    ModelVars mv;
    if (!p.embed_w.data.empty()) {
        mv.embed_w = at(p.embed_w);
        mv.embed_b = at(p.embed_b);
        mv.class_token = at(p.class_token);
    }
    for (const StageParams& s : p.stages) {
        StageVars sv;
        sv.sra = SraVars{at(s.sra.w_q), at(s.sra.b_q), at(s.sra.w_k), at(s.sra.b_k),
                         at(s.sra.w_v), at(s.sra.b_v), at(s.sra.w_o), at(s.sra.b_o), s.sra.heads};
        sv.norm1_gain = at(s.norm1_gain);
        sv.norm1_bias = at(s.norm1_bias);
        sv.norm2_gain = at(s.norm2_gain);
        sv.norm2_bias = at(s.norm2_bias);
        sv.ffn_w1 = at(s.ffn_w1);
        sv.ffn_b1 = at(s.ffn_b1);
        sv.ffn_w2 = at(s.ffn_w2);
        sv.ffn_b2 = at(s.ffn_b2);
        mv.stages.push_back(sv);
    }
    mv.final_norm_gain = at(p.final_norm_gain);
    mv.final_norm_bias = at(p.final_norm_bias);
    mv.head_w = at(p.head_w);
    mv.head_b = at(p.head_b);
    return mv;
}

Tensor sinusoidal_pe(int seq_len, int d_model) {
    if (d_model % 2 != 0)
        throw ConfigError("sinusoidal embedding needs an even d_model, got " +
                          std::to_string(d_model));
    Tensor pe({seq_len, d_model});
    for (int pos = 0; pos < seq_len; ++pos) {
        for (int i = 0; i < d_model / 2; ++i) {
            double angle = pos / std::pow(10000.0, (2.0 * i) / d_model);
            pe.at(pos, 2 * i) = std::sin(angle);
            pe.at(pos, 2 * i + 1) = std::cos(angle);
        }
    }
    return pe;
}

Var embed_sequence(Tape& tape, Var features, const ModelVars& vars, const ModelConfig& config,
                   const ForwardOpts& opts) {
    const Tensor& f = tape.value(features);
    if (f.rank() != 3 || f.shape[1] != config.seq_len || f.shape[2] != config.feature_dim)
        throw ShapeError("features must be B x " + std::to_string(config.seq_len) + " x " +
                         std::to_string(config.feature_dim) + ", got " + shape_str(f.shape));

    Var tok = config.use_embeddings ? tape.linear(features, vars.embed_w, vars.embed_b) : features;
    if (opts.positional)
        tok = tape.add_const_rows(tok, sinusoidal_pe(config.seq_len, config.d_model));
    if (config.use_embeddings) tok = tape.concat_token(vars.class_token, tok);
    return tok;
}

Var encoder_stage_forward(Tape& tape, Var tokens, const StageVars& stage,
                          const ModelConfig& config, const ForwardOpts& opts) {
    bool drop = opts.training && config.dropout > 0.0;
    if (drop && !opts.rng) throw ContractError("training forward needs an RNG for dropout");

    Var x = tokens;
    Var attn = sra_forward(tape, tape.layer_norm(x, stage.norm1_gain, stage.norm1_bias), stage.sra);
    if (drop) attn = tape.dropout(attn, config.dropout, *opts.rng);
    x = tape.add(x, attn);

    Var h = tape.layer_norm(x, stage.norm2_gain, stage.norm2_bias);
    h = tape.linear(h, stage.ffn_w1, stage.ffn_b1);
    h = tape.relu(h);
    h = tape.linear(h, stage.ffn_w2, stage.ffn_b2);
    if (drop) h = tape.dropout(h, config.dropout, *opts.rng);
    return tape.add(x, h);
}

Var forward_on_tape(Tape& tape, const ModelVars& vars, const ModelConfig& config, Var features,
                    const ForwardOpts& opts) {
    Var x = embed_sequence(tape, features, vars, config, opts);
    for (const StageVars& stage : vars.stages)
        x = encoder_stage_forward(tape, x, stage, config, opts);
    x = tape.layer_norm(x, vars.final_norm_gain, vars.final_norm_bias);
    Var readout = config.use_embeddings ? tape.select_token(x, 0) : tape.mean_tokens(x);
    return tape.linear(readout, vars.head_w, vars.head_b);
}

Tensor forward(const ModelParams& params, const ModelConfig& config, const Tensor& features) {
    Tape tape;
    ModelVars vars = put_on_tape(tape, params);
    Var logits = forward_on_tape(tape, vars, config, tape.constant(features));
    return tape.value(logits);
}

Tensor predict_proba(const ModelParams& params, const ModelConfig& config, const Tensor& features) {
    return softmax(forward(params, config, features), 1);
}

TrainLog train(ModelParams& params, const ModelConfig& config, const TrainConfig& train_cfg,
               const std::vector<FeatureSequence>& dataset) {
    if (dataset.empty()) throw ContractError("cannot train on an empty dataset");
    if (train_cfg.lr <= 0.0) throw ConfigError("learning rate must be > 0");
    if (train_cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    config.validate();
    for (const auto& s : dataset)
        if (s.label < 0 || s.label >= config.num_classes)
            throw IndexError("dataset label " + std::to_string(s.label) + " out of range [0," +
                             std::to_string(config.num_classes) + ")");

    struct Slot {
        Tensor* tensor;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots;
    params.for_each([&](const std::string&, Tensor& t) {
        slots.push_back({&t, std::vector<double>(t.data.size(), 0.0),
                         std::vector<double>(t.data.size(), 0.0)});
    });

    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    double lr = train_cfg.lr;
    std::mt19937_64 dropout_rng(train_cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::int64_t step = 0;

    TrainLog log;
    for (int epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
        if (std::find(train_cfg.lr_decay_epochs.begin(), train_cfg.lr_decay_epochs.end(), epoch) !=
            train_cfg.lr_decay_epochs.end())
            lr *= train_cfg.lr_decay_factor;

        double loss_sum = 0.0;
        std::int64_t correct = 0, seen = 0;
        for (Batch& batch : batches(dataset, train_cfg.batch_size, train_cfg.seed + epoch, true)) {
            Tape tape;
            std::vector<Var> order;
            ModelVars vars = put_on_tape(tape, params, -1, {}, &order);
            ForwardOpts opts{/*training=*/true, &dropout_rng, /*positional=*/true};
            Var logits = forward_on_tape(tape, vars, config, tape.constant(batch.features), opts);
            Var loss = tape.cross_entropy(logits, batch.labels);

            int bsz = static_cast<int>(batch.labels.size());
            loss_sum += tape.value(loss).data[0] * bsz;
            const Tensor& lg = tape.value(logits);
            for (int b = 0; b < bsz; ++b) {
                int best = 0;
                for (int c = 1; c < config.num_classes; ++c)
                    if (lg.at(b, c) > lg.at(b, best)) best = c;
                if (best == batch.labels[static_cast<std::size_t>(b)]) ++correct;
            }
            seen += bsz;

            tape.backward(loss);
            ++step;
            double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
            double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
            for (std::size_t i = 0; i < slots.size(); ++i) {
                const std::vector<double>& g = tape.grad(order[i]);
                Slot& s = slots[i];
                s.tensor->grad = g;
                for (std::size_t j = 0; j < g.size(); ++j) {
                    s.m[j] = kBeta1 * s.m[j] + (1.0 - kBeta1) * g[j];
                    s.v[j] = kBeta2 * s.v[j] + (1.0 - kBeta2) * g[j] * g[j];
                    double mhat = s.m[j] / bc1;
                    double vhat = s.v[j] / bc2;
                    s.tensor->data[j] -= lr * mhat / (std::sqrt(vhat) + kEps);
                }
            }
        }
        log.push_back({epoch, loss_sum / static_cast<double>(seen),
                       static_cast<double>(correct) / static_cast<double>(seen), lr});
    }
    return log;
}

void save_checkpoint(const ModelParams& params, const ModelConfig& config,
                     const std::filesystem::path& path) {
    detail::ByteWriter w(path);
    w.raw(kCheckpointMagic, 4);
    w.u32(kCheckpointVersion);
    std::string cfg = to_json_string(config);
    w.u32(static_cast<std::uint32_t>(cfg.size()));
    w.raw(cfg.data(), cfg.size());
    params.for_each([&](const std::string&, const Tensor& t) {
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape) w.u32(static_cast<std::uint32_t>(d));
        for (double v : t.data) w.f64(v);
    });
}

std::pair<ModelParams, ModelConfig> load_checkpoint(const std::filesystem::path& path) {
    detail::ByteReader r(path);
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError("bad magic, not an MVTP checkpoint", 0);
    std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
    std::size_t at = r.offset();
    std::uint32_t cfg_len = r.u32();
    if (cfg_len > (1u << 20)) throw FormatError("implausible config length", at);
    std::string cfg(cfg_len, '\0');
    r.raw(cfg.data(), cfg_len);

    ModelConfig config = model_config_from_json_string(cfg);
    config.validate();
    ModelParams params = ModelParams::init(config);
    params.for_each([&](const std::string& name, Tensor& t) {
        std::size_t start = r.offset();
        std::uint32_t rank = r.u32();
        if (rank != static_cast<std::uint32_t>(t.rank()))
            throw FormatError("tensor " + name + " has rank " + std::to_string(rank) + ", want " +
                              std::to_string(t.rank()), start);
        for (int i = 0; i < t.rank(); ++i) {
            std::uint32_t d = r.u32();
            if (d != static_cast<std::uint32_t>(t.shape[static_cast<std::size_t>(i)]))
                throw FormatError("tensor " + name + " dim " + std::to_string(i) + " is " +
                                  std::to_string(d) + ", want " +
                                  std::to_string(t.shape[static_cast<std::size_t>(i)]), start);
        }
        for (double& v : t.data) v = r.f64();
    });
    return {std::move(params), config};
}

GradCheckResult model_grad_check(const ModelConfig& config, int batch, std::uint64_t seed,
                                 double eps) {
    config.validate();
    ModelParams params = ModelParams::init(config);
    std::mt19937_64 rng(seed);
    Tensor features = Tensor::uniform({batch, config.seq_len, config.feature_dim}, -1.0, 1.0, rng);
    std::vector<int> labels;
    for (int b = 0; b < batch; ++b)
        labels.push_back(static_cast<int>(rng() % static_cast<std::uint64_t>(config.num_classes)));

    GradCheckResult res;
    auto consider = [&](double err, const std::string& name) {
        if (err > res.max_rel_err) {
            res.max_rel_err = err;
            res.worst = name;
        }
    };

    int index = 0;
    params.for_each([&](const std::string& name, const Tensor& t) {
        int k = index++;
        double err = grad_check(
            [&](Tape& tape, Var v) {
                ModelVars vars = put_on_tape(tape, params, k, v);
                Var logits = forward_on_tape(tape, vars, config, tape.constant(features));
                return tape.cross_entropy(logits, labels);
            },
            t, eps);
        consider(err, name);
    });

    double err = grad_check(
        [&](Tape& tape, Var v) {
            ModelVars vars = put_on_tape(tape, params);
            Var logits = forward_on_tape(tape, vars, config, v);
            return tape.cross_entropy(logits, labels);
        },
        features, eps);
    consider(err, "input");
    return res;
}

}  // namespace mvtn
