#ifndef MVTN_MODEL_HPP
#define MVTN_MODEL_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mvtn/data.hpp"
#include "mvtn/pyramid.hpp"
#include "mvtn/tensor.hpp"

namespace mvtn {

struct ModelConfig {
    int d_model = 512;
    int stages = 6;
    int heads = 8;
    int ffn_mult = 4;
    ScheduleKind schedule_kind = ScheduleKind::PDim;
    int feature_dim = 512;  // width of the per-frame features (paper's k)
    int seq_len = 40;
    int num_classes = 0;
    bool use_embeddings = true;  // spatial embedding + class token (ablation switch)
    double dropout = 0.1;
    std::uint64_t seed = 0;

    PyramidSchedule schedule() const;
    void validate() const;
    // tokens entering the encoder: frames plus the class token when enabled
    int token_count() const { return use_embeddings ? seq_len + 1 : seq_len; }
};

std::string to_json_string(const ModelConfig& c);
ModelConfig model_config_from_json_string(const std::string& s);

struct StageParams {
    SraParams sra;
    Tensor norm1_gain, norm1_bias;
    Tensor norm2_gain, norm2_bias;
    Tensor ffn_w1, ffn_b1;  // d_model x (ffn_mult*d_model)
    Tensor ffn_w2, ffn_b2;  // (ffn_mult*d_model) x d_model
};

struct ModelParams {
    Tensor embed_w, embed_b;  // feature_dim x d_model; absent without embeddings
    Tensor class_token;       // d_model; absent without embeddings
    std::vector<StageParams> stages;
    Tensor final_norm_gain, final_norm_bias;
    Tensor head_w, head_b;  // d_model x num_classes

    static ModelParams init(const ModelConfig& config);
    std::int64_t scalar_count() const;

    // Visits every parameter tensor in the canonical (checkpoint) order.
    template <typename F>
    void for_each(F&& f) {
        if (!embed_w.data.empty()) {
            f("embed.w", embed_w);
            f("embed.b", embed_b);
            f("class_token", class_token);
        }
        for (std::size_t j = 0; j < stages.size(); ++j) {
            std::string p = "stage" + std::to_string(j + 1) + ".";
            StageParams& s = stages[j];
            f(p + "sra.w_q", s.sra.w_q);
            f(p + "sra.b_q", s.sra.b_q);
            f(p + "sra.w_k", s.sra.w_k);
            f(p + "sra.b_k", s.sra.b_k);
            f(p + "sra.w_v", s.sra.w_v);
            f(p + "sra.b_v", s.sra.b_v);
            f(p + "sra.w_o", s.sra.w_o);
            f(p + "sra.b_o", s.sra.b_o);
            f(p + "norm1.gain", s.norm1_gain);
            f(p + "norm1.bias", s.norm1_bias);
            f(p + "norm2.gain", s.norm2_gain);
            f(p + "norm2.bias", s.norm2_bias);
            f(p + "ffn.w1", s.ffn_w1);
            f(p + "ffn.b1", s.ffn_b1);
            f(p + "ffn.w2", s.ffn_w2);
            f(p + "ffn.b2", s.ffn_b2);
        }
        f("final_norm.gain", final_norm_gain);
        f("final_norm.bias", final_norm_bias);
        f("head.w", head_w);
        f("head.b", head_b);
    }
    template <typename F>
    void for_each(F&& f) const {
        const_cast<ModelParams*>(this)->for_each(
            [&](const std::string& name, Tensor& t) { f(name, static_cast<const Tensor&>(t)); });
    }
};

struct StageVars {
    SraVars sra;
    Var norm1_gain, norm1_bias, norm2_gain, norm2_bias;
    Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct ModelVars {
    Var embed_w, embed_b, class_token;
    std::vector<StageVars> stages;
    Var final_norm_gain, final_norm_bias, head_w, head_b;
};

// Registers every parameter on the tape in for_each order. When
// override_index matches a parameter's position, override_var is used
// instead (the gradient-check harness probes one tensor at a time this way).
// order_out, when given, receives the Vars in for_each order.
ModelVars put_on_tape(Tape& tape, const ModelParams& p, int override_index = -1,
                      Var override_var = {}, std::vector<Var>* order_out = nullptr);

struct ForwardOpts {
    bool training = false;
    std::mt19937_64* rng = nullptr;  // required when training && dropout > 0
    bool positional = true;          // test hook; always true in normal use
};

// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos of the same angle.
Tensor sinusoidal_pe(int seq_len, int d_model);

// B x T x feature_dim -> B x token_count x d_model.
Var embed_sequence(Tape& tape, Var features, const ModelVars& vars, const ModelConfig& config,
                   const ForwardOpts& opts = {});
// Pre-norm residual block: x + SRA(LN(x)), then x + FFN(LN(x)).
Var encoder_stage_forward(Tape& tape, Var tokens, const StageVars& stage,
                          const ModelConfig& config, const ForwardOpts& opts = {});
Var forward_on_tape(Tape& tape, const ModelVars& vars, const ModelConfig& config, Var features,
                    const ForwardOpts& opts = {});

// Evaluation-mode logits / class probabilities for B x T x feature_dim input.
Tensor forward(const ModelParams& params, const ModelConfig& config, const Tensor& features);
Tensor predict_proba(const ModelParams& params, const ModelConfig& config, const Tensor& features);

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 8;
    int epochs = 30;
    std::vector<int> lr_decay_epochs = {50, 75};
    double lr_decay_factor = 0.1;
    std::uint64_t seed = 0;
};

struct EpochStats {
    int epoch;  // 1-based
    double loss;
    double accuracy;
    double lr;
};
using TrainLog = std::vector<EpochStats>;

// Adam over cross-entropy. Deterministic given the seeds; the LR is stepped
// down by lr_decay_factor on entering each epoch listed in lr_decay_epochs.
TrainLog train(ModelParams& params, const ModelConfig& config, const TrainConfig& train_cfg,
               const std::vector<FeatureSequence>& dataset);

// "MVTP" checkpoint: config JSON + raw tensors in for_each order.
void save_checkpoint(const ModelParams& params, const ModelConfig& config,
                     const std::filesystem::path& path);
std::pair<ModelParams, ModelConfig> load_checkpoint(const std::filesystem::path& path);

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;  // parameter name, or "input"
};

// Central-difference check of d(loss)/d(theta) for every parameter tensor and
// the input features, on a random batch drawn from `seed`.
GradCheckResult model_grad_check(const ModelConfig& config, int batch, std::uint64_t seed,
                                 double eps = 1e-5);

}  // namespace mvtn

#endif  // MVTN_MODEL_HPP
