#ifndef MVTN_PYRAMID_HPP
#define MVTN_PYRAMID_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "mvtn/tensor.hpp"

namespace mvtn {

enum class ScheduleKind { PDim, PDimRev, PDimPlus, Columnar };

ScheduleKind schedule_kind_from_string(const std::string& name);
std::string to_string(ScheduleKind kind);

// Per-stage attention dimensions d_1..d_S. PDim doubles toward d_model,
// PDimRev is its mirror, PDimPlus keeps a floor of d_model/2, Columnar is the
// flat baseline.
struct PyramidSchedule {
    ScheduleKind kind;
    int d_model;
    int stages;
    std::vector<int> dims;
};

PyramidSchedule pyramid_schedule(ScheduleKind kind, int d_model, int stages);

// Weights of one spatial-reduction attention block. Q, K and V are all
// projected from d_model down to the stage dimension d_j; heads operate at
// d_j/heads and the output projection restores d_model.
struct SraParams {
    Tensor w_q, b_q;  // d_model x d_j, d_j
    Tensor w_k, b_k;
    Tensor w_v, b_v;
    Tensor w_o, b_o;  // d_j x d_model, d_model
    int heads = 8;

    static SraParams init(int d_model, int attn_dim, int heads, std::mt19937_64& rng);

    int attn_dim() const { return w_q.shape[1]; }
    int model_dim() const { return w_q.shape[0]; }
    std::int64_t param_count() const;
    void validate() const;
};

// Tape-resident handles for one SRA block.
struct SraVars {
    Var w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    int heads;
};

SraVars put_on_tape(Tape& tape, const SraParams& p);

// x[B x L x d_model] -> [B x L x d_model]. Sequence length is untouched; the
// reduction happens in the channel dimension.
Var sra_forward(Tape& tape, Var x, const SraVars& p);
Tensor sra_forward(const Tensor& x, const SraParams& p);

// Softmax(Q Kt / sqrt(d_head)) per head, exposed for inspection.
// Q, K are [B x L x d_j]; the result is [B x heads x L x L].
Tensor attention_weights(const Tensor& q, const Tensor& k, int heads);

}  // namespace mvtn

#endif  // MVTN_PYRAMID_HPP
