#include "mvtn/pyramid.hpp"

#include <cmath>

namespace mvtn {

ScheduleKind schedule_kind_from_string(const std::string& name) {
    if (name == "p_dim") return ScheduleKind::PDim;
    if (name == "p_dim_rev") return ScheduleKind::PDimRev;
    if (name == "p_dim_plus") return ScheduleKind::PDimPlus;
    if (name == "columnar") return ScheduleKind::Columnar;
    throw ConfigError("unknown schedule kind '" + name +
                      "' (want p_dim, p_dim_rev, p_dim_plus or columnar)");
}

std::string to_string(ScheduleKind kind) {
    switch (kind) {
        case ScheduleKind::PDim: return "p_dim";
        case ScheduleKind::PDimRev: return "p_dim_rev";
        case ScheduleKind::PDimPlus: return "p_dim_plus";
        case ScheduleKind::Columnar: return "columnar";
    }
    return "?";
}

namespace {

// d_model / 2^k for stage bookkeeping; stage is only used for error text.
int exact_shift_div(int d_model, int k, int stage, ScheduleKind kind) {
    int denom = 1 << k;
    if (d_model % denom != 0)
        throw ConfigError("schedule " + to_string(kind) + " stage " + std::to_string(stage) +
                          " needs d_model divisible by " + std::to_string(denom) + ", got " +
                          std::to_string(d_model));
    return d_model / denom;
}

}  // namespace

PyramidSchedule pyramid_schedule(ScheduleKind kind, int d_model, int stages) {
    if (stages < 1) throw ConfigError("stages must be >= 1, got " + std::to_string(stages));
    if (stages > 30) throw ConfigError("schedule depth " + std::to_string(stages) + " exceeds 30");
    if (d_model < 1) throw ConfigError("d_model must be >= 1, got " + std::to_string(d_model));

    PyramidSchedule sched{kind, d_model, stages, {}};
    sched.dims.reserve(static_cast<std::size_t>(stages));
    for (int j = 1; j <= stages; ++j) {
        switch (kind) {
            case ScheduleKind::PDim:
                sched.dims.push_back(exact_shift_div(d_model, stages - j, j, kind));
                break;
            case ScheduleKind::PDimRev:
                sched.dims.push_back(exact_shift_div(d_model, j - 1, j, kind));
                break;
            case ScheduleKind::PDimPlus:
                // D/2 + D/2^(S-j+1); the first stage needs D/2^S
                sched.dims.push_back(exact_shift_div(d_model, 1, j, kind) +
                                     exact_shift_div(d_model, stages - j + 1, j, kind));
                break;
            case ScheduleKind::Columnar:
                sched.dims.push_back(d_model);
                break;
        }
    }
    return sched;
}

SraParams SraParams::init(int d_model, int attn_dim, int heads, std::mt19937_64& rng) {
    auto xavier = [&](int fan_in, int fan_out) {
        double limit = std::sqrt(6.0 / (fan_in + fan_out));
        return Tensor::uniform({fan_in, fan_out}, -limit, limit, rng);
    };
    SraParams p;
    p.w_q = xavier(d_model, attn_dim);
    p.b_q = Tensor::zeros({attn_dim});
    p.w_k = xavier(d_model, attn_dim);
    p.b_k = Tensor::zeros({attn_dim});
    p.w_v = xavier(d_model, attn_dim);
    p.b_v = Tensor::zeros({attn_dim});
    p.w_o = xavier(attn_dim, d_model);
    p.b_o = Tensor::zeros({d_model});
    p.heads = heads;
    p.validate();
    return p;
}

void SraParams::validate() const {
    int d_j = attn_dim();
    if (heads < 1 || d_j % heads != 0 || d_j < heads)
        throw ConfigError("attention dim " + std::to_string(d_j) + " not divisible into " +
                          std::to_string(heads) + " heads");
}

std::int64_t SraParams::param_count() const {
    std::int64_t d = model_dim(), dj = attn_dim();
    return 3 * (d * dj + dj) + (dj * d + d);
}

SraVars put_on_tape(Tape& tape, const SraParams& p) {
    p.validate();
    return SraVars{tape.input(p.w_q), tape.input(p.b_q), tape.input(p.w_k), tape.input(p.b_k),
                   tape.input(p.w_v), tape.input(p.b_v), tape.input(p.w_o), tape.input(p.b_o),
                   p.heads};
}

Var sra_forward(Tape& tape, Var x, const SraVars& p) {
    const Tensor& xv = tape.value(x);
    if (xv.rank() != 3 || xv.shape[2] != tape.value(p.w_q).shape[0])
        throw ShapeError("sra_forward input " + shape_str(xv.shape) + " does not match weights " +
                         shape_str(tape.value(p.w_q).shape));
    int d_j = tape.value(p.w_q).shape[1];
    int d_head = d_j / p.heads;

    Var q = tape.linear(x, p.w_q, p.b_q);
    Var k = tape.linear(x, p.w_k, p.b_k);
    Var v = tape.linear(x, p.w_v, p.b_v);

    Var qh = tape.split_heads(q, p.heads);
    Var kh = tape.split_heads(k, p.heads);
    Var vh = tape.split_heads(v, p.heads);

    Var logits = tape.scale(tape.bmm(qh, tape.transpose_last2(kh)), 1.0 / std::sqrt(d_head));
    Var weights = tape.softmax(logits, 2);
    Var ctx = tape.merge_heads(tape.bmm(weights, vh), p.heads);
    return tape.linear(ctx, p.w_o, p.b_o);
}

Tensor sra_forward(const Tensor& x, const SraParams& p) {
    Tape tape;
    return tape.value(sra_forward(tape, tape.constant(x), put_on_tape(tape, p)));
}

Tensor attention_weights(const Tensor& q, const Tensor& k, int heads) {
    if (q.rank() != 3 || k.rank() != 3 || q.shape != k.shape)
        throw ShapeError("attention_weights wants matching rank-3 Q/K: " + shape_str(q.shape) +
                         " vs " + shape_str(k.shape));
    int d_j = q.shape[2];
    if (heads < 1 || d_j % heads != 0)
        throw ConfigError("attention dim " + std::to_string(d_j) + " not divisible into " +
                          std::to_string(heads) + " heads");
    int d_head = d_j / heads;

    Tape tape;
    Var qh = tape.split_heads(tape.constant(q), heads);
    Var kh = tape.split_heads(tape.constant(k), heads);
    Var w = tape.softmax(tape.scale(tape.bmm(qh, tape.transpose_last2(kh)), 1.0 / std::sqrt(d_head)), 2);
    Tensor out = tape.value(w);  // [B*heads x L x L], contiguous as [B x heads x L x L]
    out.shape = {q.shape[0], heads, q.shape[1], q.shape[1]};
    return out;
}

}  // namespace mvtn
