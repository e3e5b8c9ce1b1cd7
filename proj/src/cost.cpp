#include "mvtn/cost.hpp"

#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace mvtn {

std::int64_t stage_param_count(int d_model, int attn_dim, int ffn_mult) {
    std::int64_t d = d_model, dj = attn_dim, h = static_cast<std::int64_t>(ffn_mult) * d_model;
    std::int64_t qkv = 3 * (d * dj + dj);
    std::int64_t out = dj * d + d;
    std::int64_t norms = 2 * (2 * d);
    std::int64_t ffn = (d * h + h) + (h * d + d);
    return qkv + out + norms + ffn;
}

std::int64_t stage_mac_count(int d_model, int attn_dim, int ffn_mult, int tokens) {
    std::int64_t d = d_model, dj = attn_dim, h = static_cast<std::int64_t>(ffn_mult) * d_model;
    std::int64_t L = tokens;
    std::int64_t qkv = 3 * L * d * dj;
    std::int64_t attn = 2 * L * L * dj;  // logits Q*Kt plus weights*V, summed over heads
    std::int64_t out = L * dj * d;
    std::int64_t ffn = L * d * h + L * h * d;
    return qkv + attn + out + ffn;
}

CostReport cost_report(const ModelConfig& config) {
    config.validate();
    PyramidSchedule sched = config.schedule();
    std::int64_t d = config.d_model, n = config.num_classes, k = config.feature_dim;
    std::int64_t L = config.token_count();

    CostReport r;
    if (config.use_embeddings) {
        r.embed_params = k * d + d + d;  // linear map + bias + class token
        r.embed_macs = static_cast<std::int64_t>(config.seq_len) * k * d;
    }
    r.head_params = 2 * d + (d * n + n);  // final norm + head
    r.head_macs = d * n;                  // head applied to one readout vector

    for (int j = 0; j < config.stages; ++j) {
        int dj = sched.dims[static_cast<std::size_t>(j)];
        StageCost sc;
        sc.stage = j + 1;
        sc.attn_dim = dj;
        sc.params = stage_param_count(config.d_model, dj, config.ffn_mult);
        sc.macs = stage_mac_count(config.d_model, dj, config.ffn_mult, static_cast<int>(L));
        r.per_stage.push_back(sc);
    }

    r.params_total = r.embed_params + r.head_params;
    r.macs_total = r.embed_macs + r.head_macs;
    for (const StageCost& sc : r.per_stage) {
        r.params_total += sc.params;
        r.macs_total += sc.macs;
    }
    return r;
}

std::int64_t count_params(const ModelConfig& config) { return cost_report(config).params_total; }

std::int64_t count_macs(const ModelConfig& config, int seq_len) {
    ModelConfig c = config;
    c.seq_len = seq_len;
    return cost_report(c).macs_total;
}

std::string cost_report_json(const CostReport& report, const ModelConfig& config) {
    nlohmann::json j;
    j["schedule"] = to_string(config.schedule_kind);
    j["d_model"] = config.d_model;
    j["seq_len"] = config.seq_len;
    j["params_total"] = report.params_total;
    j["macs_total"] = report.macs_total;
    j["embed_params"] = report.embed_params;
    j["head_params"] = report.head_params;
    j["embed_macs"] = report.embed_macs;
    j["head_macs"] = report.head_macs;
    j["per_stage"] = nlohmann::json::array();
    for (const StageCost& sc : report.per_stage)
        j["per_stage"].push_back({{"stage", sc.stage},
                                  {"attn_dim", sc.attn_dim},
                                  {"params", sc.params},
                                  {"macs", sc.macs}});
    return j.dump(2);
}

std::string cost_report_table(const CostReport& report, const ModelConfig& config) {
    std::ostringstream os;
    os << "schedule " << to_string(config.schedule_kind) << "  (D=" << config.d_model
       << ", T=" << config.seq_len << ", n=" << config.num_classes << ")\n";
    os << std::left << std::setw(10) << "stage" << std::right << std::setw(10) << "attn_dim"
       << std::setw(16) << "params" << std::setw(18) << "macs" << "\n";
    for (const StageCost& sc : report.per_stage)
        os << std::left << std::setw(10) << sc.stage << std::right << std::setw(10) << sc.attn_dim
           << std::setw(16) << sc.params << std::setw(18) << sc.macs << "\n";
    os << std::left << std::setw(10) << "embed" << std::right << std::setw(10) << "-"
       << std::setw(16) << report.embed_params << std::setw(18) << report.embed_macs << "\n";
    os << std::left << std::setw(10) << "head" << std::right << std::setw(10) << "-"
       << std::setw(16) << report.head_params << std::setw(18) << report.head_macs << "\n";
    os << std::left << std::setw(10) << "total" << std::right << std::setw(10) << "-"
       << std::setw(16) << report.params_total << std::setw(18) << report.macs_total << "\n";
    return os.str();
}

}  // namespace mvtn
