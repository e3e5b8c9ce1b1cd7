#ifndef MVTN_COST_HPP
#define MVTN_COST_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "mvtn/model.hpp"

namespace mvtn {

struct StageCost {
    int stage = 0;  // 1-based
    int attn_dim = 0;
    std::int64_t params = 0;
    std::int64_t macs = 0;
};

// Analytic counts for one forward pass at batch 1. MACs follow the matmul
// rule (m x k)(k x n) -> m*k*n and exclude softmax/norm/activation flops.
struct CostReport {
    std::int64_t params_total = 0;
    std::int64_t macs_total = 0;
    std::int64_t embed_params = 0;  // spatial embedding + class token
    std::int64_t head_params = 0;   // final norm + classification head
    std::int64_t embed_macs = 0;
    std::int64_t head_macs = 0;
    std::vector<StageCost> per_stage;
};

// One encoder stage: QKV projections, output projection, two norms, FFN.
std::int64_t stage_param_count(int d_model, int attn_dim, int ffn_mult);
std::int64_t stage_mac_count(int d_model, int attn_dim, int ffn_mult, int tokens);

CostReport cost_report(const ModelConfig& config);
std::int64_t count_params(const ModelConfig& config);
std::int64_t count_macs(const ModelConfig& config, int seq_len);

std::string cost_report_json(const CostReport& report, const ModelConfig& config);
// Aligned plain-text table, one row per stage plus totals.
std::string cost_report_table(const CostReport& report, const ModelConfig& config);

}  // namespace mvtn

#endif  // MVTN_COST_HPP
