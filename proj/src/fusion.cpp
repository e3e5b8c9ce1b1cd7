#include "mvtn/fusion.hpp"

#include <cmath>
#include <cstdint>

namespace mvtn {

void ProbVector::validate() const {
    if (probs.size() < 2) throw ContractError("probability vector needs >= 2 classes");
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0) || !std::isfinite(p))
            throw ContractError("probability entries must be finite and nonnegative");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw ContractError("probabilities sum to " + std::to_string(sum) + ", not 1");
}

FusionResult late_fuse(const std::vector<ModalityPrediction>& preds) {
    if (preds.empty()) throw ContractError("late_fuse needs at least one modality");
    std::size_t n = preds[0].probs.probs.size();
    for (const auto& p : preds) {
        if (p.modality.empty()) throw ContractError("modality tag must be nonempty");
        p.probs.validate();
        if (p.probs.probs.size() != n)
            throw ContractError("probability lengths disagree: " + std::to_string(n) + " vs " +
                                std::to_string(p.probs.probs.size()) + " (" + p.modality + ")");
    }

    std::vector<double> sum(n, 0.0);
    for (const auto& p : preds)
        for (std::size_t j = 0; j < n; ++j) sum[j] += p.probs.probs[j];

    int best = 0;
    for (std::size_t j = 1; j < n; ++j)
        if (sum[j] > sum[static_cast<std::size_t>(best)]) best = static_cast<int>(j);

    FusionResult r;
    r.cls = best;
    r.fused = std::move(sum);
    for (double& v : r.fused) v /= static_cast<double>(preds.size());
    return r;
}

double fuse_accuracy(const std::vector<std::vector<ModalityPrediction>>& per_sample,
                     const std::vector<int>& labels) {
    if (per_sample.size() != labels.size())
        throw ContractError("sample count " + std::to_string(per_sample.size()) +
                            " does not match label count " + std::to_string(labels.size()));
    if (per_sample.empty()) throw ContractError("fuse_accuracy needs at least one sample");

    std::int64_t correct = 0;
    for (std::size_t i = 0; i < per_sample.size(); ++i)
        if (late_fuse(per_sample[i]).cls == labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(per_sample.size());
}

}  // namespace mvtn
