#ifndef MVTN_FUSION_HPP
#define MVTN_FUSION_HPP

#include <string>
#include <vector>

#include "mvtn/errors.hpp"

namespace mvtn {

// Normalized class-probability distribution over n >= 2 classes.
struct ProbVector {
    std::vector<double> probs;
    void validate() const;
};

struct ModalityPrediction {
    std::string modality;
    ProbVector probs;
};

struct FusionResult {
    int cls = 0;
    std::vector<double> fused;  // mean of the inputs, itself a distribution
};

// Decision-level fusion: average the per-modality distributions and take the
// argmax. The argmax is computed on the running sum, so the decision is
// identical to the sum form; ties break toward the lowest class index.
FusionResult late_fuse(const std::vector<ModalityPrediction>& preds);

// Fraction of samples where the fused decision matches the label.
// per_sample[i] holds the modality predictions for sample i.
double fuse_accuracy(const std::vector<std::vector<ModalityPrediction>>& per_sample,
                     const std::vector<int>& labels);

}  // namespace mvtn

#endif  // MVTN_FUSION_HPP
