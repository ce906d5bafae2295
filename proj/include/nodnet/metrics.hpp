#pragma once

#include <utility>
#include <vector>

#include "nodnet/tensor.hpp"

namespace nodnet {

/// Confusion counts and derived rates for the two-class nodule problem.
/// Convention: 1 = C1 = positive (nodule present), 0 = C2.
struct ClassificationReport {
    long tp = 0, fp = 0, tn = 0, fn = 0;
    long total() const { return tp + fp + tn + fn; }
    double accuracy() const { return static_cast<double>(tp + tn) / static_cast<double>(total()); }
    double sensitivity() const { return static_cast<double>(tp) / static_cast<double>(tp + fn); }
    double specificity() const { return static_cast<double>(tn) / static_cast<double>(tn + fp); }
};

/// Probability map -> binary mask at the given threshold (p >= threshold).
Tensor<float> binarize(const Tensor<float>& probs, double threshold = 0.5);

/// Dice similarity 2|A n B| / (|A| + |B|) between binary masks of equal
/// shape. Two empty masks score 1.0 (perfect-agreement convention).
double dice(const Tensor<float>& pred, const Tensor<float>& gt);

/// ROC AUC as the Mann-Whitney statistic P(score+ > score-) + P(tie)/2,
/// computed by sorting with midranks for ties. Both classes must be present.
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Same quantity by explicit trapezoidal integration of the ROC curve;
/// agrees with roc_auc up to floating-point error.
double roc_auc_trapezoid(const std::vector<double>& scores, const std::vector<int>& labels);

/// Boundary pixels of a binary mask: foreground with a background 4-neighbor
/// or on the image edge. (row, col) pairs.
std::vector<std::pair<int, int>> boundary_pixels(const Tensor<float>& mask);

/// Symmetric Hausdorff distance between the boundary pixel sets, Euclidean
/// metric in pixel units, exact max-min. Both masks must be non-empty.
double hausdorff(const Tensor<float>& a, const Tensor<float>& b);

ClassificationReport classification_report(const std::vector<int>& predictions, const std::vector<int>& labels);

}  // namespace nodnet
