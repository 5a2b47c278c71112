#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "changedet/image.hpp"

namespace changedet {

/// ROC evaluation needs both classes present in the reference.
struct UndefinedAucError : std::runtime_error {
    explicit UndefinedAucError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfusionCounts {
    int64_t tp = 0;
    int64_t tn = 0;
    int64_t fp = 0;
    int64_t fn = 0;
    int64_t total() const { return tp + tn + fp + fn; }
};

struct Scores {
    double oa = 0.0;
    double ua = 0.0;      // precision
    double recall = 0.0;
    double f1 = 0.0;
};

/// (false positive rate, true positive rate) points sorted by FPR, anchored
/// at (0,0) and (1,1); auc is the trapezoidal area of the stored points.
struct RocCurve {
    std::vector<std::pair<double, double>> points;
    double auc = 0.0;
};

/// Positive = change.
ConfusionCounts confusion(const BinaryMask& mask, const BinaryMask& reference);

/// oa, ua, recall, f1 with the 0/0 -> 0 convention.
Scores scores(const ConfusionCounts& counts);

/// Threshold sweep over `thresholds` uniform cut points in [0, 1]
/// (prediction = probability >= threshold), trapezoidal area.
RocCurve roc_auc(const ChangeProbabilityMap& probability, const BinaryMask& reference,
                 int thresholds = 256);

/// TP green, TN black, FP red, FN blue.
RgbImage render_confusion_map(const BinaryMask& mask, const BinaryMask& reference);

}  // namespace changedet
