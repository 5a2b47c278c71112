#include "changedet/metrics.hpp"

#include "changedet/errors.hpp"

namespace changedet {

namespace {

void check_same_extent(const char* op, int h1, int w1, int h2, int w2) {
    if (h1 != h2 || w1 != w2)
        throw ContractViolation(std::string(op) + ": extents differ (" + std::to_string(h1) + "x" +
                                std::to_string(w1) + " vs " + std::to_string(h2) + "x" +
                                std::to_string(w2) + ")");
}

}  // namespace

ConfusionCounts confusion(const BinaryMask& mask, const BinaryMask& reference) {
    check_same_extent("confusion", mask.height, mask.width, reference.height, reference.width);
    ConfusionCounts c;
    for (size_t i = 0; i < mask.values.size(); ++i) {
        const bool predicted = mask.values[i] != 0;
        const bool actual = reference.values[i] != 0;
        if (predicted && actual)
            ++c.tp;
        else if (!predicted && !actual)
            ++c.tn;
        else if (predicted)
            ++c.fp;
        else
            ++c.fn;
    }
    return c;
}

Scores scores(const ConfusionCounts& c) {
    const int64_t total = c.total();
    if (total <= 0) throw ContractViolation("scores: empty confusion counts");
    auto ratio = [](int64_t num, int64_t den) {
        return den > 0 ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
    };
    Scores s;
    s.oa = ratio(c.tp + c.tn, total);
    s.ua = ratio(c.tp, c.tp + c.fp);
    s.recall = ratio(c.tp, c.tp + c.fn);
    s.f1 = (s.ua + s.recall) > 0.0 ? 2.0 * s.ua * s.recall / (s.ua + s.recall) : 0.0;
    return s;
}

RocCurve roc_auc(const ChangeProbabilityMap& probability, const BinaryMask& reference,
                 int thresholds) {
    check_same_extent("roc_auc", probability.height, probability.width, reference.height,
                      reference.width);
    if (thresholds < 2) throw ContractViolation("roc_auc: need at least 2 thresholds");
    int64_t positives = 0, negatives = 0;
    for (uint8_t v : reference.values) (v != 0 ? positives : negatives)++;
    if (positives == 0 || negatives == 0)
        throw UndefinedAucError("roc_auc: reference contains a single class");

    RocCurve curve;
    curve.points.reserve(static_cast<size_t>(thresholds) + 2);
    curve.points.emplace_back(0.0, 0.0);
    // descending thresholds yield nondecreasing FPR
    for (int k = thresholds - 1; k >= 0; --k) {
        const double tau = static_cast<double>(k) / static_cast<double>(thresholds - 1);
        int64_t tp = 0, fp = 0;
        for (size_t i = 0; i < probability.values.size(); ++i) {
            if (static_cast<double>(probability.values[i]) >= tau)
                (reference.values[i] != 0 ? tp : fp)++;
        }
        curve.points.emplace_back(static_cast<double>(fp) / static_cast<double>(negatives),
                                  static_cast<double>(tp) / static_cast<double>(positives));
    }
    curve.points.emplace_back(1.0, 1.0);

    double auc = 0.0;
    for (size_t i = 1; i < curve.points.size(); ++i) {
        const auto& [x0, y0] = curve.points[i - 1];
        const auto& [x1, y1] = curve.points[i];
        auc += (x1 - x0) * (y0 + y1) * 0.5;
    }
    curve.auc = auc;
    return curve;
}

RgbImage render_confusion_map(const BinaryMask& mask, const BinaryMask& reference) {
    check_same_extent("render_confusion_map", mask.height, mask.width, reference.height,
                      reference.width);
    RgbImage img;
    img.height = mask.height;
    img.width = mask.width;
    img.rgb.assign(static_cast<size_t>(mask.height) * mask.width * 3, 0);
    for (size_t i = 0; i < mask.values.size(); ++i) {
        const bool predicted = mask.values[i] != 0;
        const bool actual = reference.values[i] != 0;
        uint8_t* px = img.rgb.data() + 3 * i;
        if (predicted && actual)
            px[1] = 255;  // TP green
        else if (predicted && !actual)
            px[0] = 255;  // FP red
        else if (!predicted && actual)
            px[2] = 255;  // FN blue
        // TN stays black
    }
    return img;
}

}  // namespace changedet
