#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "changedet/errors.hpp"
#include "changedet/losses.hpp"
#include "changedet/networks.hpp"
#include "changedet/rng.hpp"
#include "support/checks.hpp"

using namespace changedet;
using testsupport::check_gradients;
using testsupport::random_tensor;

namespace {

Tensor identity_sinv(int64_t b) {
    std::vector<float> v(static_cast<size_t>(b * b), 0.0f);
    for (int64_t i = 0; i < b; ++i) v[static_cast<size_t>(i * b + i)] = 1.0f;
    return Tensor::from_data({b, b}, std::move(v));
}

}  // namespace

TEST_CASE("weighted_mahalanobis reductions and hand case") {
    SeededRng rng(1);
    Tensor d = random_tensor({1, 2, 4, 4}, rng, -1.0, 1.0);
    Tensor sinv = identity_sinv(2);

    // zero weights -> ~0 (sqrt epsilon only)
    Tensor zero_w = Tensor::zeros({1, 1, 4, 4});
    CHECK(weighted_mahalanobis(d, zero_w, sinv).item() <= 2e-6f);

    // unit weights, identity Sinv -> mean Euclidean norm (double oracle)
    Tensor ones = Tensor::full({1, 1, 4, 4}, 1.0f);
    double expect = 0.0;
    for (int p = 0; p < 16; ++p) {
        const double a = d.data()[p], b = d.data()[16 + p];
        expect += std::sqrt(a * a + b * b);
    }
    expect /= 16.0;
    CHECK(weighted_mahalanobis(d, ones, sinv).item() == doctest::Approx(expect).epsilon(1e-5));

    // one pixel, d = [1, 0], w = 0.8, S = diag(4, 1) -> 0.8 * 0.5
    Tensor pd = Tensor::from_data({1, 2, 1, 1}, {1.0f, 0.0f});
    Tensor pw = Tensor::from_data({1, 1, 1, 1}, {0.8f});
    Tensor psinv = Tensor::from_data({2, 2}, {0.25f, 0, 0, 1});
    CHECK(weighted_mahalanobis(pd, pw, psinv).item() == doctest::Approx(0.4).epsilon(1e-5));

    CHECK_THROWS_AS(weighted_mahalanobis(d, Tensor::zeros({1, 1, 2, 2}), sinv),
                    ContractViolation);
    CHECK_THROWS_AS(weighted_mahalanobis(d, ones, identity_sinv(3)), ContractViolation);
    Tensor tracked = identity_sinv(2);
    Tensor tricky = Tensor::from_data({2, 2}, {1, 0, 0, 1}, true);
    CHECK_THROWS_AS(weighted_mahalanobis(d, ones, tricky), ContractViolation);
}

TEST_CASE("weighted_mahalanobis is differentiable in diffs and weights") {
    SeededRng rng(2);
    Tensor d = random_tensor({1, 2, 3, 3}, rng, 0.2, 1.0, true);
    Tensor w = random_tensor({1, 1, 3, 3}, rng, 0.1, 0.9, true);
    Tensor sinv = identity_sinv(2);
    auto loss = [&] { return weighted_mahalanobis(d, w, sinv); };
    auto report = check_gradients(loss, {d, w}, rng);
    for (const auto& f : report.failures)
        MESSAGE("leaf ", f.leaf, " idx ", f.index, " analytic ", f.analytic, " fd ", f.fd);
    CHECK(report.ok());
}

TEST_CASE("image_domain_loss symmetry, zeros, and hand case") {
    SeededRng rng(3);
    Tensor d = random_tensor({1, 2, 5, 5}, rng, -1.0, 1.0);
    Tensor sinv = identity_sinv(2);

    // Pc = 0.5 with alpha 1 -> exactly balanced terms
    Tensor half = Tensor::full({1, 1, 5, 5}, 0.5f);
    CHECK(std::fabs(image_domain_loss(d, half, sinv, 1.0).item()) < 1e-6f);
    // general alpha: (1 - alpha) * 0.5 * mean Mahalanobis
    const double base = weighted_mahalanobis(d, Tensor::full({1, 1, 5, 5}, 1.0f), sinv).item();
    CHECK(image_domain_loss(d, half, sinv, 0.25).item() ==
          doctest::Approx((1.0 - 0.25) * 0.5 * base).epsilon(1e-4));

    // identical images -> ~0 regardless of Pc
    Tensor zero_d = Tensor::zeros({1, 2, 5, 5});
    Tensor pc = random_tensor({1, 1, 5, 5}, rng, 0.1, 0.9);
    CHECK(std::fabs(image_domain_loss(zero_d, pc, sinv, 1.0).item()) < 1e-5f);

    // one pixel hand case: -0.4 + 0.1
    Tensor pd = Tensor::from_data({1, 2, 1, 1}, {1.0f, 0.0f});
    Tensor pw = Tensor::from_data({1, 1, 1, 1}, {0.8f});
    Tensor psinv = Tensor::from_data({2, 2}, {0.25f, 0, 0, 1});
    CHECK(image_domain_loss(pd, pw, psinv, 1.0).item() == doctest::Approx(-0.3).epsilon(1e-5));
}

TEST_CASE("image_domain_loss gradient toward higher probability where differences exist") {
    // limit formula: dL/dPc(i,j) = -2 * mahalanobis(i,j) / (h*w) for alpha = 1
    SeededRng rng(4);
    Tensor d = random_tensor({1, 2, 4, 4}, rng, 0.3, 1.0);
    Tensor pc = random_tensor({1, 1, 4, 4}, rng, 0.2, 0.8, true);
    Tensor sinv = identity_sinv(2);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(image_domain_loss(d, pc, sinv, 1.0));
    }
    Tensor g = tape.grad(pc);
    for (int p = 0; p < 16; ++p) {
        const double a = d.data()[p], b = d.data()[16 + p];
        const double norm = std::sqrt(a * a + b * b);
        CHECK(g.data()[p] == doctest::Approx(-2.0 * norm / 16.0).epsilon(1e-3));
        CHECK(g.data()[p] < 0.0f);
    }
}

TEST_CASE("feature_domain_loss hand cases") {
    SeededRng rng(5);
    // equal features -> ~0
    Tensor f = random_tensor({1, 3, 4, 4}, rng, -1.0, 1.0);
    Tensor pc = random_tensor({1, 1, 8, 8}, rng, 0.1, 0.9);
    Tensor sinv = identity_sinv(3);
    CHECK(std::fabs(feature_domain_loss({f}, {f}, pc, {1.0}, {sinv}).item()) < 1e-5f);

    // single spatial cell, channel diff [1, 0], Pc = 0.8 -> -0.8 + 0.2
    Tensor f1 = Tensor::from_data({1, 2, 1, 1}, {1.0f, 0.0f});
    Tensor f2 = Tensor::zeros({1, 2, 1, 1});
    Tensor p8 = Tensor::from_data({1, 1, 1, 1}, {0.8f});
    CHECK(feature_domain_loss({f1}, {f2}, p8, {1.0}, {identity_sinv(2)}).item() ==
          doctest::Approx(-0.6).epsilon(1e-5));

    // Pc = 0.5 balances the terms
    Tensor g1 = random_tensor({1, 3, 4, 4}, rng, -1.0, 1.0);
    Tensor g2 = random_tensor({1, 3, 4, 4}, rng, -1.0, 1.0);
    Tensor half = Tensor::full({1, 1, 4, 4}, 0.5f);
    CHECK(std::fabs(feature_domain_loss({g1}, {g2}, half, {1.0}, {sinv}).item()) < 1e-5f);

    CHECK_THROWS_AS(feature_domain_loss({f1, f2}, {f1}, pc, {1.0}, {sinv}), ContractViolation);
}

TEST_CASE("context_consistency_loss values and nonnegativity") {
    SeededRng rng(6);
    Tensor f = random_tensor({1, 2, 3, 3}, rng, -1.0, 1.0);
    CHECK(context_consistency_loss({f}, {f}, {f}, {f}, true, false).item() == 0.0f);

    // single layer, single element: 0.3 vs 0.7 on one branch, equal other
    Tensor a = Tensor::from_data({1, 1, 1, 1}, {0.3f});
    Tensor a_aug = Tensor::from_data({1, 1, 1, 1}, {0.7f});
    Tensor b = Tensor::from_data({1, 1, 1, 1}, {0.5f});
    CHECK(context_consistency_loss({a}, {b}, {a_aug}, {b}, true, false).item() ==
          doctest::Approx(0.4).epsilon(1e-6));

    // raw-sum variant scales with the element count
    Tensor x = Tensor::full({1, 1, 2, 2}, 0.1f);
    Tensor y = Tensor::full({1, 1, 2, 2}, 0.3f);
    CHECK(context_consistency_loss({x}, {x}, {y}, {x}, false, false).item() ==
          doctest::Approx(0.8).epsilon(1e-5));
    CHECK(context_consistency_loss({x}, {x}, {y}, {x}, true, false).item() ==
          doctest::Approx(0.2).epsilon(1e-5));

    for (uint64_t s = 0; s < 8; ++s) {
        SeededRng r(s);
        Tensor f1 = random_tensor({1, 2, 4, 4}, r, -2.0, 2.0);
        Tensor f2 = random_tensor({1, 2, 4, 4}, r, -2.0, 2.0);
        Tensor h1 = random_tensor({1, 2, 4, 4}, r, -2.0, 2.0);
        Tensor h2 = random_tensor({1, 2, 4, 4}, r, -2.0, 2.0);
        CHECK(context_consistency_loss({f1}, {f2}, {h1}, {h2}, true, false).item() >= 0.0f);
    }
}

TEST_CASE("context_consistency_loss stop-gradient flag blocks the original branch") {
    SeededRng rng(7);
    Tensor orig = random_tensor({1, 2, 3, 3}, rng, -1.0, 1.0, true);
    Tensor aug = random_tensor({1, 2, 3, 3}, rng, -1.0, 1.0, true);

    Tape both;
    {
        TapeScope scope(both);
        both.backward(context_consistency_loss({orig}, {orig}, {aug}, {aug}, true, false));
    }
    double n = 0.0;
    Tensor g = both.grad(orig);
    for (int64_t i = 0; i < g.numel(); ++i) n += std::fabs(g.data()[i]);
    CHECK(n > 0.0);

    Tape stopped;
    {
        TapeScope scope(stopped);
        stopped.backward(context_consistency_loss({orig}, {orig}, {aug}, {aug}, true, true));
    }
    Tensor gs = stopped.grad(orig);
    double ns = 0.0;
    for (int64_t i = 0; i < gs.numel(); ++i) ns += std::fabs(gs.data()[i]);
    CHECK(ns == 0.0);
    Tensor ga = stopped.grad(aug);
    double na = 0.0;
    for (int64_t i = 0; i < ga.numel(); ++i) na += std::fabs(ga.data()[i]);
    CHECK(na > 0.0);
}

TEST_CASE("sparsity_penalty values, clamp, and symmetry") {
    auto penalty_at = [](float m) {
        return sparsity_penalty(Tensor::full({1, 1, 2, 2}, m)).item();
    };
    CHECK(penalty_at(0.5f) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(penalty_at(0.25f) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-5));
    const double clamped = 1.0 / std::sin(3.14159265358979323846 * 1e-3);
    CHECK(penalty_at(0.0001f) == doctest::Approx(clamped).epsilon(1e-3));
    CHECK(penalty_at(0.9999f) == doctest::Approx(clamped).epsilon(1e-3));
    CHECK(clamped == doctest::Approx(318.3).epsilon(1e-3));
    for (float m : {0.1f, 0.21f, 0.34f, 0.45f}) {
        CHECK(penalty_at(m) == doctest::Approx(penalty_at(1.0f - m)).epsilon(1e-6));
        CHECK(penalty_at(m) > 1.0);
    }
}

TEST_CASE("sparsity gradient vanishes at the symmetric minimum") {
    Tensor pc = Tensor::full({1, 1, 4, 4}, 0.5f, true);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sparsity_penalty(pc));
    }
    Tensor g = tape.grad(pc);
    for (int64_t i = 0; i < g.numel(); ++i)
        CHECK(std::fabs(g.data()[i]) < 1e-6f);
}

TEST_CASE("total_loss combination and toggles") {
    Tensor img = Tensor::scalar(-0.3f);
    Tensor feat = Tensor::scalar(-0.6f);
    Tensor ctx = Tensor::scalar(0.4f);
    Tensor sparse = Tensor::scalar(1.0f);

    LossWeights all;
    auto [total, why] = total_loss(img, feat, ctx, sparse, all);
    CHECK(total.item() == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(why.total == doctest::Approx(why.img + why.feat + why.ctx + why.sparse).epsilon(1e-6));

    LossWeights no_ctx = all;
    no_ctx.enable_ctx = false;
    auto [t2, w2] = total_loss(img, feat, Tensor(), sparse, no_ctx);
    CHECK(t2.item() == doctest::Approx(0.5 - 0.4).epsilon(1e-6));
    CHECK(w2.ctx == 0.0);

    LossWeights only_sparse;
    only_sparse.enable_img = only_sparse.enable_feat = only_sparse.enable_ctx = false;
    auto [t3, w3] = total_loss(Tensor(), Tensor(), Tensor(), sparse, only_sparse);
    CHECK(t3.item() == doctest::Approx(1.0));

    LossWeights none;
    none.enable_img = none.enable_feat = none.enable_ctx = none.enable_sparse = false;
    CHECK_THROWS_AS(total_loss(img, feat, ctx, sparse, none), ContractViolation);
    CHECK_THROWS_AS(total_loss(Tensor(), feat, ctx, sparse, all), ContractViolation);
}

TEST_CASE("Eq-5 style terms are homogeneous in the difference scale") {
    SeededRng rng(8);
    Tensor d = random_tensor({1, 3, 6, 6}, rng, 0.1, 1.0);
    Tensor pc = random_tensor({1, 1, 6, 6}, rng, 0.2, 0.8);
    Tensor sinv = identity_sinv(3);
    const double c = 3.7;
    const double base_c = weighted_mahalanobis(d, pc, sinv).item();
    const double base_nc =
        weighted_mahalanobis(d, add_scalar(scale(pc, -1.0), 1.0), sinv).item();
    Tensor ds = scale(d, c);
    const double scaled_c = weighted_mahalanobis(ds, pc, sinv).item();
    const double scaled_nc =
        weighted_mahalanobis(ds, add_scalar(scale(pc, -1.0), 1.0), sinv).item();
    CHECK(scaled_c == doctest::Approx(c * base_c).epsilon(1e-4));
    CHECK(scaled_nc == doctest::Approx(c * base_nc).epsilon(1e-4));
}

TEST_CASE("feature_sinv_diag whitens per-channel variances") {
    SeededRng rng(9);
    const int64_t ch = 4, h = 16, w = 16;
    std::vector<float> a(static_cast<size_t>(ch * h * w)), b(a.size());
    const double sigmas[4] = {0.5, 1.0, 2.0, 0.1};
    for (int64_t c = 0; c < ch; ++c)
        for (int64_t i = 0; i < h * w; ++i) {
            const double noise = sigmas[c] * rng.gaussian();
            a[static_cast<size_t>(c * h * w + i)] = static_cast<float>(noise);
            b[static_cast<size_t>(c * h * w + i)] = 0.0f;
        }
    Tensor f1 = Tensor::from_data({1, ch, h, w}, a);
    Tensor f2 = Tensor::from_data({1, ch, h, w}, b);
    Tensor sinv = feature_sinv_diag(f1, f2);
    REQUIRE(sinv.shape() == Shape{ch, ch});
    for (int64_t i = 0; i < ch; ++i)
        for (int64_t j = 0; j < ch; ++j) {
            const float v = sinv.data()[i * ch + j];
            if (i == j)
                CHECK(v == doctest::Approx(1.0 / (sigmas[i] * sigmas[i])).epsilon(0.35));
            else
                CHECK(v == 0.0f);
        }
    CHECK_FALSE(sinv.requires_grad());
}

TEST_CASE("gradients of the combined loss flow through networks (small instance)") {
    // 8x8, b=2, L=1 instance mirroring the acceptance gradient suite
    SeededRng rng(10);
    const int h = 8, w = 8;
    Tensor diffs = random_tensor({1, 2, h, w}, rng, -0.5, 0.5);
    Tensor id_map = random_tensor({1, 1, h, w}, rng, 0.0, 2.0);
    Tensor rgb1 = random_tensor({1, 3, h, w}, rng, 0.0, 1.0);
    Tensor rgb2 = random_tensor({1, 3, h, w}, rng, 0.0, 1.0);
    Tensor rgb1a = random_tensor({1, 3, h, w}, rng, 0.0, 1.0);
    Tensor rgb2a = random_tensor({1, 3, h, w}, rng, 0.0, 1.0);
    Tensor sinv = identity_sinv(2);

    DcpgConfig dcfg{.blocks = 1, .channels = 4, .kernel_size = 3, .input_channels = 1, .seed = 1};
    DcpgNetwork dcpg(dcfg);
    DfeConfig fcfg{.stages = 1, .trainable = true, .seed = 2};
    DfeNetwork dfe(fcfg);

    Tensor fsinv;
    {
        NoGradScope no_grad;
        auto f1 = dfe.forward(rgb1);
        auto f2 = dfe.forward(rgb2);
        fsinv = feature_sinv_diag(f1[0], f2[0]);
    }

    auto loss = [&] {
        Tensor pc = dcpg.forward(id_map);
        auto f1 = dfe.forward(rgb1);
        auto f2 = dfe.forward(rgb2);
        auto f1a = dfe.forward(rgb1a);
        auto f2a = dfe.forward(rgb2a);
        Tensor img = image_domain_loss(diffs, pc, sinv, 1.0);
        Tensor feat = feature_domain_loss(f1, f2, pc, {1.0}, {fsinv});
        Tensor ctx = context_consistency_loss(f1, f2, f1a, f2a, true, false);
        Tensor sparse = sparsity_penalty(pc);
        return total_loss(img, feat, ctx, sparse, LossWeights{}).first;
    };

    std::vector<Tensor> leaves = dcpg.parameters();
    auto dfe_params = dfe.parameters();
    leaves.insert(leaves.end(), dfe_params.begin(), dfe_params.end());
    auto report = check_gradients(loss, leaves, rng, 1e-3, 1e-3, 6);
    for (const auto& f : report.failures)
        MESSAGE("leaf ", f.leaf, " idx ", f.index, " analytic ", f.analytic, " fd ", f.fd);
    CHECK(report.ok());
}
