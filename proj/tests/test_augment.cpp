#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "changedet/augment.hpp"
#include "changedet/errors.hpp"

using namespace changedet;

namespace {

MultiBandImage random_rgb(int h, int w, SeededRng& rng) {
    MultiBandImage img = MultiBandImage::zeros(h, w, 3);
    for (float& v : img.values) v = static_cast<float>(rng.next_double());
    return img;
}

bool images_equal(const MultiBandImage& a, const MultiBandImage& b) {
    return a.values.size() == b.values.size() &&
           std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("degenerate policy is a bit-exact identity") {
    SeededRng rng(1);
    MultiBandImage img = random_rgb(9, 7, rng);
    SeededRng jitter_rng(2);
    MultiBandImage out = color_jitter(img, AugmentationPolicy::identity(), jitter_rng);
    CHECK(images_equal(img, out));

    // composing it any number of times stays the identity
    MultiBandImage acc = img;
    for (int i = 0; i < 5; ++i) {
        SeededRng r(static_cast<uint64_t>(i));
        acc = add_gaussian_noise(color_jitter(acc, AugmentationPolicy::identity(), r), 0.0f, r);
    }
    CHECK(images_equal(img, acc));
}

TEST_CASE("brightness-only factor scales values") {
    AugmentationPolicy policy = AugmentationPolicy::identity();
    policy.brightness_lo = policy.brightness_hi = 1.2f;
    MultiBandImage img = MultiBandImage::zeros(1, 1, 3);
    for (float& v : img.values) v = 0.5f;
    SeededRng rng(3);
    MultiBandImage out = color_jitter(img, policy, rng);
    for (float v : out.values) CHECK(v == doctest::Approx(0.6).epsilon(1e-6));

    // clamped at 1
    for (float& v : img.values) v = 0.9f;
    SeededRng rng2(3);
    MultiBandImage hi = color_jitter(img, policy, rng2);
    for (float v : hi.values) CHECK(v == 1.0f);
}

TEST_CASE("gray images are fixed points of saturation and hue jitter") {
    AugmentationPolicy policy = AugmentationPolicy::identity();
    policy.saturation_lo = 0.5f;
    policy.saturation_hi = 1.5f;
    policy.hue_lo = -0.3f;
    policy.hue_hi = 0.3f;
    MultiBandImage gray = MultiBandImage::zeros(4, 4, 3);
    for (float& v : gray.values) v = 0.37f;
    SeededRng rng(4);
    MultiBandImage out = color_jitter(gray, policy, rng);
    for (size_t i = 0; i < out.values.size(); ++i)
        CHECK(out.values[i] == doctest::Approx(0.37).epsilon(1e-6));
}

TEST_CASE("contrast blends toward the per-image mean") {
    AugmentationPolicy policy = AugmentationPolicy::identity();
    policy.contrast_lo = policy.contrast_hi = 0.5f;
    MultiBandImage img = MultiBandImage::zeros(1, 2, 3);
    for (int c = 0; c < 3; ++c) {
        img.at(0, 0, c) = 0.2f;
        img.at(0, 1, c) = 0.8f;
    }
    SeededRng rng(5);
    MultiBandImage out = color_jitter(img, policy, rng);  // mean 0.5
    for (int c = 0; c < 3; ++c) {
        CHECK(out.at(0, 0, c) == doctest::Approx(0.35).epsilon(1e-6));
        CHECK(out.at(0, 1, c) == doctest::Approx(0.65).epsilon(1e-6));
    }
}

TEST_CASE("hue rotation permutes toward the expected sector") {
    // pure red shifted by +1/3 of the hue circle becomes pure green
    AugmentationPolicy policy = AugmentationPolicy::identity();
    policy.hue_lo = policy.hue_hi = 1.0f / 3.0f;
    MultiBandImage red = MultiBandImage::zeros(1, 1, 3);
    red.at(0, 0, 0) = 1.0f;
    SeededRng rng(6);
    MultiBandImage out = color_jitter(red, policy, rng);
    CHECK(out.at(0, 0, 0) == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(out.at(0, 0, 1) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(out.at(0, 0, 2) == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("color_jitter rejects non-3-channel input") {
    MultiBandImage mono = MultiBandImage::zeros(2, 2, 1);
    SeededRng rng(7);
    CHECK_THROWS_AS(color_jitter(mono, AugmentationPolicy{}, rng), ContractViolation);
}

TEST_CASE("gaussian noise statistics and determinism") {
    SeededRng rng(8);
    MultiBandImage img = MultiBandImage::zeros(200, 200, 3);
    for (float& v : img.values) v = 0.5f;  // mid-range, clamp never engages

    MultiBandImage same = add_gaussian_noise(img, 0.0f, rng);
    CHECK(images_equal(img, same));

    const float sigma = 0.02f;
    SeededRng a(9), b(9);
    MultiBandImage na = add_gaussian_noise(img, sigma, a);
    MultiBandImage nb = add_gaussian_noise(img, sigma, b);
    CHECK(images_equal(na, nb));

    // empirical std over 1.2e5 draws within 5% of sigma
    double m = 0.0;
    for (size_t i = 0; i < na.values.size(); ++i)
        m += static_cast<double>(na.values[i]) - img.values[i];
    m /= static_cast<double>(na.values.size());
    double var = 0.0;
    for (size_t i = 0; i < na.values.size(); ++i) {
        const double d = (static_cast<double>(na.values[i]) - img.values[i]) - m;
        var += d * d;
    }
    const double stddev = std::sqrt(var / static_cast<double>(na.values.size() - 1));
    CHECK(stddev == doctest::Approx(sigma).epsilon(0.05));
    CHECK_THROWS_AS(add_gaussian_noise(img, -0.1f, rng), ContractViolation);
}

TEST_CASE("augment_pair substreams are reproducible per iteration") {
    SeededRng rng(10);
    MultiBandImage i1 = random_rgb(12, 12, rng);
    MultiBandImage i2 = random_rgb(12, 12, rng);
    AugmentationPolicy policy;  // defaults

    auto [a1, a2] = augment_pair(i1, i2, policy, 42, 7);
    auto [b1, b2] = augment_pair(i1, i2, policy, 42, 7);
    CHECK(images_equal(a1, b1));
    CHECK(images_equal(a2, b2));

    auto [c1, c2] = augment_pair(i1, i2, policy, 42, 8);
    CHECK_FALSE(images_equal(a1, c1));
    CHECK_FALSE(images_equal(a2, c2));

    // branches draw independently
    CHECK_FALSE(images_equal(a1, a2));

    auto [d1, d2] = augment_pair(i1, i2, AugmentationPolicy::identity(), 42, 7);
    CHECK(images_equal(d1, i1));
    CHECK(images_equal(d2, i2));
}

TEST_CASE("outputs stay inside [0,1] and the sequence is a pure function of the seed") {
    SeededRng rng(11);
    MultiBandImage i1 = random_rgb(8, 8, rng);
    MultiBandImage i2 = random_rgb(8, 8, rng);
    AugmentationPolicy policy;
    policy.noise_sigma = 0.3f;  // exaggerated, to exercise the clamp

    auto hash_sequence = [&](uint64_t seed) {
        uint64_t h = 1469598103934665603ull;
        for (int64_t t = 0; t < 80; ++t) {
            auto [a1, a2] = augment_pair(i1, i2, policy, seed, t);
            for (const MultiBandImage* img : {&a1, &a2})
                for (float v : img->values) {
                    CHECK(v >= 0.0f);
                    CHECK(v <= 1.0f);
                    uint32_t bits;
                    std::memcpy(&bits, &v, 4);
                    h = (h ^ bits) * 1099511628211ull;
                }
        }
        return h;
    };
    CHECK(hash_sequence(5) == hash_sequence(5));
    CHECK(hash_sequence(5) != hash_sequence(6));
}
