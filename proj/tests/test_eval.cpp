#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "adadistill/eval.hpp"
#include "oracles.hpp"

using namespace adadistill;

namespace {

ScoreSet random_scores(std::mt19937_64& eng, std::size_t max_each = 500) {
    std::uniform_int_distribution<std::size_t> pick_n(1, max_each);
    // stay strictly inside (-1,1) even after snapping: a score at exactly
    // +1 could never be rejected by any candidate threshold
    std::uniform_real_distribution<double> u(-0.979, 0.979);
    std::bernoulli_distribution coarse(0.3);
    ScoreSet s;
    s.genuine.resize(pick_n(eng));
    s.impostor.resize(pick_n(eng));
    for (double& x : s.genuine) x = u(eng);
    for (double& x : s.impostor) x = u(eng);
    if (coarse(eng)) {
        // snap to a coarse grid so ties and duplicates actually occur
        for (double& x : s.genuine) x = std::round(x * 50.0) / 50.0;
        for (double& x : s.impostor) x = std::round(x * 50.0) / 50.0;
    }
    return s;
}

} // namespace

TEST_CASE("score_pairs basics") {
    Mat emb(3, 2, {1.0, 0.0, 0.0, 1.0, 3.0, 0.0});
    PairList pairs;
    pairs.genuine = {{0, 2}};  // same direction, different scale
    pairs.impostor = {{0, 1}};
    ScoreSet s = score_pairs(emb, pairs);
    CHECK(s.genuine[0] == Catch::Approx(1.0).margin(1e-12));
    CHECK(s.impostor[0] == Catch::Approx(0.0).margin(1e-12));

    PairList bad;
    bad.genuine = {{0, 7}};
    CHECK_THROWS_AS(score_pairs(emb, bad), IndexOutOfRangeError);
}

TEST_CASE("verification accuracy on separable and indistinguishable sets") {
    ScoreSet separable{{0.9, 0.8}, {0.1, 0.2}};
    auto [acc, thr] = verification_accuracy(separable);
    CHECK(acc == 1.0);
    CHECK(thr > 0.2);
    CHECK(thr < 0.8);

    ScoreSet same{{0.3, 0.6}, {0.3, 0.6}};
    auto [acc2, thr2] = verification_accuracy(same);
    CHECK(acc2 == 0.5);

    ScoreSet empty{{}, {0.1}};
    CHECK_THROWS_AS(verification_accuracy(empty), EmptyScoresError);
}

TEST_CASE("verification accuracy equals brute force exactly") {
    std::mt19937_64 eng(301);
    for (int trial = 0; trial < 60; ++trial) {
        ScoreSet s = random_scores(eng);
        auto [acc, thr] = verification_accuracy(s);
        oracles::BruteAccuracy want = oracles::brute_verification_accuracy(s.genuine, s.impostor);
        CHECK(acc == want.accuracy);
        CHECK(thr == want.threshold);
    }
}

TEST_CASE("verification accuracy beats both trivial thresholds") {
    std::mt19937_64 eng(302);
    for (int trial = 0; trial < 30; ++trial) {
        ScoreSet s = random_scores(eng, 200);
        auto [acc, thr] = verification_accuracy(s);
        const double total = double(s.genuine.size() + s.impostor.size());
        const double floor_acc =
            double(std::max(s.genuine.size(), s.impostor.size())) / total;
        CHECK(acc >= floor_acc);
    }
}

TEST_CASE("verification accuracy is permutation invariant") {
    std::mt19937_64 eng(303);
    ScoreSet s = random_scores(eng, 200);
    auto [acc, thr] = verification_accuracy(s);
    ScoreSet shuffled = s;
    std::shuffle(shuffled.genuine.begin(), shuffled.genuine.end(), eng);
    std::shuffle(shuffled.impostor.begin(), shuffled.impostor.end(), eng);
    auto [acc2, thr2] = verification_accuracy(shuffled);
    CHECK(acc == acc2);
    CHECK(thr == thr2);
}

TEST_CASE("tar_at_far operating points") {
    // every genuine above every impostor: perfect tar at any achievable far
    ScoreSet clean{{0.9, 0.8, 0.85}, {0.5, 0.4, 0.3, 0.2}};
    for (double far : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        RocPoint p = tar_at_far(clean, far);
        CHECK(p.tar == 1.0);
        CHECK(p.far <= far);
    }

    RocPoint degenerate = tar_at_far(clean, 1.0);
    CHECK(degenerate.threshold == -1.0);
    CHECK(degenerate.tar == 1.0);
    CHECK(degenerate.far == 1.0);

    // four impostors cannot resolve far 0.1; flagged conservative point
    RocPoint flagged = tar_at_far(clean, 0.1);
    CHECK(flagged.unreliable_far);
    CHECK(flagged.far == 0.0);
    RocPoint trusted = tar_at_far(clean, 0.25);
    CHECK_FALSE(trusted.unreliable_far);

    CHECK_THROWS_AS(tar_at_far(clean, -0.1), InvalidSpecError);
    CHECK_THROWS_AS(tar_at_far(clean, 1.5), InvalidSpecError);
    ScoreSet empty{{0.5}, {}};
    CHECK_THROWS_AS(tar_at_far(empty, 0.5), EmptyScoresError);
}

TEST_CASE("tar_at_far equals brute force exactly") {
    std::mt19937_64 eng(304);
    std::uniform_real_distribution<double> pick_far(0.0, 1.0);
    for (int trial = 0; trial < 60; ++trial) {
        ScoreSet s = random_scores(eng);
        const double far_target = trial % 3 == 0 ? pick_far(eng) : (trial % 3 == 1 ? 0.01 : 0.1);
        RocPoint got = tar_at_far(s, far_target);
        oracles::BruteRoc want = oracles::brute_tar_at_far(s.genuine, s.impostor, far_target);
        CHECK(got.threshold == want.threshold);
        CHECK(got.tar == want.tar);
        CHECK(got.far == want.far);
    }
}

TEST_CASE("tar_at_far is non-decreasing in the target") {
    std::mt19937_64 eng(305);
    for (int trial = 0; trial < 20; ++trial) {
        ScoreSet s = random_scores(eng, 300);
        double prev = -1.0;
        for (double far : {0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 0.8, 1.0}) {
            RocPoint p = tar_at_far(s, far);
            CHECK(p.tar >= prev);
            CHECK(p.far <= far);  // conservative rule never overshoots
            prev = p.tar;
        }
    }
}

TEST_CASE("roc_curve covers the admissible impostor counts") {
    ScoreSet s{{0.9, 0.2}, {0.5, 0.4, 0.1}};
    auto points = roc_curve(s);
    REQUIRE(points.size() == 4);
    CHECK(points.front().far == 0.0);
    CHECK(points.back().far == 1.0);
}

TEST_CASE("rank1 identification basics and tie-breaking") {
    Mat gallery(3, 2, {1.0, 0.0, 0.0, 1.0, -1.0, 0.0});
    std::vector<std::size_t> gallery_labels{0, 1, 2};

    // probes identical to gallery rows
    double all = rank1_identification(gallery, gallery_labels, gallery, gallery_labels);
    CHECK(all == 1.0);

    // disjoint labels can never match
    std::vector<std::size_t> other{7, 8, 9};
    CHECK(rank1_identification(gallery, other, gallery, gallery_labels) == 0.0);

    // two identical gallery rows with different labels: the lower index wins
    Mat dup_gallery(2, 2, {1.0, 0.0, 1.0, 0.0});
    std::vector<std::size_t> dup_labels{4, 5};
    Mat probe(1, 2, {1.0, 0.0});
    std::vector<std::size_t> wants_four{4};
    std::vector<std::size_t> wants_five{5};
    CHECK(rank1_identification(probe, wants_four, dup_gallery, dup_labels) == 1.0);
    CHECK(rank1_identification(probe, wants_five, dup_gallery, dup_labels) == 0.0);

    CHECK_THROWS_AS(rank1_identification(probe, wants_four, Mat(0, 2), {}), EmptyGalleryError);
    CHECK_THROWS_AS(rank1_identification(Mat(0, 2), {}, gallery, gallery_labels),
                    InsufficientSamplesError);
}

TEST_CASE("rank1 equals the exhaustive scan exactly") {
    std::mt19937_64 eng(306);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick_n(1, 30);
    std::uniform_int_distribution<std::size_t> pick_label(0, 4);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t np = pick_n(eng), ng = pick_n(eng), d = 4;
        Mat probes(np, d), gallery(ng, d);
        for (double& x : probes.data) x = g(eng);
        for (double& x : gallery.data) x = g(eng);
        std::vector<std::size_t> pl(np), gl(ng);
        for (auto& y : pl) y = pick_label(eng);
        for (auto& y : gl) y = pick_label(eng);
        const double got = rank1_identification(probes, pl, gallery, gl);
        CHECK(got == oracles::brute_rank1(probes, pl, gallery, gl));
    }
}

TEST_CASE("estimated class centers are normalized means; degenerates reported") {
    Mat emb(4, 2, {2.0, 0.0, 0.0, 2.0, 1.0, -1.0, -1.0, 1.0});
    std::vector<std::size_t> labels{0, 0, 1, 1};
    CenterEstimate est = estimate_class_centers(emb, labels, 3);

    // class 0: mean of (1,0) and (0,1) normalized
    CHECK(est.centers(0, 0) == Catch::Approx(1.0 / std::sqrt(2.0)).margin(1e-12));
    CHECK(est.centers(0, 1) == Catch::Approx(1.0 / std::sqrt(2.0)).margin(1e-12));
    // class 1: antipodal pair cancels; class 2: no samples
    CHECK(est.degenerate_classes == std::vector<std::size_t>{1, 2});
    CHECK(est.centers(1, 0) == 0.0);
    CHECK(est.centers(2, 0) == 0.0);
}

TEST_CASE("distribution summary lists and means") {
    // one tight class, one spread class
    Mat emb(5, 2, {1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.1, 1.0, -0.1, 1.0});
    std::vector<std::size_t> labels{0, 0, 1, 1, 1};
    CenterBank bank(Mat(2, 2, {1.0, 0.0, 0.0, 1.0}));

    DistributionSummary d = center_vs_sample_distributions(emb, labels, bank);
    CHECK(d.sample_sample.size() == 1 + 3);  // C(2,2) + C(3,2)
    CHECK(d.sample_center.size() == 5);
    CHECK(d.sample_sample[0] == Catch::Approx(1.0).margin(1e-12));  // identical pair
    CHECK(d.mean_sample_center <= 1.0);
    CHECK(d.mean_sample_center > d.mean_sample_sample - 1e-12);

    std::vector<std::size_t> lonely{0, 0, 1, 1, 0};
    Mat emb2 = emb;
    std::vector<std::size_t> single{0, 0, 0, 0, 1};
    CHECK_THROWS_AS(center_vs_sample_distributions(emb2, single, bank),
                    InsufficientSamplesError);
}

TEST_CASE("identical cluster pinned to its center scores 1 everywhere") {
    Mat emb(3, 2, {0.6, 0.8, 0.6, 0.8, 0.6, 0.8});
    std::vector<std::size_t> labels{0, 0, 0};
    CenterBank bank(Mat(1, 2, {0.6, 0.8}));
    DistributionSummary d = center_vs_sample_distributions(emb, labels, bank);
    for (double s : d.sample_sample) CHECK(s == Catch::Approx(1.0).margin(1e-12));
    for (double s : d.sample_center) CHECK(s == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("metric records serialize to the flat report schema") {
    MetricRecord r;
    r.name = "verification_accuracy";
    r.value = 0.975;
    r.parameters["protocol"] = "best_threshold_single_fold";
    r.genuine_pairs = 500;
    r.impostor_pairs = 2000;
    MetricRecord r2;
    r2.name = "tar_at_far";
    r2.value = 0.9;
    r2.parameters["far_target"] = 0.01;
    r2.warnings.push_back("impostor count too small for target");

    nlohmann::json arr = metrics_to_json({r, r2});
    REQUIRE(arr.is_array());
    REQUIRE(arr.size() == 2);
    CHECK(arr[0]["metric"] == "verification_accuracy");
    CHECK(arr[0]["pair_counts"]["genuine"] == 500);
    CHECK(arr[1]["parameters"]["far_target"] == 0.01);
    CHECK(arr[1]["warnings"].size() == 1);
}
