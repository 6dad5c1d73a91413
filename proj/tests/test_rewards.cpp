#include "charforge/errors.hpp"
#include "charforge/rewards.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace charforge;

namespace {

const CharacterPack& pack() {
    static const CharacterPack p = build_pack(make_character(1), 1);
    return p;
}

ToyImage random_image(Rng& rng) {
    ToyImage img;
    for (float& p : img.pixels()) {
        p = static_cast<float>(rng.uniform());
    }
    return img;
}

double dot(const EmbedVector& a, const EmbedVector& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.values.size(); ++i) {
        s += a.values[i] * b.values[i];
    }
    return s;
}

// Weighted reward written out with literal default weights.
double eq6(double r_align, double r_consist, double r_div, double p_sim) {
    return 0.45 * r_align + 0.30 * r_consist + 0.10 * r_div + 0.15 * p_sim;
}

double pair_sum_oracle(const std::vector<ToyImage>& g) {
    double s = 0.0;
    for (size_t i = 0; i < g.size(); ++i) {
        for (size_t j = 0; j < g.size(); ++j) {
            if (i != j) {
                s += perceptual_distance(g[i], g[j]);
            }
        }
    }
    const double n = static_cast<double>(g.size());
    return s / (n * (n - 1));
}

}  // namespace

TEST_CASE("total reward worked examples") {
    const RewardWeights w;
    CHECK(total_reward({1, 1, 0, 0}, w) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(total_reward({0.8, 1, 0.2, -0.05}, w) == doctest::Approx(0.6725).epsilon(1e-12));
    CHECK(total_reward({0, 0, 0, 0}, w) == 0.0);
}

TEST_CASE("total reward matches an independent evaluation on random tuples") {
    Rng rng(1);
    const RewardWeights w;
    for (int i = 0; i < 1000; ++i) {
        const RewardParts p{rng.uniform(-1, 1), rng.bernoulli(0.5) ? 1.0 : 0.0, rng.uniform(), -rng.uniform(0, 0.5)};
        CHECK(std::abs(total_reward(p, w) - eq6(p.r_align, p.r_consist, p.r_div, p.p_sim)) < 1e-12);
    }
}

TEST_CASE("doubling one weight doubles only its contribution") {
    const RewardParts p{0.7, 1.0, 0.3, -0.1};
    const RewardWeights base;
    const double t = total_reward(p, base);
    RewardWeights w = base;
    w.alpha *= 2;
    CHECK(total_reward(p, w) - t == doctest::Approx(base.alpha * p.r_align).epsilon(1e-12));
    w = base;
    w.beta_vqa *= 2;
    CHECK(total_reward(p, w) - t == doctest::Approx(base.beta_vqa * p.r_consist).epsilon(1e-12));
    w = base;
    w.gamma *= 2;
    CHECK(total_reward(p, w) - t == doctest::Approx(base.gamma * p.r_div).epsilon(1e-12));
    w = base;
    w.delta *= 2;
    CHECK(total_reward(p, w) - t == doctest::Approx(base.delta * p.p_sim).epsilon(1e-12));
}

TEST_CASE("similarity penalty branches") {
    const Thresholds th;
    CHECK(similarity_penalty(0.95, th) == doctest::Approx(-0.05).epsilon(1e-12));
    CHECK(similarity_penalty(0.70, th) == 0.0);
    CHECK(similarity_penalty(0.30, th) == doctest::Approx(-0.20).epsilon(1e-12));
    CHECK(similarity_penalty(0.9, th) == 0.0);
    CHECK(similarity_penalty(0.5, th) == 0.0);
    for (double tau : {0.9, 0.5}) {
        CHECK(std::abs(similarity_penalty(tau + 1e-6, th)) <= 1e-6 + 1e-15);
        CHECK(std::abs(similarity_penalty(tau - 1e-6, th)) <= 1e-6 + 1e-15);
    }
    for (int i = 0; i <= 2000; ++i) {
        const double s = -1.0 + i * 0.001;
        const double p = similarity_penalty(s, th);
        CHECK(p <= 0.0);
        CHECK((p == 0.0) == (s >= 0.5 && s <= 0.9));
    }
}

TEST_CASE("trainset penalty uses the max structure cosine") {
    const BuiltinScorer scorer;
    const auto train = pack().core_image_list();
    const ToyImage own = train[3];
    const auto ts = trainset_penalty(own, train, Thresholds{}, scorer);
    CHECK(ts.s_max == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(ts.penalty == doctest::Approx(-0.1).epsilon(1e-9));

    Rng rng(2);
    const ToyImage img = random_image(rng);
    double best = -2.0;
    for (const auto& t : train) {
        best = std::max(best, dot(scorer.embed(img, EncoderKind::structure), scorer.embed(t, EncoderKind::structure)));
    }
    const auto r = trainset_penalty(img, train, Thresholds{}, scorer);
    CHECK(r.s_max == doctest::Approx(best).epsilon(1e-12));
    CHECK(r.penalty == doctest::Approx(similarity_penalty(best, Thresholds{})).epsilon(1e-12));
    CHECK_THROWS_AS(trainset_penalty(img, std::vector<ToyImage>{}, Thresholds{}, scorer), InvalidArgument);
}

TEST_CASE("alignment reward") {
    const BuiltinScorer scorer;
    for (const auto& p : all_prompts(pack().spec.char_id)) {
        CHECK(alignment_reward(render_scene(pack().spec, p, 0), p, pack(), scorer) ==
              doctest::Approx(1.0).epsilon(1e-9));
    }
    Rng rng(3);
    const PromptSpec p{pack().spec.char_id, Pose::right, Tone::dim};
    for (int i = 0; i < 1000; ++i) {
        const ToyImage img = random_image(rng);
        const double r = alignment_reward(img, p, pack(), scorer);
        CHECK(r >= -1.0);
        CHECK(r <= 1.0);
        if (i < 20) {
            CHECK(r == doctest::Approx(dot(scorer.embed(img, EncoderKind::semantic), encode_prompt(p, pack(), scorer)))
                           .epsilon(1e-12));
        }
    }
}

TEST_CASE("consistency reward") {
    for (const auto& item : pack().vqa) {
        const ToyImage& img = pack().core_images[static_cast<size_t>(item.image_index)].image;
        CHECK(consistency_reward(img, item) == 1.0);
        CHECK(consistency_reward(ToyImage::filled(0.0f), item) == 0.0);
        VqaItem wrong = item;
        wrong.answer = "definitely-not-an-answer";
        CHECK(consistency_reward(img, wrong) == 0.0);
    }
}

TEST_CASE("group diversity") {
    const BuiltinScorer scorer;
    const std::vector<ToyImage> same(8, ToyImage::filled(0.3f));
    CHECK(group_diversity(same, scorer) == 0.0);
    const std::vector<ToyImage> pair{ToyImage::filled(0.0f), ToyImage::filled(0.5f)};
    CHECK(group_diversity(pair, scorer) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK_THROWS_AS(group_diversity(std::vector<ToyImage>{ToyImage{}}, scorer), InvalidArgument);

    Rng rng(4);
    std::vector<ToyImage> g;
    for (int i = 0; i < 8; ++i) {
        g.push_back(random_image(rng));
    }
    const double d = group_diversity(g, scorer);
    CHECK(d == doctest::Approx(pair_sum_oracle(g)).epsilon(1e-12));
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    std::mt19937 shuffler(5);
    for (int i = 0; i < 50; ++i) {
        std::shuffle(g.begin(), g.end(), shuffler);
        CHECK(group_diversity(g, scorer) == doctest::Approx(d).epsilon(1e-12));
    }
}

TEST_CASE("character reward breakdown") {
    const BuiltinScorer scorer;
    const CharacterReward reward(pack(), scorer);
    const PromptSpec prompt{pack().spec.char_id, Pose::center, Tone::bright};
    Rng img_rng(6);
    std::vector<ToyImage> group{render_scene(pack().spec, prompt, 0), render_scene(pack().spec, prompt, 3)};
    for (int i = 0; i < 6; ++i) {
        group.push_back(random_image(img_rng));
    }
    Rng r1(7);
    const RewardBreakdown b = reward.score(group, prompt, r1);
    REQUIRE(b.samples.size() == group.size());
    CHECK(b.r_div == doctest::Approx(group_diversity(group, scorer)).epsilon(1e-12));
    for (size_t i = 0; i < group.size(); ++i) {
        const auto& s = b.samples[i];
        CHECK((s.r_consist == 0.0 || s.r_consist == 1.0));
        CHECK(s.p_sim <= 0.0);
        CHECK(s.r_align == doctest::Approx(alignment_reward(group[i], prompt, pack(), scorer)).epsilon(1e-12));
        CHECK(std::abs(s.total - eq6(s.r_align, s.r_consist, b.r_div, s.p_sim)) < 1e-12);
        CHECK(s.p_sim == doctest::Approx(similarity_penalty(s.s_max, Thresholds{})).epsilon(1e-12));
    }
    CHECK(b.samples[0].r_consist == 1.0);
    CHECK(b.samples[0].r_align == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(b.totals().size() == group.size());

    Rng r2(7);
    const RewardBreakdown again = reward.score(group, prompt, r2);
    for (size_t i = 0; i < group.size(); ++i) {
        CHECK(again.samples[i].total == b.samples[i].total);
    }

    CHECK_THROWS_AS(reward.score(group, PromptSpec{"stranger", Pose::left, Tone::bright}, r1), IdentityMismatch);
}

TEST_CASE("averaged VQA mode scores every pack item") {
    const BuiltinScorer scorer;
    const CharacterReward reward(pack(), scorer, {}, {}, RewardOptions{true});
    const PromptSpec prompt{pack().spec.char_id, Pose::left, Tone::bright};
    const std::vector<ToyImage> group{ToyImage::filled(0.0f), render_scene(pack().spec, prompt, 0)};
    Rng rng(8);
    const RewardBreakdown b = reward.score(group, prompt, rng);
    CHECK(b.samples[0].r_consist == 0.0);
    double expect = 0.0;
    for (const auto& item : pack().vqa) {
        expect += consistency_reward(group[1], item);
    }
    CHECK(b.samples[1].r_consist == doctest::Approx(expect / static_cast<double>(pack().vqa.size())).epsilon(1e-12));
}

TEST_CASE("reward config validation and JSON") {
    const RewardWeights w;
    CHECK(w.alpha == 0.45);
    CHECK(w.beta_vqa == 0.30);
    CHECK(w.gamma == 0.10);
    CHECK(w.delta == 0.15);
    CHECK(Thresholds{}.tau_high == 0.9);
    CHECK(Thresholds{}.tau_low == 0.5);
    CHECK(weights_from_json(to_json(w)) == w);
    CHECK(thresholds_from_json(to_json(Thresholds{})) == Thresholds{});
    CHECK_THROWS_AS(weights_from_json({{"gamma", -0.1}}), SchemaError);
    CHECK_THROWS_AS(thresholds_from_json({{"tau_low", 0.95}}), SchemaError);
}
