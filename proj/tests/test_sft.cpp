#include "charforge/errors.hpp"
#include "charforge/sft.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>

using namespace charforge;

namespace {

class UniformLM final : public LanguageModel {
public:
    explicit UniformLM(int v) : v_(v) {}
    int vocab_size() const override { return v_; }
    Eigen::VectorXd next_token_logprobs(std::span<const int>) const override {
        return Eigen::VectorXd::Constant(v_, -std::log(static_cast<double>(v_)));
    }

private:
    int v_;
};

// Puts all mass on target[context.size() - prompt_len].
class OracleLM final : public LanguageModel {
public:
    OracleLM(int v, size_t prompt_len, std::vector<int> target) : v_(v), prompt_len_(prompt_len), target_(target) {}
    int vocab_size() const override { return v_; }
    Eigen::VectorXd next_token_logprobs(std::span<const int> context) const override {
        Eigen::VectorXd lp = Eigen::VectorXd::Constant(v_, -1e9);
        lp[target_[context.size() - prompt_len_]] = 0.0;
        return lp;
    }

private:
    int v_;
    size_t prompt_len_;
    std::vector<int> target_;
};

const CharacterPack& pack() {
    static const CharacterPack p = build_pack(make_character(0), 0);
    return p;
}

double family_mean(const LanguageModel& lm, const SftData& data, const MixedBatch& b, TaskKind kind, int& count) {
    double sum = 0.0;
    count = 0;
    for (size_t i : b.vlm) {
        const TaskSample& s = data.vlm[i];
        if (s.kind == kind) {
            sum += ce_loss(lm, s.prompt, s.target);
            ++count;
        }
    }
    return count == 0 ? 0.0 : sum / count;
}

MixedBatch full_batch(const SftData& data, size_t t2i) {
    MixedBatch b;
    for (size_t i = 0; i < t2i; ++i) {
        b.t2i.push_back(i % data.t2i.size());
    }
    b.vlm.resize(data.vlm.size());
    std::iota(b.vlm.begin(), b.vlm.end(), size_t{0});
    return b;
}

}  // namespace

TEST_CASE("cross-entropy of a uniform head is ln V") {
    const UniformLM lm(4);
    const std::vector<int> prompt{0, 1};
    const std::vector<int> target{2, 3, 1};
    CHECK(ce_loss(lm, prompt, target) == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    CHECK(std::abs(ce_loss(lm, prompt, target) - 1.3863) < 1e-4);
}

TEST_CASE("cross-entropy of a one-hot head is zero") {
    const std::vector<int> prompt{0, 1};
    const std::vector<int> target{2, 3, 1};
    const OracleLM lm(4, prompt.size(), target);
    CHECK(ce_loss(lm, prompt, target) < 1e-6);
    CHECK(ce_loss(lm, prompt, target) >= 0.0);
}

TEST_CASE("cross-entropy input validation") {
    const UniformLM lm(4);
    const std::vector<int> prompt{0};
    CHECK_THROWS_AS(ce_loss(lm, prompt, std::vector<int>{}), InvalidArgument);
    CHECK_THROWS_AS(ce_loss(lm, prompt, std::vector<int>{4}), InvalidArgument);
    CHECK_THROWS_AS(ce_loss(lm, std::vector<int>{-1}, std::vector<int>{1}), InvalidArgument);
}

TEST_CASE("vocabulary and tokenization") {
    const Vocab v = Vocab::from_pack(pack());
    CHECK(v.token(0) == Vocab::kBos);
    const auto ids = v.encode("where is " + pack().spec.char_id + " from ?");
    CHECK(v.decode(ids) == "where is " + pack().spec.char_id + " from ?");
    CHECK(v.encode("qwertyuiop").front() == v.id(Vocab::kUnk));
    CHECK_THROWS_AS(v.id("qwertyuiop"), InvalidArgument);
    CHECK(tokenize("  a  b\tc ") == std::vector<std::string>{"a", "b", "c"});
}

TEST_CASE("TinyLM next-token distribution is normalized") {
    const TinyLM lm(Vocab::from_pack(pack()), TinyLMConfig{}, 3);
    const std::vector<int> ctx{0, 5, 9, 12};
    for (size_t n = 0; n <= ctx.size(); ++n) {
        const auto lp = lm.next_token_logprobs(std::span(ctx.data(), n));
        CHECK(lp.array().exp().sum() == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("TinyLM gradient matches central differences") {
    Vocab v = Vocab::from_pack(pack());
    TinyLM lm(v, TinyLMConfig{4, 3}, 7);
    const std::vector<int> prompt{0, 6, 9, 11, 14};
    const std::vector<int> target{8, 10, 1};
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(lm.params().size());
    lm.loss_and_grad(prompt, target, &grad, 2.0);
    Rng pick(1);
    const double h = 1e-6;
    for (int k = 0; k < 60; ++k) {
        const auto p = static_cast<Eigen::Index>(pick.below(static_cast<uint64_t>(lm.params().size())));
        TinyLM plus = lm;
        TinyLM minus = lm;
        plus.params()[p] += h;
        minus.params()[p] -= h;
        const double fd = 2.0 * (plus.loss_and_grad(prompt, target, nullptr) -
                                 minus.loss_and_grad(prompt, target, nullptr)) /
                          (2 * h);
        CHECK(std::abs(grad[p] - fd) <= 1e-4 * std::max(std::abs(fd), 1e-4));
    }
}

TEST_CASE("SFT data covers every task family") {
    const BuiltinScorer scorer;
    const Vocab v = Vocab::from_pack(pack());
    const SftData data = build_sft_data(pack(), v, scorer);
    CHECK(data.t2i.size() == pack().core_images.size());
    int counts[4] = {0, 0, 0, 0};
    for (const auto& s : data.vlm) {
        REQUIRE(s.kind != TaskKind::t2i);
        ++counts[static_cast<int>(s.kind)];
        CHECK(!s.target.empty());
        CHECK(s.target.back() == v.id(Vocab::kEos));
    }
    for (int c : counts) {
        CHECK(c > 0);
    }
    for (const auto& s : data.t2i) {
        CHECK(s.image.size() == ToyImage::kSize);
        CHECK(!s.cond.uncond);
    }
}

TEST_CASE("mixer: both families in every batch and the long-run ratio") {
    MixerConfig cfg;  // 200:1, batch 256
    const BatchMixer mixer(10, 500, cfg);
    size_t t2i = 0;
    size_t vlm = 0;
    for (uint64_t k = 0; k < 2000; ++k) {
        const MixedBatch b = mixer.batch(k);
        CHECK(!b.t2i.empty());
        CHECK(!b.vlm.empty());
        CHECK(b.t2i.size() + b.vlm.size() == 256u);
        t2i += b.t2i.size();
        vlm += b.vlm.size();
    }
    const double ratio = static_cast<double>(t2i) / static_cast<double>(vlm);
    CHECK(std::abs(ratio - 200.0) / 200.0 < 0.10);
    // Expected VLM count per batch under the fill rule: 1 + (B - 2) p = B / 201.
    CHECK(1.0 + 254.0 * cfg.vlm_fill_probability() == doctest::Approx(256.0 / 201.0).epsilon(1e-12));
}

TEST_CASE("mixer: batches too small for the ratio saturate at one VLM sample") {
    MixerConfig cfg;
    cfg.batch_size = 8;
    CHECK(cfg.vlm_fill_probability() == 0.0);
    const BatchMixer mixer(10, 500, cfg);
    for (uint64_t k = 0; k < 2000; ++k) {
        const MixedBatch b = mixer.batch(k);
        CHECK(b.vlm.size() == 1u);
        CHECK(b.t2i.size() == 7u);
    }
}

TEST_CASE("mixer: an inverted ratio still keeps one T2I sample") {
    MixerConfig cfg;
    cfg.t2i_ratio = 1;
    cfg.vlm_ratio = 200;
    cfg.batch_size = 16;
    CHECK(cfg.vlm_fill_probability() == 1.0);
    const MixedBatch b = BatchMixer(3, 3, cfg).batch(0);
    CHECK(b.t2i.size() == 1u);
    CHECK(b.vlm.size() == 15u);
}

TEST_CASE("mixer: determinism and errors") {
    MixerConfig cfg;
    cfg.seed = 4;
    BatchMixer a(10, 20, cfg);
    BatchMixer b(10, 20, cfg);
    for (int k = 0; k < 20; ++k) {
        const auto x = a.next();
        const auto y = b.next();
        CHECK(x.t2i == y.t2i);
        CHECK(x.vlm == y.vlm);
    }
    CHECK_THROWS_AS(BatchMixer(0, 20, cfg), InvalidArgument);
    CHECK_THROWS_AS(BatchMixer(10, 0, cfg), InvalidArgument);
    cfg.vlm_ratio = 0;
    CHECK_THROWS_AS(BatchMixer(10, 20, cfg), InvalidArgument);
    cfg = {};
    cfg.batch_size = 1;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}

TEST_CASE("batch losses are per-family means and decompose exactly") {
    const BuiltinScorer scorer;
    const VelocityField velocity(NetShape{ToyImage::kSize, 8, kEmbedDim, 16, 16}, 1);
    const TinyLM lm(Vocab::from_pack(pack()), TinyLMConfig{}, 2);
    const SftData data = build_sft_data(pack(), lm.vocab(), scorer);
    const MixedBatch b = full_batch(data, 6);
    const SFTConfig cfg;
    const SftLosses l = sft_losses(velocity, lm, data, b, cfg, 3, nullptr, nullptr);

    int n = 0;
    const double chat = family_mean(lm, data, b, TaskKind::chat, n);
    CHECK(l.chat == doctest::Approx(chat).epsilon(1e-12));
    const double think = family_mean(lm, data, b, TaskKind::think, n);
    CHECK(l.think == doctest::Approx(think).epsilon(1e-12));
    const double vqa = family_mean(lm, data, b, TaskKind::vqa, n);
    CHECK(l.vqa == doctest::Approx(vqa).epsilon(1e-12));
    const double kqa = family_mean(lm, data, b, TaskKind::kqa, n);
    CHECK(l.kqa == doctest::Approx(kqa).epsilon(1e-12));
    CHECK(std::abs(l.total - l.flow - (chat + think + vqa + kqa)) < 1e-9);
    CHECK(l.step == 3);

    // Flow part: mean of per-example losses over the same draw stream.
    std::vector<FlowExample> ex;
    for (size_t i : b.t2i) {
        ex.push_back({data.t2i[i].image, data.t2i[i].cond});
    }
    Rng rng(derive_seed(cfg.seed, 3, 0xf10));
    CHECK(l.flow == doctest::Approx(flow_loss_and_grad(velocity, ex, rng, cfg.p_drop, nullptr)).epsilon(1e-12));
}

TEST_CASE("total gradient is the sum of component gradients") {
    const BuiltinScorer scorer;
    const VelocityField velocity(NetShape{ToyImage::kSize, 8, kEmbedDim, 8, 8}, 1);
    const TinyLM lm(Vocab::from_pack(pack()), TinyLMConfig{}, 2);
    const SftData data = build_sft_data(pack(), lm.vocab(), scorer);
    MixedBatch b = full_batch(data, 4);
    b.vlm.resize(40);
    SFTConfig all;
    Eigen::VectorXd gv = Eigen::VectorXd::Zero(velocity.param_count());
    Eigen::VectorXd gl = Eigen::VectorXd::Zero(lm.params().size());
    sft_losses(velocity, lm, data, b, all, 0, &gv, &gl);

    Eigen::VectorXd sv = Eigen::VectorXd::Zero(velocity.param_count());
    Eigen::VectorXd sl = Eigen::VectorXd::Zero(lm.params().size());
    for (int c = 0; c < 5; ++c) {
        SFTConfig one;
        one.weights = {c == 0 ? 1.0 : 0.0, c == 1 ? 1.0 : 0.0, c == 2 ? 1.0 : 0.0, c == 3 ? 1.0 : 0.0,
                       c == 4 ? 1.0 : 0.0};
        sft_losses(velocity, lm, data, b, one, 0, &sv, &sl);
    }
    CHECK((gv - sv).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((gl - sl).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(gl.norm() > 0.0);
    CHECK(gv.norm() > 0.0);
}

TEST_CASE("SFT training halves the flow loss and checkpoints resume exactly") {
    const BuiltinScorer scorer;
    int halved = 0;
    for (uint64_t seed = 0; seed < 3; ++seed) {
        VelocityField velocity(NetShape{}, derive_seed(seed, 1));
        TinyLM lm(Vocab::from_pack(pack()), TinyLMConfig{}, derive_seed(seed, 2));
        SFTConfig cfg;
        cfg.learning_rate = 1e-2;
        cfg.seed = seed;
        MixerConfig mixer;
        mixer.seed = seed;
        const SftResult r = unified_sft_run(velocity, lm, pack(), cfg, mixer, scorer);
        REQUIRE(r.history.size() == 500u);
        // Average over a few steps on each end to damp the per-batch draw noise.
        double first = 0.0;
        double last = 0.0;
        for (int k = 0; k < 5; ++k) {
            first += r.history[static_cast<size_t>(k)].flow;
            last += r.history[r.history.size() - 1 - static_cast<size_t>(k)].flow;
        }
        halved += last < 0.5 * first ? 1 : 0;

        if (seed == 0) {
            testing::TempDir dir("sft");
            write_checkpoint(r.checkpoint, dir / "ckpt.json");
            const Checkpoint back = read_checkpoint(dir / "ckpt.json");
            const VelocityField v2(back.shape, back.params);
            const TinyLM lm2 = TinyLM::from_json(back.lm);
            const SftData data = build_sft_data(pack(), lm.vocab(), scorer);
            const MixedBatch next = BatchMixer(data.t2i.size(), data.vlm.size(), mixer).batch(500);
            const SftLosses a = sft_losses(velocity, lm, data, next, cfg, 500, nullptr, nullptr);
            const SftLosses b = sft_losses(v2, lm2, data, next, cfg, 500, nullptr, nullptr);
            CHECK(std::abs(a.total - b.total) < 1e-12);
            CHECK(back.meta["stage"] == "sft");

            write_loss_history(r.history, dir / "loss.csv");
            std::ifstream in(dir / "loss.csv");
            std::string header;
            std::getline(in, header);
            CHECK(header == "step,l_chat,l_think,l_vqa,l_kqa,l_flow,total");
        }
    }
    CHECK(halved >= 2);
}

TEST_CASE("non-finite losses name the component") {
    const BuiltinScorer scorer;
    NetShape shape{ToyImage::kSize, 8, kEmbedDim, 4, 4};
    Eigen::VectorXd params = Eigen::VectorXd::Constant(VelocityField::param_count(shape), 1e200);
    VelocityField velocity(shape, params);
    TinyLM lm(Vocab::from_pack(pack()), TinyLMConfig{}, 1);
    SFTConfig cfg;
    cfg.steps = 1;
    try {
        unified_sft_run(velocity, lm, pack(), cfg, MixerConfig{}, scorer);
        FAIL("expected divergence");
    } catch (const NumericalDivergence& e) {
        CHECK(std::string(e.what()).find("flow") != std::string::npos);
    }
}

TEST_CASE("SFT config defaults and validation") {
    const SFTConfig cfg;
    CHECK(cfg.learning_rate == 2e-5);
    CHECK(cfg.steps == 500);
    CHECK(cfg.weights.chat == 1.0);
    CHECK(cfg.weights.flow == 1.0);
    CHECK(MixerConfig{}.t2i_ratio == 200);
    CHECK(MixerConfig{}.vlm_ratio == 1);
    CHECK_THROWS_AS(sft_from_json({{"learning_rate", 0.0}}), SchemaError);
    CHECK_THROWS_AS(sft_from_json({{"steps", 0}}), SchemaError);
    CHECK_THROWS_AS(mixer_from_json({{"t2i_ratio", 0}}), SchemaError);
    CHECK(sft_from_json(to_json(cfg)).learning_rate == cfg.learning_rate);
}
