#include "charforge/encoders.hpp"

#include "charforge/errors.hpp"
#include "charforge/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace charforge {

namespace {

constexpr uint64_t kSemanticStream = 0x5e3a;
constexpr uint64_t kStructureStream = 0x57c7;

// Patch grid for the perceptual distance: 4x4 patches of 4x4 pixels.
constexpr int kPatch = 4;
constexpr int kGrid = ToyImage::kWidth / kPatch;

std::array<double, kGrid * kGrid * 3> patch_means(const ToyImage& img) {
    std::array<double, kGrid * kGrid * 3> out{};
    for (int y = 0; y < ToyImage::kHeight; ++y) {
        for (int x = 0; x < ToyImage::kWidth; ++x) {
            const int p = (y / kPatch) * kGrid + (x / kPatch);
            for (int c = 0; c < 3; ++c) {
                out[static_cast<size_t>(p * 3 + c)] += img.at(y, x, c);
            }
        }
    }
    for (double& v : out) {
        v /= kPatch * kPatch;
    }
    return out;
}

}  // namespace

std::string_view to_string(EncoderKind k) { return k == EncoderKind::semantic ? "semantic" : "structure"; }

EncoderKind encoder_kind_from_string(std::string_view s) {
    if (s == "semantic") {
        return EncoderKind::semantic;
    }
    if (s == "structure") {
        return EncoderKind::structure;
    }
    throw InvalidArgument("unknown encoder kind '" + std::string(s) + "'");
}

double cosine(const EmbedVector& a, const EmbedVector& b) {
    if (a.values.size() != b.values.size()) {
        throw InvalidArgument("embedding dimension mismatch");
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (size_t i = 0; i < a.values.size(); ++i) {
        dot += a.values[i] * b.values[i];
        na += a.values[i] * a.values[i];
        nb += b.values[i] * b.values[i];
    }
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

ProjectionEncoder::ProjectionEncoder(EncoderSpec spec) : spec_(spec), projection_(kEmbedDim, ToyImage::kSize) {
    const uint64_t stream = spec.kind == EncoderKind::semantic ? kSemanticStream : kStructureStream;
    Rng rng(derive_seed(spec.seed, stream));
    const double scale = 1.0 / std::sqrt(static_cast<double>(ToyImage::kSize));
    for (int r = 0; r < kEmbedDim; ++r) {
        for (int c = 0; c < ToyImage::kSize; ++c) {
            projection_(r, c) = rng.normal() * scale;
        }
    }
}

EmbedVector ProjectionEncoder::encode(const ToyImage& image) const {
    Eigen::VectorXd x(ToyImage::kSize);
    const auto px = image.pixels();
    for (int i = 0; i < ToyImage::kSize; ++i) {
        x[i] = px[static_cast<size_t>(i)];
    }
    const double mean = x.mean();
    // Constant images have no centered signal; project them raw.
    if ((x.array() != x[0]).any()) {
        x.array() -= mean;
    }
    Eigen::VectorXd e = projection_ * x;
    const double n = e.norm();
    EmbedVector out;
    out.values.assign(kEmbedDim, 0.0);
    if (n == 0.0) {
        // only the all-zero image lands here
        out.values[0] = 1.0;
        return out;
    }
    for (int i = 0; i < kEmbedDim; ++i) {
        out.values[static_cast<size_t>(i)] = e[i] / n;
    }
    return out;
}

BuiltinScorer::BuiltinScorer(uint64_t semantic_seed, uint64_t structure_seed)
    : semantic_({semantic_seed, EncoderKind::semantic}), structure_({structure_seed, EncoderKind::structure}) {}

EmbedVector BuiltinScorer::embed(const ToyImage& image, EncoderKind kind) const {
    return kind == EncoderKind::semantic ? semantic_.encode(image) : structure_.encode(image);
}

double BuiltinScorer::perceptual_distance(const ToyImage& a, const ToyImage& b) const {
    return charforge::perceptual_distance(a, b);
}

double perceptual_distance(const ToyImage& a, const ToyImage& b) {
    const auto pa = patch_means(a);
    const auto pb = patch_means(b);
    double total = 0.0;
    for (size_t i = 0; i < pa.size(); ++i) {
        total += std::abs(pa[i] - pb[i]);
    }
    // Channel-mean differences are at most 1, so black vs white is exactly 1.
    return total / static_cast<double>(pa.size());
}

EmbedVector encode_image(const ToyImage& image, EncoderSpec enc) {
    static std::mutex mutex;
    static std::map<std::pair<uint64_t, int>, std::shared_ptr<const ProjectionEncoder>> cache;
    std::shared_ptr<const ProjectionEncoder> encoder;
    {
        std::lock_guard lock(mutex);
        auto& slot = cache[{enc.seed, static_cast<int>(enc.kind)}];
        if (!slot) {
            slot = std::make_shared<const ProjectionEncoder>(enc);
        }
        encoder = slot;
    }
    return encoder->encode(image);
}

EmbedVector encode_prompt(const PromptSpec& prompt, const CharacterPack& pack, const Scorer& scorer) {
    if (prompt.char_id != pack.spec.char_id) {
        throw IdentityMismatch("prompt names '" + prompt.char_id + "', pack holds '" + pack.spec.char_id + "'");
    }
    return scorer.embed(render_scene(pack.spec, prompt, 0), EncoderKind::semantic);
}

std::unique_ptr<Scorer> make_scorer(const std::string& command, uint64_t semantic_seed, uint64_t structure_seed) {
    if (command.empty()) {
        return std::make_unique<BuiltinScorer>(semantic_seed, structure_seed);
    }
    return std::make_unique<ProtocolScorer>(command);
}

}  // namespace charforge
