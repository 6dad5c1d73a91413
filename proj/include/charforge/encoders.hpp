#pragma once

// Embedding scorers standing in for CLIP (semantic), DINO (structure) and
// LPIPS. Built-in scorers are fixed seeded random projections; an external
// process can replace them through the line-delimited JSON protocol.

#include "charforge/toyworld.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace charforge {

enum class EncoderKind { semantic, structure };
std::string_view to_string(EncoderKind k);
EncoderKind encoder_kind_from_string(std::string_view s);

inline constexpr int kEmbedDim = 64;

/// Unit-norm embedding.
struct EmbedVector {
    std::vector<double> values;
    bool operator==(const EmbedVector&) const = default;
};

double cosine(const EmbedVector& a, const EmbedVector& b);

struct EncoderSpec {
    uint64_t seed = 0;
    EncoderKind kind = EncoderKind::semantic;
};

/// Everything the reward and evaluation code needs from encoders.
class Scorer {
public:
    virtual ~Scorer() = default;
    virtual EmbedVector embed(const ToyImage& image, EncoderKind kind) const = 0;
    virtual double perceptual_distance(const ToyImage& a, const ToyImage& b) const = 0;
};

/// 768 -> 64 seeded Gaussian projection of the mean-centered image.
class ProjectionEncoder {
public:
    explicit ProjectionEncoder(EncoderSpec spec);
    EmbedVector encode(const ToyImage& image) const;
    const EncoderSpec& spec() const { return spec_; }

private:
    EncoderSpec spec_;
    Eigen::MatrixXd projection_;  // kEmbedDim x ToyImage::kSize
};

class BuiltinScorer final : public Scorer {
public:
    explicit BuiltinScorer(uint64_t semantic_seed = 1, uint64_t structure_seed = 2);
    EmbedVector embed(const ToyImage& image, EncoderKind kind) const override;
    double perceptual_distance(const ToyImage& a, const ToyImage& b) const override;

private:
    ProjectionEncoder semantic_;
    ProjectionEncoder structure_;
};

/// Child process speaking line-delimited JSON on stdin/stdout:
///   {"op":"embed","kind":"semantic","image":"<base64 raw-f32>"} -> {"values":[...]}
///   {"op":"lpips","a":"<base64>","b":"<base64>"}                 -> {"value":0.12}
/// Responses are validated; embeddings are re-normalized to unit length.
class ProtocolScorer final : public Scorer {
public:
    explicit ProtocolScorer(const std::string& command);
    ~ProtocolScorer() override;
    ProtocolScorer(const ProtocolScorer&) = delete;
    ProtocolScorer& operator=(const ProtocolScorer&) = delete;

    EmbedVector embed(const ToyImage& image, EncoderKind kind) const override;
    double perceptual_distance(const ToyImage& a, const ToyImage& b) const override;

private:
    std::string request(const std::string& line) const;

    int pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    mutable std::string buffer_;
    mutable std::mutex mutex_;
};

/// Scorer from an external command, or the built-in one when `command` is empty.
std::unique_ptr<Scorer> make_scorer(const std::string& command, uint64_t semantic_seed, uint64_t structure_seed);

/// Free-function forms (built-in projection; encoders cached per spec).
EmbedVector encode_image(const ToyImage& image, EncoderSpec enc);
double perceptual_distance(const ToyImage& a, const ToyImage& b);

/// Embedding of the prompt's canonical (jitter 0) rendering under the
/// semantic encoder. Throws IdentityMismatch for a foreign char_id.
EmbedVector encode_prompt(const PromptSpec& prompt, const CharacterPack& pack, const Scorer& scorer);

std::string base64_encode(std::span<const unsigned char> bytes);
std::vector<unsigned char> base64_decode(std::string_view text);
std::string image_to_base64(const ToyImage& image);
ToyImage image_from_base64(std::string_view text);

}  // namespace charforge
