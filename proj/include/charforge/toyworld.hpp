#pragma once

// Procedural character universe: characters, deterministic scene rendering,
// pixel-only answer oracles and the per-character training pack.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace charforge {

using Color = std::array<double, 3>;

enum class Shape { disk, square, triangle, cross };
enum class Quadrant { NE, NW, SE, SW };
enum class Pose { left, center, right };
enum class Tone { bright, dim };

inline constexpr std::array kShapes{Shape::disk, Shape::square, Shape::triangle, Shape::cross};
inline constexpr std::array kQuadrants{Quadrant::NE, Quadrant::NW, Quadrant::SE, Quadrant::SW};
inline constexpr std::array kPoses{Pose::left, Pose::center, Pose::right};
inline constexpr std::array kTones{Tone::bright, Tone::dim};

std::string_view to_string(Shape s);
std::string_view to_string(Quadrant q);
std::string_view to_string(Pose p);
std::string_view to_string(Tone t);
Shape shape_from_string(std::string_view s);
Quadrant quadrant_from_string(std::string_view s);
Pose pose_from_string(std::string_view s);
Tone tone_from_string(std::string_view s);

/// Named hue palette. Character colors are palette entries scaled by a
/// brightness factor, so chromaticity identifies the name.
struct PaletteEntry {
    std::string_view name;
    Color rgb;
};
std::span<const PaletteEntry> palette();

struct CharacterSpec {
    std::string char_id;
    Color base_color{};
    Shape shape = Shape::disk;
    Quadrant marker_quadrant = Quadrant::NE;
    Color marker_color{};

    bool operator==(const CharacterSpec&) const = default;
};

/// Throws InvalidArgument when channel ranges or the marker/base contrast
/// constraint (L1 >= 0.5) do not hold.
void validate(const CharacterSpec& spec);

/// Palette name of a character color (nearest chromaticity).
std::string_view color_name(const Color& c);

struct PromptSpec {
    std::string char_id;
    Pose pose = Pose::center;
    Tone tone = Tone::bright;

    bool operator==(const PromptSpec&) const = default;
};

/// All pose x tone prompts for one character, in a fixed order.
std::vector<PromptSpec> all_prompts(const std::string& char_id);

/// 16x16x3 image, row-major (y, x, channel), values in [0, 1].
/// Pixels are stored as float so raw-f32 files round-trip exactly.
class ToyImage {
public:
    static constexpr int kHeight = 16;
    static constexpr int kWidth = 16;
    static constexpr int kChannels = 3;
    static constexpr int kSize = kHeight * kWidth * kChannels;

    ToyImage() { pixels_.fill(0.0f); }

    /// Throws InvalidArgument on wrong size or values outside [0, 1].
    static ToyImage from_values(std::span<const double> values);
    /// Clamps to [0, 1]; non-finite values throw.
    static ToyImage clamped(std::span<const double> values);
    static ToyImage filled(float v);

    float at(int y, int x, int c) const { return pixels_[index(y, x, c)]; }
    float& at(int y, int x, int c) { return pixels_[index(y, x, c)]; }

    std::span<const float> pixels() const { return pixels_; }
    std::span<float> pixels() { return pixels_; }
    std::vector<double> to_vector() const { return {pixels_.begin(), pixels_.end()}; }
    double mean() const;

    bool operator==(const ToyImage&) const = default;

    static constexpr int index(int y, int x, int c) { return (y * kWidth + x) * kChannels + c; }

private:
    std::array<float, kSize> pixels_{};
};

/// Intensity-weighted mean column (x) over all channels.
double column_centroid(const ToyImage& img);

CharacterSpec make_character(uint64_t seed);

/// Glyph offset applied for a given jitter seed; (0, 0) iff jitter_seed == 0.
std::array<int, 2> jitter_offset(uint64_t jitter_seed);

/// Throws IdentityMismatch if prompt.char_id != spec.char_id.
ToyImage render_scene(const CharacterSpec& spec, const PromptSpec& prompt, uint64_t jitter_seed);

enum class VqaKind { dominant_color, shape, marker_quadrant };
std::string_view to_string(VqaKind k);
VqaKind vqa_kind_from_string(std::string_view s);

struct VqaQuestion {
    VqaKind kind = VqaKind::dominant_color;
};

inline constexpr std::string_view kUnknownAnswer = "unknown";

/// Answers from pixels only. Blank images (mean glyph-region energy < 0.05)
/// answer "unknown".
std::string vqa_oracle(const ToyImage& image, VqaQuestion question);

struct CoreImage {
    ToyImage image;
    PromptSpec prompt;
    uint64_t jitter_seed = 0;
    bool operator==(const CoreImage&) const = default;
};

struct Dialogue {
    std::string user_input;
    std::string response;
    bool operator==(const Dialogue&) const = default;
};

/// Multimodal role-play tuple; the image is a core image index.
struct MultimodalSample {
    int image_index = 0;
    std::string user_input;
    std::string response;
    std::string thinking;
    std::string instruction;
    bool operator==(const MultimodalSample&) const = default;
};

struct KqaItem {
    std::string question;
    std::string answer;
    bool operator==(const KqaItem&) const = default;
};

struct VqaItem {
    int image_index = 0;
    VqaKind kind = VqaKind::dominant_color;
    std::string question;
    std::string answer;
    bool operator==(const VqaItem&) const = default;
};

enum class McqFamily { knowledge, visual };

struct McqItem {
    McqFamily family = McqFamily::knowledge;
    std::string question;
    std::array<std::string, 4> options;
    char answer_key = 'A';
    bool operator==(const McqItem&) const = default;
};

struct CharacterPack {
    CharacterSpec spec;
    std::string profile;
    std::vector<CoreImage> core_images;
    std::vector<Dialogue> dialogues;
    std::vector<MultimodalSample> mm_samples;
    std::vector<KqaItem> kqa;
    std::vector<VqaItem> vqa;
    std::vector<McqItem> mcq;

    bool operator==(const CharacterPack&) const = default;

    std::vector<ToyImage> core_image_list() const;
};

struct PackSizes {
    int core_images = 10;
    int dialogues = 160;
    int kqa = 10;
    int mcq = 10;
};

inline constexpr int kMinCoreImages = 5;
inline constexpr int kMaxCoreImages = 15;
inline constexpr int kMinDialogues = 150;
inline constexpr int kMaxDialogues = 250;

/// Throws SchemaError naming the first violated field.
void validate(const CharacterPack& pack);

CharacterPack build_pack(const CharacterSpec& spec, uint64_t seed, const PackSizes& sizes = {});

/// Canonical image-generation instruction for a prompt.
std::string instruction_text(const PromptSpec& prompt);

/// Directory layout: <dir>/pack.json plus core_NNN.f32 raw little-endian floats.
void write_pack(const CharacterPack& pack, const std::filesystem::path& dir);
CharacterPack load_pack(const std::filesystem::path& dir);

void write_raw_f32(const ToyImage& img, const std::filesystem::path& file);
ToyImage read_raw_f32(const std::filesystem::path& file);
/// Binary PPM preview (8-bit).
void write_ppm(const ToyImage& img, const std::filesystem::path& file);

}  // namespace charforge
