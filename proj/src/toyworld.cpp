#include "charforge/toyworld.hpp"

#include "charforge/errors.hpp"
#include "charforge/rng.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

namespace charforge {

namespace {

constexpr std::array<PaletteEntry, 7> kPalette{{
    {"red", {1.0, 0.0, 0.0}},
    {"green", {0.0, 1.0, 0.0}},
    {"blue", {0.0, 0.0, 1.0}},
    {"yellow", {1.0, 1.0, 0.0}},
    {"cyan", {0.0, 1.0, 1.0}},
    {"magenta", {1.0, 0.0, 1.0}},
    {"white", {1.0, 1.0, 1.0}},
}};

constexpr std::array<int, 3> kPoseColumn{4, 8, 11};
constexpr int kGlyphRow = 8;
constexpr double kDimScale = 0.5;
constexpr double kBlankThreshold = 0.05;

template <class E, size_t N>
E parse_enum(std::string_view s, const std::array<E, N>& values, const char* what) {
    for (E v : values) {
        if (to_string(v) == s) {
            return v;
        }
    }
    throw InvalidArgument(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

bool in_template(Shape shape, int dx, int dy) {
    switch (shape) {
        case Shape::disk:
            return dx * dx + dy * dy <= 10;
        case Shape::square:
            return std::abs(dx) <= 3 && std::abs(dy) <= 3;
        case Shape::triangle:
            // apex up; half-width grows by 1/2 per row
            return dy >= -3 && dy <= 3 && 2 * std::abs(dx) <= dy + 3;
        case Shape::cross:
            return (dx == 0 && std::abs(dy) <= 3) || (dy == 0 && std::abs(dx) <= 3);
    }
    return false;
}

bool in_marker(Quadrant q, int dx, int dy) {
    const bool east = q == Quadrant::NE || q == Quadrant::SE;
    const bool north = q == Quadrant::NE || q == Quadrant::NW;
    const bool col = east ? (dx >= 1 && dx <= 2) : (dx >= -2 && dx <= -1);
    const bool row = north ? (dy >= -2 && dy <= -1) : (dy >= 1 && dy <= 2);
    return col && row;
}

double l1(const Color& a, const Color& b) {
    return std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
}

int nearest_palette(const Color& c) {
    const double m = std::max({c[0], c[1], c[2]});
    if (m <= 0.0) {
        return -1;
    }
    const Color n{c[0] / m, c[1] / m, c[2] / m};
    int best = 0;
    double best_d = l1(n, kPalette[0].rgb);
    for (int i = 1; i < static_cast<int>(kPalette.size()); ++i) {
        const double d = l1(n, kPalette[static_cast<size_t>(i)].rgb);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

Color scaled(const Color& c, double s) { return {c[0] * s, c[1] * s, c[2] * s}; }

std::string pick(Rng& rng, std::span<const std::string_view> words) {
    return std::string(words[rng.below(words.size())]);
}

// Word lists for the procedural persona.
constexpr std::array<std::string_view, 12> kSyllables{"ka", "ri", "mo", "ve", "lu", "sa",
                                                      "to", "ne", "zi", "ba", "or", "el"};
constexpr std::array<std::string_view, 8> kHometowns{"harbor", "mesa", "orchard", "tundra",
                                                     "canyon", "marsh", "citadel", "meadow"};
constexpr std::array<std::string_view, 8> kHobbies{"painting", "fishing", "chess", "climbing",
                                                   "baking", "juggling", "sailing", "archery"};
constexpr std::array<std::string_view, 8> kFoods{"noodles", "apples", "dumplings", "soup",
                                                 "berries", "bread", "cheese", "rice"};
constexpr std::array<std::string_view, 8> kJobs{"courier", "inventor", "gardener", "librarian",
                                                "pilot", "blacksmith", "healer", "scout"};
constexpr std::array<std::string_view, 8> kPets{"owl", "cat", "ferret", "tortoise",
                                                "crow", "hound", "lizard", "goat"};
constexpr std::array<std::string_view, 6> kMoods{"cheerful", "grumpy", "curious",
                                                 "calm", "bold", "shy"};
constexpr std::array<std::string_view, 8> kCatchphrases{
    "onward", "splendid", "no way", "how curious", "let us go", "by the stars", "oh boy", "well well"};
constexpr std::array<std::string_view, 10> kTopics{"weather", "food", "work", "home", "friends",
                                                   "weekend", "pet", "hobby", "dreams", "travel"};

struct Persona {
    std::string name;
    std::string hometown;
    std::string hobby;
    std::string food;
    std::string job;
    std::string pet;
    std::string mood;
    std::string catchphrase;
};

Persona make_persona(const CharacterSpec& spec, uint64_t seed) {
    Rng rng(derive_seed(seed, 0x9e75));
    Persona p;
    p.name = spec.char_id;
    p.hometown = pick(rng, kHometowns);
    p.hobby = pick(rng, kHobbies);
    p.food = pick(rng, kFoods);
    p.job = pick(rng, kJobs);
    p.pet = pick(rng, kPets);
    p.mood = pick(rng, kMoods);
    p.catchphrase = pick(rng, kCatchphrases);
    return p;
}

std::string vqa_question_text(VqaKind kind, const std::string& name) {
    switch (kind) {
        case VqaKind::dominant_color:
            return "what color is " + name + " ?";
        case VqaKind::shape:
            return "what shape is the emblem of " + name + " ?";
        case VqaKind::marker_quadrant:
            return "where is the marker of " + name + " ?";
    }
    return {};
}

std::string dialogue_response(Rng& rng, const Persona& p, const std::string& topic) {
    std::string body;
    if (topic == "food") {
        body = "i could eat " + p.food + " every day";
    } else if (topic == "work") {
        body = "being a " + p.job + " keeps me busy";
    } else if (topic == "home") {
        body = "the " + p.hometown + " is where i grew up";
    } else if (topic == "pet") {
        body = "my " + p.pet + " follows me everywhere";
    } else if (topic == "hobby") {
        body = "nothing beats " + p.hobby + " on a quiet afternoon";
    } else if (topic == "weekend") {
        body = "this weekend i plan some " + p.hobby + " back in the " + p.hometown;
    } else if (topic == "friends") {
        body = "my friends say i am always " + p.mood;
    } else if (topic == "travel") {
        body = "i miss the " + p.hometown + " whenever i travel";
    } else if (topic == "dreams") {
        body = "i dream of being the best " + p.job + " around";
    } else {
        body = "the weather makes me feel " + p.mood;
    }
    return rng.bernoulli(0.5) ? p.catchphrase + " ! " + body + " ." : body + " . " + p.catchphrase + " !";
}

}  // namespace

std::string_view to_string(Shape s) {
    switch (s) {
        case Shape::disk: return "disk";
        case Shape::square: return "square";
        case Shape::triangle: return "triangle";
        case Shape::cross: return "cross";
    }
    return "?";
}

std::string_view to_string(Quadrant q) {
    switch (q) {
        case Quadrant::NE: return "NE";
        case Quadrant::NW: return "NW";
        case Quadrant::SE: return "SE";
        case Quadrant::SW: return "SW";
    }
    return "?";
}

std::string_view to_string(Pose p) {
    switch (p) {
        case Pose::left: return "left";
        case Pose::center: return "center";
        case Pose::right: return "right";
    }
    return "?";
}

std::string_view to_string(Tone t) { return t == Tone::bright ? "bright" : "dim"; }

std::string_view to_string(VqaKind k) {
    switch (k) {
        case VqaKind::dominant_color: return "dominant_color";
        case VqaKind::shape: return "shape";
        case VqaKind::marker_quadrant: return "marker_quadrant";
    }
    return "?";
}

Shape shape_from_string(std::string_view s) { return parse_enum(s, kShapes, "shape"); }
Quadrant quadrant_from_string(std::string_view s) { return parse_enum(s, kQuadrants, "quadrant"); }
Pose pose_from_string(std::string_view s) { return parse_enum(s, kPoses, "pose"); }
Tone tone_from_string(std::string_view s) { return parse_enum(s, kTones, "tone"); }
VqaKind vqa_kind_from_string(std::string_view s) {
    constexpr std::array kinds{VqaKind::dominant_color, VqaKind::shape, VqaKind::marker_quadrant};
    return parse_enum(s, kinds, "vqa kind");
}

std::span<const PaletteEntry> palette() { return kPalette; }

std::string_view color_name(const Color& c) {
    const int i = nearest_palette(c);
    return i < 0 ? kUnknownAnswer : kPalette[static_cast<size_t>(i)].name;
}

void validate(const CharacterSpec& spec) {
    auto check = [](const Color& c, const char* what) {
        for (double v : c) {
            if (!(v >= 0.0 && v <= 1.0)) {
                throw InvalidArgument(std::string(what) + " channel outside [0,1]");
            }
        }
    };
    check(spec.base_color, "base_color");
    check(spec.marker_color, "marker_color");
    if (l1(spec.base_color, spec.marker_color) < 0.5) {
        throw InvalidArgument("marker_color too close to base_color (L1 < 0.5)");
    }
    if (spec.char_id.empty()) {
        throw InvalidArgument("empty char_id");
    }
}

std::vector<PromptSpec> all_prompts(const std::string& char_id) {
    std::vector<PromptSpec> out;
    for (Pose p : kPoses) {
        for (Tone t : kTones) {
            out.push_back({char_id, p, t});
        }
    }
    return out;
}

ToyImage ToyImage::from_values(std::span<const double> values) {
    if (values.size() != kSize) {
        throw InvalidArgument("image must have exactly 768 values, got " + std::to_string(values.size()));
    }
    ToyImage img;
    for (size_t i = 0; i < values.size(); ++i) {
        if (!(values[i] >= 0.0 && values[i] <= 1.0)) {
            throw InvalidArgument("image value outside [0,1] at index " + std::to_string(i));
        }
        img.pixels_[i] = static_cast<float>(values[i]);
    }
    return img;
}

ToyImage ToyImage::clamped(std::span<const double> values) {
    if (values.size() != kSize) {
        throw InvalidArgument("image must have exactly 768 values, got " + std::to_string(values.size()));
    }
    ToyImage img;
    for (size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw NumericalDivergence("non-finite pixel value at index " + std::to_string(i));
        }
        img.pixels_[i] = static_cast<float>(std::clamp(values[i], 0.0, 1.0));
    }
    return img;
}

ToyImage ToyImage::filled(float v) {
    ToyImage img;
    img.pixels_.fill(v);
    return img;
}

double ToyImage::mean() const {
    double s = 0.0;
    for (float v : pixels_) {
        s += v;
    }
    return s / kSize;
}

double column_centroid(const ToyImage& img) {
    double num = 0.0;
    double den = 0.0;
    for (int y = 0; y < ToyImage::kHeight; ++y) {
        for (int x = 0; x < ToyImage::kWidth; ++x) {
            for (int c = 0; c < ToyImage::kChannels; ++c) {
                num += x * static_cast<double>(img.at(y, x, c));
                den += img.at(y, x, c);
            }
        }
    }
    return den > 0.0 ? num / den : (ToyImage::kWidth - 1) / 2.0;
}

CharacterSpec make_character(uint64_t seed) {
    Rng rng(derive_seed(seed, 0xc4a7));
    CharacterSpec spec;
    const int syllables = rng.range(2, 3);
    for (int i = 0; i < syllables; ++i) {
        spec.char_id += kSyllables[rng.below(kSyllables.size())];
    }
    spec.char_id += std::to_string(seed);
    spec.shape = kShapes[rng.below(kShapes.size())];
    spec.marker_quadrant = kQuadrants[rng.below(kQuadrants.size())];
    const size_t base = rng.below(kPalette.size());
    size_t marker = rng.below(kPalette.size() - 1);
    if (marker >= base) {
        ++marker;
    }
    // Brightness factors keep every pixel of either color above half the
    // brightest one, so both survive the oracle's glyph-region threshold.
    do {
        spec.base_color = scaled(kPalette[base].rgb, rng.uniform(0.75, 1.0));
        spec.marker_color = scaled(kPalette[marker].rgb, rng.uniform(0.75, 1.0));
    } while (l1(spec.base_color, spec.marker_color) < 0.5);
    return spec;
}

std::array<int, 2> jitter_offset(uint64_t jitter_seed) {
    if (jitter_seed == 0) {
        return {0, 0};
    }
    static constexpr std::array<std::array<int, 2>, 8> kOffsets{
        {{-1, -1}, {0, -1}, {1, -1}, {-1, 0}, {1, 0}, {-1, 1}, {0, 1}, {1, 1}}};
    return kOffsets[derive_seed(jitter_seed, 0x717) % kOffsets.size()];
}

ToyImage render_scene(const CharacterSpec& spec, const PromptSpec& prompt, uint64_t jitter_seed) {
    if (prompt.char_id != spec.char_id) {
        throw IdentityMismatch("prompt char_id '" + prompt.char_id + "' does not match character '" +
                               spec.char_id + "'");
    }
    const auto [jx, jy] = jitter_offset(jitter_seed);
    const int cx = kPoseColumn[static_cast<size_t>(prompt.pose)] + jx;
    const int cy = kGlyphRow + jy;
    const double gain = prompt.tone == Tone::bright ? 1.0 : kDimScale;

    ToyImage img;
    for (int y = 0; y < ToyImage::kHeight; ++y) {
        for (int x = 0; x < ToyImage::kWidth; ++x) {
            const int dx = x - cx;
            const int dy = y - cy;
            const Color* color = nullptr;
            if (in_marker(spec.marker_quadrant, dx, dy)) {
                color = &spec.marker_color;
            } else if (in_template(spec.shape, dx, dy)) {
                color = &spec.base_color;
            }
            if (color != nullptr) {
                for (int c = 0; c < ToyImage::kChannels; ++c) {
                    img.at(y, x, c) = static_cast<float>((*color)[static_cast<size_t>(c)] * gain);
                }
            }
        }
    }
    return img;
}

std::string vqa_oracle(const ToyImage& image, VqaQuestion question) {
    constexpr int kPixels = ToyImage::kHeight * ToyImage::kWidth;
    std::array<double, kPixels> energy{};
    double emax = 0.0;
    for (int p = 0; p < kPixels; ++p) {
        const auto px = image.pixels().subspan(static_cast<size_t>(p) * 3, 3);
        energy[static_cast<size_t>(p)] = std::max({px[0], px[1], px[2]});
        emax = std::max(emax, energy[static_cast<size_t>(p)]);
    }

    // Glyph region: pixels at least half as bright as the brightest one.
    std::array<int, kPixels> label{};
    double region_energy = 0.0;
    int region_count = 0;
    std::array<int, kPalette.size()> votes{};
    for (int p = 0; p < kPixels; ++p) {
        const size_t i = static_cast<size_t>(p);
        label[i] = -1;
        if (energy[i] >= 0.5 * emax) {
            region_energy += energy[i];
            ++region_count;
            const auto px = image.pixels().subspan(i * 3, 3);
            label[i] = nearest_palette({px[0], px[1], px[2]});
            if (label[i] >= 0) {
                ++votes[static_cast<size_t>(label[i])];
            }
        }
    }
    if (region_count == 0 || region_energy / region_count < kBlankThreshold) {
        return std::string(kUnknownAnswer);
    }
    const int dominant = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    if (question.kind == VqaKind::dominant_color) {
        return std::string(kPalette[static_cast<size_t>(dominant)].name);
    }

    // Template matching (IoU) over every shape and glyph center.
    std::array<bool, kPixels> mask{};
    int mask_count = 0;
    for (size_t i = 0; i < mask.size(); ++i) {
        mask[i] = label[i] == dominant;
        mask_count += mask[i] ? 1 : 0;
    }
    double best_iou = -1.0;
    Shape best_shape = Shape::disk;
    int best_cx = 0;
    int best_cy = 0;
    for (Shape s : kShapes) {
        for (int cy = 0; cy < ToyImage::kHeight; ++cy) {
            for (int cx = 0; cx < ToyImage::kWidth; ++cx) {
                int inter = 0;
                int tcount = 0;
                for (int dy = -3; dy <= 3; ++dy) {
                    for (int dx = -3; dx <= 3; ++dx) {
                        const int x = cx + dx;
                        const int y = cy + dy;
                        if (x < 0 || y < 0 || x >= ToyImage::kWidth || y >= ToyImage::kHeight ||
                            !in_template(s, dx, dy)) {
                            continue;
                        }
                        ++tcount;
                        inter += mask[static_cast<size_t>(y * ToyImage::kWidth + x)] ? 1 : 0;
                    }
                }
                const double iou = static_cast<double>(inter) / (mask_count + tcount - inter);
                if (iou > best_iou) {
                    best_iou = iou;
                    best_shape = s;
                    best_cx = cx;
                    best_cy = cy;
                }
            }
        }
    }
    if (question.kind == VqaKind::shape) {
        return std::string(to_string(best_shape));
    }

    // Marker: off-dominant glyph-region pixels, energy summed per quadrant
    // around the matched glyph center.
    std::array<double, 4> quadrant_energy{};
    for (int y = 0; y < ToyImage::kHeight; ++y) {
        for (int x = 0; x < ToyImage::kWidth; ++x) {
            const size_t i = static_cast<size_t>(y * ToyImage::kWidth + x);
            if (label[i] < 0 || label[i] == dominant) {
                continue;
            }
            const int dx = x - best_cx;
            const int dy = y - best_cy;
            if (dx == 0 || dy == 0) {
                continue;
            }
            const bool east = dx > 0;
            const bool north = dy < 0;
            const Quadrant q = north ? (east ? Quadrant::NE : Quadrant::NW) : (east ? Quadrant::SE : Quadrant::SW);
            quadrant_energy[static_cast<size_t>(q)] += energy[i];
        }
    }
    const auto it = std::max_element(quadrant_energy.begin(), quadrant_energy.end());
    if (*it <= 0.0) {
        return std::string(kUnknownAnswer);
    }
    return std::string(to_string(kQuadrants[static_cast<size_t>(it - quadrant_energy.begin())]));
}

std::vector<ToyImage> CharacterPack::core_image_list() const {
    std::vector<ToyImage> out;
    out.reserve(core_images.size());
    for (const auto& c : core_images) {
        out.push_back(c.image);
    }
    return out;
}

std::string instruction_text(const PromptSpec& prompt) {
    return "draw " + prompt.char_id + " facing " + std::string(to_string(prompt.pose)) + " in " +
           std::string(to_string(prompt.tone)) + " light";
}

void validate(const CharacterPack& pack) {
    try {
        validate(pack.spec);
    } catch (const InvalidArgument& e) {
        throw SchemaError("spec", e.what());
    }
    const auto n_core = static_cast<int>(pack.core_images.size());
    if (n_core < kMinCoreImages || n_core > kMaxCoreImages) {
        throw SchemaError("core_images length", "expected 5..15 core images, got " + std::to_string(n_core));
    }
    for (size_t i = 0; i < pack.core_images.size(); ++i) {
        if (pack.core_images[i].prompt.char_id != pack.spec.char_id) {
            throw SchemaError("core_images[" + std::to_string(i) + "].prompt.char_id", "unknown character");
        }
    }
    const auto n_dlg = static_cast<int>(pack.dialogues.size());
    if (n_dlg < kMinDialogues || n_dlg > kMaxDialogues) {
        throw SchemaError("dialogues length", "expected 150..250 dialogues, got " + std::to_string(n_dlg));
    }
    for (size_t i = 0; i < pack.mm_samples.size(); ++i) {
        const int idx = pack.mm_samples[i].image_index;
        if (idx < 0 || idx >= n_core) {
            throw SchemaError("mm_samples[" + std::to_string(i) + "].image_index", "out of range");
        }
    }
    for (size_t i = 0; i < pack.vqa.size(); ++i) {
        const int idx = pack.vqa[i].image_index;
        if (idx < 0 || idx >= n_core) {
            throw SchemaError("vqa[" + std::to_string(i) + "].image_index", "out of range");
        }
    }
    for (size_t i = 0; i < pack.mcq.size(); ++i) {
        const char k = pack.mcq[i].answer_key;
        if (k < 'A' || k > 'D') {
            throw SchemaError("mcq[" + std::to_string(i) + "].answer_key", "must be one of A,B,C,D");
        }
    }
}

CharacterPack build_pack(const CharacterSpec& spec, uint64_t seed, const PackSizes& sizes) {
    if (sizes.core_images < kMinCoreImages || sizes.core_images > kMaxCoreImages) {
        throw InvalidArgument("core_images must be in [5, 15]");
    }
    if (sizes.dialogues < kMinDialogues || sizes.dialogues > kMaxDialogues) {
        throw InvalidArgument("dialogues must be in [150, 250]");
    }
    if (sizes.kqa < 1 || sizes.mcq < 1) {
        throw InvalidArgument("kqa and mcq counts must be positive");
    }
    validate(spec);

    Rng rng(derive_seed(seed, 0x9ac7));
    const Persona p = make_persona(spec, seed);
    CharacterPack pack;
    pack.spec = spec;

    const std::string color = std::string(color_name(spec.base_color));
    const std::string marker_color = std::string(color_name(spec.marker_color));
    const std::string shape = std::string(to_string(spec.shape));
    const std::string quadrant = std::string(to_string(spec.marker_quadrant));

    pack.profile = p.name + " is a " + p.mood + " " + p.job + " from the " + p.hometown + " . " + p.name +
                   " loves " + p.hobby + " and eats " + p.food + " . " + p.name + " keeps a " + p.pet +
                   " . " + p.name + " wears a " + color + " " + shape + " emblem with a " + marker_color +
                   " marker in the " + quadrant + " corner . favorite saying : " + p.catchphrase + " .";

    // Core images: pose/tone combos cycle; within a combo every image gets a
    // distinct non-zero glyph offset.
    const auto prompts = all_prompts(spec.char_id);
    std::map<size_t, std::set<std::array<int, 2>>> used_offsets;
    for (int k = 0; k < sizes.core_images; ++k) {
        const size_t combo = static_cast<size_t>(k) % prompts.size();
        uint64_t jitter = 0;
        do {
            jitter = 1 + rng.below(1u << 20);
        } while (used_offsets[combo].contains(jitter_offset(jitter)));
        used_offsets[combo].insert(jitter_offset(jitter));
        pack.core_images.push_back({render_scene(spec, prompts[combo], jitter), prompts[combo], jitter});
    }

    for (int i = 0; i < sizes.dialogues; ++i) {
        const std::string topic(kTopics[rng.below(kTopics.size())]);
        static constexpr std::array<std::string_view, 4> kOpeners{"hey", "hello", "so", "tell me"};
        const std::string user = pick(rng, kOpeners) + " " + p.name + " , what about your " + topic + " ?";
        pack.dialogues.push_back({user, dialogue_response(rng, p, topic)});
    }

    for (int k = 0; k < sizes.core_images; ++k) {
        const auto& core = pack.core_images[static_cast<size_t>(k)];
        const std::string pose(to_string(core.prompt.pose));
        const std::string tone(to_string(core.prompt.tone));
        MultimodalSample mm;
        mm.image_index = k;
        mm.user_input = "show me where you stand , " + p.name + " , facing " + pose + " in " + tone + " light";
        mm.response = p.catchphrase + " ! here i am on the " + pose + " side , feeling " + p.mood + " .";
        mm.thinking = p.name + " stands " + pose + " ; the light is " + tone + " ; the emblem is a " + color + " " +
                      shape + " with the marker " + quadrant + " .";
        mm.instruction = instruction_text(core.prompt);
        pack.mm_samples.push_back(std::move(mm));
    }

    // Knowledge facts as (question, answer, distractor pool).
    struct Fact {
        std::string question;
        std::string alt_question;
        std::string answer;
        std::span<const std::string_view> pool;
    };
    const std::array<Fact, 6> facts{{
        {"where is " + p.name + " from ?", "which place is home for " + p.name + " ?", p.hometown, kHometowns},
        {"what hobby does " + p.name + " love ?", "how does " + p.name + " spend free time ?", p.hobby, kHobbies},
        {"what does " + p.name + " eat ?", "which food does " + p.name + " like ?", p.food, kFoods},
        {"what is the job of " + p.name + " ?", "how does " + p.name + " earn a living ?", p.job, kJobs},
        {"what pet does " + p.name + " keep ?", "which animal lives with " + p.name + " ?", p.pet, kPets},
        {"what does " + p.name + " always say ?", "what is the favorite saying of " + p.name + " ?", p.catchphrase,
         kCatchphrases},
    }};
    for (int i = 0; i < sizes.kqa; ++i) {
        const Fact& f = facts[static_cast<size_t>(i) % facts.size()];
        const bool alt = (static_cast<size_t>(i) / facts.size()) % 2 == 1;
        pack.kqa.push_back({alt ? f.alt_question : f.question, f.answer});
    }

    for (int k = 0; k < sizes.core_images; ++k) {
        for (VqaKind kind : {VqaKind::dominant_color, VqaKind::shape, VqaKind::marker_quadrant}) {
            const auto& img = pack.core_images[static_cast<size_t>(k)].image;
            pack.vqa.push_back({k, kind, vqa_question_text(kind, p.name), vqa_oracle(img, {kind})});
        }
    }

    auto make_mcq = [&](McqFamily family, const std::string& question, const std::string& answer,
                        std::vector<std::string> pool) {
        std::erase(pool, answer);
        McqItem item;
        item.family = family;
        item.question = question;
        const size_t key = rng.below(4);
        size_t next = 0;
        for (size_t slot = 0; slot < 4; ++slot) {
            if (slot == key) {
                item.options[slot] = answer;
            } else {
                const size_t j = next + rng.below(pool.size() - next);
                std::swap(pool[next], pool[j]);
                item.options[slot] = pool[next++];
            }
        }
        item.answer_key = static_cast<char>('A' + key);
        return item;
    };
    std::vector<std::string> color_pool;
    for (const auto& e : kPalette) {
        color_pool.emplace_back(e.name);
    }
    std::vector<std::string> shape_pool;
    for (Shape s : kShapes) {
        shape_pool.emplace_back(to_string(s));
    }
    std::vector<std::string> quadrant_pool;
    for (Quadrant q : kQuadrants) {
        quadrant_pool.emplace_back(to_string(q));
    }
    for (int i = 0; i < sizes.mcq; ++i) {
        if (i % 2 == 0) {
            const Fact& f = facts[(static_cast<size_t>(i) / 2) % facts.size()];
            pack.mcq.push_back(make_mcq(McqFamily::knowledge, f.question, f.answer, {f.pool.begin(), f.pool.end()}));
        } else {
            switch ((i / 2) % 3) {
                case 0:
                    pack.mcq.push_back(make_mcq(McqFamily::visual, vqa_question_text(VqaKind::dominant_color, p.name),
                                                color, color_pool));
                    break;
                case 1:
                    pack.mcq.push_back(
                        make_mcq(McqFamily::visual, vqa_question_text(VqaKind::shape, p.name), shape, shape_pool));
                    break;
                default:
                    pack.mcq.push_back(make_mcq(McqFamily::visual,
                                                vqa_question_text(VqaKind::marker_quadrant, p.name), quadrant,
                                                quadrant_pool));
                    break;
            }
        }
    }
    return pack;
}

}  // namespace charforge
