#include "charforge/errors.hpp"
#include "charforge/json_util.hpp"
#include "charforge/toyworld.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace charforge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kPackFormat = "charforge-pack";
constexpr int kPackVersion = 1;

json color_json(const Color& c) { return json::array({c[0], c[1], c[2]}); }

Color color_from(const json& j, const std::string& field) {
    if (!j.is_array() || j.size() != 3) {
        throw SchemaError(field, "expected an array of 3 numbers");
    }
    Color c{};
    for (size_t i = 0; i < 3; ++i) {
        if (!j[i].is_number()) {
            throw SchemaError(field, "expected numbers");
        }
        c[i] = j[i].get<double>();
    }
    return c;
}

std::string core_file_name(size_t i) {
    std::ostringstream os;
    os << "core_" << std::setw(3) << std::setfill('0') << i << ".f32";
    return os.str();
}

}  // namespace

void write_raw_f32(const ToyImage& img, const fs::path& file) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + file.string() + "' for writing");
    }
    for (float v : img.pixels()) {
        uint32_t bits = std::bit_cast<uint32_t>(v);
        unsigned char bytes[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                  static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
        out.write(reinterpret_cast<const char*>(bytes), 4);
    }
    if (!out) {
        throw IoError("write failed for '" + file.string() + "'");
    }
}

ToyImage read_raw_f32(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + file.string() + "'");
    }
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (data.size() != static_cast<size_t>(ToyImage::kSize) * 4) {
        throw ParseError("raw image '" + file.string() + "' has " + std::to_string(data.size()) +
                         " bytes, expected 3072");
    }
    std::vector<double> values(ToyImage::kSize);
    for (size_t i = 0; i < values.size(); ++i) {
        const auto* b = reinterpret_cast<const unsigned char*>(data.data() + 4 * i);
        const uint32_t bits = uint32_t{b[0]} | (uint32_t{b[1]} << 8) | (uint32_t{b[2]} << 16) | (uint32_t{b[3]} << 24);
        values[i] = std::bit_cast<float>(bits);
    }
    return ToyImage::from_values(values);
}

void write_ppm(const ToyImage& img, const fs::path& file) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + file.string() + "' for writing");
    }
    out << "P6\n" << ToyImage::kWidth << " " << ToyImage::kHeight << "\n255\n";
    for (float v : img.pixels()) {
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f))));
    }
}

void write_pack(const CharacterPack& pack, const fs::path& dir) {
    validate(pack);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    }

    json j;
    j["format"] = kPackFormat;
    j["version"] = kPackVersion;
    j["spec"] = {
        {"char_id", pack.spec.char_id},
        {"base_color", color_json(pack.spec.base_color)},
        {"shape", to_string(pack.spec.shape)},
        {"marker_quadrant", to_string(pack.spec.marker_quadrant)},
        {"marker_color", color_json(pack.spec.marker_color)},
    };
    j["profile"] = pack.profile;
    j["core_images"] = json::array();
    for (size_t i = 0; i < pack.core_images.size(); ++i) {
        const auto& c = pack.core_images[i];
        const std::string file = core_file_name(i);
        write_raw_f32(c.image, dir / file);
        j["core_images"].push_back({{"file", file},
                                    {"char_id", c.prompt.char_id},
                                    {"pose", to_string(c.prompt.pose)},
                                    {"tone", to_string(c.prompt.tone)},
                                    {"jitter_seed", c.jitter_seed}});
    }
    j["dialogues"] = json::array();
    for (const auto& d : pack.dialogues) {
        j["dialogues"].push_back({{"user_input", d.user_input}, {"response", d.response}});
    }
    j["mm_samples"] = json::array();
    for (const auto& m : pack.mm_samples) {
        j["mm_samples"].push_back({{"image_index", m.image_index},
                                   {"user_input", m.user_input},
                                   {"response", m.response},
                                   {"thinking", m.thinking},
                                   {"instruction", m.instruction}});
    }
    j["kqa"] = json::array();
    for (const auto& k : pack.kqa) {
        j["kqa"].push_back({{"question", k.question}, {"answer", k.answer}});
    }
    j["vqa"] = json::array();
    for (const auto& v : pack.vqa) {
        j["vqa"].push_back(
            {{"image_index", v.image_index}, {"kind", to_string(v.kind)}, {"question", v.question}, {"answer", v.answer}});
    }
    j["mcq"] = json::array();
    for (const auto& m : pack.mcq) {
        j["mcq"].push_back({{"family", m.family == McqFamily::knowledge ? "knowledge" : "visual"},
                            {"question", m.question},
                            {"options", m.options},
                            {"answer_key", std::string(1, m.answer_key)}});
    }
    write_json_file(j, dir / "pack.json");
}

CharacterPack load_pack(const fs::path& dir) {
    const json j = read_json_file(dir / "pack.json");
    JsonReader r(j);
    if (r.str("format") != kPackFormat) {
        throw SchemaError("format", "not a charforge pack");
    }
    if (r.integer("version") != kPackVersion) {
        throw SchemaError("version", "unsupported pack version");
    }

    CharacterPack pack;
    {
        JsonReader s = r.object("spec");
        pack.spec.char_id = s.str("char_id");
        pack.spec.base_color = color_from(s.raw("base_color"), "spec.base_color");
        pack.spec.shape = s.enumerated("shape", shape_from_string);
        pack.spec.marker_quadrant = s.enumerated("marker_quadrant", quadrant_from_string);
        pack.spec.marker_color = color_from(s.raw("marker_color"), "spec.marker_color");
    }
    pack.profile = r.str("profile");

    const auto core = r.array("core_images");
    if (core.size() < static_cast<size_t>(kMinCoreImages) || core.size() > static_cast<size_t>(kMaxCoreImages)) {
        throw SchemaError("core_images length", "expected 5..15 core images, got " + std::to_string(core.size()));
    }
    for (const JsonReader& c : core) {
        CoreImage ci;
        const std::string file = c.str("file");
        try {
            ci.image = read_raw_f32(dir / file);
        } catch (const Error& e) {
            throw SchemaError(c.path() + ".file", e.what());
        }
        ci.prompt.char_id = c.str("char_id");
        ci.prompt.pose = c.enumerated("pose", pose_from_string);
        ci.prompt.tone = c.enumerated("tone", tone_from_string);
        ci.jitter_seed = c.unsigned_integer("jitter_seed");
        pack.core_images.push_back(std::move(ci));
    }
    for (const JsonReader& d : r.array("dialogues")) {
        pack.dialogues.push_back({d.str("user_input"), d.str("response")});
    }
    for (const JsonReader& m : r.array("mm_samples")) {
        pack.mm_samples.push_back({static_cast<int>(m.integer("image_index")), m.str("user_input"),
                                   m.str("response"), m.str("thinking"), m.str("instruction")});
    }
    for (const JsonReader& k : r.array("kqa")) {
        pack.kqa.push_back({k.str("question"), k.str("answer")});
    }
    for (const JsonReader& v : r.array("vqa")) {
        pack.vqa.push_back({static_cast<int>(v.integer("image_index")), v.enumerated("kind", vqa_kind_from_string),
                            v.str("question"), v.str("answer")});
    }
    for (const JsonReader& m : r.array("mcq")) {
        McqItem item;
        const std::string family = m.str("family");
        if (family != "knowledge" && family != "visual") {
            throw SchemaError(m.path() + ".family", "expected knowledge or visual");
        }
        item.family = family == "knowledge" ? McqFamily::knowledge : McqFamily::visual;
        item.question = m.str("question");
        const auto opts = m.array("options");
        if (opts.size() != 4) {
            throw SchemaError(m.path() + ".options", "expected exactly 4 options");
        }
        for (size_t i = 0; i < 4; ++i) {
            if (!opts[i].value().is_string()) {
                throw SchemaError(opts[i].path(), "expected a string");
            }
            item.options[i] = opts[i].value().get<std::string>();
        }
        const std::string key = m.str("answer_key");
        if (key.size() != 1) {
            throw SchemaError(m.path() + ".answer_key", "must be one of A,B,C,D");
        }
        item.answer_key = key[0];
        pack.mcq.push_back(std::move(item));
    }
    validate(pack);
    return pack;
}

}  // namespace charforge
