#include "charforge/errors.hpp"
#include "charforge/json_util.hpp"
#include "charforge/rng.hpp"
#include "charforge/toyworld.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <fstream>
#include <set>

using namespace charforge;

namespace {

nlohmann::json spec_json(const CharacterSpec& s) {
    return {{"char_id", s.char_id},
            {"base_color", s.base_color},
            {"shape", to_string(s.shape)},
            {"marker_quadrant", to_string(s.marker_quadrant)},
            {"marker_color", s.marker_color}};
}

}  // namespace

TEST_CASE("make_character is deterministic and valid") {
    CHECK(make_character(0) == make_character(0));
    for (uint64_t seed = 0; seed < 200; ++seed) {
        CHECK_NOTHROW(validate(make_character(seed)));
    }
}

TEST_CASE("make_character seed 0 matches golden file") {
    const auto golden = read_json_file(std::filesystem::path(CHARFORGE_GOLDEN_DIR) / "character_seed0.json");
    CHECK(spec_json(make_character(0)) == golden);
}

TEST_CASE("seeds 0..99 give at least 95 distinct characters (ignoring id)") {
    std::vector<CharacterSpec> specs;
    for (uint64_t seed = 0; seed < 100; ++seed) {
        auto s = make_character(seed);
        s.char_id.clear();
        specs.push_back(s);
    }
    // brute-force pairwise comparison
    int distinct = 0;
    for (size_t i = 0; i < specs.size(); ++i) {
        bool dup = false;
        for (size_t j = 0; j < i; ++j) {
            dup = dup || specs[i] == specs[j];
        }
        distinct += dup ? 0 : 1;
    }
    CHECK(distinct >= 95);
}

TEST_CASE("render_scene is deterministic and rejects foreign prompts") {
    const auto spec = make_character(3);
    const PromptSpec p{spec.char_id, Pose::center, Tone::bright};
    CHECK(render_scene(spec, p, 7) == render_scene(spec, p, 7));
    CHECK_THROWS_AS(render_scene(spec, PromptSpec{"someone-else", Pose::left, Tone::dim}, 0), IdentityMismatch);
}

TEST_CASE("pose orders the column centroid, tone lowers brightness") {
    for (uint64_t seed = 0; seed < 50; ++seed) {
        const auto spec = make_character(seed);
        for (Tone tone : kTones) {
            const double l = column_centroid(render_scene(spec, {spec.char_id, Pose::left, tone}, 0));
            const double c = column_centroid(render_scene(spec, {spec.char_id, Pose::center, tone}, 0));
            const double r = column_centroid(render_scene(spec, {spec.char_id, Pose::right, tone}, 0));
            CHECK(l < c);
            CHECK(c < r);
        }
        for (Pose pose : kPoses) {
            const auto bright = render_scene(spec, {spec.char_id, pose, Tone::bright}, 0);
            const auto dim = render_scene(spec, {spec.char_id, pose, Tone::dim}, 0);
            CHECK(dim.mean() < bright.mean());
        }
    }
}

TEST_CASE("jitter moves the glyph by at most 2 pixels") {
    for (uint64_t j = 0; j < 100; ++j) {
        const auto [dx, dy] = jitter_offset(j);
        CHECK(std::abs(dx) <= 2);
        CHECK(std::abs(dy) <= 2);
        if (j != 0) {
            CHECK((dx != 0 || dy != 0));
        }
    }
    CHECK(jitter_offset(0) == std::array<int, 2>{0, 0});
}

TEST_CASE("vqa_oracle recovers the generating fields on renders") {
    for (uint64_t seed = 0; seed < 100; ++seed) {
        const auto spec = make_character(seed);
        for (const auto& prompt : all_prompts(spec.char_id)) {
            for (uint64_t jitter : {0u, 1u, 2u, 3u, 17u}) {
                const auto img = render_scene(spec, prompt, jitter);
                CAPTURE(seed);
                CAPTURE(jitter);
                CHECK(vqa_oracle(img, {VqaKind::dominant_color}) == color_name(spec.base_color));
                CHECK(vqa_oracle(img, {VqaKind::shape}) == to_string(spec.shape));
                CHECK(vqa_oracle(img, {VqaKind::marker_quadrant}) == to_string(spec.marker_quadrant));
            }
        }
    }
}

TEST_CASE("vqa_oracle on a red disk and on blank images") {
    CharacterSpec spec;
    spec.char_id = "redone";
    spec.base_color = {1.0, 0.0, 0.0};
    spec.marker_color = {0.0, 0.0, 1.0};
    spec.shape = Shape::disk;
    spec.marker_quadrant = Quadrant::NE;
    const auto img = render_scene(spec, {"redone", Pose::center, Tone::bright}, 0);
    CHECK(vqa_oracle(img, {VqaKind::shape}) == "disk");
    CHECK(vqa_oracle(img, {VqaKind::dominant_color}) == "red");
    CHECK(vqa_oracle(img, {VqaKind::marker_quadrant}) == "NE");

    const ToyImage black;
    CHECK(vqa_oracle(black, {VqaKind::dominant_color}) == "unknown");
    CHECK(vqa_oracle(black, {VqaKind::shape}) == "unknown");
    CHECK(vqa_oracle(ToyImage::filled(0.04f), {VqaKind::dominant_color}) == "unknown");
}

TEST_CASE("build_pack satisfies the schema and its VQA answers re-derive") {
    const auto spec = make_character(5);
    const auto pack = build_pack(spec, 11, {10, 160, 10, 10});
    CHECK_NOTHROW(validate(pack));
    CHECK(pack.core_images.size() == 10);
    CHECK(pack.dialogues.size() == 160);
    std::set<std::tuple<Pose, Tone, std::array<int, 2>>> combos;
    for (const auto& c : pack.core_images) {
        combos.insert({c.prompt.pose, c.prompt.tone, jitter_offset(c.jitter_seed)});
    }
    CHECK(combos.size() == pack.core_images.size());
    for (const auto& item : pack.vqa) {
        CHECK(vqa_oracle(pack.core_images[static_cast<size_t>(item.image_index)].image, {item.kind}) == item.answer);
    }
    for (const auto& m : pack.mcq) {
        const auto key = static_cast<size_t>(m.answer_key - 'A');
        int hits = 0;
        for (size_t i = 0; i < 4; ++i) {
            for (size_t j = i + 1; j < 4; ++j) {
                CHECK(m.options[i] != m.options[j]);
            }
        }
        hits += key < 4 ? 1 : 0;
        CHECK(hits == 1);
    }
    CHECK(build_pack(spec, 11, {10, 160, 10, 10}) == pack);
}

TEST_CASE("build_pack rejects out-of-range sizes") {
    const auto spec = make_character(1);
    CHECK_THROWS_AS(build_pack(spec, 0, {4, 160, 10, 10}), InvalidArgument);
    CHECK_THROWS_AS(build_pack(spec, 0, {16, 160, 10, 10}), InvalidArgument);
    CHECK_THROWS_AS(build_pack(spec, 0, {10, 149, 10, 10}), InvalidArgument);
    CHECK_THROWS_AS(build_pack(spec, 0, {10, 251, 10, 10}), InvalidArgument);
}

TEST_CASE("pack round trip through disk is exact") {
    testing::TempDir dir("pack");
    const auto pack = build_pack(make_character(9), 4);
    write_pack(pack, dir.path());
    CHECK(load_pack(dir.path()) == pack);
}

TEST_CASE("pack loader names the first failing field") {
    testing::TempDir dir("pack");
    const auto pack = build_pack(make_character(2), 4);
    write_pack(pack, dir.path());
    auto j = read_json_file(dir / "pack.json");

    SUBCASE("too few core images") {
        auto& cores = j["core_images"];
        cores.erase(cores.begin() + 4, cores.end());
        write_json_file(j, dir / "pack.json");
        try {
            load_pack(dir.path());
            FAIL("expected schema error");
        } catch (const SchemaError& e) {
            CHECK(e.field() == "core_images length");
        }
    }
    SUBCASE("bad enum") {
        j["core_images"][2]["pose"] = "upside-down";
        write_json_file(j, dir / "pack.json");
        try {
            load_pack(dir.path());
            FAIL("expected schema error");
        } catch (const SchemaError& e) {
            CHECK(e.field() == "core_images[2].pose");
        }
    }
    SUBCASE("truncated file") {
        const std::string text = j.dump();
        std::ofstream(dir / "pack.json", std::ios::trunc) << text.substr(0, text.size() / 2);
        CHECK_THROWS_AS(load_pack(dir.path()), ParseError);
    }
    SUBCASE("truncated image") {
        std::ofstream(dir / "core_000.f32", std::ios::binary | std::ios::trunc) << "abc";
        CHECK_THROWS_AS(load_pack(dir.path()), SchemaError);
    }
}

TEST_CASE("raw f32 files are byte exact") {
    testing::TempDir dir("raw");
    Rng rng(3);
    std::vector<double> v(ToyImage::kSize);
    for (auto& x : v) {
        x = rng.uniform();
    }
    const auto img = ToyImage::clamped(v);
    write_raw_f32(img, dir / "a.f32");
    CHECK(read_raw_f32(dir / "a.f32") == img);
    CHECK(std::filesystem::file_size(dir / "a.f32") == 3072);
}
