#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "ape/config.hpp"
#include "ape/dataset.hpp"

using namespace ape;
namespace fs = std::filesystem;

namespace {

/// Small two-organ layout that passes the spec validator fast.
PhantomSpec small_spec() {
    PhantomSpec spec;
    spec.grid_shape = {24, 24, 16};
    spec.spacing_mm = {2.0, 2.0, 3.0};
    spec.center_jitter_mm = 1.0;
    spec.deform_amplitude_mm = 1.0;
    OrganTemplate a{"alpha", {-0.25, -0.25, -0.2}, {4.0, 4.0, 4.0}, 60.0};
    OrganTemplate b{"beta", {0.25, 0.25, 0.2}, {4.0, 4.0, 4.0}, 90.0};
    spec.organs = {a, b};
    return spec;
}

std::string fresh_dir(const std::string& tag) {
    const auto dir = fs::temp_directory_path() / ("ape_ds_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir.string();
}

} // namespace

TEST_CASE("dataset sample round trip preserves every byte and coordinate") {
    const auto dir = fresh_dir("roundtrip");
    const auto sample = generate_phantom(small_spec(), 77);
    dataset::save_sample(dir, "s0", sample);

    const Volume v = dataset::load_sample_volume(dir, "s0");
    CHECK(v.shape == sample.volume.shape);
    CHECK(v.spacing == sample.volume.spacing);
    CHECK(v.origin == sample.volume.origin);
    CHECK(v.data == sample.volume.data);

    for (std::size_t i = 0; i < sample.labels.size(); ++i) {
        const Mask m = dataset::load_sample_mask(dir, "s0", sample.labels[i]);
        CHECK(m.shape == sample.masks[i].shape);
        CHECK(m.data == sample.masks[i].data);
    }

    const auto lms = dataset::load_sample_landmarks(dir, "s0");
    REQUIRE(lms.size() == sample.landmarks.size());
    for (std::size_t i = 0; i < lms.size(); ++i) {
        CHECK(lms[i].label == sample.landmarks[i].label);
        // %.17g round-trips doubles exactly
        CHECK(lms[i].center_mm == sample.landmarks[i].center_mm);
        for (std::size_t e = 0; e < 6; ++e)
            CHECK(lms[i].edge_points_mm[e] == sample.landmarks[i].edge_points_mm[e]);
    }
}

TEST_CASE("generate writes an index that lists exactly the written ids") {
    const auto dir = fresh_dir("index");
    const auto ids = dataset::generate(small_spec(), 3, 5, dir);
    REQUIRE(ids == std::vector<std::string>{"phantom_000", "phantom_001", "phantom_002"});
    CHECK(dataset::read_index(dir) == ids);
    for (const auto& id : ids) {
        CHECK(fs::exists(dir + "/" + id + "_volume.raw"));
        CHECK(fs::exists(dir + "/" + id + "_mask_alpha.raw"));
        CHECK(fs::exists(dir + "/" + id + "_mask_beta.raw"));
        CHECK(fs::exists(dir + "/" + id + "_landmarks.txt"));
    }
    CHECK_THROWS_AS(dataset::generate(small_spec(), 0, 5, dir), config_error);
}

TEST_CASE("generate is byte-identical across reruns with the same seed") {
    const auto dir_a = fresh_dir("rerun_a");
    const auto dir_b = fresh_dir("rerun_b");
    dataset::generate(small_spec(), 2, 123, dir_a);
    dataset::generate(small_spec(), 2, 123, dir_b);
    int files = 0;
    for (const auto& entry : fs::directory_iterator(dir_a)) {
        const auto name = entry.path().filename().string();
        CHECK(ape::detail::read_file(dir_a + "/" + name) ==
              ape::detail::read_file(dir_b + "/" + name));
        ++files;
    }
    CHECK(files == 2 * 7 + 1); // per phantom: volume + 2 masks (raw+meta each) + landmarks

    // different seeds diverge
    const auto dir_c = fresh_dir("rerun_c");
    dataset::generate(small_spec(), 2, 124, dir_c);
    CHECK(ape::detail::read_file(dir_a + "/phantom_000_volume.raw") !=
          ape::detail::read_file(dir_c + "/phantom_000_volume.raw"));
}

TEST_CASE("landmark files reject malformed and truncated lines") {
    const auto dir = fresh_dir("badlm");
    ape::detail::write_file(dir + "/bad_landmarks.txt", "alpha 1 2\n");
    CHECK_THROWS_AS(dataset::load_landmarks(dir + "/bad_landmarks.txt"), io_error);
    ape::detail::write_file(dir + "/trunc_landmarks.txt", "alpha 1 2 3 4 5 6\n");
    CHECK_THROWS_AS(dataset::load_landmarks(dir + "/trunc_landmarks.txt"), io_error);

    // a correct single line parses
    ape::detail::write_file(dir + "/ok_landmarks.txt",
                            "alpha 1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16 17 18 19 20 21\n");
    const auto lms = dataset::load_landmarks(dir + "/ok_landmarks.txt");
    REQUIRE(lms.size() == 1);
    CHECK(lms[0].center_mm == dvec3{1, 2, 3});
    CHECK(lms[0].edge_points_mm[5] == dvec3{19, 20, 21});
}

TEST_CASE("config parser handles comments, whitespace and bad lines") {
    const auto kv = config::parse_pairs("# full line comment\n"
                                        "  seed = 42  # trailing comment\n"
                                        "\n"
                                        "workers=2\n");
    REQUIRE(kv.size() == 2);
    CHECK(kv.at("seed") == "42");
    CHECK(kv.at("workers") == "2");

    CHECK_THROWS_AS(config::parse_pairs("seed 42\n"), config_error);
    CHECK_THROWS_AS(config::parse_pairs("= 42\n"), config_error);
    CHECK_THROWS_AS(config::parse_pairs("seed = 1\nseed = 2\n"), config_error);
    CHECK_THROWS_MATCHES(config::parse_pairs("a = 1\nb\n"), config_error,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("line 2")));
}

TEST_CASE("config rejects unknown keys and bad value types") {
    CHECK_THROWS_MATCHES(config::parse("train.stpes = 100\n"), config_error,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("train.stpes")));
    CHECK_THROWS_AS(config::parse("train.steps = soon\n"), config_error);
    CHECK_THROWS_AS(config::parse("train.lr = fast\n"), config_error);
    CHECK_THROWS_AS(config::parse("train.log_wallclock = yes\n"), config_error);
    CHECK_THROWS_AS(config::parse("embed.blend = cubic\n"), config_error);
    CHECK_THROWS_AS(config::parse("sampler.spacing_min_mm = 1,2\n"), config_error);
    CHECK_THROWS_AS(config::parse("train.variant = fancy\n"), config_error);
}

TEST_CASE("config keys land on the right fields") {
    const auto cfg = config::parse("seed = 7\n"
                                   "workers = 3\n"
                                   "generate.count = 12\n"
                                   "eval.shots = 4\n"
                                   "train.variant = equiv\n"
                                   "train.lambda = 0.5\n"
                                   "train.steps = 321\n"
                                   "train.pairs_per_step = 6\n"
                                   "train.voxels_per_patch = 100\n"
                                   "train.lr = 0.001\n"
                                   "train.weight_decay = 0.01\n"
                                   "train.clip = 2.5\n"
                                   "train.checkpoint_every = 50\n"
                                   "train.phantom_count = 9\n"
                                   "train.log_wallclock = true\n"
                                   "sampler.patch_budget = 4096\n"
                                   "sampler.aspect_ratio_max = 1.5\n"
                                   "sampler.min_overlap_fraction = 0.4\n"
                                   "sampler.spacing_min_mm = 1, 1, 2\n"
                                   "sampler.spacing_max_mm = 3, 3, 5\n"
                                   "model.stem_channels = 8\n"
                                   "model.encoder_channels = 8, 16\n"
                                   "model.decoder_channels = 16\n"
                                   "model.bn_eps = 1e-4\n"
                                   "model.bn_momentum = 0.2\n"
                                   "phantom.noise_std_hu = 5\n"
                                   "phantom.deform_amplitude_mm = 1.5\n"
                                   "phantom.center_jitter_mm = 0.5\n"
                                   "embed.window = 16, 16, 12\n"
                                   "embed.overlap = 0.25\n"
                                   "embed.blend = nearest\n");
    CHECK(cfg.seed == 7);
    CHECK(cfg.workers == 3);
    CHECK(cfg.generate_count == 12);
    CHECK(cfg.eval_shots == 4);
    CHECK(cfg.train.variant == Variant::equiv);
    CHECK(cfg.train.lambda == 0.5);
    CHECK(cfg.train.steps == 321);
    CHECK(cfg.train.pairs_per_step == 6);
    CHECK(cfg.train.voxels_per_patch == 100);
    CHECK(cfg.train.lr == 0.001);
    CHECK(cfg.train.weight_decay == 0.01);
    CHECK(cfg.train.clip == 2.5);
    CHECK(cfg.train.checkpoint_every == 50);
    CHECK(cfg.train.phantom_count == 9);
    CHECK(cfg.train.log_wallclock);
    CHECK(cfg.train.sampler.patch_budget == 4096);
    CHECK(cfg.train.sampler.aspect_ratio_max == 1.5);
    CHECK(cfg.train.sampler.min_overlap_fraction == 0.4);
    CHECK(cfg.train.sampler.spacing_min_mm == dvec3{1, 1, 2});
    CHECK(cfg.train.sampler.spacing_max_mm == dvec3{3, 3, 5});
    CHECK(cfg.train.model.stem_channels == 8);
    CHECK(cfg.train.model.encoder_channels == std::vector<int>{8, 16});
    CHECK(cfg.train.model.decoder_channels == std::vector<int>{16});
    CHECK(cfg.train.model.bn_eps == 1e-4);
    CHECK(cfg.train.model.bn_momentum == 0.2);
    CHECK(cfg.train.phantom.noise_std_hu == 5);
    CHECK(cfg.train.phantom.deform_amplitude_mm == 1.5);
    CHECK(cfg.train.phantom.center_jitter_mm == 0.5);
    CHECK(cfg.embed.window == ivec3{16, 16, 12});
    CHECK(cfg.embed.overlap == 0.25);
    CHECK(cfg.embed.blend == BlendMode::nearest);

    // defaults survive an empty document
    const auto dflt = config::parse("");
    CHECK(dflt.seed == 0);
    CHECK(dflt.train.variant == Variant::augm);
    CHECK(dflt.train.steps == 2000);
    CHECK(dflt.generate_count == 20);
    CHECK(dflt.eval_shots == 5);
    CHECK(dflt.embed.blend == BlendMode::triangular);
}
