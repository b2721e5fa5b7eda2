#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cli.hpp"
#include "gridfill/hash.hpp"
#include "gridfill/parallel.hpp"
#include "gridfill/remote.hpp"
#include "gridfill/train.hpp"

using namespace gridfill;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run gridfill_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "gridfill_test_cli" / name;
  fs::remove_all(p);
  return p;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in);
  return json::parse(in);
}

/// Relative path -> sha256 of every file except the run manifest.
std::map<std::string, std::string> tree_hashes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "MANIFEST.json")
      out[fs::relative(e.path(), dir).generic_string()] = sha256_file(e.path().string());
  return out;
}

const fs::path& small_dataset() {
  static const fs::path dir = [] {
    const fs::path d = scratch("dataset");
    const Run r = gridfill_cli({"make-synthetic", "--out", d.string(), "--views", "8", "--width", "16", "--height",
                                "16", "--field-res", "24", "--render-samples", "64", "--seed", "3"});
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("make-synthetic writes a deterministic dataset") {
  const fs::path a = scratch("syn_a"), b = scratch("syn_b");
  const std::vector<std::string> flags{"--views", "4", "--width", "16", "--height", "16", "--field-res", "16",
                                       "--render-samples", "32", "--seed", "11"};
  std::vector<std::string> args_a{"make-synthetic", "--out", a.string()}, args_b{"make-synthetic", "--out", b.string()};
  args_a.insert(args_a.end(), flags.begin(), flags.end());
  args_b.insert(args_b.end(), flags.begin(), flags.end());
  REQUIRE(gridfill_cli(args_a).code == 0);
  REQUIRE(gridfill_cli(args_b).code == 0);

  CHECK(load_dataset(a.string()).size() == 4);
  const auto ha = tree_hashes(a);
  CHECK(ha.count("gt_field.gfv") == 1);
  CHECK(ha.count("gt/index.json") == 1);
  CHECK(ha == tree_hashes(b));

  json ma = read_json(a / "MANIFEST.json"), mb = read_json(b / "MANIFEST.json");
  CHECK(ma["command"] == "make-synthetic");
  CHECK(ma["config"]["views"] == 4);
  CHECK(ma["config"]["seed"] == 11);
  CHECK(ma["config"]["background"] == "white");
  CHECK(ma["artifacts"].size() == ha.size());
  ma.erase("created");
  mb.erase("created");
  ma["config"].erase("out");
  mb["config"].erase("out");
  CHECK(ma == mb);

  const fs::path c = scratch("syn_c");
  std::vector<std::string> args_c{"make-synthetic", "--out", c.string()};
  args_c.insert(args_c.end(), flags.begin(), flags.end());
  args_c.back() = "12";
  REQUIRE(gridfill_cli(args_c).code == 0);
  CHECK(tree_hashes(c) != ha);
}

TEST_CASE("flags and config files") {
  const fs::path d = small_dataset();
  SUBCASE("unknown flags are rejected") {
    CHECK(gridfill_cli({"train", "--data", d.string(), "--out", scratch("x").string(), "--bogus", "1"}).code ==
          cli::exit_config);
    CHECK(gridfill_cli({"make-synthetic", "--out", scratch("x").string(), "--view", "4"}).code == cli::exit_config);
    CHECK(gridfill_cli({"frobnicate"}).code == cli::exit_config);
    CHECK(gridfill_cli({}).code == cli::exit_config);
  }
  SUBCASE("invalid values are config errors") {
    CHECK(gridfill_cli({"make-synthetic", "--out", scratch("x").string(), "--views", "0"}).code == cli::exit_config);
    CHECK(gridfill_cli({"train", "--data", d.string(), "--out", scratch("x").string(), "--mode", "magic"}).code ==
          cli::exit_config);
    CHECK(gridfill_cli({"train", "--data", d.string(), "--out", scratch("x").string(), "--warmup", "10",
                        "--total", "20", "--t-min", "2"})
              .code == cli::exit_config);
  }
  SUBCASE("help succeeds") { CHECK(gridfill_cli({"--help"}).code == 0); }

  SUBCASE("config values apply and flags win") {
    const fs::path out = scratch("cfg");
    fs::create_directories(out);
    const fs::path cfg = out / "cfg.json";
    std::ofstream(cfg) << R"({"views": 5, "width": 16, "height": 16, "field-res": 8, "render-samples": 16,
                             "seed": 4, "occluder-min": [-0.2, -1.0, -0.7]})";
    const fs::path run = out / "run";
    const Run r = gridfill_cli({"--config", cfg.string(), "make-synthetic", "--out", run.string(), "--views", "2"});
    REQUIRE(r.code == 0);
    const json m = read_json(run / "MANIFEST.json");
    CHECK(m["config"]["views"] == 2);
    CHECK(m["config"]["seed"] == 4);
    CHECK(m["config"]["field-res"] == 8);
    CHECK(m["config"]["occluder-min"] == json::array({-0.2, -1.0, -0.7}));
    CHECK(load_dataset(run.string()).size() == 2);
  }
  SUBCASE("bad config files") {
    const fs::path out = scratch("badcfg");
    fs::create_directories(out);
    std::ofstream(out / "unknown.json") << R"({"viewz": 5})";
    std::ofstream(out / "broken.json") << R"({"views": )";
    std::ofstream(out / "nested.json") << R"({"views": {"a": 1}})";
    for (const char* f : {"unknown.json", "broken.json", "nested.json", "missing.json"}) {
      const Run r =
          gridfill_cli({"--config", (out / f).string(), "make-synthetic", "--out", (out / "run").string()});
      CHECK_MESSAGE(r.code == cli::exit_config, f);
    }
  }
  SUBCASE("threads flag caps workers") {
    const unsigned before = thread_cap();
    REQUIRE(gridfill_cli({"--threads", "1", "eval", "--field", (d / "gt_field.gfv").string(), "--data",
                          d.string(), "--out", scratch("threads").string(), "--samples", "16"})
                .code == 0);
    CHECK(thread_cap() == 1);
    thread_cap() = before;
  }
}

TEST_CASE("exit codes for data and backend failures") {
  const fs::path d = small_dataset();
  CHECK(gridfill_cli({"train", "--data", scratch("missing").string(), "--out", scratch("x").string()}).code ==
        cli::exit_data);
  CHECK(gridfill_cli({"eval", "--field", scratch("nofield.gfv").string(), "--data", d.string(), "--out",
                      scratch("x").string()})
            .code == cli::exit_data);
  const Run r = gridfill_cli({"inpaint-joint", "--data", d.string(), "--out", scratch("x").string(), "--backend",
                              "remote", "--endpoint", "unix:" + scratch("none.sock").string()});
  CHECK(r.code == cli::exit_backend);
  CHECK(r.err.find("backend error") != std::string::npos);
  CHECK(gridfill_cli({"inpaint-joint", "--data", d.string(), "--out", scratch("x").string(), "--backend", "remote"})
            .code == cli::exit_config);
}

TEST_CASE("inpaint-joint keeps known pixels and records provenance") {
  const fs::path d = small_dataset();
  const MultiViewDataset before = load_dataset(d.string());

  SUBCASE("single grid with the gaussian oracle") {
    const fs::path out = scratch("inp_gauss");
    const Run r = gridfill_cli({"inpaint-joint", "--data", d.string(), "--out", out.string(), "--backend",
                                "gaussian", "--n", "4", "--m", "1", "--steps", "5", "--seed", "2"});
    REQUIRE(r.code == 0);
    const MultiViewDataset after = load_dataset((out / "dataset").string());
    CHECK(known_pixel_checksum(after) == known_pixel_checksum(before));
    const json prov = read_json(out / "inpaint.json");
    CHECK(prov["views"] == json::array({0, 1, 2, 3}));
    CHECK(prov["grids_per_repeat"] == 1);
    CHECK(prov["padding_views"] == 0);
    CHECK(prov["backend"]["name"] == "analytic-gaussian");
    CHECK(prov["seed"] == 2);
    CHECK(prov.contains("consistency"));
    // Views outside the batch are untouched.
    for (int v = 4; v < before.size(); ++v)
      CHECK((after.frames[v].image.values() == before.frames[v].image.values()).all());
    int changed = 0;
    for (int v = 0; v < 4; ++v) changed += !(after.frames[v].image.values() == before.frames[v].image.values()).all();
    CHECK(changed == 4);
  }
  SUBCASE("odd batches are padded") {
    const fs::path out = scratch("inp_pad");
    REQUIRE(gridfill_cli({"inpaint-joint", "--data", d.string(), "--out", out.string(), "--first", "2", "--n", "5",
                          "--m", "2", "--steps", "3"})
                .code == 0);
    const json prov = read_json(out / "inpaint.json");
    CHECK(prov["views"] == json::array({2, 3, 4, 5, 6}));
    CHECK(prov["padding_views"] == 3);
    CHECK(prov["grids_per_repeat"] == 2);
    CHECK(known_pixel_checksum(load_dataset((out / "dataset").string())) == known_pixel_checksum(before));
  }
  SUBCASE("reproducible given the seed") {
    const fs::path a = scratch("inp_a"), b = scratch("inp_b");
    for (const auto& out : {a, b})
      REQUIRE(gridfill_cli({"inpaint-joint", "--data", d.string(), "--out", out.string(), "--m", "2", "--steps", "4",
                            "--seed", "9"})
                  .code == 0);
    CHECK(tree_hashes(a / "dataset") == tree_hashes(b / "dataset"));
  }
  SUBCASE("reference view must be selected") {
    CHECK(gridfill_cli({"inpaint-joint", "--data", d.string(), "--out", scratch("x").string(), "--n", "4",
                        "--reference", "6"})
              .code == cli::exit_config);
  }
}

TEST_CASE("inpaint-joint with a reference view makes ten grids for 31 views") {
  const fs::path d = scratch("syn31");
  REQUIRE(gridfill_cli({"make-synthetic", "--out", d.string(), "--views", "31", "--width", "8", "--height", "8",
                        "--field-res", "8", "--render-samples", "16"})
              .code == 0);
  const fs::path out = scratch("inp31");
  REQUIRE(gridfill_cli({"inpaint-joint", "--data", d.string(), "--out", out.string(), "--reference", "0", "--m", "1",
                        "--steps", "2"})
              .code == 0);
  const json prov = read_json(out / "inpaint.json");
  CHECK(prov["grids_per_repeat"] == 10);
  CHECK(prov["padding_views"] == 0);
  const MultiViewDataset before = load_dataset(d.string()), after = load_dataset((out / "dataset").string());
  CHECK((after.frames[0].image.values() == before.frames[0].image.values()).all());
  CHECK(known_pixel_checksum(after) == known_pixel_checksum(before));
}

TEST_CASE("inpaint-joint against a stub model server") {
  const fs::path d = small_dataset();
  const fs::path sock = scratch("stub.sock");
  fs::create_directories(sock.parent_path());
  StubServer server("unix:" + sock.string(), {});
  const fs::path out = scratch("inp_remote");
  const Run r = gridfill_cli({"inpaint-joint", "--data", d.string(), "--out", out.string(), "--backend", "remote",
                              "--endpoint", server.endpoint(), "--n", "4", "--m", "2", "--steps", "3"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(server.requests_served() > 1);
  const json prov = read_json(out / "inpaint.json");
  CHECK(prov["backend"]["name"] == "remote");
  CHECK(read_json(out / "MANIFEST.json")["backend"]["name"] == "remote");
  CHECK(known_pixel_checksum(load_dataset((out / "dataset").string())) ==
        known_pixel_checksum(load_dataset(d.string())));
}

TEST_CASE("train, render and eval") {
  const fs::path d = small_dataset();
  const std::vector<std::string> small{"--total", "40", "--warmup", "20", "--interval", "10", "--batch-views", "4",
                                       "--m", "2", "--steps", "4", "--field-res", "12", "--rays", "128",
                                       "--samples", "16", "--eval-samples", "16", "--seed", "5"};
  auto train = [&](const fs::path& out, std::vector<std::string> extra) {
    std::vector<std::string> args{"train", "--data", d.string(), "--out", out.string()};
    args.insert(args.end(), small.begin(), small.end());
    args.insert(args.end(), extra.begin(), extra.end());
    return gridfill_cli(args);
  };

  const fs::path a = scratch("train_a"), b = scratch("train_b");
  REQUIRE(train(a, {}).code == 0);
  REQUIRE(train(b, {}).code == 0);
  CHECK(sha256_file((a / "field.gfv").string()) == sha256_file((b / "field.gfv").string()));
  CHECK(tree_hashes(a / "dataset") == tree_hashes(b / "dataset"));

  const json report = read_json(a / "report.json");
  CHECK(report["cli"]["mode"] == "joint-du");
  CHECK(report["cli"]["interval"] == 10);
  CHECK(report["config"]["update_interval"] == 10);
  CHECK(report["updates"].size() == 4);
  CHECK(report["known_checksum"]["before"] == report["known_checksum"]["after"]);
  const json manifest = read_json(a / "MANIFEST.json");
  CHECK(manifest["command"] == "train");
  bool has_field = false;
  for (const json& art : manifest["artifacts"]) has_field |= art["path"] == "field.gfv";
  CHECK(has_field);

  SUBCASE("modes and depth supervision") {
    const fs::path m = scratch("train_masked");
    REQUIRE(train(m, {"--mode", "masked-only"}).code == 0);
    CHECK(read_json(m / "report.json")["updates"].empty());
    const fs::path r = scratch("train_random");
    REQUIRE(train(r, {"--noise-schedule", "random", "--depth-weight", "0.1"}).code == 0);
    CHECK(read_json(r / "report.json")["config"]["noise_schedule"] == "random");
  }

  SUBCASE("orbit render defaults to 300 frames") {
    const fs::path out = scratch("render");
    REQUIRE(gridfill_cli({"render", "--field", (a / "field.gfv").string(), "--out", out.string(), "--width", "4",
                          "--height", "4", "--samples", "8"})
                .code == 0);
    const json index = read_json(out / "renders" / "index.json");
    CHECK(index["frames"].size() == 300);
    CHECK(fs::exists(out / "renders" / "color" / "0299.png"));
  }

  SUBCASE("render the dataset cameras") {
    const fs::path out = scratch("render_data");
    REQUIRE(gridfill_cli({"render", "--field", (d / "gt_field.gfv").string(), "--out", out.string(), "--data",
                          d.string(), "--samples", "64"})
                .code == 0);
    CHECK(read_json(out / "renders" / "index.json")["frames"].size() == 8);
  }

  SUBCASE("eval writes metrics") {
    const fs::path out = scratch("eval");
    REQUIRE(gridfill_cli({"eval", "--field", (d / "gt_field.gfv").string(), "--data", d.string(), "--out",
                          out.string(), "--gt", "--samples", "64"})
                .code == 0);
    const json m = read_json(out / "metrics.json");
    CHECK(m["aggregate"]["psnr"].get<double>() > 35.0);
    CHECK(fs::exists(out / "metrics.csv"));
    const fs::path trained = scratch("eval_trained");
    REQUIRE(gridfill_cli({"eval", "--field", (a / "field.gfv").string(), "--data", d.string(), "--out",
                          trained.string(), "--gt", "--samples", "64"})
                .code == 0);
    CHECK(read_json(trained / "metrics.json")["aggregate"]["psnr"].get<double>() < m["aggregate"]["psnr"].get<double>());
  }
}
