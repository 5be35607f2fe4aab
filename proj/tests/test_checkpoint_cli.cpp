#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <cstring>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "dyrep/checkpoint.hpp"
#include "dyrep/logs.hpp"
#include "dyrep/model_file.hpp"
#include "dyrep/runner.hpp"
#include "test_util.hpp"

using namespace dyrep;
using namespace dyrep::test;
namespace fs = std::filesystem;

namespace {

std::string temp_dir() {
  static int counter = 0;
  std::string d =
      (fs::temp_directory_path() / ("dyrep_cli_test_" + std::to_string(counter++))).string();
  fs::create_directories(d);
  return d;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
}

const char* kMiniConfig =
    "run.name = mini\n"
    "train.epochs = 3\n"
    "train.update_interval = 2\n"
    "train.batch_size = 16\n"
    "train.eval_batch_size = 32\n"
    "train.lr = 0.1\n"
    "train.seed = 3\n"
    "grow.calib_batches = 2\n"
    "model.widths = 4,6\n"
    "model.blocks = 1,1\n"
    "data.kind = synthetic\n"
    "data.subset = 64\n"
    "data.test_subset = 32\n"
    "data.classes = 4\n"
    "data.image_size = 8\n";

ResolvedConfig mini_config() {
  return resolve_config(FlatConfig::parse_text(kMiniConfig));
}

int run_cli(const std::string& args, const std::string& out_file) {
  const std::string cmd = std::string(DYREP_CLI_PATH) + " " + args + " > " + out_file + " 2>&1";
  int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("config parsing") {
  SUBCASE("values, comments and precedence") {
    FlatConfig cfg = FlatConfig::parse_text("train.lr = 0.25 # comment\n\n# full line\nt = 7\n");
    cfg.set("train.lr", "0.5");  // CLI override wins
    ResolvedConfig rc = resolve_config(cfg);
    CHECK(rc.train.lr == 0.5);
    CHECK(rc.train.update_interval == 7);
  }

  SUBCASE("unknown keys are rejected by name") {
    FlatConfig cfg = FlatConfig::parse_text("train.typo = 1\n");
    try {
      resolve_config(cfg);
      FAIL("expected unknown-key rejection");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("train.typo") != std::string::npos);
    }
  }

  SUBCASE("bad value types name the key") {
    FlatConfig cfg = FlatConfig::parse_text("train.epochs = soon\n");
    try {
      resolve_config(cfg);
      FAIL("expected type error");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("train.epochs") != std::string::npos);
    }
  }

  SUBCASE("canonical text round-trips through the parser and hashes stably") {
    ResolvedConfig rc = mini_config();
    ResolvedConfig rc2 = resolve_config(FlatConfig::parse_text(rc.canonical_text()));
    CHECK(rc.canonical_text() == rc2.canonical_text());
    CHECK(rc.hash() == rc2.hash());
    ResolvedConfig other = resolve_config(FlatConfig::parse_text("train.seed = 4\n"));
    CHECK(rc.hash() != other.hash());
  }
}

TEST_CASE("checkpoint round-trip resumes bit-identically") {
  ResolvedConfig cfg = mini_config();
  cfg.train.precision = "double";
  auto [tr, te] = make_datasets<double>(cfg.data);

  // Uninterrupted 3-epoch run, saving a checkpoint at every epoch boundary.
  const std::string dir = temp_dir();
  TrainState<double> full;
  full.model = build_model<double>(cfg.model, SplitRng(cfg.train.seed));
  full.ledger = SaliencyLedger(cfg.train.metric);
  TrainHooks<double> hooks;
  hooks.save = [&](TrainState<double>& st, bool) {
    save_checkpoint(st, cfg, dir + "/ep" + std::to_string(st.epoch) + ".ckpt");
  };
  TrainResult full_result = train(full, tr, te, cfg.train, &hooks);

  const std::string ckpt = dir + "/ep2.ckpt";
  TrainState<double> resumed = load_checkpoint<double>(ckpt, nullptr);
  CHECK(resumed.epoch == 2);
  TrainResult rest = train(resumed, tr, te, cfg.train);
  REQUIRE(rest.epochs.size() == 1);

  std::map<std::string, std::vector<double>> a, b;
  full.model.visit_params(TensorVisitor<double>(
      [&](const std::string& n, Tensor<double>& t) { a[n] = t.data; }));
  resumed.model.visit_params(TensorVisitor<double>(
      [&](const std::string& n, Tensor<double>& t) { b[n] = t.data; }));
  REQUIRE(a.size() == b.size());
  for (const auto& [name, va] : a) CHECK(va == b[name]);  // bitwise

  // Same for BN buffers and the final epoch metrics.
  std::map<std::string, std::vector<double>> ba, bb;
  full.model.visit_buffers(TensorVisitor<double>(
      [&](const std::string& n, Tensor<double>& t) { ba[n] = t.data; }));
  resumed.model.visit_buffers(TensorVisitor<double>(
      [&](const std::string& n, Tensor<double>& t) { bb[n] = t.data; }));
  for (const auto& [name, va] : ba) CHECK(va == bb[name]);
  CHECK(full_result.epochs.back().train_loss == rest.epochs.back().train_loss);

  SUBCASE("saving the same state twice is byte-identical") {
    const std::string c2 = dir + "/again.ckpt";
    save_checkpoint(resumed, cfg, c2);
    save_checkpoint(resumed, cfg, dir + "/again2.ckpt");
    CHECK(read_file(c2) == read_file(dir + "/again2.ckpt"));
  }

  SUBCASE("precision and version are enforced") {
    CHECK(checkpoint_precision(ckpt) == "double");
    CHECK_THROWS_AS(load_checkpoint<float>(ckpt, nullptr), std::invalid_argument);
    // Corrupt the version word.
    std::string bytes = read_file(ckpt);
    bytes[8] = 9;
    const std::string bad = dir + "/bad.ckpt";
    write_file(bad, bytes);
    CHECK_THROWS_AS(load_checkpoint<double>(bad, nullptr), std::invalid_argument);
  }
}

TEST_CASE("export writes a reloadable, byte-stable inference model") {
  ResolvedConfig cfg = mini_config();  // single precision
  const std::string dir = temp_dir();
  RunSummary s = run_train(cfg, dir + "/run");
  RunPaths paths{dir + "/run"};

  const std::string m1 = dir + "/model.drm";
  run_export(paths.final_checkpoint(), m1);
  run_export(paths.final_checkpoint(), dir + "/model2.drm");
  CHECK(read_file(m1) == read_file(dir + "/model2.drm"));

  LoadedModel loaded = read_model_file(m1);
  for (const auto& site : loaded.model.sites) CHECK_FALSE(site.expanded());

  // Deployed accuracy must equal the in-memory deployed model's accuracy.
  TrainState<float> state = load_checkpoint<float>(paths.final_checkpoint(), nullptr);
  deploy(state.model);
  auto [tr, te] = make_datasets<float>(cfg.data);
  EvalResult<float> mem = evaluate(state.model, te, 64);
  EvalResult<float> file = evaluate(loaded.model, te, 64);
  CHECK(mem.accuracy == file.accuracy);
  CHECK(mem.predictions == file.predictions);

  SUBCASE("export of a never-expanded model preserves the plain structure") {
    ResolvedConfig plain = mini_config();
    plain.train.rep_enabled = false;
    RunSummary s2 = run_train(plain, dir + "/plain");
    const std::string mp = dir + "/plain.drm";
    run_export(RunPaths{dir + "/plain"}.final_checkpoint(), mp);
    LoadedModel lp = read_model_file(mp);
    CHECK(lp.model.param_count() == build_model<float>(plain.model, SplitRng(1)).param_count());
  }

  SUBCASE("truncated model file is rejected with the failing section") {
    std::string bytes = read_file(m1);
    write_file(dir + "/trunc.drm", bytes.substr(0, bytes.size() / 2));
    try {
      read_model_file(dir + "/trunc.drm");
      FAIL("expected truncation error");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("section") != std::string::npos);
    }
  }
}

TEST_CASE("verify checks collapse equivalence per block") {
  ResolvedConfig cfg = mini_config();
  const std::string dir = temp_dir();
  run_train(cfg, dir + "/run");
  RunPaths paths{dir + "/run"};

  SUBCASE("freshly trained expanded model passes") {
    VerifyReport rep = run_verify(paths.final_checkpoint());
    CHECK(rep.pass);
    CHECK(!rep.blocks.empty());  // t=2 over 3 epochs expanded something
  }

  SUBCASE("a corrupted branch weight in the file fails, naming the block id") {
    // Patch the stored bytes of one in-branch conv weight directly, leaving
    // the sealed collapse reference untouched.
    std::string bytes = read_file(paths.final_checkpoint());
    uint64_t json_len = 0;
    std::memcpy(&json_len, bytes.data() + 16, 8);
    const std::string header_text = bytes.substr(24, json_len);
    size_t offset = 24 + json_len;
    size_t target_offset = 0;
    std::string corrupted;
    {
      auto header = nlohmann::json::parse(header_text);
      for (const auto& e : header.at("arrays")) {
        const std::string name = e.at("name");
        const size_t len = e.at("len");
        if (target_offset == 0 && name.rfind("param/", 0) == 0 &&
            name.find("/kxk.s0.conv.weight") != std::string::npos) {
          target_offset = offset;
          corrupted = name.substr(6, name.find('/', 6) - 6);  // the site id
        }
        offset += len * sizeof(float);
      }
    }
    REQUIRE(target_offset != 0);
    float v = 0.0f;
    std::memcpy(&v, bytes.data() + target_offset, 4);
    v += 0.5f;
    std::memcpy(bytes.data() + target_offset, &v, 4);
    write_file(dir + "/corrupt.ckpt", bytes);

    VerifyReport rep = run_verify(dir + "/corrupt.ckpt");
    CHECK_FALSE(rep.pass);
    bool named = false;
    for (const auto& b : rep.blocks)
      if (b.id == corrupted && b.deviation > rep.tolerance) named = true;
    CHECK(named);
  }

  SUBCASE("a plain model passes vacuously") {
    ResolvedConfig plain = mini_config();
    plain.train.rep_enabled = false;
    run_train(plain, dir + "/plain");
    VerifyReport rep = run_verify(RunPaths{dir + "/plain"}.final_checkpoint());
    CHECK(rep.pass);
    CHECK(rep.blocks.empty());
  }
}

TEST_CASE("run directory artifacts and determinism") {
  ResolvedConfig cfg = mini_config();
  const std::string dir = temp_dir();
  RunSummary s1 = run_train(cfg, dir + "/a");
  RunSummary s2 = run_train(cfg, dir + "/b");

  SUBCASE("byte-identical metrics, structure, scores and checkpoints") {
    for (const char* f : {"/metrics.jsonl", "/structure.jsonl", "/scores.csv",
                          "/checkpoints/final.ckpt", "/manifest.json"})
      CHECK(read_file(dir + "/a" + f) == read_file(dir + "/b" + f));
  }

  SUBCASE("metrics log has exactly one row per epoch") {
    std::istringstream in(read_file(dir + "/a/metrics.jsonl"));
    int rows = 0;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) ++rows;
    CHECK(rows == cfg.train.epochs);
  }

  SUBCASE("score report tabulates and marks the argmax") {
    std::string report = run_score_report(dir + "/a");
    CHECK(report.find("interval 1") != std::string::npos);
    CHECK(report.find("<- argmax") != std::string::npos);
    // The marked argmax agrees with the expand event in the structure log.
    std::string structure = read_file(dir + "/a/structure.jsonl");
    CHECK(structure.find("\"event\":\"expand\"") != std::string::npos);
  }
}

TEST_CASE("command-line interface") {
  const std::string dir = temp_dir();
  const std::string cfg_path = dir + "/mini.conf";
  write_file(cfg_path, kMiniConfig);

  SUBCASE("missing config file fails, naming the path") {
    const int rc = run_cli("train --config " + dir + "/nope.conf", dir + "/out.txt");
    CHECK(rc != 0);
    CHECK(read_file(dir + "/out.txt").find(dir + "/nope.conf") != std::string::npos);
  }

  SUBCASE("train, verify, export, score-report round trip") {
    const int rc =
        run_cli("train --config " + cfg_path + " --out " + dir + "/run", dir + "/train.txt");
    CHECK(rc == 0);
    CHECK(fs::exists(dir + "/run/metrics.jsonl"));
    CHECK(fs::exists(dir + "/run/manifest.json"));
    CHECK(fs::exists(dir + "/run/checkpoints/final.ckpt"));

    CHECK(run_cli("verify --checkpoint " + dir + "/run/checkpoints/final.ckpt",
                  dir + "/verify.txt") == 0);
    CHECK(read_file(dir + "/verify.txt").find("PASS") != std::string::npos);

    CHECK(run_cli("export --checkpoint " + dir + "/run/checkpoints/final.ckpt --out " + dir +
                      "/m.drm",
                  dir + "/export.txt") == 0);
    CHECK(fs::exists(dir + "/m.drm"));

    CHECK(run_cli("score-report --run " + dir + "/run", dir + "/report.txt") == 0);
    CHECK(read_file(dir + "/report.txt").find("argmax") != std::string::npos);
  }

  SUBCASE("--set t=9999 silences structural events") {
    const int rc = run_cli("train --config " + cfg_path + " --set t=9999 --out " + dir + "/quiet",
                           dir + "/train2.txt");
    CHECK(rc == 0);
    CHECK(read_file(dir + "/quiet/structure.jsonl").empty());
  }

  SUBCASE("invalid config key exits nonzero with the key name") {
    const int rc = run_cli("train --config " + cfg_path + " --set train.bogus=1 --out " + dir +
                               "/x",
                           dir + "/train3.txt");
    CHECK(rc != 0);
    CHECK(read_file(dir + "/train3.txt").find("train.bogus") != std::string::npos);
  }

  SUBCASE("score-report of an empty run prints an empty table") {
    ResolvedConfig quiet = mini_config();
    quiet.train.rep_enabled = false;
    run_train(quiet, dir + "/empty");
    const int rc = run_cli("score-report --run " + dir + "/empty", dir + "/report2.txt");
    CHECK(rc == 0);
    CHECK(read_file(dir + "/report2.txt").empty());
  }
}
