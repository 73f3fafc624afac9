#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ulfbridge_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

/// Runs the CLI with `args` (already shell-quoted where needed).
Outcome cli(const std::string& args) {
  static int counter = 0;
  const auto capture = fs::temp_directory_path() / ("ulfbridge_cli_stdout_" + std::to_string(counter++));
  const std::string cmd = std::string(ULFB_CLI_PATH) + " " + args + " > " + capture.string() + " 2>/dev/null";
  const int raw = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  o.out = slurp(capture);
  fs::remove(capture);
  return o;
}

std::vector<std::pair<std::string, std::string>> tree(const fs::path& dir) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.emplace_back(fs::relative(e.path(), dir).string(), slurp(e.path()));
  std::sort(out.begin(), out.end());
  return out;
}

std::string small_data_args(const fs::path& out, int seed = 2) {
  return "make-data --out " + out.string() + " --subjects 12 --slices 2 --size 32 --paired-test 2 --seed " +
         std::to_string(seed);
}

void write_tiny_config(const fs::path& p, int steps) {
  std::ofstream(p) << json{{"steps", steps},
                           {"batch", 2},
                           {"K", 2},
                           {"checkpoint_every", 4},
                           {"generator", {{"base_width", 8}, {"emb_dim", 16}}},
                           {"patch", {{"num_patches", 8}, {"proj_dim", 16}}}}
                          .dump();
}

/// Checks a report against the branch of the published schema matching its mode.
void check_report_schema(const json& report) {
  const auto schema = json::parse(slurp(fs::path(ULFB_SCHEMA_DIR) / "report.schema.json"));
  int matched = 0;
  for (const auto& branch : schema["oneOf"]) {
    if (branch["properties"]["mode"]["const"] != report["mode"]) continue;
    ++matched;
    for (const auto& key : branch["required"]) {
      INFO("missing key " << key);
      CHECK(report.contains(key.get<std::string>()));
    }
    for (const auto& [key, prop] : branch["properties"].items())
      if (prop.value("required", json::array()) == json::array({"aggregate"})) CHECK(report[key]["aggregate"].is_number());
  }
  CHECK(matched == 1);
}

/// Small dataset, teacher and encoder shared by the pipeline cases.
struct Pipeline {
  fs::path dir, manifest, teacher, encoder, config;
  Pipeline() {
    dir = scratch("pipeline");
    REQUIRE(cli(small_data_args(dir / "data")).code == 0);
    manifest = dir / "data" / "manifest.json";
    teacher = dir / "teacher" / "t.ulfb";
    REQUIRE(cli("pretrain-teacher --data " + manifest.string() + " --out " + teacher.string() +
                " --steps 5 --base-width 8")
                .code == 0);
    encoder = dir / "enc" / "e.ulfb";
    REQUIRE(cli("train-encoder --data " + manifest.string() + " --out " + encoder.string() + " --steps 5").code == 0);
    config = dir / "tiny.json";
    write_tiny_config(config, 8);
  }
  std::string train_args(const fs::path& out) const {
    return "train --data " + manifest.string() + " --teacher " + teacher.string() + " --out " + out.string() +
           " --config " + config.string();
  }
};

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(cli("").code == 2);
  CHECK(cli("frobnicate").code == 2);
  CHECK(cli("oracle-check --suite astrology").code == 2);
  CHECK(cli("make-data").code == 2);
  auto dir = scratch("usage");
  CHECK(cli("make-data --out " + (dir / "d").string() + " --subjects 0").code == 2);
  CHECK(cli("evaluate --identity --data x.json --mode sideways").code == 2);
}

TEST_CASE("make-data is seeded and echoes its effective options") {
  auto dir = scratch("make_data");
  auto a = cli(small_data_args(dir / "a", 9));
  REQUIRE(a.code == 0);
  auto result = json::parse(a.out);
  CHECK(result["subjects"] == 12);
  REQUIRE(cli(small_data_args(dir / "b", 9)).code == 0);
  REQUIRE(cli(small_data_args(dir / "c", 10)).code == 0);

  auto ta = tree(dir / "a"), tb = tree(dir / "b"), tc = tree(dir / "c");
  // The echo file names its own output directory; compare everything else.
  auto strip = [](auto t) {
    t.erase(std::remove_if(t.begin(), t.end(), [](const auto& e) { return e.first.rfind("effective_", 0) == 0; }),
            t.end());
    return t;
  };
  CHECK(strip(ta) == strip(tb));
  CHECK(strip(ta) != strip(tc));

  auto echo = json::parse(slurp(dir / "a" / "effective_make_data.json"));
  CHECK(echo["command"] == "make_data");
  CHECK(echo["options"]["seed"] == 9);
  CHECK(echo["options"]["subjects"] == 12);

  auto m = json::parse(slurp(dir / "a" / "manifest.json"));
  CHECK(m["cohorts"]["paired_test"].size() == 2);
  CHECK(m["cohorts"]["source_pool"].size() == 5);
}

TEST_CASE("oracle-check suites") {
  auto ok = cli("oracle-check --suite edt --seed 1");
  CHECK(ok.code == 0);
  auto r = json::parse(ok.out);
  CHECK(r["passed"].get<bool>());
  auto kl = cli("oracle-check --suite kl_grad");
  REQUIRE(kl.code == 0);
  for (const auto& suite : json::parse(kl.out)["suites"])
    for (const auto& c : suite["checks"]) CHECK(c["value"].get<double>() <= 0.05);
}

TEST_CASE("pipeline commands and their failure codes") {
  Pipeline p;
  CHECK(json::parse(slurp(p.teacher.parent_path() / "effective_pretrain_teacher.json"))["command"] ==
        "pretrain_teacher");

  SUBCASE("missing files exit 3") {
    CHECK(cli("pretrain-teacher --data " + (p.dir / "nope.json").string() + " --out " + (p.dir / "x.ulfb").string())
              .code == 3);
    CHECK(cli("translate --ckpt " + (p.dir / "nope.ulfb").string() + " --input " + p.manifest.string() + " --out " +
              (p.dir / "tl").string())
              .code == 3);
    CHECK(cli(p.train_args(p.dir / "r") + " --resume " + (p.dir / "nope.ulfb").string()).code == 3);
  }

  SUBCASE("data contract violations exit 4") {
    auto m = json::parse(slurp(p.manifest));
    m["cohorts"].erase("target_pool");
    const auto broken = p.dir / "data" / "no_target.json";
    std::ofstream(broken) << m.dump();
    CHECK(cli("pretrain-teacher --data " + broken.string() + " --out " + (p.dir / "x.ulfb").string()).code == 4);
    CHECK(cli("evaluate --identity --data " + broken.string() + " --mode unpaired --encoder " + p.encoder.string())
              .code == 4);
  }

  SUBCASE("malformed or invalid training configs exit 2") {
    const auto bad = p.dir / "bad.json";
    std::ofstream(bad) << "{\"steps\": 3,";
    CHECK(cli("train --data " + p.manifest.string() + " --teacher " + p.teacher.string() + " --out " +
              (p.dir / "r").string() + " --config " + bad.string())
              .code == 2);
    std::ofstream(bad) << json{{"stepz", 3}}.dump();
    CHECK(cli("train --data " + p.manifest.string() + " --teacher " + p.teacher.string() + " --out " +
              (p.dir / "r").string() + " --config " + bad.string())
              .code == 2);
    CHECK(cli(p.train_args(p.dir / "r") + " --lambda-sb -1").code == 2);
    CHECK(cli("evaluate --identity --data " + p.manifest.string() + " --mode unpaired").code == 2);
  }

  SUBCASE("non-finite training data exits 5") {
    auto m = json::parse(slurp(p.manifest));
    const auto rel = m["cohorts"]["source_pool"][0]["files"]["t1"].get<std::string>();
    const auto file = p.manifest.parent_path() / rel;
    const auto bytes = fs::file_size(file);
    std::vector<float> nan(bytes / sizeof(float), std::numeric_limits<float>::quiet_NaN());
    std::ofstream(file, std::ios::binary).write(reinterpret_cast<const char*>(nan.data()), bytes);
    CHECK(cli(p.train_args(p.dir / "nan")).code == 5);
  }

  SUBCASE("seeded training, resume, translation and evaluation") {
    auto first = cli(p.train_args(p.dir / "r1"));
    REQUIRE(first.code == 0);
    REQUIRE(cli(p.train_args(p.dir / "r2")).code == 0);
    for (const char* f : {"loss_log.jsonl", "final.ulfb", "step_000004.ulfb", "config.json"})
      CHECK(slurp(p.dir / "r1" / f) == slurp(p.dir / "r2" / f));
    CHECK(json::parse(slurp(p.dir / "r1" / "effective_train.json"))["options"].contains("config"));

    REQUIRE(cli(p.train_args(p.dir / "r3") + " --stop-at 6").code == 0);
    REQUIRE(cli(p.train_args(p.dir / "r3") + " --resume " + (p.dir / "r3" / "step_000004.ulfb").string()).code == 0);
    CHECK(slurp(p.dir / "r3" / "loss_log.jsonl") == slurp(p.dir / "r1" / "loss_log.jsonl"));
    CHECK(slurp(p.dir / "r3" / "final.ulfb") == slurp(p.dir / "r1" / "final.ulfb"));

    const auto ckpt = (p.dir / "r1" / "final.ulfb").string();
    REQUIRE(cli("translate --ckpt " + ckpt + " --input " + p.manifest.string() + " --out " + (p.dir / "t1").string())
                .code == 0);
    REQUIRE(cli("translate --ckpt " + ckpt + " --input " + p.manifest.string() + " --out " + (p.dir / "t2").string())
                .code == 0);
    int files = 0;
    for (const auto& entry : fs::directory_iterator(p.dir / "t1" / "paired_test")) {
      const auto name = entry.path().filename();
      CHECK(slurp(entry.path()).size() > 0);
      CHECK(slurp(entry.path()) == slurp(p.dir / "t2" / "paired_test" / name));
      ++files;
    }
    CHECK(files == 4);

    auto paired = cli("evaluate --identity --clean-inputs --data " + p.manifest.string() + " --mode paired --out " +
                      (p.dir / "ev" / "paired.json").string());
    REQUIRE(paired.code == 0);
    auto report = json::parse(slurp(p.dir / "ev" / "paired.json"));
    CHECK(report["ms_ssim_t1"]["aggregate"].get<double>() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(report["psnr_t2"]["per_subject"].size() == 2);
    check_report_schema(report);

    const auto ev = "evaluate --ckpt " + ckpt + " --data " + p.manifest.string() +
                    " --mode unpaired --encoder " + p.encoder.string() + " --out ";
    REQUIRE(cli(ev + (p.dir / "u1.json").string()).code == 0);
    REQUIRE(cli(ev + (p.dir / "u2.json").string()).code == 0);
    CHECK(slurp(p.dir / "u1.json") == slurp(p.dir / "u2.json"));
    auto u = json::parse(slurp(p.dir / "u1.json"));
    check_report_schema(u);
  }
}
