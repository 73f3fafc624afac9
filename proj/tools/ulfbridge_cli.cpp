// ulfbridge command-line front end. Every subcommand forwards a JSON option
// object to the C API, prints the JSON result on stdout and exits with the
// returned status.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ulfbridge/ulfbridge.h"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Invocation {
  std::string command;
  json options = json::object();
  fs::path echo_dir;  // where the effective options are written after success
};

int fail_usage(const std::string& msg) {
  std::cerr << "error: " << msg << "\n";
  return ULFB_USAGE;
}

template <typename T>
void put(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

fs::path dir_of_file(const std::string& path) {
  auto p = fs::path(path).parent_path();
  return p.empty() ? fs::path(".") : p;
}

/// Reads a JSON config file. Exit codes follow the library's convention.
int read_config(const std::string& path, json& out) {
  std::ifstream is(path);
  if (!is) {
    std::cerr << "error: cannot read config " << path << "\n";
    return ULFB_IO;
  }
  try {
    out = json::parse(is);
  } catch (const json::exception& e) {
    std::cerr << "error: malformed config " << path << ": " << e.what() << "\n";
    return ULFB_USAGE;
  }
  if (!out.is_object()) return fail_usage("config must be a JSON object");
  return ULFB_OK;
}

int run(const Invocation& inv, bool quiet) {
  ulfb_context* ctx = nullptr;
  if (ulfb_context_create(&ctx) != ULFB_OK) {
    std::cerr << "error: cannot create context\n";
    return ULFB_ERROR;
  }
  const std::string opts = inv.options.dump();
  const ulfb_status st = ulfb_run(ctx, inv.command.c_str(), opts.c_str());
  const std::string result = ulfb_result(ctx);
  if (!result.empty() && !quiet) std::cout << result << "\n";
  if (st != ULFB_OK) {
    std::cerr << "error: " << ulfb_last_error(ctx) << "\n";
  } else if (!inv.echo_dir.empty()) {
    std::error_code ec;
    fs::create_directories(inv.echo_dir, ec);
    std::ofstream os(inv.echo_dir / ("effective_" + inv.command + ".json"));
    os << json{{"command", inv.command}, {"options", inv.options}, {"version", ulfb_version()}}.dump(2) << "\n";
  }
  ulfb_context_destroy(ctx);
  return st;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unpaired low-field to high-field MRI translation with a diffusion-guided bridge"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(ulfb_version()));
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "do not print the JSON result");

  Invocation inv;
  std::optional<std::uint64_t> seed;
  auto add_seed = [&seed](CLI::App* sub) { sub->add_option("--seed", seed, "base random seed"); };

  // make-data
  std::string md_out;
  std::optional<int> md_subjects, md_slices, md_size, md_paired;
  auto* md = app.add_subcommand("make-data", "generate synthetic source, target and paired test cohorts");
  md->add_option("--out", md_out, "output directory")->required();
  md->add_option("--subjects", md_subjects, "number of subjects (default 85)");
  md->add_option("--slices", md_slices, "slices per subject (default 8)");
  md->add_option("--size", md_size, "slice side in pixels (default 32)");
  md->add_option("--paired-test", md_paired, "subjects held out as the paired test cohort (default 5)");
  add_seed(md);

  // pretrain-teacher
  std::string pt_data, pt_out;
  std::optional<int> pt_steps, pt_batch, pt_width;
  std::optional<double> pt_lr;
  auto* pt = app.add_subcommand("pretrain-teacher", "train the frozen target-domain score model");
  pt->add_option("--data", pt_data, "dataset manifest")->required();
  pt->add_option("--out", pt_out, "checkpoint path")->required();
  pt->add_option("--steps", pt_steps, "optimizer steps");
  pt->add_option("--batch", pt_batch, "batch size");
  pt->add_option("--lr", pt_lr, "learning rate");
  pt->add_option("--base-width", pt_width, "network base width");
  add_seed(pt);

  // train-encoder
  std::string te_data, te_out;
  std::optional<int> te_steps;
  auto* te = app.add_subcommand("train-encoder", "train the evaluation feature encoder on the target pool");
  te->add_option("--data", te_data, "dataset manifest")->required();
  te->add_option("--out", te_out, "checkpoint path")->required();
  te->add_option("--steps", te_steps, "optimizer steps");
  add_seed(te);

  // train
  std::string tr_data, tr_teacher, tr_out;
  std::optional<std::string> tr_config, tr_resume;
  std::optional<int> tr_steps, tr_batch, tr_ncritic, tr_K, tr_ckpt_every;
  std::optional<int64_t> tr_stop;
  std::optional<double> l_dm, l_sb, l_reg, l_dmd2;
  bool tr_no_aux = false;
  auto* tr = app.add_subcommand("train", "train the bridge generator");
  tr->add_option("--data", tr_data, "dataset manifest")->required();
  tr->add_option("--teacher", tr_teacher, "teacher checkpoint")->required();
  tr->add_option("--out", tr_out, "run directory")->required();
  tr->add_option("--config", tr_config, "training config JSON (see schemas/train_config.schema.json)");
  tr->add_option("--resume", tr_resume, "continue from a training checkpoint");
  tr->add_option("--steps", tr_steps, "total steps");
  tr->add_option("--batch", tr_batch, "batch size");
  tr->add_option("--n-critic", tr_ncritic, "generator update period");
  tr->add_option("--K", tr_K, "refinement steps");
  tr->add_option("--checkpoint-every", tr_ckpt_every, "checkpoint period in steps (0: final only)");
  tr->add_option("--lambda-dm", l_dm, "weight of the distribution matching group");
  tr->add_option("--lambda-sb", l_sb, "weight of the bridge transport term");
  tr->add_option("--lambda-reg", l_reg, "weight of the structure regularizers");
  tr->add_option("--lambda-dmd2", l_dmd2, "weight of the score-difference term inside the DM group");
  tr->add_flag("--no-aux-gan", tr_no_aux, "disable the auxiliary classifier");
  tr->add_option("--stop-at", tr_stop, "stop before this global step (for interrupted runs)");
  add_seed(tr);

  // translate
  std::optional<std::string> tl_ckpt;
  bool tl_identity = false;
  std::string tl_input, tl_out;
  std::optional<std::string> tl_cohort;
  std::optional<int> tl_size;
  auto* tl = app.add_subcommand("translate", "translate slices deterministically");
  tl->add_option("--ckpt", tl_ckpt, "training checkpoint");
  tl->add_flag("--identity", tl_identity, "use the identity map instead of a checkpoint");
  tl->add_option("--input", tl_input, "manifest .json, or comma-separated [N,3,S,S] float32 files")->required();
  tl->add_option("--out", tl_out, "output directory")->required();
  tl->add_option("--cohort", tl_cohort, "cohort to translate from a manifest (default paired_test)");
  tl->add_option("--size", tl_size, "slice side for raw files");
  add_seed(tl);

  // evaluate
  std::optional<std::string> ev_ckpt, ev_encoder, ev_out;
  bool ev_identity = false, ev_clean = false;
  std::string ev_data, ev_mode;
  auto* ev = app.add_subcommand("evaluate", "paired fidelity or unpaired realism report");
  ev->add_option("--ckpt", ev_ckpt, "training checkpoint");
  ev->add_flag("--identity", ev_identity, "evaluate the untranslated inputs");
  ev->add_option("--data", ev_data, "dataset manifest")->required();
  ev->add_option("--mode", ev_mode, "paired or unpaired")->required()->check(CLI::IsMember({"paired", "unpaired"}));
  ev->add_option("--encoder", ev_encoder, "feature encoder checkpoint (unpaired mode)");
  ev->add_flag("--clean-inputs", ev_clean, "translate the clean references instead of acquired inputs");
  ev->add_option("--out", ev_out, "report path");
  add_seed(ev);

  // oracle-check
  std::string oc_suite = "all";
  auto* oc = app.add_subcommand("oracle-check", "run the analytic self-checks");
  oc->add_option("--suite", oc_suite, "kl_grad, edt, schedule, gradcheck or all");
  add_seed(oc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : ULFB_USAGE;
  }

  json& o = inv.options;
  if (md->parsed()) {
    inv.command = "make_data";
    o["out"] = md_out;
    put(o, "subjects", md_subjects);
    put(o, "slices", md_slices);
    put(o, "size", md_size);
    put(o, "paired_test", md_paired);
    put(o, "seed", seed);
    inv.echo_dir = md_out;
  } else if (pt->parsed()) {
    inv.command = "pretrain_teacher";
    o["data"] = pt_data;
    o["out"] = pt_out;
    put(o, "steps", pt_steps);
    put(o, "batch", pt_batch);
    put(o, "lr", pt_lr);
    put(o, "base_width", pt_width);
    put(o, "seed", seed);
    inv.echo_dir = dir_of_file(pt_out);
  } else if (te->parsed()) {
    inv.command = "train_encoder";
    o["data"] = te_data;
    o["out"] = te_out;
    put(o, "steps", te_steps);
    put(o, "seed", seed);
    inv.echo_dir = dir_of_file(te_out);
  } else if (tr->parsed()) {
    inv.command = "train";
    json config = json::object();
    if (tr_config) {
      if (int rc = read_config(*tr_config, config); rc != ULFB_OK) return rc;
    }
    put(config, "steps", tr_steps);
    put(config, "batch", tr_batch);
    put(config, "n_critic", tr_ncritic);
    put(config, "K", tr_K);
    put(config, "checkpoint_every", tr_ckpt_every);
    put(config, "lambda_dm", l_dm);
    put(config, "lambda_sb", l_sb);
    put(config, "lambda_reg", l_reg);
    put(config, "lambda_dmd2", l_dmd2);
    put(config, "seed", seed);
    if (tr_no_aux) config["use_aux_gan"] = false;
    o["data"] = tr_data;
    o["teacher"] = tr_teacher;
    o["out"] = tr_out;
    o["config"] = config;
    put(o, "resume", tr_resume);
    put(o, "stop_at", tr_stop);
    inv.echo_dir = tr_out;
  } else if (tl->parsed()) {
    inv.command = "translate";
    put(o, "ckpt", tl_ckpt);
    if (tl_identity) o["identity"] = true;
    o["input"] = tl_input;
    o["out"] = tl_out;
    put(o, "cohort", tl_cohort);
    put(o, "size", tl_size);
    put(o, "seed", seed);
    inv.echo_dir = tl_out;
  } else if (ev->parsed()) {
    inv.command = "evaluate";
    if (ev_mode == "unpaired" && !ev_encoder) return fail_usage("--mode unpaired requires --encoder");
    put(o, "ckpt", ev_ckpt);
    if (ev_identity) o["identity"] = true;
    o["data"] = ev_data;
    o["mode"] = ev_mode;
    put(o, "encoder", ev_encoder);
    if (ev_clean) o["clean_inputs"] = true;
    put(o, "out", ev_out);
    put(o, "seed", seed);
    if (ev_out) inv.echo_dir = dir_of_file(*ev_out);
  } else if (oc->parsed()) {
    inv.command = "oracle_check";
    o["suite"] = oc_suite;
    put(o, "seed", seed);
  }
  if (inv.command == "translate" || inv.command == "evaluate") {
    if (o.contains("ckpt") == o.contains("identity")) return fail_usage("give exactly one of --ckpt and --identity");
  }
  return run(inv, quiet);
}
