// Command-line front end: dataset generation, training, evaluation, and
// parameter / receptive-field reporting on top of the hcmamba library.
//
// Contract: exit 0 on success; on failure print exactly one line to stderr of
// the form "<error-class>: message" and exit nonzero.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "hcmamba/checkpoint.hpp"
#include "hcmamba/config.hpp"
#include "hcmamba/conv.hpp"
#include "hcmamba/data.hpp"
#include "hcmamba/errors.hpp"
#include "hcmamba/loss_metrics.hpp"
#include "hcmamba/model.hpp"
#include "hcmamba/train.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
  cmd->add_option("--config", c.config_path, "plain-text key=value config file ('#' comments)");
  cmd->add_option("--set", c.sets, "config override key=value (repeatable)");
}

hcm::RunConfig build_config(const CommonOpts& c) {
  hcm::RunConfig rc;
  if (!c.config_path.empty()) hcm::load_config_file(rc, c.config_path);
  for (const std::string& s : c.sets) hcm::apply_override(rc, s);
  return rc;
}

int cmd_generate(const hcm::RunConfig& rc, bool force) {
  if (fs::exists(rc.data_dir)) {
    if (!force)
      throw hcm::ContractError("refusing to overwrite existing dataset directory '" +
                               rc.data_dir + "'; pass --force to regenerate");
    fs::remove_all(rc.data_dir);
  }
  std::string manifest = hcm::generate_synthetic(rc.synthetic_spec(), rc.data_dir);
  std::printf("manifest %s\n", manifest.c_str());
  return 0;
}

int cmd_train(hcm::RunConfig rc, const std::string& resume) {
  rc.validate();
  std::printf("%s\n", hcm::train_csv_header());
  std::fflush(stdout);
  hcm::TrainResult res =
      hcm::train_model<float>(rc, resume, -1, [](const hcm::EpochStats& s) {
        std::printf("%s\n", hcm::train_csv_row(s).c_str());
        std::fflush(stdout);
      });
  std::printf("best %s epoch %lld val_mIoU %.9g\n", res.best_checkpoint.c_str(),
              static_cast<long long>(res.best_epoch), res.best_val_miou);
  std::printf("log %s\n", res.csv_path.c_str());
  return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& checkpoint, const std::string& split) {
  if (checkpoint.empty()) throw hcm::ContractError("eval requires --checkpoint");
  if (split != "train" && split != "val" && split != "test")
    throw hcm::ContractError("--split must be one of train, val, test; got '" + split + "'");

  // The checkpoint's config echo is the source of truth; CLI config/overrides
  // may adjust plumbing (paths, batch size) but not the model shape.
  hcm::CheckpointManifest peeked = hcm::peek_checkpoint(checkpoint);
  hcm::RunConfig saved = hcm::run_config_from_echo(peeked.meta.config_echo);
  hcm::RunConfig rc = saved;
  if (!common.config_path.empty()) hcm::load_config_file(rc, common.config_path);
  for (const std::string& s : common.sets) hcm::apply_override(rc, s);
  {
    static const std::set<std::string> locked = {
        "base_channels", "stage_depths",      "state_size",  "num_classes",
        "input_size",    "dilation_schedule", "conv_variant"};
    auto here = rc.echo(), there = saved.echo();
    std::string bad;
    for (size_t i = 0; i < here.size(); ++i) {
      if (!locked.count(here[i].first) || here[i].second == there[i].second) continue;
      bad += (bad.empty() ? "" : "; ") + here[i].first + " is '" + there[i].second +
             "' in the checkpoint but '" + here[i].second + "' in the requested config";
    }
    if (!bad.empty())
      throw hcm::DataError("checkpoint '" + checkpoint + "' model mismatch: " + bad);
  }
  rc.validate();

  const hcm::ModelConfig cfg = rc.model();
  hcm::ModelParams<float> params = hcm::init_params<float>(cfg, rc.seed);
  hcm::NamedTensorList<float> items = hcm::named_parameters(params, cfg);
  hcm::load_checkpoint<float>(checkpoint, items);

  const std::string manifest = rc.data_dir + "/manifest.tsv";
  hcm::Dataset<float> ds = hcm::Dataset<float>::load(manifest, cfg.num_classes, split);
  if (ds.size() == 0)
    throw hcm::DataError("split '" + split + "' of '" + manifest + "' is empty");
  hcm::MetricReport rep = hcm::evaluate_dataset(cfg, params, ds, rc.batch_size);

  std::printf("checkpoint %s  split %s  images %zu\n", checkpoint.c_str(), split.c_str(),
              ds.size());
  std::printf("mIoU(%%)  DSC(%%)  Acc(%%)  Spe(%%)  Sen(%%)  HD95\n");
  std::printf("%7.2f  %6.2f  %6.2f  %6.2f  %6.2f  %5.2f\n", 100 * rep.miou, 100 * rep.dsc,
              100 * rep.acc, 100 * rep.spe, 100 * rep.sen, rep.hd95);

  fs::create_directories(rc.out_dir);
  const std::string csv_path = rc.out_dir + "/eval_" + split + ".csv";
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw hcm::IoError("cannot open '" + csv_path + "' for writing");
  char row[160];
  std::snprintf(row, sizeof(row), "%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", split.c_str(),
                100 * rep.miou, 100 * rep.dsc, 100 * rep.acc, 100 * rep.spe, 100 * rep.sen,
                rep.hd95);
  csv << "split,mIoU,DSC,Acc,Spe,Sen,HD95\n" << row << "\n";
  std::printf("csv %s\n", csv_path.c_str());
  return 0;
}

int cmd_report(const hcm::RunConfig& rc) {
  hcm::ModelConfig cfg = rc.model();
  const std::vector<std::string> variants = {"full", "dilated_only", "dw_only", "both"};
  std::vector<int64_t> totals;
  std::printf("parameter counts (base_channels=%lld, state_size=%lld, depths=",
              static_cast<long long>(cfg.base_channels), static_cast<long long>(cfg.state_size));
  for (size_t i = 0; i < cfg.stage_depths.size(); ++i)
    std::printf("%s%lld", i ? "," : "", static_cast<long long>(cfg.stage_depths[i]));
  std::printf(")\n");
  for (const std::string& v : variants) {
    hcm::ModelConfig c = cfg;
    c.conv_variant = hcm::conv_variant_from_string(v);
    int64_t total = hcm::count_parameters(c).total;
    totals.push_back(total);
    std::printf("params %-12s %10lld  (%.2fM)\n", v.c_str(), static_cast<long long>(total),
                static_cast<double>(total) / 1e6);
  }
  std::printf("ratio dw_only/full %.3f\n",
              static_cast<double>(totals[2]) / static_cast<double>(totals[0]));
  std::printf("ratio both/full    %.3f\n",
              static_cast<double>(totals[3]) / static_cast<double>(totals[0]));

  const std::vector<std::vector<int64_t>> schedules = {
      {1, 1, 1}, {2, 2, 2}, {1, 2, 3}, {1, 2, 3, 1}};
  for (const auto& sched : schedules) {
    std::string name;
    for (size_t i = 0; i < sched.size(); ++i)
      name += (i ? "," : "") + std::to_string(sched[i]);
    int64_t rf = hcm::receptive_field(sched, 3);
    hcm::GriddingCoverage cov = hcm::gridding_coverage(sched, 3);
    std::printf("schedule %-8s rf %2lld coverage %s\n", name.c_str(),
                static_cast<long long>(rf), cov.continuous ? "continuous" : "discontinuous");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic-segmentation toolkit: dual-branch state-space model"};
  app.require_subcommand(1);

  CommonOpts gen_common, train_common, eval_common, report_common;
  bool force = false;
  std::string train_checkpoint, eval_checkpoint;
  std::string split = "val";
  int64_t threads_flag = 0;

  CLI::App* gen = app.add_subcommand("generate", "render a synthetic dataset");
  add_common(gen, gen_common);
  gen->add_flag("--force", force, "overwrite an existing dataset directory");

  CLI::App* train = app.add_subcommand("train", "train a model (CSV log + checkpoints)");
  add_common(train, train_common);
  train->add_option("--checkpoint", train_checkpoint, "resume from this checkpoint base path");
  CLI::Option* threads_opt =
      train->add_option("--threads", threads_flag, "worker threads (overrides config)");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  add_common(eval, eval_common);
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint base path (required)");
  eval->add_option("--split", split, "dataset split: train, val, or test (default val)");

  CLI::App* report = app.add_subcommand("report", "parameter counts and receptive-field table");
  add_common(report, report_common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::fprintf(stderr, "usage-error: %s\n", msg.c_str());
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(build_config(gen_common), force);
    if (train->parsed()) {
      hcm::RunConfig rc = build_config(train_common);
      if (threads_opt->count()) rc.threads = threads_flag;
      return cmd_train(rc, train_checkpoint);
    }
    if (eval->parsed()) return cmd_eval(eval_common, eval_checkpoint, split);
    if (report->parsed()) return cmd_report(build_config(report_common));
  } catch (const hcm::Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal-error: %s\n", e.what());
    return 1;
  }
  return 0;
}
