#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "mmfuse/app.hpp"
#include "mmfuse/error.hpp"

namespace mmfuse {

namespace {

struct Options {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::string out;
  bool force = false;
  std::vector<std::size_t> heads;
  std::string checkpoint;
  std::string sample;
  std::vector<std::size_t> depths;
};

void add_run_flags(CLI::App* cmd, Options& o, bool with_out = true) {
  cmd->add_option("--config", o.config, "Run configuration JSON");
  cmd->add_option("--preset", o.preset, "Named preset (desk, gos-like, adni-like)");
  cmd->add_option("--seed", o.seed, "Run only this seed");
  cmd->add_option("--jobs", o.jobs, "Folds trained concurrently");
  if (with_out) {
    cmd->add_option("--out", o.out, "Output directory");
    cmd->add_flag("--force", o.force, "Write into a non-empty output directory");
  }
}

RunConfig resolve(const Options& o) {
  if (!o.config.empty() && !o.preset.empty())
    throw ConfigError("pass either --config or --preset, not both");
  RunConfig cfg = o.config.empty() ? preset(o.preset.empty() ? "desk" : o.preset)
                                   : load_run_config(o.config);
  if (o.seed) cfg.cv.seeds = {*o.seed};
  if (o.jobs) cfg.cv.jobs = *o.jobs;
  if (!o.heads.empty()) cfg.sweep_heads = o.heads;
  if (!o.out.empty()) cfg.out_dir = o.out;
  cfg.validate();
  return cfg;
}

std::string out_dir(const Options& o, const RunConfig& cfg, const char* command) {
  return o.out.empty() ? cfg.out_dir + "/" + command : o.out;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Image + EHR fusion experiments on synthetic volumes", "mmfuse"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  add_run_flags(gen, o);
  auto* train = app.add_subcommand("train", "Train one model on the first fold and save a checkpoint");
  add_run_flags(train, o);
  auto* compare = app.add_subcommand("compare", "Cross-validate all six fusion strategies");
  add_run_flags(compare, o);
  auto* sweep = app.add_subcommand("sweep-heads", "Cross-validate multihead GMU over head counts");
  add_run_flags(sweep, o);
  sweep->add_option("--heads", o.heads, "Head counts, comma separated")->delimiter(',');
  auto* exp = app.add_subcommand("export-attention", "Write attention overlays as PPM images");
  exp->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  exp->add_option("--sample", o.sample, "Sample id")->required();
  exp->add_option("--depths", o.depths, "Depth indices, comma separated")->required()->delimiter(',');
  exp->add_option("--config", o.config, "Take the sample from this configuration instead");
  exp->add_option("--out", o.out, "Output directory")->required();
  auto* show = app.add_subcommand("print-config", "Print the fully resolved configuration");
  add_run_flags(show, o, false);
  show->add_option("--out", o.out, "Output directory recorded in the configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error[usage]: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*show) {
      out << run_config_to_json(resolve(o)).dump(2) << "\n";
    } else if (*gen) {
      const auto cfg = resolve(o);
      RunConfig sc = with_seed(cfg, cfg.cv.seeds.front());
      const auto dir = out_dir(o, cfg, "data");
      cmd_generate(sc, dir, o.force);
      out << "wrote " << sc.data.n_samples << " samples to " << dir << "\n";
    } else if (*train) {
      const auto cfg = resolve(o);
      const auto dir = out_dir(o, cfg, "train");
      const auto report = cmd_train(cfg, dir, o.force);
      char line[128];
      std::snprintf(line, sizeof line, "best %s %.4f at epoch %zu\n",
                    std::string(metric_name(cfg.train.resolve_metric(cfg.model.num_classes))).c_str(),
                    report.fit.best_metric, report.fit.best_epoch);
      out << line << "checkpoint: " << dir << "/checkpoint\n";
    } else if (*compare) {
      const auto cfg = resolve(o);
      const auto result = cmd_compare(cfg, out_dir(o, cfg, "compare"), o.force);
      out << compare_table(result);
    } else if (*sweep) {
      const auto cfg = resolve(o);
      const auto rows = cmd_sweep_heads(cfg, out_dir(o, cfg, "sweep"), o.force);
      out << sweep_csv(rows);
    } else if (*exp) {
      std::optional<RunConfig> data_cfg;
      if (!o.config.empty()) data_cfg = load_run_config(o.config);
      for (const auto& p : cmd_export_attention(o.checkpoint, o.sample, o.depths, o.out, data_cfg))
        out << p.string() << "\n";
    }
  } catch (const Error& e) {
    err << "error[" << e.kind() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace mmfuse
