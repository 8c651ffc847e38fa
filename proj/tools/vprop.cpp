// vprop: command-line driver for the visual proprioception experiments.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "vprop/experiment.hpp"

namespace {

struct Common {
  std::vector<std::string> configs;
  std::optional<std::uint64_t> seed;
  std::string data_dir;
  std::string output_dir;
};

void add_common(CLI::App* cmd, Common& c, bool many) {
  if (many) {
    cmd->add_option("--config", c.configs, "Experiment config file (repeat for several models)")->required();
  } else {
    cmd->add_option("--config", c.configs, "Experiment config file")->required()->expected(1);
  }
  cmd->add_option("--seed", c.seed, "Override the config seed");
  cmd->add_option("--data-dir", c.data_dir, "Override the dataset directory");
  if (!many) cmd->add_option("--output-dir", c.output_dir, "Override the model output directory");
}

std::vector<vprop::ExperimentConfig> load_configs(const Common& c) {
  std::vector<vprop::ExperimentConfig> out;
  for (const auto& path : c.configs) {
    vprop::KeyValues kv = vprop::KeyValues::load(path);
    if (!c.data_dir.empty()) kv.set("data_dir", c.data_dir);
    if (!c.output_dir.empty()) kv.set("output_dir", c.output_dir);
    out.push_back(vprop::ExperimentConfig::from_kv(kv, c.seed));
  }
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual proprioception experiments: dataset generation, training, evaluation and tracking plots"};
  app.require_subcommand(1);

  Common gen_opts, train_opts, eval_opts, track_opts;
  std::string stage, train_split, eval_split, eval_out, components, models, track_out, trace, plot_out;

  auto* gen = app.add_subcommand("gen", "Generate the four-split synthetic dataset");
  add_common(gen, gen_opts, false);

  auto* train = app.add_subcommand("train", "Train one stage of a pipeline");
  add_common(train, train_opts, false);
  train->add_option("--stage", stage, "vae | reductor | regressor")
      ->required()
      ->check(CLI::IsMember({"vae", "reductor", "regressor"}));
  train->add_option("--split", train_split, "Split to train on (must match the stage)");

  auto* eval = app.add_subcommand("eval", "Score trained pipelines on the test split");
  add_common(eval, eval_opts, true);
  eval->add_option("--split", eval_split, "Split to evaluate on (test only)");
  eval->add_option("--out", eval_out, "Comparison table path (default: <first output_dir>/comparison.csv)");

  auto* track = app.add_subcommand("track", "Tracking trace and per-component plots over the test split");
  add_common(track, track_opts, true);
  track->add_option("--components", components, "Comma-separated components (default: all six)");
  track->add_option("--models", models, "Comma-separated model names, at most two (default: all given)");
  track->add_option("--out", track_out, "Output directory (default: <first output_dir>)");

  auto* plot = app.add_subcommand("plot", "Redraw plots from a trace CSV");
  plot->add_option("--trace", trace, "Trace CSV written by `track`")->required();
  plot->add_option("--components", components, "Comma-separated components (default: all six)");
  plot->add_option("--models", models, "Comma-separated model names, at most two (default: all in the trace)");
  plot->add_option("--out", plot_out, "Output directory (default: plots/ next to the trace)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(vprop::ExitCode::kValidation);
  }

  auto opt_path = [](const std::string& s) -> std::optional<vprop::fs::path> {
    if (s.empty()) return std::nullopt;
    return vprop::fs::path(s);
  };
  auto opt_str = [](const std::string& s) -> std::optional<std::string> {
    if (s.empty()) return std::nullopt;
    return s;
  };

  try {
    if (*gen) {
      vprop::cmd_gen(load_configs(gen_opts).front(), std::cout);
    } else if (*train) {
      vprop::check_stage_split(stage, opt_str(train_split));
      vprop::cmd_train(load_configs(train_opts).front(), stage, std::cout, opt_str(train_split));
    } else if (*eval) {
      vprop::check_eval_split(opt_str(eval_split));
      vprop::cmd_eval(load_configs(eval_opts), std::cout, opt_path(eval_out), opt_str(eval_split));
    } else if (*track) {
      vprop::cmd_track(load_configs(track_opts), std::cout, split_list(components), split_list(models),
                       opt_path(track_out));
    } else if (*plot) {
      vprop::cmd_plot(trace, std::cout, split_list(components), split_list(models), opt_path(plot_out));
    }
  } catch (const vprop::Error& e) {
    std::cerr << "vprop: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "vprop: " << e.what() << "\n";
    return static_cast<int>(vprop::ExitCode::kValidation);
  }
  return 0;
}
