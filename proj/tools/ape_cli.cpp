// Copyright 2026 The APE Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line front end: ape <command> --config FILE [--seed N] [--out DIR]

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ape/checkpoint.hpp"
#include "ape/harness.hpp"

namespace {

using namespace ape;
using harness::ExperimentConfig;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
};

ExperimentConfig resolve(const Common& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : harness::load_config(o.config_path);
  if (o.seed) c.seeds = {*o.seed};
  if (!o.out.empty()) c.out_dir = o.out;
  harness::validate(c);
  return c;
}

void add_common(CLI::App* cmd, Common& o) {
  cmd->add_option("-c,--config", o.config_path, "Experiment config file (key = value)");
  cmd->add_option("--seed", o.seed, "Override the first seed of the config");
  cmd->add_option("-o,--out", o.out, "Override the output directory");
}

void print_gains(const char* x_name, const std::vector<harness::GainPoint>& pts) {
  std::printf("%s,gain_percent\n", x_name);
  for (const auto& p : pts) std::printf("%g,%.4f\n", p.x, p.gain_percent);
}

int fail(const std::string& command, const char* kind, const std::string& message) {
  nlohmann::json j = {{"status", "error"}, {"command", command}, {"kind", kind}, {"message", message}};
  std::cerr << j.dump() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive prediction ensemble: training, evaluation and ablations"};
  app.require_subcommand(1);

  Common gen_o, train_o, eval_o, ood_o, hor_o;
  std::string report_dir;

  auto* gen = app.add_subcommand("generate", "Write train, held-out and eval scene files");
  add_common(gen, gen_o);
  auto* train = app.add_subcommand("train", "Train the expert and router; write a checkpoint");
  add_common(train, train_o);
  auto* eval = app.add_subcommand("eval", "Evaluate every router kind on both distributions");
  add_common(eval, eval_o);
  auto* ood = app.add_subcommand("ablate-ood", "Gain over the learned expert by OOD ratio");
  add_common(ood, ood_o);
  auto* hor = app.add_subcommand("ablate-horizon", "Gain over the learned expert by horizon");
  add_common(hor, hor_o);
  auto* report = app.add_subcommand("report", "Summarize the CSVs of a run directory");
  report->add_option("run_dir", report_dir, "Run directory")->required();

  CLI11_PARSE(app, argc, argv);

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (*gen) {
      const auto c = resolve(gen_o);
      const auto d = harness::cmd_generate(c);
      std::printf("wrote %zu train, %zu heldout, %zu eval scenes to %s\n", d.train.size(),
                  d.heldout.size(), d.eval.size(), c.out_dir.c_str());
    } else if (*train) {
      const auto c = resolve(train_o);
      const auto e = harness::cmd_train(c);
      std::printf("trained %d epochs on %s; checkpoint in %s\n", e.epochs_trained,
                  e.dataset_tag.c_str(), c.out_dir.c_str());
    } else if (*eval) {
      const auto c = resolve(eval_o);
      const auto rows = harness::cmd_eval(c);
      std::printf("%s\n", metrics::csv_header());
      for (const auto& r : rows) std::printf("%s\n", metrics::to_csv_row(r).c_str());
    } else if (*ood) {
      print_gains("ood_ratio", harness::cmd_ablate_ood(resolve(ood_o)));
    } else if (*hor) {
      const auto pts = harness::cmd_ablate_horizon(resolve(hor_o));
      print_gains("horizon", pts);
      if (!harness::gains_flatten(pts)) {
        std::fprintf(stderr, "note: horizon gains do not flatten toward the longest horizon\n");
      }
    } else if (*report) {
      const auto r = harness::cmd_report(report_dir);
      std::fputs(r.summary.c_str(), stdout);
    }
  } catch (const harness::ConfigError& e) {
    return fail(name, "config", e.what());
  } catch (const checkpoint::CheckpointError& e) {
    return fail(name, "checkpoint", e.what());
  } catch (const scenariogen::SceneFileError& e) {
    return fail(name, "scene_file", e.what());
  } catch (const ValidationError& e) {
    return fail(name, "validation", e.what());
  } catch (const std::exception& e) {
    return fail(name, "internal", e.what());
  }
  return 0;
}
