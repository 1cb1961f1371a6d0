#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "msfuse/ablation.hpp"
#include "msfuse/gradcheck.hpp"
#include "msfuse/profile.hpp"
#include "msfuse/training.hpp"

using namespace msfuse;

namespace {

constexpr int kUsage = 1;
constexpr int kNumeric = 2;
constexpr int kIo = 3;

void log_line(const std::string& s) { std::cerr << s << std::endl; }

ModelConfig config_or_default(const std::string& path) {
  return path.empty() ? ModelConfig::test_profile() : ModelConfig::load(path);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, sep);) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

nlohmann::ordered_json eval_report(const EvalLog& e, std::size_t scenes) {
  nlohmann::ordered_json j;
  j["scenes"] = scenes;
  j["miou"] = e.miou.miou;
  nlohmann::ordered_json iou = nlohmann::ordered_json::array();
  for (const auto& c : e.miou.per_class) iou.push_back(c ? nlohmann::ordered_json(*c) : nlohmann::ordered_json());
  j["per_class_iou"] = iou;
  if (e.selection) {
    j["mean_score"] = e.selection->mean_score;
    j["train_keep_ratio"] = e.selection->train_keep_ratio;
    j["infer_keep_ratio"] = e.selection->infer_keep_ratio;
  }
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale fusion segmentation toolkit"};
  app.require_subcommand(1);

  std::string config_path, out, checkpoint;
  std::size_t steps = 0, scenes = 32, seeds = 3;
  std::optional<std::uint64_t> seed;
  std::uint64_t scene_seed = 1;
  std::string profile_name = "tiny", sizes_arg = "32,64,128,256";
  std::string variants_arg = "baseline,fff,fff+sfs,fff+sfs+pm";
  double tol = 1e-3;
  std::size_t samples = 48;

  auto* train_cmd = app.add_subcommand("train", "Train on synthetic scenes");
  train_cmd->add_option("--config", config_path, "Model config JSON (defaults to the test profile)");
  train_cmd->add_option("--steps", steps, "Optimizer steps")->required();
  train_cmd->add_option("--out", out, "Output directory")->required();
  train_cmd->add_option("--seed", seed, "Overrides the config seed");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on held-out scenes");
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--scenes", scenes)->check(CLI::PositiveNumber);
  eval_cmd->add_option("--out", out)->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  grad_cmd->add_option("--profile", profile_name)->check(CLI::IsMember({"tiny", "test"}));
  grad_cmd->add_option("--tol", tol);
  grad_cmd->add_option("--samples", samples, "Entries probed per parameter tensor");
  grad_cmd->add_option("--out", out, "Optional JSON report path");

  auto* prof_cmd = app.add_subcommand("profile", "Count fusion MACs and activations");
  prof_cmd->add_option("--sizes", sizes_arg);
  prof_cmd->add_option("--config", config_path);
  prof_cmd->add_option("--out", out)->required();

  auto* export_cmd = app.add_subcommand("export-selection", "Write selection maps for one scene");
  export_cmd->add_option("--checkpoint", checkpoint)->required();
  export_cmd->add_option("--scene-seed", scene_seed);
  export_cmd->add_option("--out", out)->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "Train every variant over several seeds");
  ablate_cmd->add_option("--variants", variants_arg);
  ablate_cmd->add_option("--seeds", seeds)->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--steps", steps = 2000);
  ablate_cmd->add_option("--config", config_path);
  ablate_cmd->add_option("--out", out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*train_cmd) {
      ModelConfig config = config_or_default(config_path);
      if (seed) config.seed = *seed;
      TrainOptions options;
      options.steps = steps;
      options.out_dir = out;
      options.log = log_line;
      TrainResult r = train(config, options);
      std::cout << "final miou " << r.report.final_eval().miou.miou << "\n";
    } else if (*eval_cmd) {
      SegmentationModel model = load_checkpoint(checkpoint);
      EvalLog e = evaluate(model, scenes);
      write_json(eval_report(e, scenes), std::filesystem::path(out) / "eval.json");
      std::cout << "miou " << e.miou.miou << "\n";
    } else if (*grad_cmd) {
      ModelConfig config = profile_name == "tiny" ? ModelConfig::tiny_profile() : ModelConfig::test_profile();
      GradcheckOptions options;
      options.tolerance = tol;
      options.samples_per_tensor = samples;
      GradcheckReport report = gradcheck(config, options);
      for (const auto& g : report.groups) {
        std::cout << (g.passed ? "ok   " : "FAIL ") << g.name << " max_rel_error " << g.max_rel_error << " (" << g.checked
                  << " entries)\n";
      }
      if (!out.empty()) write_json(report.to_json(), out);
      if (!report.passed) {
        std::cerr << "gradcheck failed:";
        for (const auto& n : report.failing()) std::cerr << ' ' << n;
        std::cerr << "\n";
        return kNumeric;
      }
      std::cout << "gradcheck passed\n";
    } else if (*prof_cmd) {
      std::vector<std::size_t> sizes;
      for (const auto& s : split(sizes_arg, ',')) {
        try {
          sizes.push_back(std::stoul(s));
        } catch (const std::exception&) {
          throw ConfigError("bad size '" + s + "'");
        }
      }
      write_json(profile_json(profile_costs(config_or_default(config_path), sizes)), out);
    } else if (*export_cmd) {
      export_selection(load_checkpoint(checkpoint), scene_seed, out);
    } else if (*ablate_cmd) {
      AblationOptions options;
      options.variants = split(variants_arg, ',');
      options.seeds = seeds;
      options.steps = steps;
      options.out_dir = out;
      options.log = log_line;
      AblationResult r = ablate(config_or_default(config_path), options);
      write_json(r.to_json(), std::filesystem::path(out) / "ablation.json");
      for (const auto& [name, m] : r.median_miou) std::cout << name << " median miou " << m << "\n";
      if (r.ordering_holds) std::cout << "ordering " << (*r.ordering_holds ? "holds" : "violated") << "\n";
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return 0;
}
