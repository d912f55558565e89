// aidnet: phantom generation, preprocessing, training, evaluation and
// Grad-CAM export from the command line.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "aidnet/cli/commands.hpp"

namespace {

using aidnet::cli::RunConfig;

struct Sub {
  CLI::App* app = nullptr;
  std::string config_file;
  std::map<std::string, std::string> flags;
};

std::string dashed(std::string key) {
  for (char& ch : key) {
    if (ch == '_') ch = '-';
  }
  return key;
}

Sub& add_sub(CLI::App& app, std::map<std::string, Sub>& subs, const std::string& name,
             const std::string& help) {
  Sub& s = subs[name];
  s.app = app.add_subcommand(name, help);
  s.app->add_option("-c,--config", s.config_file, "key = value config file");
  for (const auto& key : aidnet::cli::config_keys()) {
    std::string names = "--" + dashed(key);
    if (key.find('_') != std::string::npos) names += ",--" + key;
    s.app->add_option(names, s.flags[key], "override config key '" + key + "'");
  }
  return s;
}

RunConfig resolve(const Sub& s) {
  std::vector<std::pair<std::string, std::string>> overrides;
  for (const auto& key : aidnet::cli::config_keys()) {
    if (s.app->count("--" + dashed(key)) > 0) overrides.emplace_back(key, s.flags.at(key));
  }
  std::optional<std::filesystem::path> file;
  if (!s.config_file.empty()) file = s.config_file;
  return aidnet::cli::resolve_config(file, std::getenv("AIDNET_SEED"), overrides);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aidnet: dual-path 3D CNN with soft attention for calcium detection"};
  app.require_subcommand(1);
  std::map<std::string, Sub> subs;
  add_sub(app, subs, "phantom-gen", "write a synthetic scan/rescan cohort and manifest");
  add_sub(app, subs, "preprocess", "turn a cohort into two-channel network inputs");
  add_sub(app, subs, "train", "train a model and write a checkpoint and log");
  add_sub(app, subs, "eval", "confusion matrices, metrics and ROC for a checkpoint");
  add_sub(app, subs, "gradcam", "Grad-CAM heatmap and slice composites for one subject");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    for (auto& [name, s] : subs) {
      if (!s.app->parsed()) continue;
      const RunConfig c = resolve(s);
      if (name == "phantom-gen") {
        const auto rows = aidnet::cli::cmd_phantom_gen(c);
        std::cout << "wrote " << rows.size() << " subjects to " << c.cohort_dir << '\n';
      } else if (name == "preprocess") {
        const auto rows = aidnet::cli::cmd_preprocess(c);
        std::cout << "preprocessed " << rows.size() << " subjects into " << c.data_dir << '\n';
      } else if (name == "train") {
        const auto r = aidnet::cli::cmd_train(c, &std::cout);
        std::cout << "best epoch " << r.best_epoch << ", checkpoint " << c.checkpoint_path().string()
                  << '\n';
      } else if (name == "eval") {
        const auto r = aidnet::cli::cmd_eval(c);
        std::cout << "accuracy " << aidnet::eval::format_metric(r.binary.accuracy) << "  auc "
                  << (r.roc ? aidnet::eval::format_metric(r.roc->auc) : std::string("NA")) << '\n';
      } else if (name == "gradcam") {
        const auto r = aidnet::cli::cmd_gradcam(c);
        std::cout << "Grad-CAM for " << c.subject << ", class " << r.target_class << " written to "
                  << c.output_dir << '\n';
      }
    }
  } catch (const aidnet::cli::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const aidnet::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const aidnet::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const aidnet::ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
