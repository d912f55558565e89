#pragma once

// Run configuration: a flat key=value file merged over defaults, then the
// AIDNET_SEED environment variable, then command-line overrides.

#include <array>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "aidnet/error.hpp"
#include "aidnet/net/model.hpp"
#include "aidnet/preproc/volume.hpp"

namespace aidnet::cli {

/// Bad configuration or command-line usage.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  net::Mode mode = net::Mode::Aid;
  double lambda = 0.001;
  double margin = 1.0;
  double lr = 1e-4;
  std::size_t max_epochs = 100;
  std::size_t batch_size = 2;
  std::uint64_t seed = 2024;
  std::optional<std::array<double, 3>> class_weights;

  preproc::Extents target_shape{48, 32, 16};
  preproc::Extents phantom_shape{48, 32, 16};
  std::size_t n_control = 100;
  std::size_t n_mild = 77;
  std::size_t n_severe = 34;
  std::size_t n_val = 40;
  std::size_t n_test = 40;

  std::string cohort_dir = "cohort";
  std::string data_dir = "preprocessed";
  std::string output_dir = "run";
  std::string checkpoint;  // empty: <output_dir>/model.aidn
  std::string split = "test";
  std::string subject;
  int target_class = -1;  // -1: the predicted class

  std::filesystem::path checkpoint_path() const {
    return checkpoint.empty() ? std::filesystem::path(output_dir) / "model.aidn"
                              : std::filesystem::path(checkpoint);
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw UsageError("bad value for " + key + ": '" + v + "'");
  return out;
}

inline preproc::Extents parse_extents(const std::string& key, const std::string& v) {
  preproc::Extents e{};
  std::stringstream ss(v);
  std::string part;
  std::size_t n = 0;
  while (std::getline(ss, part, 'x')) {
    if (n == 3) throw UsageError(key + " needs three extents DxHxW, got '" + v + "'");
    e[n++] = parse_number<std::size_t>(key, part);
  }
  if (n != 3) throw UsageError(key + " needs three extents DxHxW, got '" + v + "'");
  for (auto x : e) {
    if (x == 0) throw UsageError(key + " extents must be >= 1");
  }
  return e;
}

inline std::string format_extents(const preproc::Extents& e) {
  return std::to_string(e[0]) + "x" + std::to_string(e[1]) + "x" + std::to_string(e[2]);
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

/// Every key accepted in a config file or as a --key flag, in echo order.
inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "mode",      "lambda",     "margin",       "lr",         "max_epochs", "batch_size",
      "seed",      "class_weights", "target_shape", "phantom_shape", "n_control", "n_mild",
      "n_severe",  "n_val",      "n_test",       "cohort_dir", "data_dir",   "output_dir",
      "checkpoint", "split",     "subject",      "target_class"};
  return keys;
}

inline void set_key(RunConfig& c, const std::string& key, const std::string& raw) {
  using detail::parse_number;
  const std::string v = detail::trim(raw);
  if (key == "mode") {
    try {
      c.mode = net::parse_mode(v);
    } catch (const std::exception&) {
      throw UsageError("mode must be aid, id or single, got '" + v + "'");
    }
  } else if (key == "lambda") {
    c.lambda = parse_number<double>(key, v);
  } else if (key == "margin") {
    c.margin = parse_number<double>(key, v);
  } else if (key == "lr") {
    c.lr = parse_number<double>(key, v);
  } else if (key == "max_epochs") {
    c.max_epochs = parse_number<std::size_t>(key, v);
  } else if (key == "batch_size") {
    c.batch_size = parse_number<std::size_t>(key, v);
  } else if (key == "seed") {
    c.seed = parse_number<std::uint64_t>(key, v);
  } else if (key == "class_weights") {
    if (v.empty() || v == "none") {
      c.class_weights.reset();
    } else {
      std::array<double, 3> w{};
      std::stringstream ss(v);
      std::string part;
      std::size_t n = 0;
      while (std::getline(ss, part, ',')) {
        if (n == 3) throw UsageError("class_weights needs three values");
        w[n++] = parse_number<double>(key, detail::trim(part));
      }
      if (n != 3) throw UsageError("class_weights needs three values");
      c.class_weights = w;
    }
  } else if (key == "target_shape") {
    c.target_shape = detail::parse_extents(key, v);
  } else if (key == "phantom_shape") {
    c.phantom_shape = detail::parse_extents(key, v);
  } else if (key == "n_control") {
    c.n_control = parse_number<std::size_t>(key, v);
  } else if (key == "n_mild") {
    c.n_mild = parse_number<std::size_t>(key, v);
  } else if (key == "n_severe") {
    c.n_severe = parse_number<std::size_t>(key, v);
  } else if (key == "n_val") {
    c.n_val = parse_number<std::size_t>(key, v);
  } else if (key == "n_test") {
    c.n_test = parse_number<std::size_t>(key, v);
  } else if (key == "cohort_dir") {
    c.cohort_dir = v;
  } else if (key == "data_dir") {
    c.data_dir = v;
  } else if (key == "output_dir") {
    c.output_dir = v;
  } else if (key == "checkpoint") {
    c.checkpoint = v;
  } else if (key == "split") {
    if (v != "train" && v != "val" && v != "test" && v != "all") {
      throw UsageError("split must be train, val, test or all, got '" + v + "'");
    }
    c.split = v;
  } else if (key == "subject") {
    c.subject = v;
  } else if (key == "target_class") {
    c.target_class = parse_number<int>(key, v);
    if (c.target_class < -1 || c.target_class >= static_cast<int>(net::kNumClasses)) {
      throw UsageError("target_class must be -1, 0, 1 or 2");
    }
  } else {
    throw UsageError("unknown config key '" + key + "'");
  }
}

inline std::string get_key(const RunConfig& c, const std::string& key) {
  using detail::format_real;
  if (key == "mode") return net::mode_name(c.mode);
  if (key == "lambda") return format_real(c.lambda);
  if (key == "margin") return format_real(c.margin);
  if (key == "lr") return format_real(c.lr);
  if (key == "max_epochs") return std::to_string(c.max_epochs);
  if (key == "batch_size") return std::to_string(c.batch_size);
  if (key == "seed") return std::to_string(c.seed);
  if (key == "class_weights") {
    if (!c.class_weights) return "none";
    const auto& w = *c.class_weights;
    return format_real(w[0]) + "," + format_real(w[1]) + "," + format_real(w[2]);
  }
  if (key == "target_shape") return detail::format_extents(c.target_shape);
  if (key == "phantom_shape") return detail::format_extents(c.phantom_shape);
  if (key == "n_control") return std::to_string(c.n_control);
  if (key == "n_mild") return std::to_string(c.n_mild);
  if (key == "n_severe") return std::to_string(c.n_severe);
  if (key == "n_val") return std::to_string(c.n_val);
  if (key == "n_test") return std::to_string(c.n_test);
  if (key == "cohort_dir") return c.cohort_dir;
  if (key == "data_dir") return c.data_dir;
  if (key == "output_dir") return c.output_dir;
  if (key == "checkpoint") return c.checkpoint;
  if (key == "split") return c.split;
  if (key == "subject") return c.subject;
  if (key == "target_class") return std::to_string(c.target_class);
  throw UsageError("unknown config key '" + key + "'");
}

/// `key = value` lines; '#' starts a comment.
inline void apply_config_text(RunConfig& c, std::istream& is, const std::string& origin) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      set_key(c, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const UsageError& e) {
      throw UsageError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& c, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read config file " + path.string());
  apply_config_text(c, is, path.string());
}

inline void write_config(std::ostream& os, const RunConfig& c) {
  for (const auto& k : config_keys()) os << k << " = " << get_key(c, k) << '\n';
}

/// defaults < file < AIDNET_SEED < overrides (applied in the given order).
inline RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                                const char* env_seed,
                                const std::vector<std::pair<std::string, std::string>>& overrides) {
  RunConfig c;
  if (file) apply_config_file(c, *file);
  if (env_seed && *env_seed) {
    try {
      set_key(c, "seed", env_seed);
    } catch (const UsageError&) {
      throw UsageError(std::string("AIDNET_SEED is not an unsigned integer: '") + env_seed + "'");
    }
  }
  for (const auto& [k, v] : overrides) set_key(c, k, v);
  return c;
}

}  // namespace aidnet::cli
