#pragma once

// Run configuration: "key = value" files with command-line overrides.
//
//   # comment
//   lambda2 = 1e-3
//   budget  = 50%
//
// Precedence is defaults, then the file, then overrides. Unknown keys and
// malformed values are errors that name the key (and the line for files).

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gsearch/data.hpp"
#include "gsearch/error.hpp"
#include "gsearch/flops.hpp"
#include "gsearch/losses.hpp"
#include "gsearch/search.hpp"
#include "gsearch/topology.hpp"

namespace gsearch {

enum class FieldType { integer, real, boolean, text, int_list, budget, optional_real, choice };

struct FieldSpec {
  std::string key;
  FieldType type;
  std::string fallback;
  std::string help;
  std::vector<std::string> choices;
};

inline const std::vector<FieldSpec>& config_fields() {
  using F = FieldType;
  static const std::vector<FieldSpec> fields = {
      {"seed", F::integer, "1", "seed for data, initialisation and batch order", {}},
      {"out_dir", F::text, "run", "output directory; each command writes to <out_dir>/<command>", {}},
      // teacher architecture
      {"arch", F::text, "cnn:8,16p,16", "teacher architecture (mlp:..., cnn:..., dense:L,k, dense-lite:L,k)", {}},
      {"input", F::text, "16x16x1", "input geometry HxWxC, or D for flat inputs", {}},
      {"classes", F::integer, "4", "number of classes", {}},
      // data
      {"data", F::choice, "blobs", "dataset source", {"blobs", "rings", "idx"}},
      {"data_n", F::integer, "512", "synthetic training samples", {}},
      {"data_test_n", F::integer, "512", "synthetic test samples", {}},
      {"data_noise", F::real, "1.0", "synthetic jitter and pixel noise scale", {}},
      {"idx_train_images", F::text, "", "IDX training images", {}},
      {"idx_train_labels", F::text, "", "IDX training labels", {}},
      {"idx_test_images", F::text, "", "IDX test images", {}},
      {"idx_test_labels", F::text, "", "IDX test labels", {}},
      {"augment_pad", F::integer, "0", "pad-and-crop margin for training batches", {}},
      {"augment_hflip", F::boolean, "false", "random horizontal flips for training batches", {}},
      // training protocol
      {"teacher_epochs", F::integer, "60", "teacher training epochs", {}},
      {"epochs", F::integer, "60", "student training epochs", {}},
      {"batch_size", F::integer, "64", "batch size for training", {}},
      {"lr", F::real, "0.05", "initial weight learning rate for training", {}},
      {"lr_milestones", F::int_list, "30,50", "epochs after which the learning rate is multiplied by lr_factor", {}},
      {"lr_factor", F::real, "0.1", "learning-rate decay factor", {}},
      {"momentum", F::real, "0.9", "SGD momentum", {}},
      {"weight_decay", F::real, "1e-4", "SGD weight decay for training", {}},
      // search
      {"search_max_epochs", F::integer, "60", "search epochs before giving up on the budget", {}},
      {"search_batch_size", F::integer, "64", "batch size during search", {}},
      {"search_lr", F::real, "0.05", "initial weight learning rate during search", {}},
      {"search_lr_milestones", F::int_list, "30,50", "search learning-rate milestones", {}},
      {"budget", F::budget, "50%", "FLOPs budget: absolute count or percentage of the teacher", {}},
      {"gate_lr", F::real, "0.01", "gate step size eta", {}},
      {"gate_momentum", F::real, "0.9", "gate momentum mu", {}},
      {"clamp_gates", F::boolean, "true", "clamp gates to be non-negative", {}},
      {"weighted_alpha", F::boolean, "true", "weight the L1 term by saved FLOPs (false: all ones)", {}},
      {"gate_sharing", F::choice, "per-connection", "gate per connection, or one gate per source channel",
       {"per-connection", "per-source"}},
      {"flops_convention", F::choice, "mac-as-one", "FLOPs per multiply-add", {"mac-as-one", "mac-as-two"}},
      {"resume", F::boolean, "false", "resume search from <out_dir>/search/search.ckpt", {}},
      // losses
      {"tau", F::real, "4", "distillation temperature", {}},
      {"lambda", F::real, "0.1", "cross-entropy weight in the student loss", {}},
      {"lambda1", F::real, "5e-5", "weight-decay strength in the search loss (times |w|^2)", {}},
      {"lambda2", F::real, "1e-3", "L1 strength on gates", {}},
      {"variant", F::choice, "kd-search", "search loss", {"kd-search", "np-search", "kl0-search"}},
      {"kl0", F::optional_real, "", "KL target for kl0-search", {}},
      {"kl_direction", F::choice, "teacher-leading", "KL argument order", {"teacher-leading", "student-leading"}},
      {"np_target", F::choice, "hard", "np-search target: teacher argmax or teacher probabilities", {"hard", "soft"}},
      // student and file references
      {"mode", F::choice, "kd", "student training mode", {"kd", "scratch"}},
      {"teacher_ckpt", F::text, "", "teacher checkpoint (default <out_dir>/teacher-train/teacher.ckpt)", {}},
      {"search_ckpt", F::text, "", "search checkpoint (default <out_dir>/search/search.ckpt)", {}},
      {"student_arch", F::text, "", "student architecture export (default <out_dir>/search/arch.export)", {}},
      {"student_ckpt", F::text, "", "student checkpoint (default <out_dir>/student-train/student.ckpt)", {}},
      {"ckpt", F::text, "", "checkpoint to evaluate (default: the student checkpoint)", {}},
  };
  return fields;
}

inline const FieldSpec* find_field(const std::string& key) {
  for (auto& f : config_fields())
    if (f.key == key) return &f;
  return nullptr;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_real(const std::string& s, double& out) {
  if (s.empty()) return false;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size() && std::isfinite(out);
}

inline bool parse_long(const std::string& s, long long& out) {
  if (s.empty()) return false;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

/// Empty string when `value` is acceptable for `f`, otherwise the expectation.
inline std::string check_value(const FieldSpec& f, const std::string& value) {
  double d;
  long long i;
  switch (f.type) {
    case FieldType::integer:
      return parse_long(value, i) ? "" : "an integer";
    case FieldType::real:
      return parse_real(value, d) ? "" : "a real number";
    case FieldType::optional_real:
      return value.empty() || parse_real(value, d) ? "" : "a real number or nothing";
    case FieldType::boolean:
      return value == "true" || value == "false" ? "" : "true or false";
    case FieldType::text:
      return "";
    case FieldType::int_list: {
      if (value.empty()) return "";
      for (auto& part : split(value, ','))
        if (!parse_long(trim(part), i)) return "a comma-separated list of integers";
      return "";
    }
    case FieldType::budget: {
      if (!value.empty() && value.back() == '%') {
        return parse_real(value.substr(0, value.size() - 1), d) && d > 0 && d <= 100 ? ""
                                                                                      : "a percentage in (0, 100]";
      }
      return parse_long(value, i) && i > 0 ? "" : "a positive FLOPs count or a percentage such as 50%";
    }
    case FieldType::choice: {
      for (auto& c : f.choices)
        if (value == c) return "";
      std::string e = "one of";
      for (auto& c : f.choices) e += " " + c;
      return e;
    }
  }
  return "";
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() {
    for (auto& f : config_fields()) values_[f.key] = f.fallback;
  }

  /// Sets `key`; `where` describes the origin for error messages.
  void set(const std::string& key, const std::string& value, const std::string& where = "") {
    const auto* f = find_field(key);
    const std::string at = where.empty() ? "" : " (" + where + ")";
    if (!f) throw ConfigError("unknown config key '" + key + "'" + at);
    const auto expect = detail::check_value(*f, value);
    if (!expect.empty())
      throw ConfigError("config key '" + key + "'" + at + ": expected " + expect + ", got '" + value + "'");
    values_[key] = value;
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }
  long long integer(const std::string& key) const {
    long long v = 0;
    detail::parse_long(str(key), v);
    return v;
  }
  double real(const std::string& key) const {
    double v = 0;
    detail::parse_real(str(key), v);
    return v;
  }
  bool boolean(const std::string& key) const { return str(key) == "true"; }
  std::vector<int> int_list(const std::string& key) const {
    std::vector<int> out;
    if (str(key).empty()) return out;
    for (auto& p : detail::split(str(key), ',')) out.push_back(static_cast<int>(std::stoll(detail::trim(p))));
    return out;
  }

  /// Resolved configuration in the file format, one key per line in a fixed order.
  std::string resolved() const {
    std::ostringstream os;
    for (auto& f : config_fields()) os << f.key << " = " << values_.at(f.key) << "\n";
    return os.str();
  }
  std::string hash() const { return fnv1a_hex(resolved()); }

  // Typed views -------------------------------------------------------------

  std::uint64_t seed() const { return static_cast<std::uint64_t>(integer("seed")); }

  ArchSpec arch_spec() const { return ArchSpec{str("arch"), parse_input(str("input")), static_cast<int>(integer("classes"))}; }

  LossConfig loss() const {
    LossConfig c;
    c.tau = real("tau");
    c.lambda = real("lambda");
    c.lambda1 = real("lambda1");
    c.lambda2 = real("lambda2");
    const auto& v = str("variant");
    c.variant = v == "np-search" ? SearchVariant::np_search
                                 : (v == "kl0-search" ? SearchVariant::kl0_search : SearchVariant::kd_search);
    if (!str("kl0").empty()) c.kl0 = real("kl0");
    if (c.variant != SearchVariant::kl0_search && c.kl0) throw ConfigError("config key 'kl0' is only valid with variant=kl0-search");
    c.kl_direction = str("kl_direction") == "student-leading" ? KlDirection::student_leading : KlDirection::teacher_leading;
    c.np_target = str("np_target") == "soft" ? NpTarget::soft : NpTarget::hard;
    c.validate();
    return c;
  }

  FlopsConvention convention() const {
    return str("flops_convention") == "mac-as-two" ? FlopsConvention::mac_as_two : FlopsConvention::mac_as_one;
  }

  long long budget(long long teacher_flops) const {
    const auto& b = str("budget");
    if (b.back() == '%') {
      double pct = 0;
      detail::parse_real(b.substr(0, b.size() - 1), pct);
      return static_cast<long long>(std::floor(static_cast<double>(teacher_flops) * pct / 100.0));
    }
    return integer("budget");
  }

  TrainConfig train(bool teacher) const {
    TrainConfig t;
    t.epochs = static_cast<int>(integer(teacher ? "teacher_epochs" : "epochs"));
    t.batch_size = static_cast<int>(integer("batch_size"));
    t.schedule = Schedule{real("lr"), int_list("lr_milestones"), real("lr_factor")};
    t.momentum = real("momentum");
    t.weight_decay = real("weight_decay");
    t.seed = seed();
    t.validate();
    return t;
  }

  SearchConfig search(long long teacher_flops) const {
    SearchConfig s;
    s.loss = loss();
    s.flops_budget = budget(teacher_flops);
    s.max_epochs = static_cast<int>(integer("search_max_epochs"));
    s.batch_size = static_cast<int>(integer("search_batch_size"));
    s.schedule = Schedule{real("search_lr"), int_list("search_lr_milestones"), real("lr_factor")};
    s.momentum = real("momentum");
    s.gate_lr = real("gate_lr");
    s.gate_momentum = real("gate_momentum");
    s.clamp_gates = boolean("clamp_gates");
    s.weighted_alpha = boolean("weighted_alpha");
    s.sharing = str("gate_sharing") == "per-source" ? GateSharing::per_source : GateSharing::per_connection;
    s.convention = convention();
    s.seed = seed();
    s.validate(teacher_flops);
    return s;
  }

  Dataset dataset() const {
    Dataset d;
    if (str("data") == "idx") {
      for (auto k : {"idx_train_images", "idx_train_labels", "idx_test_images", "idx_test_labels"})
        if (str(k).empty()) throw ConfigError(std::string("config key '") + k + "' is required with data=idx");
      d = load_idx_dataset(str("idx_train_images"), str("idx_train_labels"), str("idx_test_images"),
                           str("idx_test_labels"));
    } else {
      if (integer("data_n") < 1 || integer("data_test_n") < 1) throw ConfigError("data_n and data_test_n must be positive");
      d = gen_synthetic(str("data"), static_cast<std::size_t>(integer("data_n")), static_cast<int>(integer("classes")),
                        real("data_noise"), seed(), static_cast<std::size_t>(integer("data_test_n")));
    }
    d.augment = Augment{static_cast<int>(integer("augment_pad")), boolean("augment_hflip")};
    if (d.augment.pad < 0) throw ConfigError("augment_pad must be >= 0");
    return d;
  }

 private:
  std::map<std::string, std::string> values_;
};

/// Applies "key = value" lines from `text` (origin `name` for messages).
inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& name = "config") {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(name + " line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    cfg.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)), name + " line " + std::to_string(lineno));
  }
}

/// Defaults, then `path` (when non-empty), then `overrides` in order.
inline RunConfig parse_config(const std::string& path, const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(cfg, ss.str(), path);
  }
  for (auto& [k, v] : overrides) cfg.set(k, v, "command line");
  return cfg;
}

}  // namespace gsearch
