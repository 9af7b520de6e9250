#pragma once

// Command-line front end: gsearch <command> [--config FILE] [--key value ...]

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gsearch/checkpoint.hpp"
#include "gsearch/config.hpp"
#include "gsearch/export.hpp"
#include "gsearch/flops.hpp"
#include "gsearch/search.hpp"

namespace gsearch {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Search state persistence

inline void put_search_state(Checkpoint& ck, const SearchState& st) {
  put_network(ck, st.model.net);
  put_gates(ck, st.model.gates);
  put_sgd(ck, "opt.sgd", st.sgd);
  put_apg(ck, "opt.apg", st.apg);
  ck.sections["log.count"] = static_cast<std::uint64_t>(st.log.size());
  for (std::size_t e = 0; e < st.log.size(); ++e) {
    const auto& r = st.log[e];
    const auto p = "log." + std::to_string(e);
    ck.sections[p + ".values"] =
        Checkpoint::F64{Shape{7},
                        {static_cast<double>(r.epoch), r.first_term, r.decay_term, r.l1_term,
                         static_cast<double>(r.effective_flops), static_cast<double>(r.open_gates),
                         static_cast<double>(r.reopened)}};
    for (std::size_t v = 0; v < r.gates.size(); ++v)
      ck.sections[p + ".gate." + std::to_string(v)] = Checkpoint::F32{Shape{r.gates[v].size()}, r.gates[v]};
  }
}

inline SearchState get_search_state(const Checkpoint& ck) {
  SearchState st;
  st.model = get_gated_model(ck);
  st.sgd = get_sgd(ck, "opt.sgd");
  st.apg = get_apg(ck, "opt.apg");
  const auto n = ck.u64("log.count");
  for (std::uint64_t e = 0; e < n; ++e) {
    const auto p = "log." + std::to_string(e);
    const auto& v = ck.get<Checkpoint::F64>(p + ".values").data;
    if (v.size() != 7) throw FormatError("checkpoint section '" + p + ".values' has inconsistent length");
    EpochRecord r;
    r.epoch = static_cast<int>(v[0]);
    r.first_term = v[1];
    r.decay_term = v[2];
    r.l1_term = v[3];
    r.effective_flops = static_cast<long long>(v[4]);
    r.open_gates = static_cast<std::size_t>(v[5]);
    r.reopened = static_cast<std::size_t>(v[6]);
    for (std::size_t g = 0; g < st.model.gates.g.size(); ++g)
      r.gates.push_back(ck.get<Checkpoint::F32>(p + ".gate." + std::to_string(g)).data);
    st.log.push_back(std::move(r));
  }
  return st;
}

// ---------------------------------------------------------------------------
// Commands

namespace detail {

struct RunContext {
  RunConfig cfg;
  fs::path root;  // out_dir
  fs::path dir;   // out_dir/<command>
  std::ostream& out;

  fs::path path_or(const std::string& key, const fs::path& fallback) const {
    const auto& v = cfg.str(key);
    return v.empty() ? fallback : fs::path(v);
  }
  void write(const std::string& name, const std::string& text) const {
    std::ofstream f(dir / name);
    if (!f) throw FormatError("cannot write '" + (dir / name).string() + "'");
    f << text;
  }
  void stamp(Checkpoint& ck) const {
    ck.sections["meta.config_hash"] = cfg.hash();
    ck.sections["meta.seed"] = cfg.seed();
  }
};

inline void check_classes(const TopologyGraph& g, const Dataset& d) {
  if (g.num_classes != d.classes)
    throw ConfigError("network has " + std::to_string(g.num_classes) + " outputs but the data has " +
                      std::to_string(d.classes) + " classes");
}

inline Network<float> load_network(const fs::path& p) { return get_network(load_checkpoint(p.string())); }

inline void cmd_teacher_train(RunContext& c) {
  const auto data = c.cfg.dataset();
  const auto topo = build_topology(c.cfg.arch_spec());
  check_classes(topo, data);
  auto [net, log] = train_teacher(topo, data, c.cfg.train(true));
  Checkpoint ck;
  put_network(ck, net);
  c.stamp(ck);
  save_checkpoint((c.dir / "teacher.ckpt").string(), ck);
  c.write("result.log", format_train_log(log));
  c.out << "teacher " << topo.spec.to_string() << " test_error=" << format_double(log.final_test_error) << "\n";
}

inline void write_arch_outputs(const RunContext& c, const TopologyGraph& teacher, const StudentArchitecture& arch) {
  export_arch(teacher, arch, (c.dir / "arch.export").string(), c.cfg.convention());
  export_drop_ratios(teacher, arch, (c.dir / "dropratio.csv").string());
}

inline void cmd_search(RunContext& c) {
  const auto teacher_path = c.path_or("teacher_ckpt", c.root / "teacher-train" / "teacher.ckpt");
  const auto tck = load_checkpoint(teacher_path.string());
  if (checkpoint_student(tck)) throw ConfigError("search needs a teacher checkpoint, got a student: " + teacher_path.string());
  const Network<float> teacher = get_network(tck);
  const auto data = c.cfg.dataset();
  check_classes(teacher.topology, data);
  const long long tf = model_flops_params(teacher.topology, nullptr, c.cfg.convention()).total_flops;
  const auto scfg = c.cfg.search(tf);
  const auto ckpt_path = c.dir / "search.ckpt";
  std::optional<SearchState> resume;
  if (c.cfg.boolean("resume") && fs::exists(ckpt_path)) resume = get_search_state(load_checkpoint(ckpt_path.string()));
  const auto tid = network_id(teacher);
  auto save_state = [&](const SearchState& st) {
    Checkpoint ck;
    put_search_state(ck, st);
    c.stamp(ck);
    ck.sections["meta.teacher_id"] = tid;
    save_checkpoint(ckpt_path.string(), ck);
  };
  auto result = run_search(teacher, data, scfg, std::move(resume), save_state);
  result.arch.config_hash = c.cfg.hash();
  c.write("result.log", format_search_log(result));
  write_arch_outputs(c, teacher.topology, result.arch);
  const auto student = student_topology(teacher.topology, result.arch).first;
  c.out << "search reached " << model_flops_params(student, nullptr, c.cfg.convention()).total_flops << " FLOPs (budget "
        << result.budget << ", teacher " << result.teacher_flops << ") after " << result.epochs_to_budget
        << " epochs; removed connections: " << result.arch.removed.size() << "\n";
}

inline void cmd_extract(RunContext& c) {
  const auto path = c.path_or("search_ckpt", c.root / "search" / "search.ckpt");
  const auto ck = load_checkpoint(path.string());
  const auto model = get_gated_model(ck);
  auto ex = extract_student(model);
  if (ck.has("meta.teacher_id")) ex.arch.teacher_id = ck.text("meta.teacher_id");
  ex.arch.config_hash = ck.has("meta.config_hash") ? ck.text("meta.config_hash") : c.cfg.hash();
  write_arch_outputs(c, model.net.topology, ex.arch);
  Checkpoint out;
  put_network(out, ex.student, &ex.arch);
  c.stamp(out);
  save_checkpoint((c.dir / "student.ckpt").string(), out);
  const auto conv = c.cfg.convention();
  const long long gated = effective_flops(model, conv);
  const auto sr = model_flops_params(ex.student.topology, nullptr, conv);
  std::string log = "gated_effective_flops=" + std::to_string(gated) + "\nstudent_flops=" + std::to_string(sr.total_flops) +
                    "\nstudent_params=" + std::to_string(sr.total_params) +
                    "\nremoved_connections=" + std::to_string(ex.arch.removed.size()) + "\n";
  c.write("result.log", log);
  c.out << log;
}

inline void cmd_student_train(RunContext& c) {
  const auto arch = import_arch(c.path_or("student_arch", c.root / "search" / "arch.export").string());
  const auto data = c.cfg.dataset();
  const TrainMode mode = c.cfg.str("mode") == "kd" ? TrainMode::kd : TrainMode::scratch;
  std::optional<Network<float>> teacher;
  if (mode == TrainMode::kd) teacher = load_network(c.path_or("teacher_ckpt", c.root / "teacher-train" / "teacher.ckpt"));
  auto [net, log] = train_student(arch, data, mode, teacher ? &*teacher : nullptr, c.cfg.train(false), c.cfg.loss());
  Checkpoint ck;
  put_network(ck, net, &arch);
  c.stamp(ck);
  save_checkpoint((c.dir / "student.ckpt").string(), ck);
  c.write("result.log", format_train_log(log));
  c.out << "student (" << to_string(mode) << ") test_error=" << format_double(log.final_test_error) << "\n";
}

inline void cmd_eval(RunContext& c) {
  fs::path p = c.cfg.str("ckpt");
  if (p.empty()) p = c.path_or("student_ckpt", c.root / "student-train" / "student.ckpt");
  auto net = load_network(p);
  const auto data = c.cfg.dataset();
  check_classes(net.topology, data);
  const double err = evaluate(net, data.test);
  const std::string log = "checkpoint=" + p.string() + "\ntest_error=" + format_double(err) + "\n";
  c.write("result.log", log);
  c.out << log;
}

inline void cmd_flops(RunContext& c) {
  TopologyGraph g;
  if (!c.cfg.str("student_arch").empty()) {
    const auto arch = import_arch(c.cfg.str("student_arch"));
    g = student_topology(build_topology(arch.teacher), arch).first;
  } else {
    g = build_topology(c.cfg.arch_spec());
  }
  const auto text = g.spec.to_string() + "\n" + format_report(model_flops_params(g, nullptr, c.cfg.convention()));
  c.write("result.log", text);
  c.out << text;
}

inline void cmd_export_vis(RunContext& c) {
  const auto arch = import_arch(c.path_or("student_arch", c.root / "search" / "arch.export").string());
  const auto teacher = build_topology(arch.teacher);
  const auto csv = drop_ratios_csv(drop_ratios(teacher, arch));
  c.write("dropratio.csv", csv);
  c.out << csv;
}

inline std::string dashed(std::string key) {
  for (auto& ch : key)
    if (ch == '_') ch = '-';
  return key;
}

}  // namespace detail

inline const std::vector<std::pair<std::string, std::string>>& cli_commands() {
  static const std::vector<std::pair<std::string, std::string>> cmds = {
      {"teacher-train", "train the teacher from scratch"},
      {"search", "search a student under the FLOPs budget"},
      {"extract", "extract the student from a search checkpoint"},
      {"student-train", "train an extracted student from fresh weights (kd or scratch)"},
      {"eval", "test error of a checkpoint"},
      {"flops", "FLOPs and parameter report"},
      {"export-vis", "per-connection drop ratios as CSV"},
  };
  return cmds;
}

/// Runs one command. Returns 0 on success; failures print a one-line diagnostic.
inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Distillation-aware student architecture search"};
  app.name("gsearch");
  app.require_subcommand(1);
  std::string config_path;
  std::map<std::string, std::map<std::string, std::string>> given;
  std::map<std::string, CLI::App*> subs;
  for (auto& [name, desc] : cli_commands()) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "configuration file (key = value lines)");
    for (auto& f : config_fields()) {
      std::string names = "--" + detail::dashed(f.key);
      if (f.key == "budget") names += ",--budget-flops";
      sub->add_option(names, given[name][f.key], f.help + " [" + f.fallback + "]");
    }
    subs[name] = sub;
  }
  if (!args.empty() && !args[0].empty() && args[0][0] != '-' && !subs.count(args[0])) {
    err << "gsearch: unknown command '" << args[0] << "'\n" << app.help();
    return 2;
  }
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "gsearch: " << e.what() << "\n" << app.help();
    return 2;
  }
  for (auto& [name, sub] : subs) {
    if (!sub->parsed()) continue;
    try {
      std::vector<std::pair<std::string, std::string>> overrides;
      for (auto& f : config_fields())
        if (sub->count("--" + detail::dashed(f.key)) > 0) overrides.emplace_back(f.key, given[name][f.key]);
      detail::RunContext ctx{parse_config(config_path, overrides), {}, {}, out};
      ctx.root = ctx.cfg.str("out_dir");
      ctx.dir = ctx.root / name;
      fs::create_directories(ctx.dir);
      ctx.write("resolved.cfg", ctx.cfg.resolved());
      if (name == "teacher-train") detail::cmd_teacher_train(ctx);
      else if (name == "search") detail::cmd_search(ctx);
      else if (name == "extract") detail::cmd_extract(ctx);
      else if (name == "student-train") detail::cmd_student_train(ctx);
      else if (name == "eval") detail::cmd_eval(ctx);
      else if (name == "flops") detail::cmd_flops(ctx);
      else detail::cmd_export_vis(ctx);
      return 0;
    } catch (const std::exception& e) {
      err << "gsearch " << name << ": " << e.what() << "\n";
      return 1;
    }
  }
  err << app.help();
  return 2;
}

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, out, err);
}

}  // namespace gsearch
