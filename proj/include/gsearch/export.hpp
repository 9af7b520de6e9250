#pragma once

// Architecture export (JSON, re-importable) and per-connection drop ratios (CSV).

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gsearch/extract.hpp"
#include "gsearch/flops.hpp"

namespace gsearch {

inline constexpr int kArchExportVersion = 1;

/// The architecture that keeps every teacher channel.
inline StudentArchitecture full_architecture(const TopologyGraph& teacher) {
  return architecture_from_mask(teacher, full_mask(teacher));
}

inline nlohmann::ordered_json arch_to_json(const TopologyGraph& teacher, const StudentArchitecture& arch,
                                           FlopsConvention convention = kDefaultConvention) {
  using nlohmann::ordered_json;
  auto [student, map] = student_topology(teacher, arch);
  const auto sr = model_flops_params(student, nullptr, convention);
  const auto tr = model_flops_params(teacher, nullptr, convention);
  ordered_json j;
  j["format"] = "gsearch-arch";
  j["version"] = kArchExportVersion;
  j["teacher"] = {{"arch", arch.teacher.arch},
                  {"input", input_to_string(arch.teacher.input)},
                  {"classes", arch.teacher.classes},
                  {"id", arch.teacher_id}};
  j["config_hash"] = arch.config_hash;
  ordered_json layers = ordered_json::array();
  std::size_t c = 0;
  for (int i = 0; i < teacher.size(); ++i) {
    const auto& l = teacher.layer(i);
    ordered_json lj;
    lj["index"] = i;
    lj["name"] = l.name;
    lj["kind"] = to_string(l.kind);
    lj["teacher_out_channels"] = l.out_channels;
    lj["kept_out_channels"] = map.alive[static_cast<std::size_t>(i)].size();
    ordered_json conns = ordered_json::array();
    for (std::size_t k = 0; k < l.inputs.size(); ++k, ++c) {
      const auto& kc = arch.connections.at(c);
      conns.push_back({{"input", kc.input},
                       {"source", kc.source},
                       {"source_name", kc.source < 0 ? std::string("input") : teacher.layer(kc.source).name},
                       {"channels", l.inputs[k].size()},
                       {"kept_count", kc.kept.size()},
                       {"kept", kc.kept}});
    }
    lj["connections"] = conns;
    layers.push_back(lj);
  }
  j["layers"] = layers;
  ordered_json removed = ordered_json::array();
  for (auto& [layer, input] : arch.removed)
    removed.push_back({{"layer", layer},
                       {"input", input},
                       {"layer_name", teacher.layer(layer).name},
                       {"source", teacher.layer(layer).inputs[static_cast<std::size_t>(input)].source}});
  j["removed_connections"] = removed;
  j["summary"] = {{"convention", convention_note(convention)},
                  {"flops", sr.total_flops},
                  {"params", sr.total_params},
                  {"teacher_flops", tr.total_flops},
                  {"teacher_params", tr.total_params}};
  return j;
}

inline std::string export_arch_string(const TopologyGraph& teacher, const StudentArchitecture& arch,
                                      FlopsConvention convention = kDefaultConvention) {
  return arch_to_json(teacher, arch, convention).dump(2) + "\n";
}

inline void export_arch(const TopologyGraph& teacher, const StudentArchitecture& arch, const std::string& path,
                        FlopsConvention convention = kDefaultConvention) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << export_arch_string(teacher, arch, convention);
  if (!out) throw FormatError("failed writing '" + path + "'");
}

/// Parses an architecture export. Only the teacher description, provenance and kept
/// indices are authoritative; counts and summaries are recomputed.
inline StudentArchitecture import_arch_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("architecture export is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("format") != "gsearch-arch") throw FormatError("not an architecture export");
    if (j.at("version") != kArchExportVersion)
      throw FormatError("unsupported architecture export version " + j.at("version").dump());
    StudentArchitecture arch;
    const auto& t = j.at("teacher");
    arch.teacher.arch = t.at("arch").get<std::string>();
    arch.teacher.input = parse_input(t.at("input").get<std::string>());
    arch.teacher.classes = t.at("classes").get<int>();
    arch.teacher_id = t.at("id").get<std::string>();
    arch.config_hash = j.at("config_hash").get<std::string>();
    for (auto& l : j.at("layers"))
      for (auto& c : l.at("connections")) {
        KeptConnection kc{l.at("index").get<int>(), c.at("input").get<int>(), c.at("source").get<int>(),
                          c.at("kept").get<std::vector<int>>()};
        if (kc.kept.empty()) arch.removed.emplace_back(kc.layer, kc.input);
        arch.connections.push_back(std::move(kc));
      }
    std::vector<std::pair<int, int>> listed;
    for (auto& r : j.at("removed_connections")) listed.emplace_back(r.at("layer").get<int>(), r.at("input").get<int>());
    if (listed != arch.removed) throw FormatError("removed-connection list disagrees with the kept channels");
    return arch;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed architecture export: ") + e.what());
  }
}

inline StudentArchitecture import_arch(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return import_arch_string(ss.str());
}

// ---------------------------------------------------------------------------
// Drop ratios

struct DropRatioRow {
  int block = 0;    // dense block (1-based); 0 for layers outside dense blocks
  int layer = 0;    // consumer position in the block (1-based); n+1 is the transition or classifier
  int source = 0;   // feature source in the block: 0 is the block input, m is dense layer m
  double drop_rate = 0;
};

/// Fraction of each teacher connection's channels dropped in `arch`. Dense networks
/// yield one row per (consumer, source) pair per block; other topologies yield one row
/// per connection with layer and source numbered from 1 (source 0 is the network input).
inline std::vector<DropRatioRow> drop_ratios(const TopologyGraph& teacher, const StudentArchitecture& arch) {
  if (!(arch.teacher == teacher.spec)) throw SpecError("drop ratios: architecture was not derived from this teacher");
  std::size_t expect = 0;
  for (auto& l : teacher.layers) expect += l.inputs.size();
  if (arch.connections.size() != expect) throw SpecError("drop ratios: architecture does not match the teacher's connections");
  auto rate = [&](int layer, std::size_t input) {
    for (auto& kc : arch.connections)
      if (kc.layer == layer && kc.input == static_cast<int>(input)) {
        const auto total = teacher.layer(layer).inputs[input].size();
        if (kc.source != teacher.layer(layer).inputs[input].source)
          throw SpecError("drop ratios: architecture does not match the teacher's connections");
        return static_cast<double>(total - static_cast<int>(kc.kept.size())) / static_cast<double>(total);
      }
    throw SpecError("drop ratios: connection missing from architecture");
  };
  std::vector<DropRatioRow> rows;
  if (teacher.dense_blocks.empty()) {
    for (int i = 0; i < teacher.size(); ++i)
      for (std::size_t j = 0; j < teacher.layer(i).inputs.size(); ++j)
        rows.push_back({0, i + 1, teacher.layer(i).inputs[j].source + 1, rate(i, j)});
    return rows;
  }
  for (std::size_t b = 0; b < teacher.dense_blocks.size(); ++b) {
    const auto& blk = teacher.dense_blocks[b];
    auto source_pos = [&](int src) {
      if (src == blk.input_layer) return 0;
      for (std::size_t m = 0; m < blk.output_layers.size(); ++m)
        if (blk.output_layers[m] == src) return static_cast<int>(m) + 1;
      return -1;
    };
    std::vector<int> consumers = blk.entry_layers;
    consumers.push_back(blk.consumer_after);
    for (std::size_t pos = 0; pos < consumers.size(); ++pos) {
      const auto& l = teacher.layer(consumers[pos]);
      for (std::size_t j = 0; j < l.inputs.size(); ++j) {
        const int sp = source_pos(l.inputs[j].source);
        if (sp < 0) continue;
        rows.push_back({static_cast<int>(b) + 1, static_cast<int>(pos) + 1, sp, rate(consumers[pos], j)});
      }
    }
  }
  return rows;
}

inline std::string drop_ratios_csv(const std::vector<DropRatioRow>& rows) {
  std::ostringstream os;
  os << "block,layer,source,drop_rate\n";
  os << std::setprecision(9);
  for (auto& r : rows) os << r.block << "," << r.layer << "," << r.source << "," << r.drop_rate << "\n";
  return os.str();
}

inline void export_drop_ratios(const TopologyGraph& teacher, const StudentArchitecture& arch, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << drop_ratios_csv(drop_ratios(teacher, arch));
}

}  // namespace gsearch
