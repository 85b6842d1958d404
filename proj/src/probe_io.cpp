#include "compprobe/probe_io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace compprobe::probe {

using nlohmann::json;

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string head_label(int head) { return head == 0 ? "all" : std::to_string(head); }

json number(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

}  // namespace

std::string probe_csv(std::span<const ProbeResult> rows) {
  std::ostringstream os;
  os << kProbeHeader << '\n';
  for (const auto& r : rows)
    os << r.template_id << ',' << r.layer << ',' << head_label(r.head) << ',' << r.slot << ','
       << model::to_string(r.kind) << ',' << r.target << ',' << r.n_pairs << ',' << format_double(r.r_matched)
       << ',' << format_double(r.r_unmatched) << ',' << format_double(r.p_perm) << '\n';
  return os.str();
}

std::string regression_csv(std::span<const RegressionRow> rows) {
  std::ostringstream os;
  os << kRegressionHeader << '\n';
  for (const auto& r : rows)
    os << r.template_id << ',' << r.layer << ',' << head_label(r.head) << ',' << r.slot << ','
       << model::to_string(r.kind) << ',' << r.target << ',' << r.result.n_pairs << ','
       << format_double(r.result.beta_matched) << ',' << format_double(r.result.beta_unmatched) << ','
       << format_double(r.result.delta) << ',' << format_double(r.result.p_perm) << '\n';
  return os.str();
}

std::string curve_csv(std::span<const CurvePoint> points) {
  std::ostringstream os;
  os << kCurveHeader << '\n';
  for (const auto& p : points) {
    auto row = [&](const std::string& head, double r) {
      os << p.template_id << ',' << p.slot << ',' << model::to_string(p.kind) << ',' << p.target << ',' << p.layer
         << ',' << head << ',' << format_double(r) << '\n';
    };
    for (std::size_t h = 0; h < p.per_head.size(); ++h) row(std::to_string(h + 1), p.per_head[h]);
    row("mean", p.mean);
    row("min", p.min);
    row("max", p.max);
  }
  return os.str();
}

std::string position_map_csv(const PositionMap& map) {
  std::ostringstream os;
  os << "position";
  for (const auto& t : map.targets) os << ',' << t;
  os << '\n';
  for (std::size_t pos = 0; pos < map.r.size(); ++pos) {
    os << pos;
    for (double v : map.r[pos]) os << ',' << format_double(v);
    os << '\n';
  }
  return os.str();
}

json position_map_sidecar(const PositionMap& map) {
  json positions = json::array();
  for (std::size_t pos = 0; pos < map.question.size(); ++pos)
    positions.push_back({{"position", pos}, {"char", std::string(1, map.question[pos])}});
  json constituents = json::array();
  for (const auto& a : map.annotations)
    constituents.push_back({{"op_index", a.op_index},
                            {"op", std::string(1, expr::symbol(a.op))},
                            {"op_char", a.op_char},
                            {"span", {a.constituent.lo, a.constituent.hi}},
                            {"text", map.question.substr(a.constituent.lo, a.constituent.size())}});
  json peaks = json::object();
  for (std::size_t t = 0; t < map.targets.size(); ++t) {
    const std::size_t pos = map.argmax[t];
    bool inside = false;
    if (t < map.annotations.size()) inside = map.annotations[t].constituent.contains(pos);
    peaks[map.targets[t]] = {{"position", pos}, {"r", number(map.r[pos][t])}, {"within_constituent", inside}};
  }
  json means = json::array();
  for (const auto& c : map.constituents)
    means.push_back({{"constituent", op_label(c.constituent)},
                     {"span", {c.span.lo, c.span.hi}},
                     {"target", c.target},
                     {"mean_r", number(c.mean_r)},
                     {"interior_mean_r", number(c.interior_mean_r)}});
  json per_head = json::array();
  for (const auto& h : map.per_head) {
    json rows = json::array();
    for (const auto& row : h) {
      json cells = json::array();
      for (double v : row) cells.push_back(number(v));
      rows.push_back(cells);
    }
    per_head.push_back(rows);
  }
  return {{"template_id", map.template_id},
          {"layer", map.layer},
          {"kind", model::to_string(map.kind)},
          {"question", map.question},
          {"targets", map.targets},
          {"positions", positions},
          {"constituents", constituents},
          {"peaks", peaks},
          {"constituent_means", means},
          {"per_head", per_head}};
}

json to_json(const RegressionResult& r) {
  return {{"intercept", number(r.intercept)},   {"beta_matched", number(r.beta_matched)},
          {"beta_unmatched", number(r.beta_unmatched)}, {"delta", number(r.delta)},
          {"p_perm", number(r.p_perm)},          {"n_pairs", r.n_pairs},
          {"n_perm", r.n_perm}};
}

json to_json(const PooledResult& r) {
  return {{"template_ids", r.template_ids}, {"r_matched", number(r.r_matched)},
          {"r_unmatched", number(r.r_unmatched)}, {"p_matched", number(r.p_matched)},
          {"n_pairs", r.n_pairs},           {"regression", to_json(r.regression)}};
}

void write_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error("write failed: " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text, std::string_view expected_header) {
  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const std::size_t nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view() : text.substr(nl + 1);
    if (line_no++ == 0) {
      if (line != expected_header) throw FormatError("unexpected CSV header: " + std::string(line));
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.emplace_back(line.substr(start, comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(fields));
  }
  if (line_no == 0) throw FormatError("empty CSV");
  return rows;
}

}  // namespace compprobe::probe
