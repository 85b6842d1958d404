#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "compprobe/probe.hpp"

namespace compprobe::probe {

inline constexpr std::string_view kProbeHeader =
    "template_id,layer,head,slot,kind,target,n_pairs,r_matched,r_unmatched,p_perm";
inline constexpr std::string_view kRegressionHeader =
    "template_id,layer,head,slot,kind,target,n_pairs,beta_matched,beta_unmatched,delta,p_perm";
inline constexpr std::string_view kCurveHeader = "template_id,slot,kind,target,layer,head,r";

// Shortest round-trip decimal; "nan" for NaN.
std::string format_double(double v);

std::string probe_csv(std::span<const ProbeResult> rows);
std::string regression_csv(std::span<const RegressionRow> rows);
std::string curve_csv(std::span<const CurvePoint> points);
// One row per character position, one column per target.
std::string position_map_csv(const PositionMap& map);
// Positions mapped to question characters and constituent spans.
nlohmann::json position_map_sidecar(const PositionMap& map);
nlohmann::json to_json(const RegressionResult& r);
nlohmann::json to_json(const PooledResult& r);

// Writes bytes exactly; throws Error on failure.
void write_file(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

// Splits a header-led CSV into field rows; no quoting support.
std::vector<std::vector<std::string>> parse_csv(std::string_view text, std::string_view expected_header);

}  // namespace compprobe::probe
