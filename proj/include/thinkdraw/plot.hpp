#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace thinkdraw::plot {

// Metric panels emitted for an RL metrics stream.
const std::vector<std::string>& curve_metrics();

// Parses line-delimited metric records. Blank lines are skipped; a malformed
// line or a record without the curve fields throws ParseError naming the
// 1-based line number. An input without records throws ParseError too.
std::vector<nlohmann::ordered_json> parse_metrics(const std::string& text);

// Writes <metric>.csv ("step,value" rows, one per record) and <metric>.svg
// for every curve metric into `dir`. Returns the written paths.
std::vector<std::string> write_curves(const std::vector<nlohmann::ordered_json>& records, const std::string& dir);

// Standalone SVG line chart.
std::string svg_line_chart(const std::string& title, const std::vector<double>& x, const std::vector<double>& y);

}  // namespace thinkdraw::plot
