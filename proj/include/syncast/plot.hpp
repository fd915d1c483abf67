#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "syncast/metrics.hpp"

namespace syncast::plot {

struct Series {
  std::string label;
  std::vector<std::optional<double>> values;  // gaps where undefined
};

// Standalone SVG documents.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);
// groups[g].values[c] is the bar of group g in category c.
std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<Series>& groups);

/// Writes lead_time_csi.svg, lead_time_far.svg and stage_comparison.svg for the
/// labelled reports into `out_dir`; returns the paths written.
std::vector<std::filesystem::path> render_reports(
    const std::vector<std::pair<std::string, metrics::ScoreReport>>& reports, const std::filesystem::path& out_dir);

}  // namespace syncast::plot
