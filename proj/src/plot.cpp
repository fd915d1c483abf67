#include "syncast/plot.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "syncast/errors.hpp"
#include "syncast/io.hpp"

namespace syncast::plot {

namespace {

constexpr double kWidth = 640.0;
constexpr double kHeight = 400.0;
constexpr double kLeft = 70.0;
constexpr double kRight = 150.0;
constexpr double kTop = 40.0;
constexpr double kBottom = 50.0;

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

struct Range {
  double lo = 0.0;
  double hi = 1.0;
};

Range value_range(const std::vector<Series>& series, bool include_zero) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& s : series) {
    for (const auto& v : s.values) {
      if (!v) continue;
      lo = std::min(lo, *v);
      hi = std::max(hi, *v);
    }
  }
  if (!std::isfinite(lo)) return {};
  if (include_zero) lo = std::min(lo, 0.0);
  if (hi - lo < 1e-9) {
    hi += 0.5;
    lo -= include_zero && lo == 0.0 ? 0.0 : 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  return {include_zero && lo >= 0.0 ? lo : lo - pad, hi + pad};
}

void frame(std::ostringstream& os, const std::string& title, const std::string& x_label, const std::string& y_label,
           Range r) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
     << "</text>\n";
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1 << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = r.lo + (r.hi - r.lo) * i / 4.0;
    const double y = y0 - (y0 - y1) * i / 4.0;
    os << "<line x1=\"" << x0 - 4 << "\" y1=\"" << y << "\" x2=\"" << x1 << "\" y2=\"" << y
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << x0 - 8 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << fmt(v) << "</text>\n";
  }
  os << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">"
     << escape(x_label) << "</text>\n";
  os << "<text transform=\"translate(18," << (y0 + y1) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(y_label) << "</text>\n";
}

void legend(std::ostringstream& os, const std::vector<Series>& series) {
  const double x = kWidth - kRight + 15;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = kTop + 10 + 20.0 * static_cast<double>(i);
    os << "<rect x=\"" << x << "\" y=\"" << y - 9 << "\" width=\"12\" height=\"12\" fill=\"" << kPalette[i % 6]
       << "\"/>\n";
    os << "<text x=\"" << x + 18 << "\" y=\"" << y + 1 << "\">" << escape(series[i].label) << "</text>\n";
  }
}

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
  const Range r = value_range(series, false);
  std::size_t n = 0;
  for (const auto& s : series) n = std::max(n, s.values.size());
  std::ostringstream os;
  frame(os, title, x_label, y_label, r);
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  auto px = [&](std::size_t i) { return n <= 1 ? (x0 + x1) / 2 : x0 + 10 + (x1 - x0 - 20) * i / double(n - 1); };
  auto py = [&](double v) { return y0 - (y0 - y1) * (v - r.lo) / (r.hi - r.lo); };
  for (std::size_t i = 0; i < n; ++i) {
    os << "<text x=\"" << px(i) << "\" y=\"" << y0 + 16 << "\" text-anchor=\"middle\">" << i + 1 << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kPalette[s % 6];
    std::string path;
    bool pen = false;
    for (std::size_t i = 0; i < series[s].values.size(); ++i) {
      const auto& v = series[s].values[i];
      if (!v) {
        pen = false;
        continue;
      }
      path += (pen ? " L" : " M") + fmt(px(i), 6) + " " + fmt(py(*v), 6);
      pen = true;
      os << "<circle cx=\"" << px(i) << "\" cy=\"" << py(*v) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    if (!path.empty()) {
      os << "<path d=\"" << path.substr(1) << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    }
  }
  legend(os, series);
  os << "</svg>\n";
  return os.str();
}

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<Series>& groups) {
  const Range r = value_range(groups, true);
  std::ostringstream os;
  frame(os, title, "", "score", r);
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  auto py = [&](double v) { return y0 - (y0 - y1) * (v - r.lo) / (r.hi - r.lo); };
  const double slot = (x1 - x0) / static_cast<double>(std::max<std::size_t>(1, categories.size()));
  const double bar = 0.8 * slot / static_cast<double>(std::max<std::size_t>(1, groups.size()));
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double left = x0 + slot * static_cast<double>(c) + 0.1 * slot;
    os << "<text x=\"" << x0 + slot * (static_cast<double>(c) + 0.5) << "\" y=\"" << y0 + 16
       << "\" text-anchor=\"middle\">" << escape(categories[c]) << "</text>\n";
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (c >= groups[g].values.size() || !groups[g].values[c]) continue;
      const double v = *groups[g].values[c];
      const double base = py(std::clamp(0.0, r.lo, r.hi));
      const double top = py(v);
      os << "<rect x=\"" << left + bar * static_cast<double>(g) << "\" y=\"" << std::min(base, top)
         << "\" width=\"" << bar * 0.95 << "\" height=\"" << std::abs(base - top) << "\" fill=\""
         << kPalette[g % 6] << "\"><title>" << escape(groups[g].label) << " " << fmt(v, 4) << "</title></rect>\n";
    }
  }
  legend(os, groups);
  os << "</svg>\n";
  return os.str();
}

std::vector<std::filesystem::path> render_reports(
    const std::vector<std::pair<std::string, metrics::ScoreReport>>& reports, const std::filesystem::path& out_dir) {
  if (reports.empty()) throw ParameterError("plot: no reports to render");
  std::filesystem::create_directories(out_dir);
  std::vector<Series> csi, far, bars;
  for (const auto& [label, rep] : reports) {
    Series c{label, {}}, f{label, {}};
    for (const auto& lt : rep.per_lead_time) {
      c.values.push_back(lt.csi_m);
      f.values.push_back(lt.far_m);
    }
    csi.push_back(std::move(c));
    far.push_back(std::move(f));
    bars.push_back({label, {rep.csi_m, rep.far_m, rep.hss, rep.crps}});
  }
  const std::vector<std::filesystem::path> paths = {out_dir / "lead_time_csi.svg", out_dir / "lead_time_far.svg",
                                                    out_dir / "stage_comparison.svg"};
  io::write_text(paths[0], line_chart_svg("CSI-M by lead time", "lead time (frames)", "CSI-M", csi));
  io::write_text(paths[1], line_chart_svg("FAR-M by lead time", "lead time (frames)", "FAR-M", far));
  io::write_text(paths[2], bar_chart_svg("Policy comparison", {"CSI-M", "FAR-M", "HSS", "CRPS"}, bars));
  return paths;
}

}  // namespace syncast::plot
