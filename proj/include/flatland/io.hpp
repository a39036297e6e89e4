#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "flatland/landscape.hpp"
#include "flatland/sched.hpp"

namespace flatland {

/// Shortest round-trippable decimal form of a double. Infinities and NaN
/// come out as "inf", "-inf", "nan".
inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Minimal CSV emitter: optional leading '#' metadata lines, one header
/// row, then data rows.
class CsvWriter {
 public:
  explicit CsvWriter(std::string path) : path_(std::move(path)) {}

  void add_comment(const std::string& line) { comments_.push_back(line); }
  void set_header(std::vector<std::string> cols) { header_ = std::move(cols); }

  void add_row(const std::vector<std::string>& cells) {
    if (!header_.empty() && cells.size() != header_.size()) {
      throw std::invalid_argument("csv row has " + std::to_string(cells.size()) +
                                  " cells, header has " + std::to_string(header_.size()));
    }
    rows_.push_back(join(cells));
  }

  void write() const {
    std::ofstream f(path_, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open csv file for writing: " + path_);
    for (const auto& c : comments_) f << "# " << c << "\n";
    if (!header_.empty()) f << join(header_) << "\n";
    for (const auto& r : rows_) f << r << "\n";
    if (!f) throw std::runtime_error("failed writing csv file: " + path_);
  }

 private:
  static std::string join(const std::vector<std::string>& cells) {
    std::ostringstream os;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) os << ",";
      os << cells[i];
    }
    return os.str();
  }

  std::string path_;
  std::vector<std::string> comments_;
  std::vector<std::string> header_;
  std::vector<std::string> rows_;
};

namespace detail {

struct SvgFrame {
  static constexpr int width = 640;
  static constexpr int height = 440;
  static constexpr int left = 64;
  static constexpr int right = 24;
  static constexpr int top = 40;
  static constexpr int bottom = 48;
  static int plot_w() { return width - left - right; }
  static int plot_h() { return height - top - bottom; }
};

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string heat_color(double t) {
  // three-stop ramp: deep blue, warm yellow, red
  t = std::min(1.0, std::max(0.0, t));
  double r, g, b;
  if (t < 0.5) {
    const double u = t / 0.5;
    r = 30 + u * (250 - 30);
    g = 60 + u * (220 - 60);
    b = 150 - u * (150 - 60);
  } else {
    const double u = (t - 0.5) / 0.5;
    r = 250 - u * (250 - 200);
    g = 220 - u * (220 - 40);
    b = 60 - u * (60 - 40);
  }
  char buf[16];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", static_cast<int>(r), static_cast<int>(g),
                static_cast<int>(b));
  return buf;
}

}  // namespace detail

/// One or more named series over a shared x axis, rendered as a simple
/// standalone SVG line chart.
inline void svg_line_plot(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<double>& xs,
                          const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  if (xs.size() < 2) throw std::invalid_argument("svg_line_plot: need at least 2 points");
  for (const auto& [name, ys] : series) {
    if (ys.size() != xs.size()) {
      throw std::invalid_argument("svg_line_plot: series '" + name + "' length mismatch");
    }
  }

  double ymin = std::numeric_limits<double>::infinity();
  double ymax = -std::numeric_limits<double>::infinity();
  for (const auto& [name, ys] : series) {
    for (double v : ys) {
      if (!std::isfinite(v)) continue;
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
  }
  if (!std::isfinite(ymin)) {
    ymin = 0.0;
    ymax = 1.0;
  }
  if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
  const double xmin = xs.front(), xmax = xs.back();

  using F = detail::SvgFrame;
  const auto px = [&](double x) {
    return F::left + (x - xmin) / (xmax - xmin) * F::plot_w();
  };
  const auto py = [&](double y) {
    return F::top + (1.0 - (y - ymin) / (ymax - ymin)) * F::plot_h();
  };

  static const char* kColors[] = {"#2563eb", "#dc2626", "#059669", "#d97706", "#7c3aed"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << F::width << "\" height=\""
     << F::height << "\" viewBox=\"0 0 " << F::width << " " << F::height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << F::width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
     << detail::svg_escape(title) << "</text>\n";
  os << "<rect x=\"" << F::left << "\" y=\"" << F::top << "\" width=\"" << F::plot_w()
     << "\" height=\"" << F::plot_h() << "\" fill=\"none\" stroke=\"#444\"/>\n";
  os << "<text x=\"" << F::left + F::plot_w() / 2 << "\" y=\"" << F::height - 10
     << "\" text-anchor=\"middle\" font-size=\"12\">" << detail::svg_escape(x_label) << "</text>\n";
  os << "<text x=\"16\" y=\"" << F::top + F::plot_h() / 2
     << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << F::top + F::plot_h() / 2 << ")\">" << detail::svg_escape(y_label) << "</text>\n";
  os << "<text x=\"" << F::left - 6 << "\" y=\"" << py(ymin) + 4
     << "\" text-anchor=\"end\" font-size=\"10\">" << fmt_double(ymin).substr(0, 8) << "</text>\n";
  os << "<text x=\"" << F::left - 6 << "\" y=\"" << py(ymax) + 4
     << "\" text-anchor=\"end\" font-size=\"10\">" << fmt_double(ymax).substr(0, 8) << "</text>\n";
  os << "<text x=\"" << px(xmin) << "\" y=\"" << F::top + F::plot_h() + 16
     << "\" text-anchor=\"middle\" font-size=\"10\">" << fmt_double(xmin).substr(0, 8)
     << "</text>\n";
  os << "<text x=\"" << px(xmax) << "\" y=\"" << F::top + F::plot_h() + 16
     << "\" text-anchor=\"middle\" font-size=\"10\">" << fmt_double(xmax).substr(0, 8)
     << "</text>\n";

  int color = 0;
  int legend_y = F::top + 14;
  for (const auto& [name, ys] : series) {
    const char* stroke = kColors[color % 5];
    std::ostringstream pts;
    bool pen_down = false;
    std::ostringstream seg;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (!std::isfinite(ys[i])) {
        if (pen_down) {
          os << "<polyline points=\"" << seg.str() << "\" fill=\"none\" stroke=\"" << stroke
             << "\" stroke-width=\"1.6\"/>\n";
          seg.str("");
          pen_down = false;
        }
        continue;
      }
      seg << px(xs[i]) << "," << py(ys[i]) << " ";
      pen_down = true;
    }
    if (pen_down) {
      os << "<polyline points=\"" << seg.str() << "\" fill=\"none\" stroke=\"" << stroke
         << "\" stroke-width=\"1.6\"/>\n";
    }
    if (series.size() > 1) {
      os << "<rect x=\"" << F::left + F::plot_w() - 130 << "\" y=\"" << legend_y - 9
         << "\" width=\"10\" height=\"10\" fill=\"" << stroke << "\"/>\n";
      os << "<text x=\"" << F::left + F::plot_w() - 116 << "\" y=\"" << legend_y
         << "\" font-size=\"11\">" << detail::svg_escape(name) << "</text>\n";
      legend_y += 16;
    }
    ++color;
  }
  os << "</svg>\n";

  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open svg file for writing: " + path);
  f << os.str();
  if (!f) throw std::runtime_error("failed writing svg file: " + path);
}

/// Grid heatmap of a two-direction slice. Cells with non-finite loss are
/// drawn gray.
inline void svg_heatmap(const std::string& path, const std::string& title, const Slice2D& slice) {
  const int S = slice.steps;
  if (S < 2 || slice.losses.size() != static_cast<std::size_t>(S) * S) {
    throw std::invalid_argument("svg_heatmap: malformed slice");
  }
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : slice.losses) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (hi - lo < 1e-12) hi = lo + 1.0;

  using F = detail::SvgFrame;
  const double cell_w = static_cast<double>(F::plot_w()) / S;
  const double cell_h = static_cast<double>(F::plot_h()) / S;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << F::width << "\" height=\""
     << F::height << "\" viewBox=\"0 0 " << F::width << " " << F::height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << F::width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
     << detail::svg_escape(title) << "</text>\n";
  for (int i = 0; i < S; ++i) {
    for (int j = 0; j < S; ++j) {
      const double v = slice.losses[static_cast<std::size_t>(i) * S + j];
      const std::string fill =
          std::isfinite(v) ? detail::heat_color((v - lo) / (hi - lo)) : std::string("#999999");
      // t1 indexes rows from bottom so the axis reads upward
      const double x = F::left + j * cell_w;
      const double y = F::top + (S - 1 - i) * cell_h;
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell_w + 0.5 << "\" height=\""
         << cell_h + 0.5 << "\" fill=\"" << fill << "\"/>\n";
    }
  }
  os << "<rect x=\"" << F::left << "\" y=\"" << F::top << "\" width=\"" << F::plot_w()
     << "\" height=\"" << F::plot_h() << "\" fill=\"none\" stroke=\"#444\"/>\n";
  os << "<text x=\"" << F::left + F::plot_w() / 2 << "\" y=\"" << F::height - 10
     << "\" text-anchor=\"middle\" font-size=\"12\">direction 2 (" << fmt_double(-slice.radius)
     << " to " << fmt_double(slice.radius) << ")</text>\n";
  os << "<text x=\"16\" y=\"" << F::top + F::plot_h() / 2
     << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << F::top + F::plot_h() / 2 << ")\">direction 1</text>\n";
  os << "<text x=\"" << F::left << "\" y=\"" << F::top - 6 << "\" font-size=\"10\">loss "
     << fmt_double(lo).substr(0, 8) << " (blue) to " << fmt_double(hi).substr(0, 8)
     << " (red)</text>\n";
  os << "</svg>\n";

  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open svg file for writing: " + path);
  f << os.str();
  if (!f) throw std::runtime_error("failed writing svg file: " + path);
}

/// Slice tables on disk: '#' metadata comments, header, rows.
inline void write_slice_csv(const std::string& path, const Slice1D& slice,
                            const std::vector<std::string>& metadata) {
  CsvWriter csv(path);
  for (const auto& m : metadata) csv.add_comment(m);
  csv.add_comment("base_loss=" + fmt_double(slice.base_loss));
  csv.set_header({"t", "loss"});
  for (std::size_t i = 0; i < slice.ts.size(); ++i) {
    csv.add_row({fmt_double(slice.ts[i]), fmt_double(slice.losses[i])});
  }
  csv.write();
}

/// Per-epoch schedule log. The loss cell is empty on epochs where no loss
/// had been reported yet; flags are 0/1.
inline void write_sched_trace_csv(const std::string& path,
                                  const std::vector<SchedTraceRow>& rows,
                                  const std::vector<std::string>& metadata) {
  CsvWriter csv(path);
  for (const auto& m : metadata) csv.add_comment(m);
  csv.set_header({"epoch", "lr", "epoch_loss", "decayed", "terminate"});
  for (const auto& r : rows) {
    csv.add_row({std::to_string(r.epoch), fmt_double(r.lr),
                 r.epoch_loss ? fmt_double(*r.epoch_loss) : std::string(),
                 r.decayed ? "1" : "0", r.terminate ? "1" : "0"});
  }
  csv.write();
}

inline void write_slice_csv(const std::string& path, const Slice2D& slice,
                            const std::vector<std::string>& metadata) {
  CsvWriter csv(path);
  for (const auto& m : metadata) csv.add_comment(m);
  csv.add_comment("base_loss=" + fmt_double(slice.base_loss));
  csv.set_header({"t1", "t2", "loss"});
  for (int i = 0; i < slice.steps; ++i) {
    for (int j = 0; j < slice.steps; ++j) {
      csv.add_row({fmt_double(slice.ts[static_cast<std::size_t>(i)]),
                   fmt_double(slice.ts[static_cast<std::size_t>(j)]),
                   fmt_double(slice.losses[static_cast<std::size_t>(i) * slice.steps + j])});
    }
  }
  csv.write();
}

}  // namespace flatland
