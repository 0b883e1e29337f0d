#pragma once

// Static SVG learning-curve plots: mean line and +-std band across runs for
// each (label, split). Output depends only on the input rows, so replotting
// yields identical bytes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "aglo/common.hpp"
#include "aglo/evalsuite.hpp"

namespace aglo::plot {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> mean;
  std::vector<double> std;
};

/// One labelled run: the rows of a curves file.
struct CurveRun {
  std::string label;
  std::vector<eval::CurvePoint> points;
};

enum class Metric { target_hit, reward };

inline double metric_value(const eval::CurvePoint& p, Metric m) {
  return m == Metric::target_hit ? p.target_hit_rate : p.mean_return;
}

inline std::string metric_title(Metric m) { return m == Metric::target_hit ? "Target hit rate" : "Mean return"; }

/// Aggregates runs sharing a label; runs of one label must share env_steps.
inline std::vector<Series> aggregate(const std::vector<CurveRun>& runs, Metric metric) {
  std::map<std::string, std::vector<const CurveRun*>> by_label;
  std::vector<std::string> order;
  for (const CurveRun& r : runs) {
    if (!by_label.count(r.label)) order.push_back(r.label);
    by_label[r.label].push_back(&r);
  }
  std::vector<Series> out;
  for (const std::string& label : order)
    for (const char* split : {"train", "test"}) {
      std::vector<std::vector<const eval::CurvePoint*>> per_run;
      for (const CurveRun* r : by_label[label]) {
        std::vector<const eval::CurvePoint*> pts;
        for (const eval::CurvePoint& p : r->points)
          if (p.split == split) pts.push_back(&p);
        per_run.push_back(pts);
      }
      if (per_run.empty() || per_run.front().empty()) continue;
      Series s;
      s.name = label + " (" + split + ")";
      for (std::size_t i = 0; i < per_run.front().size(); ++i) {
        std::vector<double> vals;
        for (const auto& pts : per_run) {
          if (pts.size() != per_run.front().size() || pts[i]->env_steps != per_run.front()[i]->env_steps)
            fail(ErrorKind::schema_error, "curves for '" + label + "' do not share env_steps rows");
          vals.push_back(metric_value(*pts[i], metric));
        }
        const eval::Summary sm = eval::summarize(vals);
        s.x.push_back(static_cast<double>(per_run.front()[i]->env_steps));
        s.mean.push_back(sm.mean);
        s.std.push_back(sm.std);
      }
      out.push_back(std::move(s));
    }
  return out;
}

inline std::string svg(const std::vector<Series>& series, const std::string& title, const std::string& y_label) {
  require(!series.empty(), ErrorKind::schema_error, "nothing to plot");
  constexpr double W = 640, H = 400, L = 70, R = 180, T = 40, B = 50;
  double x0 = series[0].x.front(), x1 = x0, y0 = series[0].mean.front(), y1 = y0;
  for (const Series& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.mean[i] - s.std[i]);
      y1 = std::max(y1, s.mean[i] + s.std[i]);
    }
  if (x1 <= x0) x1 = x0 + 1.0;
  if (y1 - y0 < 1e-9) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const std::array<const char*, 8> colors = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                                     "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  std::string out;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n",
                W, H, W, H);
  out += buf;
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">%s</text>\n", L,
                title.c_str());
  out += buf;
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n"
                "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                L, H - B, W - R, H - B, L, T, L, H - B);
  out += buf;
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"10\" "
                  "text-anchor=\"middle\">%.0f</text>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"10\" "
                  "text-anchor=\"end\">%.3g</text>\n",
                  px(xv), H - B + 16, xv, L - 6, py(yv) + 3, yv);
    out += buf;
  }
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"12\" "
                "text-anchor=\"middle\">env steps</text>\n"
                "<text x=\"16\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" "
                "transform=\"rotate(-90 16 %.1f)\">%s</text>\n",
                (L + W - R) / 2, H - 12, (T + H - B) / 2, (T + H - B) / 2, y_label.c_str());
  out += buf;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Series& s = series[k];
    const char* color = colors[k % colors.size()];
    std::string band = "<polygon fill=\"" + std::string(color) + "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(s.x[i]), py(s.mean[i] + s.std[i]));
      band += buf;
    }
    for (std::size_t i = s.x.size(); i-- > 0;) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(s.x[i]), py(s.mean[i] - s.std[i]));
      band += buf;
    }
    out += band + "\"/>\n";
    std::string line = "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.8\"" +
                       (s.name.find("(test)") != std::string::npos ? " stroke-dasharray=\"5,3\"" : "") + " points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(s.x[i]), py(s.mean[i]));
      line += buf;
    }
    out += line + "\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"%s\" stroke-width=\"2\"/>\n"
                  "<text x=\"%.1f\" y=\"%.1f\" font-family=\"sans-serif\" font-size=\"11\">%s</text>\n",
                  W - R + 12, T + 16.0 * k, W - R + 32, T + 16.0 * k, color, W - R + 36, T + 16.0 * k + 4,
                  s.name.c_str());
    out += buf;
  }
  out += "</svg>\n";
  return out;
}

inline std::string render(const std::vector<CurveRun>& runs, Metric metric) {
  return svg(aggregate(runs, metric), metric_title(metric), metric == Metric::target_hit ? "target hit" : "return");
}

}  // namespace aglo::plot
