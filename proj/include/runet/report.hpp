#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include "runet/metrics.hpp"
#include "runet/train.hpp"

namespace runet {

/// Trailing moving average with the given window (the "1 epoch" overlay).
inline std::vector<double> moving_average(const std::vector<double>& v,
                                          std::size_t window) {
  std::vector<double> out(v.size());
  if (window == 0) window = 1;
  double acc = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    if (i >= window) acc -= v[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

namespace detail {

struct SvgCanvas {
  std::ostream& os;
  double width, height;

  SvgCanvas(std::ostream& s, double w, double h) : os(s), width(w), height(h) {
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w
       << "' height='" << h << "' viewBox='0 0 " << w << " " << h << "'>\n"
       << "<rect width='" << w << "' height='" << h << "' fill='white'/>\n";
  }
  void line(double x1, double y1, double x2, double y2,
            const std::string& color, double sw = 1.0) {
    os << "<line x1='" << x1 << "' y1='" << y1 << "' x2='" << x2 << "' y2='"
       << y2 << "' stroke='" << color << "' stroke-width='" << sw << "'/>\n";
  }
  void rect(double x, double y, double w, double h, const std::string& stroke,
            const std::string& fill) {
    os << "<rect x='" << x << "' y='" << y << "' width='" << w << "' height='"
       << h << "' stroke='" << stroke << "' fill='" << fill << "'/>\n";
  }
  void text(double x, double y, const std::string& s, int size = 11,
            const std::string& anchor = "start") {
    os << "<text x='" << x << "' y='" << y << "' font-size='" << size
       << "' font-family='sans-serif' text-anchor='" << anchor << "'>" << s
       << "</text>\n";
  }
  void polyline(const std::vector<std::pair<double, double>>& pts,
                const std::string& color, double sw = 1.0,
                double opacity = 1.0) {
    os << "<polyline fill='none' stroke='" << color << "' stroke-width='" << sw
       << "' stroke-opacity='" << opacity << "' points='";
    for (const auto& [x, y] : pts) os << x << "," << y << " ";
    os << "'/>\n";
  }
  void plus_mark(double x, double y, const std::string& color) {
    line(x - 3, y, x + 3, y, color, 1.2);
    line(x, y - 3, x, y + 3, color, 1.2);
  }
  void close() { os << "</svg>\n"; }
};

}  // namespace detail

/// Training curves: train/val loss and validation DSI per step, with a
/// moving-average overlay of one epoch.
inline void write_curves_svg(const std::vector<CurveRow>& rows,
                             std::size_t steps_per_epoch, std::ostream& os) {
  const double W = 860, H = 420, L = 60, R = 20, T = 30, B = 50;
  detail::SvgCanvas svg(os, W, H);
  if (rows.empty()) {
    svg.text(W / 2, H / 2, "no training steps recorded", 14, "middle");
    svg.close();
    return;
  }
  double ymax = 0.0;
  for (const auto& r : rows)
    ymax = std::max({ymax, r.train_loss, r.val_loss, r.val_dsi});
  ymax = std::max(1.0, ymax);
  const double x0 = L, x1 = W - R, y0 = H - B, y1 = T;
  auto sx = [&](std::size_t i) {
    return rows.size() == 1
               ? (x0 + x1) / 2
               : x0 + (x1 - x0) * static_cast<double>(i) /
                         static_cast<double>(rows.size() - 1);
  };
  auto sy = [&](double v) { return y0 - (y0 - y1) * v / ymax; };

  svg.line(x0, y0, x1, y0, "black");
  svg.line(x0, y0, x0, y1, "black");
  for (int g = 0; g <= 4; ++g) {
    const double v = ymax * g / 4.0;
    svg.line(x0 - 3, sy(v), x0, sy(v), "black");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    svg.text(x0 - 6, sy(v) + 4, buf, 10, "end");
  }
  svg.text((x0 + x1) / 2, H - 14, "training step", 12, "middle");

  auto series = [&](auto get, const std::string& color, bool with_avg) {
    std::vector<double> vals;
    vals.reserve(rows.size());
    for (const auto& r : rows) vals.push_back(get(r));
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < vals.size(); ++i)
      pts.emplace_back(sx(i), sy(vals[i]));
    svg.polyline(pts, color, 1.0, with_avg ? 0.35 : 1.0);
    if (with_avg) {
      const auto avg = moving_average(vals, steps_per_epoch);
      std::vector<std::pair<double, double>> apts;
      for (std::size_t i = 0; i < avg.size(); ++i)
        apts.emplace_back(sx(i), sy(avg[i]));
      svg.polyline(apts, color, 1.8);
    }
  };
  series([](const CurveRow& r) { return r.train_loss; }, "#d62728", true);
  series([](const CurveRow& r) { return r.val_loss; }, "#1f77b4", true);
  series([](const CurveRow& r) { return r.val_dsi; }, "#2ca02c", true);

  svg.text(x0 + 8, T + 4, "train loss", 11);
  svg.line(x0 + 70, T, x0 + 90, T, "#d62728", 2);
  svg.text(x0 + 100, T + 4, "val loss", 11);
  svg.line(x0 + 150, T, x0 + 170, T, "#1f77b4", 2);
  svg.text(x0 + 180, T + 4, "val DSI", 11);
  svg.line(x0 + 228, T, x0 + 248, T, "#2ca02c", 2);
  svg.close();
}

/// One boxplot panel per metric: a box per (method, stage) with median,
/// IQR, 1.5-IQR whiskers and '+' outlier marks.
inline void write_boxplot_svg(const MetricsReport& report,
                              const std::string& metric, std::ostream& os) {
  const char* methods[4] = {"axial", "coronal", "sagittal", "ensemble"};
  const char* stages[2] = {"raw", "postprocessed"};
  const char* colors[2] = {"#d62728", "#1f77b4"};

  struct Box {
    std::string label;
    std::vector<double> vals;
    int stage;
  };
  std::vector<Box> boxes;
  for (const char* m : methods)
    for (int s = 0; s < 2; ++s) {
      Box b{std::string(m), {}, s};
      for (const auto& r : report.rows) {
        if (r.method != m || r.stage != stages[s]) continue;
        if (metric == "dsi") b.vals.push_back(r.dsi);
        else if (metric == "mad_voxels" && r.mad_voxels)
          b.vals.push_back(*r.mad_voxels);
        else if (metric == "hdd_voxels" && r.hdd_voxels)
          b.vals.push_back(*r.hdd_voxels);
      }
      if (!b.vals.empty()) boxes.push_back(std::move(b));
    }

  const double W = 720, H = 380, L = 60, R = 20, T = 40, B = 70;
  detail::SvgCanvas svg(os, W, H);
  svg.text(W / 2, 20, metric, 14, "middle");
  if (boxes.empty()) {
    svg.text(W / 2, H / 2, "no data", 13, "middle");
    svg.close();
    return;
  }
  double vmax = 0.0, vmin = 1e300;
  for (const auto& b : boxes)
    for (double v : b.vals) {
      vmax = std::max(vmax, v);
      vmin = std::min(vmin, v);
    }
  if (vmax == vmin) vmax = vmin + 1.0;
  const double pad = 0.08 * (vmax - vmin);
  vmax += pad;
  vmin = std::max(0.0, vmin - pad);
  const double y0 = H - B, y1 = T;
  auto sy = [&](double v) {
    return y0 - (y0 - y1) * (v - vmin) / (vmax - vmin);
  };
  svg.line(L, y0, W - R, y0, "black");
  svg.line(L, y0, L, y1, "black");
  for (int g = 0; g <= 4; ++g) {
    const double v = vmin + (vmax - vmin) * g / 4.0;
    svg.line(L - 3, sy(v), L, sy(v), "black");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    svg.text(L - 6, sy(v) + 4, buf, 10, "end");
  }

  const double slot = (W - L - R) / static_cast<double>(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i];
    const double cx = L + slot * (static_cast<double>(i) + 0.5);
    const double bw = std::min(34.0, slot * 0.55);
    const Quartiles q = quartiles(b.vals);
    const double iqr = q.q3 - q.q1;
    const double lo_fence = q.q1 - 1.5 * iqr, hi_fence = q.q3 + 1.5 * iqr;
    double wlo = q.q1, whi = q.q3;
    for (double v : b.vals) {
      if (v >= lo_fence) wlo = std::min(wlo, v);
      if (v <= hi_fence) whi = std::max(whi, v);
    }
    const std::string color = colors[b.stage];
    svg.line(cx, sy(wlo), cx, sy(q.q1), color);
    svg.line(cx, sy(q.q3), cx, sy(whi), color);
    svg.line(cx - bw / 4, sy(wlo), cx + bw / 4, sy(wlo), color);
    svg.line(cx - bw / 4, sy(whi), cx + bw / 4, sy(whi), color);
    svg.rect(cx - bw / 2, sy(q.q3), bw, sy(q.q1) - sy(q.q3), color, "none");
    svg.line(cx - bw / 2, sy(q.median), cx + bw / 2, sy(q.median), color, 2);
    for (double v : b.vals)
      if (v < lo_fence || v > hi_fence) svg.plus_mark(cx, sy(v), color);
    svg.text(cx, y0 + 16, b.label, 10, "middle");
    svg.text(cx, y0 + 30, stages[b.stage], 9, "middle");
  }
  svg.close();
}

}  // namespace runet
