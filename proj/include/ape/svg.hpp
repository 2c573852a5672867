#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "ape/common.hpp"

namespace ape {
namespace svg {

/// Minimal static SVG plots. Hand-rolled so the output is deterministic and
/// dependency-free; these are quick-look artifacts, not publication figures.

inline std::string num(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", x);
    return buf;
}

struct Frame {
    double width = 640, height = 400;
    double margin = 46;
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1; // data range

    double px(double x) const {
        const double t = (x1 == x0) ? 0.5 : (x - x0) / (x1 - x0);
        return margin + t * (width - 2 * margin);
    }
    double py(double y) const {
        const double t = (y1 == y0) ? 0.5 : (y - y0) / (y1 - y0);
        return height - margin - t * (height - 2 * margin);
    }
};

inline std::string header(const Frame& f, const std::string& title) {
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(f.width) +
                    "\" height=\"" + num(f.height) + "\" viewBox=\"0 0 " + num(f.width) + " " +
                    num(f.height) + "\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + num(f.width / 2) + "\" y=\"20\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"14\">" + title + "</text>\n";
    return s;
}

inline std::string axes(const Frame& f, const std::string& xlabel, const std::string& ylabel) {
    std::string s;
    s += "<line x1=\"" + num(f.margin) + "\" y1=\"" + num(f.height - f.margin) + "\" x2=\"" +
         num(f.width - f.margin) + "\" y2=\"" + num(f.height - f.margin) +
         "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + num(f.margin) + "\" y1=\"" + num(f.height - f.margin) + "\" x2=\"" +
         num(f.margin) + "\" y2=\"" + num(f.margin) + "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double tx = f.x0 + (f.x1 - f.x0) * i / 4.0;
        const double ty = f.y0 + (f.y1 - f.y0) * i / 4.0;
        s += "<text x=\"" + num(f.px(tx)) + "\" y=\"" + num(f.height - f.margin + 16) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" + num(tx) +
             "</text>\n";
        s += "<text x=\"" + num(f.margin - 6) + "\" y=\"" + num(f.py(ty) + 3) +
             "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" + num(ty) +
             "</text>\n";
    }
    s += "<text x=\"" + num(f.width / 2) + "\" y=\"" + num(f.height - 8) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + xlabel +
         "</text>\n";
    s += "<text x=\"14\" y=\"" + num(f.height / 2) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" "
         "transform=\"rotate(-90 14 " + num(f.height / 2) + ")\">" + ylabel + "</text>\n";
    return s;
}

inline constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                           "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
inline constexpr int kPaletteSize = 8;

/// One polyline per series over a shared x vector.
inline std::string line_plot(const std::vector<double>& x,
                             const std::vector<std::pair<std::string, std::vector<double>>>& series,
                             const std::string& title, const std::string& xlabel,
                             const std::string& ylabel) {
    Frame f;
    if (!x.empty()) {
        f.x0 = *std::min_element(x.begin(), x.end());
        f.x1 = *std::max_element(x.begin(), x.end());
        bool any = false;
        for (const auto& [name, ys] : series)
            for (double v : ys)
                if (std::isfinite(v)) {
                    if (!any) { f.y0 = f.y1 = v; any = true; }
                    f.y0 = std::min(f.y0, v);
                    f.y1 = std::max(f.y1, v);
                }
        if (!any) { f.y0 = 0; f.y1 = 1; }
        if (f.y0 == f.y1) { f.y0 -= 0.5; f.y1 += 0.5; }
    }
    std::string s = header(f, title) + axes(f, xlabel, ylabel);
    int si = 0;
    for (const auto& [name, ys] : series) {
        const char* color = kPalette[si % kPaletteSize];
        std::string pts;
        for (std::size_t i = 0; i < x.size() && i < ys.size(); ++i) {
            if (!std::isfinite(ys[i])) continue;
            pts += num(f.px(x[i])) + "," + num(f.py(ys[i])) + " ";
        }
        s += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
             "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
        s += "<text x=\"" + num(f.width - f.margin - 4) + "\" y=\"" +
             num(f.margin + 14 + 14 * si) + "\" text-anchor=\"end\" "
             "font-family=\"sans-serif\" font-size=\"11\" fill=\"" + color + "\">" + name +
             "</text>\n";
        ++si;
    }
    return s + "</svg>\n";
}

inline std::string histogram(const std::vector<double>& values, int bins,
                             const std::string& title, const std::string& xlabel) {
    Frame f;
    if (bins < 1) bins = 1;
    std::vector<int> counts(std::size_t(bins), 0);
    if (!values.empty()) {
        f.x0 = *std::min_element(values.begin(), values.end());
        f.x1 = *std::max_element(values.begin(), values.end());
        if (f.x0 == f.x1) f.x1 = f.x0 + 1;
        for (double v : values) {
            int b = int(double(bins) * (v - f.x0) / (f.x1 - f.x0));
            b = std::clamp(b, 0, bins - 1);
            counts[std::size_t(b)]++;
        }
    }
    f.y0 = 0;
    f.y1 = double(*std::max_element(counts.begin(), counts.end()));
    if (f.y1 == 0) f.y1 = 1;
    std::string s = header(f, title) + axes(f, xlabel, "count");
    for (int b = 0; b < bins; ++b) {
        const double lo = f.x0 + (f.x1 - f.x0) * b / double(bins);
        const double hi = f.x0 + (f.x1 - f.x0) * (b + 1) / double(bins);
        const double top = f.py(double(counts[std::size_t(b)]));
        s += "<rect x=\"" + num(f.px(lo)) + "\" y=\"" + num(top) + "\" width=\"" +
             num(f.px(hi) - f.px(lo)) + "\" height=\"" + num(f.py(0) - top) +
             "\" fill=\"#1f77b4\" stroke=\"white\" stroke-width=\"0.5\"/>\n";
    }
    return s + "</svg>\n";
}

struct ScatterPoint {
    double x = 0, y = 0;
    int group = 0;
};

/// 2D projection scatter with one color per group (organ clusters).
inline std::string scatter(const std::vector<ScatterPoint>& pts,
                           const std::vector<std::string>& group_names,
                           const std::string& title, const std::string& xlabel,
                           const std::string& ylabel) {
    Frame f;
    bool any = false;
    for (const auto& p : pts) {
        if (!any) { f.x0 = f.x1 = p.x; f.y0 = f.y1 = p.y; any = true; }
        f.x0 = std::min(f.x0, p.x);
        f.x1 = std::max(f.x1, p.x);
        f.y0 = std::min(f.y0, p.y);
        f.y1 = std::max(f.y1, p.y);
    }
    if (!any) { f.x0 = f.y0 = 0; f.x1 = f.y1 = 1; }
    if (f.x0 == f.x1) { f.x0 -= 0.5; f.x1 += 0.5; }
    if (f.y0 == f.y1) { f.y0 -= 0.5; f.y1 += 0.5; }
    std::string s = header(f, title) + axes(f, xlabel, ylabel);
    for (const auto& p : pts)
        s += "<circle cx=\"" + num(f.px(p.x)) + "\" cy=\"" + num(f.py(p.y)) + "\" r=\"3\" fill=\"" +
             kPalette[p.group % kPaletteSize] + "\" fill-opacity=\"0.7\"/>\n";
    for (std::size_t g = 0; g < group_names.size(); ++g)
        s += "<text x=\"" + num(f.width - f.margin - 4) + "\" y=\"" + num(f.margin + 14 + 14 * double(g)) +
             "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" +
             kPalette[g % kPaletteSize] + "\">" + group_names[g] + "</text>\n";
    return s + "</svg>\n";
}

} // namespace svg
} // namespace ape
