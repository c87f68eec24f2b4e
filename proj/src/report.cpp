// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#include "pmx/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace pmx {

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

namespace {

std::string fmt(double v, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
    return buf;
}

std::string xml_escape(const std::string& s) {
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

}  // namespace

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series,
                           int width, int height) {
    const int ml = 70, mr = 20, mt = 40, mb = 50;
    const double pw = width - ml - mr;
    const double ph = height - mt - mb;

    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series) {
        for (const auto& [x, y] : s.points) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    if (!(xmin < xmax)) {
        xmin -= 1.0;
        xmax += 1.0;
    }
    if (!(ymin < ymax)) {
        ymin -= 1.0;
        ymax += 1.0;
    }
    const double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
    auto py = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\""
       << " font-size=\"15\">" << xml_escape(title) << "</text>\n";
    os << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"#444\"/>\n";

    // Axis ticks: four per axis.
    for (int i = 0; i <= 4; ++i) {
        const double xv = xmin + (xmax - xmin) * i / 4.0;
        const double yv = ymin + (ymax - ymin) * i / 4.0;
        os << "<text x=\"" << fmt(px(xv)) << "\" y=\"" << height - mb + 18
           << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(xv, 4)
           << "</text>\n";
        os << "<text x=\"" << ml - 6 << "\" y=\"" << fmt(py(yv) + 4)
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(yv, 4)
           << "</text>\n";
        os << "<line x1=\"" << ml << "\" y1=\"" << fmt(py(yv)) << "\" x2=\"" << ml + pw
           << "\" y2=\"" << fmt(py(yv)) << "\" stroke=\"#ddd\" stroke-width=\"0.5\"/>\n";
    }
    os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 10
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
       << xml_escape(x_label) << "</text>\n";
    os << "<text x=\"16\" y=\"" << mt + ph / 2
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 "
       << mt + ph / 2 << ")\">" << xml_escape(y_label) << "</text>\n";

    int legend_y = mt + 14;
    for (const auto& s : series) {
        if (s.points.empty()) continue;
        os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : s.points) {
            os << fmt(px(x)) << ',' << fmt(py(y)) << ' ';
        }
        os << "\"/>\n";
        os << "<line x1=\"" << ml + pw - 150 << "\" y1=\"" << legend_y << "\" x2=\""
           << ml + pw - 130 << "\" y2=\"" << legend_y << "\" stroke=\"" << s.color
           << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << ml + pw - 124 << "\" y=\"" << legend_y + 4
           << "\" font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(s.label)
           << "</text>\n";
        legend_y += 16;
    }
    os << "</svg>\n";
    return os.str();
}

std::string svg_heatmap(const std::string& title, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels,
                        const std::vector<std::vector<double>>& values, int cell) {
    const int ml = 110, mt = 70, mr = 20, mb = 20;
    const int rows = static_cast<int>(row_labels.size());
    const int cols = static_cast<int>(col_labels.size());
    const int width = ml + cols * cell + mr;
    const int height = mt + rows * cell + mb;

    double vmax = 0.0;
    for (const auto& row : values) {
        for (double v : row) vmax = std::max(vmax, std::fabs(v));
    }
    if (vmax == 0.0) vmax = 1.0;

    auto color = [&](double v) {
        // Blue for negative, red for positive, white at zero.
        const double t = std::clamp(v / vmax, -1.0, 1.0);
        int r = 255, g = 255, b = 255;
        if (t > 0) {
            g = static_cast<int>(255 * (1.0 - t));
            b = g;
        } else {
            r = static_cast<int>(255 * (1.0 + t));
            g = r;
        }
        char buf[16];
        std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
        return std::string(buf);
    };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\""
       << " font-size=\"15\">" << xml_escape(title) << "</text>\n";
    for (int c = 0; c < cols; ++c) {
        os << "<text x=\"" << ml + c * cell + cell / 2 << "\" y=\"" << mt - 8
           << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
           << xml_escape(col_labels[static_cast<std::size_t>(c)]) << "</text>\n";
    }
    for (int r = 0; r < rows; ++r) {
        os << "<text x=\"" << ml - 8 << "\" y=\"" << mt + r * cell + cell / 2 + 4
           << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
           << xml_escape(row_labels[static_cast<std::size_t>(r)]) << "</text>\n";
        for (int c = 0; c < cols; ++c) {
            const double v = values[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
            os << "<rect x=\"" << ml + c * cell << "\" y=\"" << mt + r * cell << "\" width=\""
               << cell << "\" height=\"" << cell << "\" fill=\"" << color(v)
               << "\" stroke=\"#999\"/>\n";
            os << "<text x=\"" << ml + c * cell + cell / 2 << "\" y=\"" << mt + r * cell + cell / 2 + 4
               << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" << fmt(v, 3)
               << "</text>\n";
        }
    }
    os << "</svg>\n";
    return os.str();
}

std::string csv_table(const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
    std::ostringstream os;
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (i) os << ',';
        os << header[i];
    }
    os << '\n';
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) os << ',';
            os << row[i];
        }
        os << '\n';
    }
    return os.str();
}

}  // namespace pmx
