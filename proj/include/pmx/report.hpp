// Copyright (c) 2026 The pmx Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace pmx {

// Minimal deterministic SVG plotting: line charts and heatmaps with embedded
// styling and no external references.

struct Series {
    std::string label;
    std::string color;  // e.g. "#1f77b4"
    std::vector<std::pair<double, double>> points;
};

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series,
                           int width = 720, int height = 420);

std::string svg_heatmap(const std::string& title, const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels,
                        const std::vector<std::vector<double>>& values, int cell = 56);

// Tidy CSV helper: header plus rows.
std::string csv_table(const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows);

std::string format_double(double v);

}  // namespace pmx
