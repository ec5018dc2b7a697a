#pragma once

// Minimal standalone SVG line charts for traces and training curves.

#include <string>
#include <vector>

namespace ctm::svg {

struct Series {
  std::string name;
  std::vector<double> xs;
  std::vector<double> ys;
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  bool markers = false;  // draw a dot at every point
  int width = 720;
  int height = 420;
};

// Each series becomes a <polyline> carrying data-series / data-x / data-y
// attributes with the raw values, so plots can be checked against their source.
std::string line_chart(const Chart& chart);

std::string escape(const std::string& text);

}  // namespace ctm::svg
