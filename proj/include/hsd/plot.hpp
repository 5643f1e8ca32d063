#pragma once

#include <opencv2/core.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace hsd {

inline const std::array<std::string, 5> kLossComponents = {"fcl", "fdl", "frl", "hkd", "total"};

struct LossSeries {
  std::string name;
  std::vector<double> iteration;
  std::map<std::string, std::vector<double>> values;  // per component
};

// Throws ValidationError naming missing columns, or when the file holds no rows.
LossSeries read_loss_csv(const std::filesystem::path& path, const std::string& name = "");

// One panel per component; one curve per series, colours in series order.
cv::Mat render_loss_panels(const std::vector<LossSeries>& runs, int panel_width = 420, int panel_height = 260);

// BGR colour used for the k-th series.
cv::Scalar series_color(size_t k);

// Plot-area rectangle of panel `index` inside the rendered image.
cv::Rect panel_plot_area(size_t index, int panel_width = 420, int panel_height = 260);

void plot_loss(const std::vector<std::filesystem::path>& csvs, const std::filesystem::path& out_image);

}  // namespace hsd
