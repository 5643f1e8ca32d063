#include "hsd/plot.hpp"

#include "hsd/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace hsd {

namespace {

constexpr int kCols = 3;
constexpr int kMarginLeft = 58;
constexpr int kMarginRight = 12;
constexpr int kMarginTop = 26;
constexpr int kMarginBottom = 30;

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    out.push_back(cell);
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

}  // namespace

cv::Scalar series_color(size_t k) {
  static const cv::Scalar palette[] = {{180, 90, 30}, {40, 40, 220}, {60, 160, 60}, {160, 60, 160}, {0, 140, 230}};
  return palette[k % 5];
}

cv::Rect panel_plot_area(size_t index, int pw, int ph) {
  const int col = static_cast<int>(index) % kCols;
  const int row = static_cast<int>(index) / kCols;
  return {col * pw + kMarginLeft, row * ph + kMarginTop, pw - kMarginLeft - kMarginRight,
          ph - kMarginTop - kMarginBottom};
}

LossSeries read_loss_csv(const std::filesystem::path& path, const std::string& name) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open loss CSV " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw ValidationError("loss CSV is empty: " + path.string());
  const auto header = split_csv(line);
  std::map<std::string, size_t> col;
  for (size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  std::string missing;
  for (const auto& need : {std::string("iteration"), kLossComponents[0], kLossComponents[1], kLossComponents[2],
                           kLossComponents[3], kLossComponents[4]}) {
    if (!col.count(need)) missing += (missing.empty() ? "" : ", ") + need;
  }
  if (!missing.empty()) throw ValidationError("loss CSV " + path.string() + " lacks columns: " + missing);

  LossSeries s;
  s.name = name.empty() ? path.stem().string() : name;
  size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv(line);
    if (cells.size() < header.size()) {
      throw ValidationError("loss CSV " + path.string() + " line " + std::to_string(lineno) + ": too few fields");
    }
    try {
      s.iteration.push_back(std::stod(cells[col["iteration"]]));
      for (const auto& c : kLossComponents) s.values[c].push_back(std::stod(cells[col[c]]));
    } catch (const std::exception&) {
      throw ValidationError("loss CSV " + path.string() + " line " + std::to_string(lineno) + ": not a number");
    }
  }
  if (s.iteration.empty()) throw ValidationError("loss CSV has no rows: " + path.string());
  return s;
}

cv::Mat render_loss_panels(const std::vector<LossSeries>& runs, int pw, int ph) {
  if (runs.empty()) throw ValidationError("render_loss_panels: no series");
  const int rows = (static_cast<int>(kLossComponents.size()) + kCols - 1) / kCols;
  cv::Mat img(rows * ph, kCols * pw, CV_8UC3, cv::Scalar(255, 255, 255));
  const auto font = cv::FONT_HERSHEY_SIMPLEX;

  for (size_t p = 0; p < kLossComponents.size(); ++p) {
    const auto& comp = kLossComponents[p];
    const cv::Rect area = panel_plot_area(p, pw, ph);
    double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
    for (const auto& r : runs) {
      for (size_t i = 0; i < r.iteration.size(); ++i) {
        const double y = r.values.at(comp)[i];
        if (!std::isfinite(y)) continue;
        xmin = std::min(xmin, r.iteration[i]);
        xmax = std::max(xmax, r.iteration[i]);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
      }
    }
    if (!(xmax > xmin)) xmax = xmin + 1;
    if (!(ymax > ymin)) {
      ymin -= 0.5;
      ymax += 0.5;
    }
    cv::rectangle(img, area, cv::Scalar(0, 0, 0), 1);
    cv::putText(img, comp, {area.x, area.y - 8}, font, 0.5, cv::Scalar(0, 0, 0), 1, cv::LINE_8);
    cv::putText(img, fmt(ymax), {area.x - 54, area.y + 10}, font, 0.35, cv::Scalar(0, 0, 0), 1, cv::LINE_8);
    cv::putText(img, fmt(ymin), {area.x - 54, area.y + area.height}, font, 0.35, cv::Scalar(0, 0, 0), 1, cv::LINE_8);
    cv::putText(img, fmt(xmin), {area.x, area.y + area.height + 16}, font, 0.35, cv::Scalar(0, 0, 0), 1, cv::LINE_8);
    cv::putText(img, fmt(xmax) + " iter", {area.x + area.width - 60, area.y + area.height + 16}, font, 0.35,
                cv::Scalar(0, 0, 0), 1, cv::LINE_8);

    auto to_px = [&](double x, double y) {
      const double fx = (x - xmin) / (xmax - xmin);
      const double fy = (y - ymin) / (ymax - ymin);
      return cv::Point(area.x + 1 + static_cast<int>(std::lround(fx * (area.width - 3))),
                       area.y + 1 + static_cast<int>(std::lround((1.0 - fy) * (area.height - 3))));
    };
    for (size_t k = 0; k < runs.size(); ++k) {
      const auto& r = runs[k];
      const auto& ys = r.values.at(comp);
      std::vector<cv::Point> pts;
      for (size_t i = 0; i < r.iteration.size(); ++i) {
        if (std::isfinite(ys[i])) pts.push_back(to_px(r.iteration[i], ys[i]));
      }
      if (pts.size() == 1) cv::circle(img, pts[0], 2, series_color(k), cv::FILLED, cv::LINE_8);
      if (pts.size() > 1) cv::polylines(img, pts, false, series_color(k), 1, cv::LINE_8);
    }
    if (p == 0) {
      for (size_t k = 0; k < runs.size(); ++k) {
        const cv::Point at(area.x + area.width - 130, area.y + 14 + 14 * static_cast<int>(k));
        cv::line(img, at, at + cv::Point(16, 0), series_color(k), 2, cv::LINE_8);
        cv::putText(img, runs[k].name, at + cv::Point(20, 4), font, 0.35, cv::Scalar(0, 0, 0), 1, cv::LINE_8);
      }
    }
  }
  return img;
}

void plot_loss(const std::vector<std::filesystem::path>& csvs, const std::filesystem::path& out_image) {
  if (csvs.empty()) throw ValidationError("plot-loss: no CSV given");
  std::vector<LossSeries> runs;
  for (const auto& c : csvs) runs.push_back(read_loss_csv(c));
  const auto img = render_loss_panels(runs);
  if (!cv::imwrite(out_image.string(), img)) throw std::runtime_error("cannot write " + out_image.string());
}

}  // namespace hsd
