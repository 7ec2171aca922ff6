#include "thinkdraw/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "thinkdraw/error.hpp"

namespace thinkdraw::plot {

const std::vector<std::string>& curve_metrics() {
  static const std::vector<std::string> m = {"reward_format_mean", "reward_consistency_mean", "completion_len_mean",
                                             "kl_text",            "kl_image",                "loss"};
  return m;
}

std::vector<nlohmann::ordered_json> parse_metrics(const std::string& text) {
  std::vector<nlohmann::ordered_json> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::ordered_json j;
    try {
      j = nlohmann::ordered_json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw ParseError("metrics line " + std::to_string(lineno) + " is not valid JSON");
    }
    if (!j.is_object() || !j.contains("step") || !j["step"].is_number()) {
      throw ParseError("metrics line " + std::to_string(lineno) + " has no numeric 'step'");
    }
    for (const auto& key : curve_metrics()) {
      if (!j.contains(key) || !j[key].is_number()) {
        throw ParseError("metrics line " + std::to_string(lineno) + " lacks numeric field '" + key + "'");
      }
    }
    out.push_back(std::move(j));
  }
  if (out.empty()) throw ParseError("metrics input holds no records");
  return out;
}

std::string svg_line_chart(const std::string& title, const std::vector<double>& x, const std::vector<double>& y) {
  constexpr double W = 640, H = 360, L = 70, R = 20, T = 40, B = 50;
  double x0 = x.empty() ? 0 : *std::min_element(x.begin(), x.end());
  double x1 = x.empty() ? 1 : *std::max_element(x.begin(), x.end());
  double y0 = y.empty() ? 0 : *std::min_element(y.begin(), y.end());
  double y1 = y.empty() ? 1 : *std::max_element(y.begin(), y.end());
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  auto px = [&](double v) { return L + (v - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double v) { return H - B - (v - y0) / (y1 - y0) * (H - T - B); };
  std::ostringstream os;
  char buf[256];
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof(buf), "<text x=\"%g\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\">%s</text>\n", L,
                title.c_str());
  os << buf;
  std::snprintf(buf, sizeof(buf),
                "<path d=\"M%g %g V%g H%g\" stroke=\"black\" fill=\"none\"/>\n", L, T, H - B, W - R);
  os << buf;
  for (int k = 0; k <= 4; ++k) {
    const double yv = y0 + (y1 - y0) * k / 4.0;
    const double xv = x0 + (x1 - x0) * k / 4.0;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">%.4g</text>\n",
                  L - 6, py(yv) + 4, yv);
    os << buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">%.4g</text>\n",
                  px(xv), H - B + 18, xv);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">step</text>\n",
                (L + W - R) / 2, H - 12);
  os << buf;
  os << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%s%.2f,%.2f", i ? " " : "", px(x[i]), py(y[i]));
    os << buf;
  }
  os << "\"/>\n</svg>\n";
  return os.str();
}

std::vector<std::string> write_curves(const std::vector<nlohmann::ordered_json>& records, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> written;
  std::vector<double> steps;
  for (const auto& r : records) steps.push_back(r["step"].get<double>());
  for (const auto& key : curve_metrics()) {
    std::vector<double> values;
    for (const auto& r : records) values.push_back(r[key].get<double>());
    const std::string csv = (std::filesystem::path(dir) / (key + ".csv")).string();
    const std::string svg = (std::filesystem::path(dir) / (key + ".svg")).string();
    {
      std::ofstream out(csv);
      out << "step," << key << "\n";
      char buf[64];
      for (std::size_t i = 0; i < values.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", steps[i], values[i]);
        out << buf;
      }
      if (!out) throw Error("cannot write '" + csv + "'");
    }
    {
      std::ofstream out(svg);
      out << svg_line_chart(key, steps, values);
      if (!out) throw Error("cannot write '" + svg + "'");
    }
    written.push_back(csv);
    written.push_back(svg);
  }
  return written;
}

}  // namespace thinkdraw::plot
