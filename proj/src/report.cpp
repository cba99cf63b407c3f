#include "repdrop/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "repdrop/analysis.hpp"
#include "repdrop/experiment.hpp"

namespace repdrop {

namespace {

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path,
                                               const std::string& expected_header) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != expected_header) {
    throw Error(path.string() + ": expected header '" + expected_header + "'");
  }
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

double to_double(const std::string& s, const std::filesystem::path& path) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(path.string() + ": not a number: '" + s + "'");
  }
}

std::string num(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

struct Frame {
  double x0 = 70, y0 = 30, w = 420, h = 300;  // plot area
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;

  double px(double x) const { return x0 + (x - xmin) / (xmax - xmin) * w; }
  double py(double y) const { return y0 + h - (y - ymin) / (ymax - ymin) * h; }
};

void pad_range(double& lo, double& hi) {
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double m = 0.05 * (hi - lo);
  lo -= m;
  hi += m;
}

std::string svg_open(double width, double height) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width, 0) +
         "\" height=\"" + num(height, 0) + "\" font-family=\"sans-serif\" font-size=\"12\">\n" +
         "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

std::string text(double x, double y, const std::string& s, const std::string& anchor = "middle",
                 const std::string& extra = "") {
  return "<text x=\"" + num(x, 1) + "\" y=\"" + num(y, 1) + "\" text-anchor=\"" + anchor +
         "\"" + extra + ">" + s + "</text>\n";
}

std::string line(double x1, double y1, double x2, double y2, const std::string& stroke = "black") {
  return "<line x1=\"" + num(x1, 1) + "\" y1=\"" + num(y1, 1) + "\" x2=\"" + num(x2, 1) +
         "\" y2=\"" + num(y2, 1) + "\" stroke=\"" + stroke + "\"/>\n";
}

// Frame border, five ticks per axis, axis labels. `right` adds a second y axis.
std::string axes(const Frame& f, const std::string& xlabel, const std::string& ylabel,
                 const Frame* right = nullptr, const std::string& rlabel = "") {
  std::string s;
  s += "<rect x=\"" + num(f.x0, 1) + "\" y=\"" + num(f.y0, 1) + "\" width=\"" + num(f.w, 1) +
       "\" height=\"" + num(f.h, 1) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.xmin + (f.xmax - f.xmin) * i / 4.0;
    const double yv = f.ymin + (f.ymax - f.ymin) * i / 4.0;
    s += line(f.px(xv), f.y0 + f.h, f.px(xv), f.y0 + f.h + 5);
    s += text(f.px(xv), f.y0 + f.h + 18, num(xv, 2));
    s += line(f.x0 - 5, f.py(yv), f.x0, f.py(yv));
    s += text(f.x0 - 8, f.py(yv) + 4, num(yv, 2), "end");
    if (right) {
      const double rv = right->ymin + (right->ymax - right->ymin) * i / 4.0;
      s += line(f.x0 + f.w, right->py(rv), f.x0 + f.w + 5, right->py(rv));
      s += text(f.x0 + f.w + 8, right->py(rv) + 4, num(rv, 1), "start");
    }
  }
  s += text(f.x0 + f.w / 2, f.y0 + f.h + 38, xlabel);
  s += text(18, f.y0 + f.h / 2, ylabel, "middle",
            " transform=\"rotate(-90 18 " + num(f.y0 + f.h / 2, 1) + ")\"");
  if (right) {
    const double rx = f.x0 + f.w + 55;
    s += text(rx, f.y0 + f.h / 2, rlabel, "middle",
              " transform=\"rotate(90 " + num(rx, 1) + " " + num(f.y0 + f.h / 2, 1) + ")\"");
  }
  return s;
}

}  // namespace

void write_shard_results(const std::vector<ShardRow>& rows, const std::filesystem::path& path) {
  std::string s = "shard,train_rep2,gen_rep2\n";
  for (const auto& r : rows) {
    s += std::to_string(r.shard) + "," + num(r.train_rep2, 6) + "," + num(r.gen_rep2, 6) + "\n";
  }
  write_text_file(path, s);
}

std::vector<ShardRow> read_shard_results(const std::filesystem::path& path) {
  std::vector<ShardRow> out;
  for (const auto& c : read_csv(path, "shard,train_rep2,gen_rep2")) {
    if (c.size() != 3) throw Error(path.string() + ": expected 3 columns");
    out.push_back({static_cast<int>(to_double(c[0], path)), to_double(c[1], path),
                   to_double(c[2], path)});
  }
  return out;
}

void write_sweep_results(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  std::string s = "p,rep2,ppl\n";
  for (const auto& r : rows) s += num(r.p, 2) + "," + num(r.rep2, 6) + "," + num(r.ppl, 4) + "\n";
  write_text_file(path, s);
}

std::vector<SweepRow> read_sweep_results(const std::filesystem::path& path) {
  std::vector<SweepRow> out;
  for (const auto& c : read_csv(path, "p,rep2,ppl")) {
    if (c.size() != 3) throw Error(path.string() + ": expected 3 columns");
    out.push_back({to_double(c[0], path), to_double(c[1], path), to_double(c[2], path)});
  }
  return out;
}

std::string render_scatter_svg(const std::vector<ShardRow>& rows) {
  Frame f;
  if (!rows.empty()) {
    f.xmin = f.xmax = rows[0].train_rep2 * 100;
    f.ymin = f.ymax = rows[0].gen_rep2 * 100;
    for (const auto& r : rows) {
      f.xmin = std::min(f.xmin, r.train_rep2 * 100);
      f.xmax = std::max(f.xmax, r.train_rep2 * 100);
      f.ymin = std::min(f.ymin, r.gen_rep2 * 100);
      f.ymax = std::max(f.ymax, r.gen_rep2 * 100);
    }
    pad_range(f.xmin, f.xmax);
    pad_range(f.ymin, f.ymax);
  }
  std::string s = svg_open(540, 390);
  std::string title = "Training data rep-2 vs generated rep-2";
  if (rows.size() >= 2) {
    std::vector<double> x, y;
    for (const auto& r : rows) {
      x.push_back(r.train_rep2);
      y.push_back(r.gen_rep2);
    }
    title += " (Spearman rho = " + num(spearman(x, y), 3) + ")";
  }
  s += text(f.x0 + f.w / 2, 18, title);
  s += axes(f, "rep-2 of training shard (%)", "rep-2 of generations (%)");
  for (const auto& r : rows) {
    s += "<circle cx=\"" + num(f.px(r.train_rep2 * 100), 1) + "\" cy=\"" +
         num(f.py(r.gen_rep2 * 100), 1) + "\" r=\"4\" fill=\"steelblue\"/>\n";
    s += text(f.px(r.train_rep2 * 100) + 6, f.py(r.gen_rep2 * 100) - 6,
              std::to_string(r.shard), "start", " font-size=\"10\"");
  }
  s += "</svg>\n";
  return s;
}

std::string render_sweep_svg(const std::vector<SweepRow>& rows) {
  Frame f, right;
  auto sorted = rows;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.p < b.p; });
  if (!sorted.empty()) {
    f.xmin = sorted.front().p;
    f.xmax = sorted.back().p;
    f.ymin = f.ymax = sorted[0].rep2 * 100;
    right.ymin = right.ymax = sorted[0].ppl;
    for (const auto& r : sorted) {
      f.ymin = std::min(f.ymin, r.rep2 * 100);
      f.ymax = std::max(f.ymax, r.rep2 * 100);
      right.ymin = std::min(right.ymin, r.ppl);
      right.ymax = std::max(right.ymax, r.ppl);
    }
    pad_range(f.xmin, f.xmax);
    pad_range(f.ymin, f.ymax);
    pad_range(right.ymin, right.ymax);
  }
  right.x0 = f.x0;
  right.y0 = f.y0;
  right.w = f.w;
  right.h = f.h;
  right.xmin = f.xmin;
  right.xmax = f.xmax;
  std::string s = svg_open(580, 390);
  s += text(f.x0 + f.w / 2, 18, "Dropout rate vs rep-2 and perplexity");
  s += axes(f, "dropout rate p", "rep-2 of generations (%)", &right, "perplexity");
  std::string rep_pts, ppl_pts;
  for (const auto& r : sorted) {
    rep_pts += num(f.px(r.p), 1) + "," + num(f.py(r.rep2 * 100), 1) + " ";
    ppl_pts += num(right.px(r.p), 1) + "," + num(right.py(r.ppl), 1) + " ";
  }
  s += "<polyline points=\"" + rep_pts + "\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n";
  s += "<polyline points=\"" + ppl_pts +
       "\" fill=\"none\" stroke=\"darkorange\" stroke-width=\"2\" stroke-dasharray=\"6 3\"/>\n";
  for (const auto& r : sorted) {
    s += "<circle cx=\"" + num(f.px(r.p), 1) + "\" cy=\"" + num(f.py(r.rep2 * 100), 1) +
         "\" r=\"3\" fill=\"steelblue\"/>\n";
    s += "<rect x=\"" + num(right.px(r.p) - 3, 1) + "\" y=\"" + num(right.py(r.ppl) - 3, 1) +
         "\" width=\"6\" height=\"6\" fill=\"darkorange\"/>\n";
  }
  s += line(f.x0 + 10, f.y0 + 12, f.x0 + 30, f.y0 + 12, "steelblue");
  s += text(f.x0 + 34, f.y0 + 16, "rep-2", "start");
  s += line(f.x0 + 90, f.y0 + 12, f.x0 + 110, f.y0 + 12, "darkorange");
  s += text(f.x0 + 114, f.y0 + 16, "PPL", "start");
  s += "</svg>\n";
  return s;
}

std::string metrics_table_csv(std::vector<MetricsReport> reports) {
  std::sort(reports.begin(), reports.end(),
            [](const auto& a, const auto& b) { return a.name < b.name; });
  std::string s = csv_header(true) + "\n";
  for (const auto& r : reports) s += csv_row(r, true) + "\n";
  return s;
}

ReportResult build_report(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error("not a directory: " + dir.string());
  ReportResult out;
  const auto report_dir = dir / "report";
  std::filesystem::create_directories(report_dir);

  std::vector<MetricsReport> runs;
  std::vector<std::filesystem::path> entries;
  for (const auto& e : std::filesystem::directory_iterator(dir)) entries.push_back(e.path());
  std::sort(entries.begin(), entries.end());
  for (const auto& p : entries) {
    const auto m = p / "metrics.json";
    if (!std::filesystem::is_regular_file(m)) continue;
    std::ifstream in(m);
    const auto j = nlohmann::json::parse(in);
    auto r = report_from_json(j.contains("generated") ? j.at("generated") : j);
    r.name = p.filename().string();
    runs.push_back(std::move(r));
  }
  if (runs.empty()) {
    out.warnings.push_back("no run directories with metrics.json");
  } else {
    write_text_file(report_dir / "results.csv", metrics_table_csv(runs));
    out.written.push_back(report_dir / "results.csv");
  }
  nlohmann::json summary;
  summary["runs"] = nlohmann::json::array();
  for (const auto& r : runs) summary["runs"].push_back(to_json(r));

  const auto shard_csv = dir / "shard_results.csv";
  if (std::filesystem::exists(shard_csv)) {
    const auto rows = read_shard_results(shard_csv);
    write_text_file(report_dir / "shard_scatter.svg", render_scatter_svg(rows));
    out.written.push_back(report_dir / "shard_scatter.svg");
    nlohmann::json s = {{"points", rows.size()}};
    if (rows.size() >= 2) {
      std::vector<double> x, y;
      for (const auto& r : rows) {
        x.push_back(r.train_rep2);
        y.push_back(r.gen_rep2);
      }
      s["spearman"] = spearman(x, y);
    }
    summary["shards"] = s;
  } else {
    out.warnings.push_back("missing " + shard_csv.string());
  }

  const auto sweep_csv = dir / "sweep_results.csv";
  if (std::filesystem::exists(sweep_csv)) {
    const auto rows = read_sweep_results(sweep_csv);
    write_text_file(report_dir / "sweep_curve.svg", render_sweep_svg(rows));
    out.written.push_back(report_dir / "sweep_curve.svg");
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& r : rows) pts.push_back({{"p", r.p}, {"rep2", r.rep2}, {"ppl", r.ppl}});
    summary["sweep"] = pts;
  } else {
    out.warnings.push_back("missing " + sweep_csv.string());
  }
  summary["warnings"] = out.warnings;
  write_text_file(report_dir / "summary.json", summary.dump(2) + "\n");
  out.written.push_back(report_dir / "summary.json");
  out.summary = std::move(summary);
  return out;
}

}  // namespace repdrop
