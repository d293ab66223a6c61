#pragma once

// CSV ingestion of clustered prediction data, curve export (CSV / JSON) and
// hand-written SVG calibration plots.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "clustcal/core.hpp"
#include "clustcal/dataset.hpp"

namespace clustcal {

// ---------------------------------------------------------------------------
// Input

struct ColumnMap {
  std::string cluster = "cluster";
  std::string outcome = "y";
  std::string risk = "p_hat";
};

struct LoadResult {
  ClusteredDataset dataset;
  /// Rows whose risk was moved into [1e-5, 1 - 1e-5].
  std::size_t clamped = 0;
  std::vector<std::string> warnings;
};

namespace detail {

/// Splits one CSV line on commas. Double-quoted fields may contain commas
/// and doubled quotes.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else {
      field += c;
    }
  }
  out.push_back(std::move(field));
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::optional<double> parse_double(const std::string& s) {
  const std::string t = trim(s);
  if (t.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (end != t.c_str() + t.size()) return std::nullopt;
  return v;
}

}  // namespace detail

/// Reads a comma-delimited table with a header row. Risks at or beyond the
/// ends of (0,1) are clamped to [1e-5, 1 - 1e-5] and counted.
inline LoadResult load_dataset(std::istream& in, const ColumnMap& columns = {}) {
  std::string line;
  if (!std::getline(in, line) || detail::trim(line).empty()) throw Error(ErrorKind::empty_input, "input is empty");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const auto header = detail::split_csv_line(line);
  auto find_column = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (detail::trim(header[i]) == name) return i;
    }
    throw Error(ErrorKind::schema, "missing column '" + name + "'");
  };
  const std::size_t ci = find_column(columns.cluster);
  const std::size_t yi = find_column(columns.outcome);
  const std::size_t pi = find_column(columns.risk);
  const std::size_t needed = std::max({ci, yi, pi}) + 1;

  LoadResult result;
  std::vector<Record> records;
  std::size_t row = 1;  // header is row 1
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (fields.size() < needed) throw Error(ErrorKind::parse, format("row %zu: expected at least %zu fields", row, needed));
    Record r;
    r.cluster_id = detail::trim(fields[ci]);
    if (r.cluster_id.empty()) throw Error(ErrorKind::parse, format("row %zu: empty cluster id", row));
    const auto y = detail::parse_double(fields[yi]);
    if (!y || (*y != 0.0 && *y != 1.0)) {
      throw Error(ErrorKind::parse, format("row %zu: outcome '%s' is not 0 or 1", row, detail::trim(fields[yi]).c_str()));
    }
    r.y = static_cast<int>(*y);
    const auto p = detail::parse_double(fields[pi]);
    if (!p || std::isnan(*p)) {
      throw Error(ErrorKind::parse, format("row %zu: risk '%s' is not a number", row, detail::trim(fields[pi]).c_str()));
    }
    r.p_hat = clamp_risk(*p);
    if (r.p_hat != *p) ++result.clamped;
    records.push_back(std::move(r));
  }
  if (records.empty()) throw Error(ErrorKind::empty_input, "input has a header but no data rows");
  if (result.clamped > 0) {
    result.warnings.push_back(format("%zu risk value(s) clamped into [1e-5, 1-1e-5]", result.clamped));
  }
  result.dataset = ClusteredDataset(std::move(records));
  return result;
}

inline LoadResult load_dataset(const std::string& text, const ColumnMap& columns = {}) {
  std::istringstream in(text);
  return load_dataset(in, columns);
}

struct MergeResult {
  ClusteredDataset dataset;
  std::vector<std::string> warnings;
};

/// Merges clusters smaller than `min_size` within the groups given by
/// `merge_key` (cluster id -> group label). A merged cluster takes the group
/// label as its id. Small clusters without a group are kept and reported.
inline MergeResult merge_small_clusters(const ClusteredDataset& ds, std::size_t min_size,
                                        const std::map<std::string, std::string>& merge_key) {
  if (min_size < 1) throw Error(ErrorKind::invalid_argument, "min_size must be at least 1");
  MergeResult out;
  std::map<std::string, std::string> rename;
  std::map<std::string, std::size_t> group_size;
  for (const auto& id : ds.cluster_ids()) {
    const std::size_t n = ds.cluster_size(id);
    if (n >= min_size) continue;
    const auto it = merge_key.find(id);
    if (it == merge_key.end()) {
      out.warnings.push_back(format("cluster '%s' (n=%zu) is below %zu and has no merge group; kept as is", id.c_str(), n,
                                    min_size));
      continue;
    }
    rename[id] = it->second;
    group_size[it->second] += n;
  }
  for (const auto& id : ds.cluster_ids()) {
    if (!rename.contains(id) && group_size.contains(id)) {
      throw Error(ErrorKind::invalid_argument, "merge group label '" + id + "' collides with an existing cluster id");
    }
  }
  for (const auto& [group, n] : group_size) {
    if (n < min_size) {
      out.warnings.push_back(format("merged cluster '%s' has only %zu rows (unmergeable to %zu)", group.c_str(), n, min_size));
    }
  }
  if (rename.empty()) {
    out.dataset = ds;
    return out;
  }
  std::vector<Record> records = ds.records();
  for (auto& r : records) {
    const auto it = rename.find(r.cluster_id);
    if (it != rename.end()) r.cluster_id = it->second;
  }
  out.dataset = ClusteredDataset(std::move(records));
  return out;
}

// ---------------------------------------------------------------------------
// Curve export

struct CurveMetadata {
  std::string method;
  std::map<std::string, std::string> parameters;
  std::optional<std::uint64_t> seed;
};

/// Serialisable calibration curve. Missing values are NaN. The prediction
/// band may be absent (all entries missing).
struct CurveExport {
  std::vector<double> grid;
  std::vector<double> estimate;
  std::vector<double> ci_lo;
  std::vector<double> ci_hi;
  std::vector<double> pi_lo;
  std::vector<double> pi_hi;
  std::map<std::string, std::vector<double>> cluster_curves;
  CurveMetadata metadata;

  bool has_pi() const {
    return std::any_of(pi_lo.begin(), pi_lo.end(), [](double v) { return !is_missing(v); });
  }

  /// Checks lengths, ranges and band ordering; throws on violation.
  void validate() const {
    const std::size_t n = grid.size();
    if (estimate.size() != n || ci_lo.size() != n || ci_hi.size() != n || pi_lo.size() != n || pi_hi.size() != n) {
      throw Error(ErrorKind::invalid_argument, "curve bands differ in length from the grid");
    }
    for (const auto& [id, c] : cluster_curves) {
      if (c.size() != n) throw Error(ErrorKind::invalid_argument, "cluster curve '" + id + "' has the wrong length");
    }
    auto in_unit = [](double v) { return is_missing(v) || (v >= 0.0 && v <= 1.0); };
    // Tolerance absorbs the 10-significant-digit rounding of exports.
    constexpr double eps = 1e-9;
    for (std::size_t i = 0; i < n; ++i) {
      for (double v : {grid[i], estimate[i], ci_lo[i], ci_hi[i], pi_lo[i], pi_hi[i]}) {
        if (!in_unit(v)) throw Error(ErrorKind::invalid_argument, format("band value outside [0,1] at grid index %zu", i));
      }
      const double e = estimate[i];
      if (!is_missing(e) && !is_missing(ci_lo[i]) && !(ci_lo[i] <= e + eps && e <= ci_hi[i] + eps)) {
        throw Error(ErrorKind::invalid_argument, format("estimate outside its confidence band at grid index %zu", i));
      }
      if (!is_missing(ci_lo[i]) && !is_missing(pi_lo[i]) && !(pi_lo[i] <= ci_lo[i] + eps && ci_hi[i] <= pi_hi[i] + eps)) {
        throw Error(ErrorKind::invalid_argument, format("prediction band narrower than confidence band at grid index %zu", i));
      }
    }
  }
};

enum class ExportFormat { csv, json };

namespace detail {

/// Rounds to 10 significant digits so JSON output matches the CSV text.
inline double round10(double v) {
  if (is_missing(v) || v == 0.0) return v;
  return std::strtod(format("%.10g", v).c_str(), nullptr);
}

inline nlohmann::ordered_json numbers_to_json(const std::vector<double>& v) {
  auto arr = nlohmann::ordered_json::array();
  for (double x : v) {
    if (is_missing(x)) {
      arr.push_back(nullptr);
    } else {
      arr.push_back(round10(x));
    }
  }
  return arr;
}

inline std::vector<double> numbers_from_json(const nlohmann::json& j) {
  std::vector<double> out;
  for (const auto& x : j) out.push_back(x.is_null() ? kMissing : x.get<double>());
  return out;
}

}  // namespace detail

inline std::string export_curve(const CurveExport& curve, ExportFormat fmt) {
  curve.validate();
  if (fmt == ExportFormat::csv) {
    std::string out = "grid,estimate,ci_lo,ci_hi,pi_lo,pi_hi\n";
    for (std::size_t i = 0; i < curve.grid.size(); ++i) {
      out += format_number(curve.grid[i]) + ',' + format_number(curve.estimate[i]) + ',' + format_number(curve.ci_lo[i]) +
             ',' + format_number(curve.ci_hi[i]) + ',' + format_number(curve.pi_lo[i]) + ',' +
             format_number(curve.pi_hi[i]) + '\n';
    }
    return out;
  }
  nlohmann::ordered_json j;
  j["grid"] = detail::numbers_to_json(curve.grid);
  j["bands"] = {{"estimate", detail::numbers_to_json(curve.estimate)},
                {"ci_lo", detail::numbers_to_json(curve.ci_lo)},
                {"ci_hi", detail::numbers_to_json(curve.ci_hi)},
                {"pi_lo", detail::numbers_to_json(curve.pi_lo)},
                {"pi_hi", detail::numbers_to_json(curve.pi_hi)}};
  j["cluster_curves"] = nlohmann::ordered_json::object();
  for (const auto& [id, c] : curve.cluster_curves) j["cluster_curves"][id] = detail::numbers_to_json(c);
  nlohmann::ordered_json meta;
  meta["method"] = curve.metadata.method;
  meta["parameters"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : curve.metadata.parameters) meta["parameters"][k] = v;
  if (curve.metadata.seed) {
    meta["seed"] = *curve.metadata.seed;
  } else {
    meta["seed"] = nullptr;
  }
  j["metadata"] = meta;
  return j.dump(2) + "\n";
}

/// Parses the output of export_curve back into a curve.
inline CurveExport import_curve(const std::string& text, ExportFormat fmt) {
  CurveExport c;
  if (fmt == ExportFormat::csv) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorKind::empty_input, "curve CSV is empty");
    if (detail::trim(line) != "grid,estimate,ci_lo,ci_hi,pi_lo,pi_hi") {
      throw Error(ErrorKind::schema, "unexpected curve CSV header");
    }
    std::size_t row = 1;
    while (std::getline(in, line)) {
      ++row;
      if (detail::trim(line).empty()) continue;
      const auto f = detail::split_csv_line(line);
      if (f.size() != 6) throw Error(ErrorKind::parse, format("curve CSV row %zu: expected 6 fields", row));
      std::vector<std::vector<double>*> cols{&c.grid, &c.estimate, &c.ci_lo, &c.ci_hi, &c.pi_lo, &c.pi_hi};
      for (std::size_t k = 0; k < 6; ++k) {
        if (detail::trim(f[k]).empty()) {
          cols[k]->push_back(kMissing);
          continue;
        }
        const auto v = detail::parse_double(f[k]);
        if (!v) throw Error(ErrorKind::parse, format("curve CSV row %zu: bad number", row));
        cols[k]->push_back(*v);
      }
    }
  } else {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::parse, std::string("curve JSON: ") + e.what());
    }
    try {
      c.grid = detail::numbers_from_json(j.at("grid"));
      const auto& b = j.at("bands");
      c.estimate = detail::numbers_from_json(b.at("estimate"));
      c.ci_lo = detail::numbers_from_json(b.at("ci_lo"));
      c.ci_hi = detail::numbers_from_json(b.at("ci_hi"));
      c.pi_lo = detail::numbers_from_json(b.at("pi_lo"));
      c.pi_hi = detail::numbers_from_json(b.at("pi_hi"));
      if (j.contains("cluster_curves")) {
        for (const auto& [id, v] : j.at("cluster_curves").items()) c.cluster_curves[id] = detail::numbers_from_json(v);
      }
      if (j.contains("metadata")) {
        const auto& m = j.at("metadata");
        c.metadata.method = m.value("method", "");
        if (m.contains("parameters")) {
          for (const auto& [k, v] : m.at("parameters").items()) c.metadata.parameters[k] = v.get<std::string>();
        }
        if (m.contains("seed") && !m.at("seed").is_null()) c.metadata.seed = m.at("seed").get<std::uint64_t>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::schema, std::string("curve JSON: ") + e.what());
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// SVG

struct PlotSpec {
  int width = 640;
  int height = 640;
  bool show_histogram = true;
  bool ideal_line = true;
  /// Draw a marker at every estimate (used for grouped calibration points).
  bool markers = false;
  /// Join estimates with a line.
  bool connect = true;
  int histogram_bins = 50;
  std::string title;
};

struct HistogramCounts {
  std::vector<std::size_t> events;
  std::vector<std::size_t> non_events;
};

/// Counts of risks per equal-width bin on [0,1], split by outcome. The last
/// bin is closed.
inline HistogramCounts histogram_counts(std::span<const Record> records, int bins) {
  if (bins < 1) throw Error(ErrorKind::invalid_argument, "histogram needs at least one bin");
  HistogramCounts h;
  h.events.assign(static_cast<std::size_t>(bins), 0);
  h.non_events.assign(static_cast<std::size_t>(bins), 0);
  for (const auto& r : records) {
    auto b = static_cast<std::size_t>(std::floor(r.p_hat * bins));
    b = std::min(b, static_cast<std::size_t>(bins - 1));
    (r.y == 1 ? h.events : h.non_events)[b] += 1;
  }
  return h;
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string px(double v) { return format("%.2f", v); }

}  // namespace detail

/// Static calibration plot: identity diagonal, estimated curve, shaded
/// confidence band, dashed prediction bounds, thin per-cluster curves and an
/// optional histogram of risks (events up, non-events down).
inline std::string render_svg(const CurveExport& curve, const PlotSpec& spec = {}, std::span<const Record> records = {}) {
  if (spec.width <= 0 || spec.height <= 0) throw Error(ErrorKind::invalid_argument, "SVG canvas must have positive size");
  curve.validate();
  const double W = spec.width, H = spec.height;
  const double left = 0.12 * W, right = 0.96 * W, top = 0.06 * H;
  const bool hist = spec.show_histogram && !records.empty();
  const double plot_bottom = hist ? 0.72 * H : 0.90 * H;
  const double hist_top = 0.76 * H, hist_bottom = 0.96 * H;
  auto sx = [&](double p) { return left + p * (right - left); };
  auto sy = [&](double p) { return plot_bottom - p * (plot_bottom - top); };

  std::string s;
  s += format("<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\">\n",
              spec.width, spec.height, spec.width, spec.height);
  if (!spec.title.empty()) s += "<title>" + detail::xml_escape(spec.title) + "</title>\n";
  s += "<rect x=\"0\" y=\"0\" width=\"" + detail::px(W) + "\" height=\"" + detail::px(H) + "\" fill=\"white\"/>\n";
  s += "<g id=\"axes\" stroke=\"black\" stroke-width=\"1\" fill=\"none\">\n";
  s += "<path d=\"M " + detail::px(sx(0)) + " " + detail::px(sy(1)) + " L " + detail::px(sx(0)) + " " + detail::px(sy(0)) +
       " L " + detail::px(sx(1)) + " " + detail::px(sy(0)) + "\"/>\n";
  s += "</g>\n<g id=\"ticks\" font-family=\"sans-serif\" font-size=\"11\" fill=\"black\">\n";
  for (int t = 0; t <= 5; ++t) {
    const double v = 0.2 * t;
    s += "<text x=\"" + detail::px(sx(v)) + "\" y=\"" + detail::px(sy(0) + 14) + "\" text-anchor=\"middle\">" +
         format("%.1f", v) + "</text>\n";
    s += "<text x=\"" + detail::px(sx(0) - 6) + "\" y=\"" + detail::px(sy(v) + 4) + "\" text-anchor=\"end\">" +
         format("%.1f", v) + "</text>\n";
  }
  s += "<text x=\"" + detail::px(0.5 * (left + right)) + "\" y=\"" + detail::px(plot_bottom + 30) +
       "\" text-anchor=\"middle\">Estimated risk</text>\n";
  s += "<text x=\"" + detail::px(0.03 * W) + "\" y=\"" + detail::px(0.5 * (top + plot_bottom)) + "\" transform=\"rotate(-90 " +
       detail::px(0.03 * W) + " " + detail::px(0.5 * (top + plot_bottom)) + ")\" text-anchor=\"middle\">Observed proportion</text>\n";
  s += "</g>\n";

  // Polyline through the non-missing points of y over the grid, with a new
  // subpath after every gap.
  auto line_path = [&](const std::vector<double>& y) {
    std::string d;
    bool pen = false;
    for (std::size_t i = 0; i < curve.grid.size(); ++i) {
      if (is_missing(y[i])) {
        pen = false;
        continue;
      }
      d += (pen ? " L " : (d.empty() ? "M " : " M ")) + detail::px(sx(curve.grid[i])) + " " + detail::px(sy(y[i]));
      pen = true;
    }
    return d;
  };

  // Confidence band: one closed polygon per run of complete points.
  std::string band;
  for (std::size_t i = 0; i < curve.grid.size();) {
    if (is_missing(curve.ci_lo[i]) || is_missing(curve.ci_hi[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < curve.grid.size() && !is_missing(curve.ci_lo[j]) && !is_missing(curve.ci_hi[j])) ++j;
    std::string poly;
    for (std::size_t k = i; k < j; ++k) {
      poly += (poly.empty() ? "M " : " L ") + detail::px(sx(curve.grid[k])) + " " + detail::px(sy(curve.ci_hi[k]));
    }
    for (std::size_t k = j; k-- > i;) poly += " L " + detail::px(sx(curve.grid[k])) + " " + detail::px(sy(curve.ci_lo[k]));
    band += (band.empty() ? "" : " ") + poly + " Z";
    i = j;
  }
  if (!band.empty()) s += "<path id=\"ci-band\" d=\"" + band + "\" fill=\"#9ecae1\" fill-opacity=\"0.5\" stroke=\"none\"/>\n";

  if (spec.ideal_line) {
    s += "<path id=\"identity\" d=\"M " + detail::px(sx(0)) + " " + detail::px(sy(0)) + " L " + detail::px(sx(1)) + " " +
         detail::px(sy(1)) + "\" stroke=\"grey\" stroke-width=\"1\" fill=\"none\"/>\n";
  }
  if (!curve.cluster_curves.empty()) {
    s += "<g id=\"cluster-curves\" stroke=\"#bbbbbb\" stroke-width=\"0.7\" fill=\"none\">\n";
    for (const auto& [id, c] : curve.cluster_curves) {
      s += "<path class=\"cluster-curve\" data-cluster=\"" + detail::xml_escape(id) + "\" d=\"" + line_path(c) + "\"/>\n";
    }
    s += "</g>\n";
  }
  if (curve.has_pi()) {
    s += "<path id=\"pi-lower\" d=\"" + line_path(curve.pi_lo) +
         "\" stroke=\"#08519c\" stroke-width=\"1\" stroke-dasharray=\"5,4\" fill=\"none\"/>\n";
    s += "<path id=\"pi-upper\" d=\"" + line_path(curve.pi_hi) +
         "\" stroke=\"#08519c\" stroke-width=\"1\" stroke-dasharray=\"5,4\" fill=\"none\"/>\n";
  }
  if (spec.connect) {
    s += "<path id=\"estimate\" d=\"" + line_path(curve.estimate) + "\" stroke=\"#08519c\" stroke-width=\"2\" fill=\"none\"/>\n";
  }
  if (spec.markers) {
    s += "<g id=\"markers\" fill=\"#08519c\">\n";
    for (std::size_t i = 0; i < curve.grid.size(); ++i) {
      if (is_missing(curve.estimate[i])) continue;
      s += "<circle cx=\"" + detail::px(sx(curve.grid[i])) + "\" cy=\"" + detail::px(sy(curve.estimate[i])) + "\" r=\"3\"/>\n";
    }
    s += "</g>\n";
  }

  if (hist) {
    const auto h = histogram_counts(records, spec.histogram_bins);
    std::size_t peak = 1;
    for (std::size_t b = 0; b < h.events.size(); ++b) peak = std::max({peak, h.events[b], h.non_events[b]});
    const double mid = 0.5 * (hist_top + hist_bottom);
    const double half = 0.5 * (hist_bottom - hist_top);
    const double bw = (right - left) / spec.histogram_bins;
    s += "<g id=\"histogram\">\n";
    s += "<path d=\"M " + detail::px(sx(0)) + " " + detail::px(mid) + " L " + detail::px(sx(1)) + " " + detail::px(mid) +
         "\" stroke=\"black\" stroke-width=\"0.5\"/>\n";
    for (std::size_t b = 0; b < h.events.size(); ++b) {
      const double x = left + static_cast<double>(b) * bw;
      const double he = half * static_cast<double>(h.events[b]) / static_cast<double>(peak);
      const double hn = half * static_cast<double>(h.non_events[b]) / static_cast<double>(peak);
      s += format("<rect class=\"hist-event\" data-bin=\"%zu\" data-count=\"%zu\" ", b, h.events[b]) + "x=\"" + detail::px(x) +
           "\" y=\"" + detail::px(mid - he) + "\" width=\"" + detail::px(bw) + "\" height=\"" + detail::px(he) +
           "\" fill=\"#de2d26\"/>\n";
      s += format("<rect class=\"hist-nonevent\" data-bin=\"%zu\" data-count=\"%zu\" ", b, h.non_events[b]) + "x=\"" +
           detail::px(x) + "\" y=\"" + detail::px(mid) + "\" width=\"" + detail::px(bw) + "\" height=\"" + detail::px(hn) +
           "\" fill=\"#3182bd\"/>\n";
    }
    s += "</g>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace clustcal
