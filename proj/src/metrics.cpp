#include "icsinet/metrics.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <tuple>

#include "icsinet/errors.hpp"

namespace icsinet {

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

Mask polygon_to_mask(const Polygon& poly, std::size_t width, std::size_t height) {
  if (poly.size() < 3) {
    throw InputError("polygon_to_mask: polygon needs at least 3 vertices, got " + std::to_string(poly.size()));
  }
  Mask m(width, height);
  std::vector<double> xs;
  for (std::size_t j = 0; j < height; ++j) {
    const double y = double(j) + 0.5;
    xs.clear();
    for (std::size_t a = 0, b = poly.size() - 1; a < poly.size(); b = a++) {
      const Point& p = poly[a];
      const Point& q = poly[b];
      if ((p.y > y) != (q.y > y)) xs.push_back((q.x - p.x) * (y - p.y) / (q.y - p.y) + p.x);
    }
    if (xs.empty()) continue;
    std::sort(xs.begin(), xs.end());
    // A center is inside iff an odd number of crossings lie strictly to its right.
    std::size_t k = 0;
    for (std::size_t i = 0; i < width; ++i) {
      const double x = double(i) + 0.5;
      while (k < xs.size() && xs[k] <= x) ++k;
      m.data[j * width + i] = static_cast<std::uint8_t>((xs.size() - k) & 1u);
    }
  }
  return m;
}

Mask polygon_to_mask(const Polygon& poly, std::size_t size) { return polygon_to_mask(poly, size, size); }

double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) {
    throw ShapeError("iou: mask sizes differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

double iou(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height) {
    throw ShapeError("iou: mask shapes differ (" + std::to_string(a.width) + "x" + std::to_string(a.height) +
                     " vs " + std::to_string(b.width) + "x" + std::to_string(b.height) + ")");
  }
  return iou(std::span<const std::uint8_t>(a.data), std::span<const std::uint8_t>(b.data));
}

double tip_distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

Stat summarize(std::vector<double> values) {
  Stat s;
  s.count = values.size();
  if (!values.empty()) {
    s.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / double(values.size()));
  }
  s.values = std::move(values);
  return s;
}

AgreementReport pairwise_agreement(const std::vector<AnnotationRecord>& records, AgreementMode mode) {
  // Group key and the member label that distinguishes annotations within a group.
  using Key = std::pair<std::string, std::string>;
  std::map<Key, std::vector<const AnnotationRecord*>> groups;
  for (const auto& r : records) {
    const Key key = mode == AgreementMode::Inter ? Key{r.frame_id, std::to_string(r.round)}
                                                  : Key{r.frame_id, r.operator_id};
    groups[key].push_back(&r);
  }
  std::map<std::string, std::vector<double>> ious;
  std::vector<double> tips;
  std::size_t pairs = 0;
  for (auto& [key, members] : groups) {
    std::sort(members.begin(), members.end(), [](const auto* a, const auto* b) {
      return std::tie(a->operator_id, a->round) < std::tie(b->operator_id, b->round);
    });
    for (std::size_t i = 1; i < members.size(); ++i) {
      if (members[i]->operator_id == members[i - 1]->operator_id && members[i]->round == members[i - 1]->round) {
        throw InputError("duplicate annotation for frame " + members[i]->frame_id + ", operator " +
                         members[i]->operator_id + ", round " + std::to_string(members[i]->round));
      }
    }
    for (std::size_t i = 0; i < members.size(); ++i) {
      for (std::size_t j = i + 1; j < members.size(); ++j) {
        const auto& a = *members[i];
        const auto& b = *members[j];
        if (a.image_size != b.image_size) {
          throw InputError("frame " + a.frame_id + ": annotations disagree on image_size");
        }
        for (const auto& cls : class_names()) {
          auto raster = [&](const AnnotationRecord& r) {
            const auto it = r.polygons.find(cls);
            return it == r.polygons.end() ? Mask(r.image_size, r.image_size)
                                          : polygon_to_mask(it->second, r.image_size);
          };
          ious[cls].push_back(iou(raster(a), raster(b)));
        }
        tips.push_back(tip_distance(a.tip, b.tip));
        ++pairs;
      }
    }
  }
  if (pairs == 0) {
    throw InputError(mode == AgreementMode::Inter
                         ? "need >=2 operators annotating the same frame in the same round"
                         : "need >=2 rounds by the same operator on the same frame");
  }
  AgreementReport rep;
  rep.mode = mode;
  for (const auto& cls : class_names()) rep.iou[cls] = summarize(std::move(ious[cls]));
  rep.tip = summarize(std::move(tips));
  return rep;
}

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw InputError("welch_t_test: each sample needs at least 2 values");
  auto moments = [](std::span<const double> x) {
    const double n = double(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, ss / (n - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  if (va == 0.0 && vb == 0.0) throw InputError("welch_t_test: both samples have zero variance, p is undefined");
  const double sa = va / double(a.size()), sb = vb / double(b.size());
  WelchResult r;
  r.t = (ma - mb) / std::sqrt(sa + sb);
  r.df = (sa + sb) * (sa + sb) /
         (sa * sa / double(a.size() - 1) + sb * sb / double(b.size() - 1));
  const boost::math::students_t dist(r.df);
  r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  return r;
}

std::vector<HistogramBin> error_histogram(std::span<const double> distances, double bin_width) {
  if (!(bin_width > 0.0)) throw ConfigError("error_histogram: bin_width must be > 0");
  std::vector<HistogramBin> bins;
  if (distances.empty()) return bins;
  const double max = *std::max_element(distances.begin(), distances.end());
  const auto n = static_cast<std::size_t>(std::floor(max / bin_width)) + 1;
  for (std::size_t k = 0; k < n; ++k) bins.push_back({double(k) * bin_width, double(k + 1) * bin_width, 0});
  for (double d : distances) {
    if (d < 0.0 || !std::isfinite(d)) throw InputError("error_histogram: distances must be finite and >= 0");
    bins[std::min(n - 1, static_cast<std::size_t>(std::floor(d / bin_width)))].count++;
  }
  return bins;
}

std::string histogram_csv(const std::vector<HistogramBin>& bins) {
  std::ostringstream os;
  os << "bin_lo,bin_hi,count\r\n";
  for (const auto& b : bins) os << b.lo << ',' << b.hi << ',' << b.count << "\r\n";
  return os.str();
}

std::string mean_std(const Stat& s, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << s.mean << " [" << s.stddev << ']';
  return os.str();
}

namespace {

struct Row {
  std::string label;
  const Stat* inter;
  const Stat* intra;
};

std::vector<Row> table_rows(const std::optional<AgreementReport>& inter, const std::optional<AgreementReport>& intra) {
  std::vector<Row> rows;
  auto pick = [](const std::optional<AgreementReport>& r, const std::string& cls) -> const Stat* {
    if (!r) return nullptr;
    return cls.empty() ? &r->tip : &r->iou.at(cls);
  };
  rows.push_back({"Oolemma (IoU)", pick(inter, "oolemma"), pick(intra, "oolemma")});
  rows.push_back({"Pipette (IoU)", pick(inter, "pipette"), pick(intra, "pipette")});
  rows.push_back({"Needle (pixels)", pick(inter, ""), pick(intra, "")});
  return rows;
}

std::string p_value(const Stat& a, const Stat& b) {
  try {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << welch_t_test(a.values, b.values).p;
    return os.str();
  } catch (const InputError&) {
    return "degenerate";
  }
}

}  // namespace

std::string agreement_table(const std::optional<AgreementReport>& inter, const std::optional<AgreementReport>& intra) {
  const bool both = inter && intra;
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{""};
  if (inter) header.push_back("Interoperator");
  if (intra) header.push_back("Intraoperator");
  if (both) header.push_back("p (Welch)");
  cells.push_back(header);
  for (const auto& r : table_rows(inter, intra)) {
    std::vector<std::string> line{r.label};
    if (r.inter) line.push_back(mean_std(*r.inter));
    if (r.intra) line.push_back(mean_std(*r.intra));
    if (both) line.push_back(p_value(*r.inter, *r.intra));
    cells.push_back(line);
  }
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) widths[c] = std::max(widths[c], line[c].size());
  }
  std::ostringstream os;
  os << "Mean operator performance (standard deviations in square brackets; population stddev";
  if (both) os << "; p from two-sided Welch t-test";
  os << ")\n";
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      os << std::left << std::setw(int(widths[c])) << line[c] << (c + 1 < line.size() ? "  " : "");
    }
    os << '\n';
  }
  return os.str();
}

std::string agreement_csv(const std::optional<AgreementReport>& inter, const std::optional<AgreementReport>& intra) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "statistic,mode,mean,stddev,count,welch_t,welch_df,welch_p\r\n";
  auto emit = [&](const std::string& label, const char* mode, const Stat* s) {
    if (s) os << '"' << label << "\"," << mode << ',' << s->mean << ',' << s->stddev << ',' << s->count << ",,,\r\n";
  };
  for (const auto& r : table_rows(inter, intra)) {
    emit(r.label, "inter", r.inter);
    emit(r.label, "intra", r.intra);
  }
  if (inter && intra) {
    for (const auto& r : table_rows(inter, intra)) {
      try {
        const auto w = welch_t_test(r.inter->values, r.intra->values);
        os << '"' << r.label << "\",inter_vs_intra,,,," << w.t << ',' << w.df << ',' << w.p << "\r\n";
      } catch (const InputError&) {
        os << '"' << r.label << "\",inter_vs_intra,,,,,,degenerate\r\n";
      }
    }
  }
  return os.str();
}

}  // namespace icsinet
