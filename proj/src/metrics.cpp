#include "ilkd/metrics.hpp"

#include "ilkd/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace ilkd {

std::size_t edit_distance(std::span<const Label> reference, std::span<const Label> hypothesis) {
  std::vector<std::size_t> prev(hypothesis.size() + 1), cur(hypothesis.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= reference.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hypothesis.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev.back();
}

double SampleScore::cer() const {
  if (ref_len == 0) throw NumericalError("cer: empty reference");
  return static_cast<double>(edits) / static_cast<double>(ref_len);
}

double corpus_cer(std::span<const SampleScore> scores) {
  std::size_t edits = 0, length = 0;
  for (const auto& s : scores) {
    edits += s.edits;
    length += s.ref_len;
  }
  if (length == 0) throw NumericalError("corpus_cer: total reference length is zero");
  return static_cast<double>(edits) / static_cast<double>(length);
}

std::string format_percent(double ratio) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * ratio);
  return buf;
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "sample_id,ref_len,edits,cer,ebkd_loss\n";
  char buf[64];
  for (const auto& s : report.samples) {
    os << s.sample_id << ',' << s.ref_len << ',' << s.edits << ',';
    std::snprintf(buf, sizeof buf, "%.6f", s.ref_len ? s.cer() : 0.0);
    os << buf << ',';
    if (s.ebkd_loss) {
      std::snprintf(buf, sizeof buf, "%.12g", *s.ebkd_loss);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

std::string report_summary(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["corpus_cer"] = format_percent(report.corpus_cer());
  j["n_samples"] = report.samples.size();
  j["stage"] = report.stage;
  j["method"] = report.method;
  j["seed"] = report.seed;
  j["task"] = report.task;
  return j.dump(2) + "\n";
}

double pearson_correlation(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("pearson_correlation: series lengths differ");
  if (xs.size() < 3) throw std::invalid_argument("pearson_correlation: need at least 3 points");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericalError("undefined correlation: a series is constant");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace ilkd
