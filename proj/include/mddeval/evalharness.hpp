#pragma once

// Rank correlation against human scores, per benchmark and averaged.

#include <boost/math/distributions/students_t.hpp>
#include <iomanip>
#include <sstream>

#include "mddeval/metric.hpp"

namespace mddeval {

/// 1-based ranks; tied values share the mean of their rank range.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (size_t i = 0; i < idx.size();) {
    size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) r[idx[k]] = rank;
    i = j + 1;
  }
  return r;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw validation_error("correlation inputs differ in length");
  if (x.size() < 3) throw validation_error("correlation needs at least 3 points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw validation_error("correlation undefined for constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline bool is_constant(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [&](double a) { return a == v.front(); });
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw validation_error("correlation inputs differ in length");
  if (x.size() < 3) throw validation_error("correlation needs at least 3 points");
  if (is_constant(x) || is_constant(y)) throw validation_error("correlation undefined for constant input");
  return pearson(average_ranks(x), average_ranks(y));
}

/// Two-sided p-value of the t-approximation with n-2 degrees of freedom.
inline double p_value(double rho, size_t n) {
  if (n < 4) throw validation_error("p_value needs n >= 4");
  if (std::abs(rho) >= 1.0) return 0.0;
  const double df = static_cast<double>(n - 2);
  const double t = rho * std::sqrt(df / (1.0 - rho * rho));
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

struct DomainCorrelation {
  double spearman = 0.0;
  double pearson = 0.0;
  size_t n = 0;
  double p_value = 1.0;
};

struct CorrelationReport {
  std::map<std::string, DomainCorrelation> per_domain;
  double average_spearman = 0.0;
};

/// Correlation of given scores with human scores, records matched by pair_id.
inline DomainCorrelation correlate(const std::vector<BenchmarkRecord>& records, const std::vector<double>& scores) {
  if (records.size() != scores.size()) throw validation_error("score count differs from benchmark size");
  std::vector<double> human;
  for (const auto& r : records) human.push_back(r.human_score);
  DomainCorrelation c;
  c.n = records.size();
  c.spearman = spearman(scores, human);
  c.pearson = pearson(scores, human);
  c.p_value = p_value(c.spearman, c.n);
  return c;
}

inline CorrelationReport make_report(std::map<std::string, DomainCorrelation> per_domain) {
  if (per_domain.empty()) throw validation_error("no benchmarks to report");
  CorrelationReport r;
  r.per_domain = std::move(per_domain);
  for (auto& [d, c] : r.per_domain) r.average_spearman += c.spearman;
  r.average_spearman /= static_cast<double>(r.per_domain.size());
  return r;
}

inline constexpr size_t kMinBenchmarkRecords = 10;

inline CorrelationReport evaluate(const EncoderModel& model, const Vocabulary& vocab,
                                  const std::map<std::string, std::vector<BenchmarkRecord>>& benchmarks, size_t parallelism = 1) {
  std::map<std::string, DomainCorrelation> per;
  for (const auto& [domain, records] : benchmarks) {
    if (records.size() < kMinBenchmarkRecords)
      throw validation_error("benchmark " + domain + " has " + std::to_string(records.size()) + " records; at least 10 required");
    std::vector<ContextResponsePair> pairs;
    for (const auto& r : records) pairs.push_back(r.pair);
    std::vector<double> s;
    for (const auto& m : score_batch(model, vocab, pairs, parallelism)) s.push_back(m.score);
    per[domain] = correlate(records, s);
  }
  return make_report(std::move(per));
}

inline ordered_json report_json(const CorrelationReport& r) {
  ordered_json j;
  ordered_json per = ordered_json::object();
  for (const auto& [d, c] : r.per_domain)
    per[d] = {{"spearman", c.spearman}, {"pearson", c.pearson}, {"n", c.n}, {"p_value", c.p_value}};
  j["per_domain"] = std::move(per);
  j["average_spearman"] = r.average_spearman;
  return j;
}

/// Benchmarks as rows, configurations as columns, plus an average row.
/// Spearman values with p > 0.05 are marked with '*'.
inline std::string format_table(const std::vector<std::pair<std::string, CorrelationReport>>& columns) {
  std::set<std::string> domains;
  for (const auto& [name, r] : columns)
    for (const auto& [d, c] : r.per_domain) domains.insert(d);
  size_t w0 = std::string("Average").size();
  for (const auto& d : domains) w0 = std::max(w0, d.size());
  std::vector<size_t> widths;
  for (const auto& [name, r] : columns) widths.push_back(std::max<size_t>(name.size(), 7));

  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(w0)) << "Benchmark";
  for (size_t i = 0; i < columns.size(); ++i) os << "  " << std::right << std::setw(static_cast<int>(widths[i])) << columns[i].first;
  os << '\n';
  auto cell = [&](const CorrelationReport& r, const std::string& d) {
    auto it = r.per_domain.find(d);
    if (it == r.per_domain.end()) return std::string("-");
    std::ostringstream c;
    c << std::fixed << std::setprecision(3) << it->second.spearman << (it->second.p_value > 0.05 ? "*" : "");
    return c.str();
  };
  for (const auto& d : domains) {
    os << std::left << std::setw(static_cast<int>(w0)) << d;
    for (size_t i = 0; i < columns.size(); ++i) os << "  " << std::right << std::setw(static_cast<int>(widths[i])) << cell(columns[i].second, d);
    os << '\n';
  }
  os << std::left << std::setw(static_cast<int>(w0)) << "Average";
  for (size_t i = 0; i < columns.size(); ++i) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(3) << columns[i].second.average_spearman;
    os << "  " << std::right << std::setw(static_cast<int>(widths[i])) << c.str();
  }
  os << '\n';
  return os.str();
}

}  // namespace mddeval
