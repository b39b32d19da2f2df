// Copyright the dohscope authors. Licensed under the terms of the Apache 2.0 license. See LICENSE in the project root.
//
// Batch analysis over persisted measurement records: availability verdicts,
// the error table, per-resolver medians, regional comparisons, latency-ratio
// flags, and plot-ready distribution exports. Deterministic throughout; ties
// break lexicographically by resolver URL.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "dohscope/catalog.hpp"
#include "dohscope/detail/util.hpp"
#include "dohscope/measurement.hpp"
#include "dohscope/records.hpp"

namespace dohscope {

/// Derived statistics for one (resolver, vantage) pair.
struct ResolverSummary {
  std::string resolver_url;
  std::string vantage;
  long long total_attempts = 0;
  long long successes = 0;
  std::map<ErrorClass, long long> error_histogram;
  bool available = false;  // at least one Success
  std::optional<double> median_response_ms;  // over Success total_ms only
  std::optional<double> median_rtt_ms;       // over per-round ping averages
  std::optional<double> ratio;               // median_response_ms / median_rtt_ms
  Region region = Region::Unknown;
  bool mainstream = false;
};

namespace analysis_detail {

/// Median with the even-cardinality rule: mean of the two central values.
inline double median_of_sorted(const std::vector<double>& sorted) {
  std::size_t n = sorted.size();
  if (n % 2 == 1) return sorted[n / 2];
  return (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0;
}

inline double median(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  return median_of_sorted(values);
}

/// Table-style percentage: one decimal with a trailing ".0" trimmed; values
/// that round below 0.1% print as "<1%".
inline std::string format_percent(long long count, long long total) {
  if (count == 0) return "0%";
  if (total <= 0) return "<1%";
  double p = 100.0 * static_cast<double>(count) / static_cast<double>(total);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", p);
  if (std::strtod(buf, nullptr) < 0.1) return "<1%";
  std::string s = buf;
  if (s.size() > 2 && s.compare(s.size() - 2, 2, ".0") == 0) s.erase(s.size() - 2);
  return s + "%";
}

struct PairKey {
  std::string resolver_url;
  std::string vantage;
  bool operator<(const PairKey& o) const {
    return resolver_url != o.resolver_url ? resolver_url < o.resolver_url : vantage < o.vantage;
  }
};

}  // namespace analysis_detail

/// Success response times (total_ms) for one (resolver, vantage), unsorted.
inline std::vector<double> success_samples(const std::vector<MeasurementRecord>& records,
                                           const std::string& resolver_url,
                                           const std::string& vantage) {
  std::vector<double> out;
  for (const auto& rec : records) {
    if (rec.kind != RecordKind::doh) continue;
    if (rec.doh.resolver_url != resolver_url || rec.doh.vantage != vantage) continue;
    if (rec.doh.outcome == ErrorClass::Success && rec.doh.timing.total_ms)
      out.push_back(*rec.doh.timing.total_ms);
  }
  return out;
}

/// Per-round ICMP averages for one (host, vantage); tcp-fallback rounds are
/// kept apart from ICMP and never aggregated with them.
inline std::vector<double> ping_samples(const std::vector<MeasurementRecord>& records,
                                        const std::string& host, const std::string& vantage,
                                        const std::string& method = "icmp") {
  std::vector<double> out;
  for (const auto& rec : records) {
    if (rec.kind != RecordKind::ping) continue;
    if (rec.ping.host != host || rec.ping.vantage != vantage) continue;
    if (rec.ping.method == method && rec.ping.average_ms) out.push_back(*rec.ping.average_ms);
  }
  return out;
}

enum class Availability { available, unresponsive };

/// A resolver is unresponsive from a vantage iff no attempt from that
/// vantage ever produced a Success.
inline Availability availability(const std::vector<MeasurementRecord>& records,
                                 const std::string& resolver_url, const std::string& vantage) {
  bool any = false;
  for (const auto& rec : records) {
    if (rec.kind != RecordKind::doh) continue;
    if (rec.doh.resolver_url != resolver_url || rec.doh.vantage != vantage) continue;
    any = true;
    if (rec.doh.outcome == ErrorClass::Success) return Availability::available;
  }
  if (!any)
    throw NoDataError("no attempts for " + resolver_url + " from " + vantage);
  return Availability::unresponsive;
}

/// Median end-to-end response time over Success records only.
inline double median_response_time(const std::vector<MeasurementRecord>& records,
                                   const std::string& resolver_url, const std::string& vantage) {
  auto samples = success_samples(records, resolver_url, vantage);
  if (samples.empty())
    throw NoDataError("no successful responses for " + resolver_url + " from " + vantage);
  return analysis_detail::median(std::move(samples));
}

struct ErrorTableRow {
  std::string label;
  long long count = 0;
  std::string percent;
  bool is_total = false;  // the Successful Responses / All Errors rows
};

/// Error tabulation across all DoH records: one row per occurring error
/// class (descending count), then the success and all-errors totals.
/// Percentages are of all attempts (successes + errors).
inline std::vector<ErrorTableRow> error_table(const std::vector<MeasurementRecord>& records) {
  using analysis_detail::format_percent;
  std::map<ErrorClass, long long> counts;
  long long total = 0;
  for (const auto& rec : records) {
    if (rec.kind != RecordKind::doh) continue;
    ++counts[rec.doh.outcome];
    ++total;
  }
  std::vector<ErrorTableRow> rows;
  if (total == 0) return rows;
  std::vector<std::pair<ErrorClass, long long>> errors;
  long long successes = 0, all_errors = 0;
  for (const auto& [cls, count] : counts) {
    if (cls == ErrorClass::Success) {
      successes = count;
    } else {
      errors.emplace_back(cls, count);
      all_errors += count;
    }
  }
  std::sort(errors.begin(), errors.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return std::string(display_name(a.first)) < std::string(display_name(b.first));
  });
  for (const auto& [cls, count] : errors)
    rows.push_back({display_name(cls), count, format_percent(count, total), false});
  rows.push_back({display_name(ErrorClass::Success), successes,
                  format_percent(successes, total), true});
  rows.push_back({"All Errors", all_errors, format_percent(all_errors, total), true});
  return rows;
}

/// Builds per-(resolver, vantage) summaries from records, annotating region
/// and mainstream flags from the catalog when provided.
inline std::vector<ResolverSummary> summarize(const std::vector<MeasurementRecord>& records,
                                              const std::vector<ResolverEndpoint>& catalog = {}) {
  using analysis_detail::PairKey;
  std::map<PairKey, ResolverSummary> map;
  std::map<std::string, const ResolverEndpoint*> by_url;
  for (const auto& ep : catalog) by_url.emplace(ep.url, &ep);

  for (const auto& rec : records) {
    if (rec.kind != RecordKind::doh) continue;
    PairKey key{rec.doh.resolver_url, rec.doh.vantage};
    auto& s = map[key];
    s.resolver_url = key.resolver_url;
    s.vantage = key.vantage;
    ++s.total_attempts;
    if (rec.doh.outcome == ErrorClass::Success) ++s.successes;
    else ++s.error_histogram[rec.doh.outcome];
  }

  std::vector<ResolverSummary> out;
  out.reserve(map.size());
  for (auto& [key, s] : map) {
    s.available = s.successes >= 1;
    auto dns = success_samples(records, key.resolver_url, key.vantage);
    if (!dns.empty()) s.median_response_ms = analysis_detail::median(std::move(dns));
    auto it = by_url.find(key.resolver_url);
    const ResolverEndpoint* ep = it != by_url.end() ? it->second : nullptr;
    if (ep) {
      s.region = ep->region;
      s.mainstream = ep->mainstream;
    }
    // Ping rounds are recorded against the resolver hostname.
    std::string host = ep ? ep->hostname : [&] {
      std::string err;
      auto made = make_endpoint(key.resolver_url, &err);
      return made ? made->hostname : key.resolver_url;
    }();
    auto pings = ping_samples(records, host, key.vantage);
    if (!pings.empty()) s.median_rtt_ms = analysis_detail::median(std::move(pings));
    if (s.median_response_ms && s.median_rtt_ms && *s.median_rtt_ms > 0)
      s.ratio = *s.median_response_ms / *s.median_rtt_ms;
    out.push_back(std::move(s));
  }
  return out;
}

struct RegionalDelta {
  std::string resolver_url;
  double median_a = 0;
  double median_b = 0;
};

/// Top-k resolvers of a region by |median(vantage_a) − median(vantage_b)|,
/// descending; ties break lexicographically by URL. Resolvers missing
/// successes at either vantage are skipped.
inline std::vector<RegionalDelta> regional_comparison(
    const std::vector<MeasurementRecord>& records, const std::vector<ResolverEndpoint>& catalog,
    Region resolver_region, const std::string& vantage_a, const std::string& vantage_b,
    std::size_t k) {
  bool a_has_data = false, b_has_data = false;
  for (const auto& rec : records) {
    if (rec.kind != RecordKind::doh) continue;
    if (rec.doh.vantage == vantage_a) a_has_data = true;
    if (rec.doh.vantage == vantage_b) b_has_data = true;
  }
  if (!a_has_data || !b_has_data)
    throw NoDataError("no records from vantage " + (a_has_data ? vantage_b : vantage_a));

  std::vector<RegionalDelta> rows;
  for (const auto& ep : catalog) {
    if (ep.region != resolver_region) continue;
    auto a = success_samples(records, ep.url, vantage_a);
    auto b = success_samples(records, ep.url, vantage_b);
    if (a.empty() || b.empty()) continue;
    rows.push_back({ep.url, analysis_detail::median(std::move(a)),
                    analysis_detail::median(std::move(b))});
  }
  std::sort(rows.begin(), rows.end(), [](const RegionalDelta& x, const RegionalDelta& y) {
    double dx = std::abs(x.median_a - x.median_b);
    double dy = std::abs(y.median_a - y.median_b);
    if (dx != dy) return dx > dy;
    return x.resolver_url < y.resolver_url;
  });
  if (rows.size() > k) rows.resize(k);
  return rows;
}

struct RatioFlag {
  std::string resolver_url;
  std::string vantage;
  double median_response_ms = 0;
  double median_rtt_ms = 0;
  double ratio = 0;
};

struct RatioFlagReport {
  std::vector<RatioFlag> flagged;
  std::vector<std::string> unratable;  // "url vantage" pairs lacking ping data
  double threshold = 4.0;
};

/// Flags summaries whose median response time exceeds threshold × median
/// network RTT. Summaries with response data but no usable ping medians are
/// reported separately as unratable.
inline RatioFlagReport latency_ratio_flags(const std::vector<ResolverSummary>& summaries,
                                           double threshold = 4.0) {
  RatioFlagReport report;
  report.threshold = threshold;
  for (const auto& s : summaries) {
    if (!s.median_response_ms) continue;
    if (!s.median_rtt_ms || *s.median_rtt_ms <= 0) {
      report.unratable.push_back(s.resolver_url + " " + s.vantage);
      continue;
    }
    double ratio = *s.median_response_ms / *s.median_rtt_ms;
    if (ratio > threshold)
      report.flagged.push_back({s.resolver_url, s.vantage, *s.median_response_ms,
                                *s.median_rtt_ms, ratio});
  }
  auto by_url = [](const auto& a, const auto& b) {
    return a.resolver_url != b.resolver_url ? a.resolver_url < b.resolver_url
                                            : a.vantage < b.vantage;
  };
  std::sort(report.flagged.begin(), report.flagged.end(), by_url);
  std::sort(report.unratable.begin(), report.unratable.end());
  return report;
}

/// Top-k available resolvers by ascending median response time at a vantage.
inline std::vector<std::pair<std::string, double>> rank_resolvers(
    const std::vector<ResolverSummary>& summaries, const std::string& vantage, std::size_t k = 5) {
  std::vector<std::pair<std::string, double>> rows;
  bool any = false;
  for (const auto& s : summaries) {
    if (s.vantage != vantage) continue;
    any = true;
    if (s.available && s.median_response_ms) rows.emplace_back(s.resolver_url, *s.median_response_ms);
  }
  if (!any) throw NoDataError("no summaries for vantage " + vantage);
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second < b.second;
    return a.first < b.first;
  });
  if (rows.size() > k) rows.resize(k);
  return rows;
}

struct DistributionExportOptions {
  std::optional<double> truncate_at_ms = 500.0;  // unset -> export everything
};

/// Plot-ready distribution export: per (vantage, region, resolver, metric)
/// sorted samples with empirical CDF points computed over the full sample
/// set. Samples above the cutoff are excluded from the rows but counted in
/// the overflow column; a resolver whose samples are all above the cutoff
/// emits a single countline with empty sample fields so that
/// retained + overflow always equals the sample total. Columns are
/// documented in data/analysis_schema.md.
inline std::string distribution_export_csv(const std::vector<MeasurementRecord>& records,
                                           const std::vector<ResolverEndpoint>& catalog = {},
                                           const DistributionExportOptions& opts = {}) {
  using detail::csv_escape;
  using detail::format_double;
  std::map<std::string, const ResolverEndpoint*> by_url;
  for (const auto& ep : catalog) by_url.emplace(ep.url, &ep);

  struct Group {
    std::string vantage, resolver_url, metric;
    std::vector<double> samples;
  };
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<double>> groups;
  std::map<std::string, std::string> host_to_url;  // ping host -> catalog url (first wins)
  for (const auto& ep : catalog) host_to_url.emplace(ep.hostname, ep.url);

  for (const auto& rec : records) {
    if (rec.kind == RecordKind::doh) {
      if (rec.doh.outcome == ErrorClass::Success && rec.doh.timing.total_ms)
        groups[{rec.doh.vantage, rec.doh.resolver_url, "dns"}].push_back(
            *rec.doh.timing.total_ms);
    } else if (rec.ping.average_ms && rec.ping.method == "icmp") {
      auto it = host_to_url.find(rec.ping.host);
      std::string url = it != host_to_url.end() ? it->second : rec.ping.host;
      groups[{rec.ping.vantage, url, "ping"}].push_back(*rec.ping.average_ms);
    }
  }

  std::string csv =
      "vantage,region,resolver_url,mainstream,metric,total_samples,retained,overflow,"
      "sample_index,sample_ms,ecdf\n";
  for (auto& [key, samples] : groups) {
    const auto& [vantage, url, metric] = key;
    std::sort(samples.begin(), samples.end());
    std::size_t total = samples.size();
    std::size_t retained = total;
    if (opts.truncate_at_ms) {
      retained = static_cast<std::size_t>(
          std::upper_bound(samples.begin(), samples.end(), *opts.truncate_at_ms) -
          samples.begin());
    }
    std::size_t overflow = total - retained;
    auto it = by_url.find(url);
    std::string region = to_string(it != by_url.end() ? it->second->region : Region::Unknown);
    std::string mainstream = it != by_url.end() && it->second->mainstream ? "true" : "false";
    std::string prefix = csv_escape(vantage) + "," + region + "," + csv_escape(url) + "," +
                         mainstream + "," + metric + "," + std::to_string(total) + "," +
                         std::to_string(retained) + "," + std::to_string(overflow) + ",";
    if (retained == 0) {
      csv += prefix + ",,\n";
      continue;
    }
    for (std::size_t i = 0; i < retained; ++i) {
      double ecdf = static_cast<double>(i + 1) / static_cast<double>(total);
      csv += prefix + std::to_string(i) + "," + format_double(samples[i]) + "," +
             format_double(ecdf) + "\n";
    }
  }
  return csv;
}

// ---------------------------------------------------------------------------
// CSV renderers for the CLI.

inline std::string error_table_csv(const std::vector<ErrorTableRow>& rows) {
  std::string csv = "error,count,percent_of_all_responses\n";
  for (const auto& r : rows)
    csv += detail::csv_escape(r.label) + "," + std::to_string(r.count) + "," + r.percent + "\n";
  return csv;
}

inline std::string summaries_csv(const std::vector<ResolverSummary>& summaries) {
  std::string csv =
      "resolver_url,vantage,region,mainstream,total_attempts,successes,available,"
      "median_response_ms,median_rtt_ms,ratio\n";
  for (const auto& s : summaries) {
    csv += detail::csv_escape(s.resolver_url) + "," + detail::csv_escape(s.vantage) + "," +
           to_string(s.region) + "," + (s.mainstream ? "true" : "false") + "," +
           std::to_string(s.total_attempts) + "," + std::to_string(s.successes) + "," +
           (s.available ? "true" : "false") + "," +
           (s.median_response_ms ? detail::format_double(*s.median_response_ms) : "") + "," +
           (s.median_rtt_ms ? detail::format_double(*s.median_rtt_ms) : "") + "," +
           (s.ratio ? detail::format_double(*s.ratio) : "") + "\n";
  }
  return csv;
}

inline std::string comparison_csv(const std::vector<RegionalDelta>& rows,
                                  const std::string& vantage_a, const std::string& vantage_b) {
  std::string csv = "resolver_url,median_" + vantage_a + "_ms,median_" + vantage_b +
                    "_ms,abs_difference_ms\n";
  for (const auto& r : rows) {
    csv += detail::csv_escape(r.resolver_url) + "," + detail::format_double(r.median_a) + "," +
           detail::format_double(r.median_b) + "," +
           detail::format_double(std::abs(r.median_a - r.median_b)) + "\n";
  }
  return csv;
}

inline std::string flags_csv(const RatioFlagReport& report) {
  std::string csv = "resolver_url,vantage,median_response_ms,median_rtt_ms,ratio,flagged\n";
  for (const auto& f : report.flagged) {
    csv += detail::csv_escape(f.resolver_url) + "," + detail::csv_escape(f.vantage) + "," +
           detail::format_double(f.median_response_ms) + "," +
           detail::format_double(f.median_rtt_ms) + "," + detail::format_double(f.ratio) +
           ",true\n";
  }
  for (const auto& u : report.unratable) {
    auto space = u.rfind(' ');
    csv += detail::csv_escape(u.substr(0, space)) + "," +
           detail::csv_escape(space == std::string::npos ? "" : u.substr(space + 1)) +
           ",,,,unratable\n";
  }
  return csv;
}

inline std::string rank_csv(const std::vector<std::pair<std::string, double>>& rows) {
  std::string csv = "rank,resolver_url,median_response_ms\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    csv += std::to_string(i + 1) + "," + detail::csv_escape(rows[i].first) + "," +
           detail::format_double(rows[i].second) + "\n";
  }
  return csv;
}

}  // namespace dohscope
