// Copyright the dohscope authors. Licensed under the terms of the Apache 2.0 license. See LICENSE in the project root.

#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dohscope/catalog.hpp"
#include "dohscope/detail/util.hpp"
#include "dohscope/dns_wire.hpp"
#include "dohscope/icmp_prober.hpp"
#include "dohscope/records.hpp"
#include "dohscope/transport.hpp"

namespace dohscope {

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Everything one measurement campaign needs; fully serializable as a flat
/// TOML-style key/value file (see parse_campaign_config for the keys).
struct CampaignConfig {
  std::string resolver_list_path;
  std::string geo_mapping_path;
  std::string mainstream_set_path;
  std::vector<std::string> domains{"google.com", "netflix.com"};
  std::string vantage_label = "local";
  std::chrono::milliseconds round_interval{300'000};  // 5 minutes
  int rounds = 1;                                     // 0 -> run until `duration`
  std::chrono::milliseconds duration{0};
  int parallelism = 8;
  TransportOptions transport;
  PingOptions ping;
  bool ping_enabled = true;
  std::uint16_t query_id = 0;  // DoH payload id; 0 is cache-friendly
  std::uint16_t qtype = dnswire::kTypeA;
  bool edns0 = false;
  std::string output_path = "measurements.jsonl";
  std::string campaign_id;  // empty -> generated at start
};

namespace campaign_detail {

struct TomlValue {
  std::string raw;
  bool is_string = false;
  std::vector<std::string> array;
  bool is_array = false;
};

inline std::string unquote(std::string_view v) {
  v = detail::trim(v);
  if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front())
    return std::string(v.substr(1, v.size() - 2));
  return std::string(v);
}

inline TomlValue parse_value(std::string_view raw) {
  TomlValue v;
  raw = detail::trim(raw);
  if (!raw.empty() && raw.front() == '[') {
    v.is_array = true;
    if (raw.back() != ']') throw ConfigError("unterminated array value");
    std::string_view inner = raw.substr(1, raw.size() - 2);
    if (!detail::trim(inner).empty()) {
      for (const auto& item : detail::split(inner, ',')) {
        v.array.push_back(unquote(item));
      }
    }
    return v;
  }
  if (!raw.empty() && (raw.front() == '"' || raw.front() == '\'')) {
    v.is_string = true;
    v.raw = unquote(raw);
    return v;
  }
  v.raw = std::string(raw);
  return v;
}

inline std::chrono::milliseconds seconds_to_ms(double s) {
  return std::chrono::milliseconds(static_cast<long long>(s * 1000.0 + 0.5));
}

inline double to_number(const TomlValue& v, const std::string& key) {
  char* end = nullptr;
  double d = std::strtod(v.raw.c_str(), &end);
  if (end == v.raw.c_str() || *end != '\0')
    throw ConfigError("expected a number for key '" + key + "', got '" + v.raw + "'");
  return d;
}

inline bool to_bool(const TomlValue& v, const std::string& key) {
  if (v.raw == "true") return true;
  if (v.raw == "false") return false;
  throw ConfigError("expected true/false for key '" + key + "', got '" + v.raw + "'");
}

}  // namespace campaign_detail

/// Parses the flat TOML-style config. Unknown keys are rejected so typos
/// fail fast. `[section]` headers are accepted and ignored.
inline CampaignConfig parse_campaign_config(std::string_view text) {
  using namespace campaign_detail;
  CampaignConfig cfg;
  int line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t eol = text.find('\n', start);
    std::string_view line =
        eol == std::string_view::npos ? text.substr(start) : text.substr(start, eol - start);
    ++line_no;
    // Strip comments outside quotes.
    std::string cleaned;
    bool in_quote = false;
    char quote = 0;
    for (char c : line) {
      if (in_quote) {
        if (c == quote) in_quote = false;
      } else if (c == '"' || c == '\'') {
        in_quote = true;
        quote = c;
      } else if (c == '#') {
        break;
      }
      cleaned += c;
    }
    std::string_view trimmed = detail::trim(cleaned);
    if (!trimmed.empty() && trimmed.front() != '[') {
      auto eq = trimmed.find('=');
      if (eq == std::string_view::npos)
        throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
      std::string key(detail::trim(trimmed.substr(0, eq)));
      TomlValue value = parse_value(trimmed.substr(eq + 1));

      if (key == "resolver_list") cfg.resolver_list_path = value.raw;
      else if (key == "geo_mapping") cfg.geo_mapping_path = value.raw;
      else if (key == "mainstream_set") cfg.mainstream_set_path = value.raw;
      else if (key == "domains") cfg.domains = value.array;
      else if (key == "vantage") cfg.vantage_label = value.raw;
      else if (key == "round_interval_s") cfg.round_interval = seconds_to_ms(to_number(value, key));
      else if (key == "rounds") cfg.rounds = static_cast<int>(to_number(value, key));
      else if (key == "duration_s") cfg.duration = seconds_to_ms(to_number(value, key));
      else if (key == "parallelism") cfg.parallelism = static_cast<int>(to_number(value, key));
      else if (key == "connect_timeout_s")
        cfg.transport.connect_timeout_ms = static_cast<long>(to_number(value, key) * 1000.0);
      else if (key == "total_timeout_s")
        cfg.transport.total_timeout_ms = static_cast<long>(to_number(value, key) * 1000.0);
      else if (key == "http_method") {
        if (detail::iequals(value.raw, "post")) cfg.transport.method = HttpMethod::post;
        else if (detail::iequals(value.raw, "get")) cfg.transport.method = HttpMethod::get;
        else throw ConfigError("http_method must be POST or GET");
      } else if (key == "reuse") cfg.transport.reuse = to_bool(value, key);
      else if (key == "http2") cfg.transport.offer_http2 = to_bool(value, key);
      else if (key == "ca_file") cfg.transport.ca_file = value.raw;
      else if (key == "verify_peer") cfg.transport.verify_peer = to_bool(value, key);
      else if (key == "ping_count") cfg.ping.count = static_cast<int>(to_number(value, key));
      else if (key == "ping_interval_s") cfg.ping.interval = seconds_to_ms(to_number(value, key));
      else if (key == "ping_timeout_s")
        cfg.ping.per_probe_timeout = seconds_to_ms(to_number(value, key));
      else if (key == "ping_payload_bytes")
        cfg.ping.payload_size = static_cast<int>(to_number(value, key));
      else if (key == "ping_fallback") cfg.ping.allow_tcp_fallback = to_bool(value, key);
      else if (key == "ping_fallback_port")
        cfg.ping.fallback_port = static_cast<std::uint16_t>(to_number(value, key));
      else if (key == "ping_enabled") cfg.ping_enabled = to_bool(value, key);
      else if (key == "query_id") cfg.query_id = static_cast<std::uint16_t>(to_number(value, key));
      else if (key == "qtype") cfg.qtype = static_cast<std::uint16_t>(to_number(value, key));
      else if (key == "edns0") cfg.edns0 = to_bool(value, key);
      else if (key == "output") cfg.output_path = value.raw;
      else if (key == "campaign_id") cfg.campaign_id = value.raw;
      else throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    if (eol == std::string_view::npos) break;
    start = eol + 1;
  }
  if (const char* env = std::getenv("DOHSCOPE_OUTPUT"); env && *env) cfg.output_path = env;
  return cfg;
}

inline CampaignConfig load_campaign_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_campaign_config(ss.str());
}

inline void validate_config(const CampaignConfig& cfg) {
  if (cfg.parallelism < 1) throw ConfigError("parallelism must be >= 1");
  if (cfg.domains.empty()) throw ConfigError("at least one query domain is required");
  if (cfg.round_interval.count() <= 0) throw ConfigError("round_interval must be > 0");
  if (cfg.rounds <= 0 && cfg.duration.count() <= 0)
    throw ConfigError("either rounds or duration_s must be set");
  for (const auto& d : cfg.domains) {
    dnswire::validate_name(d);  // throws InvalidNameError with context
  }
}

struct CampaignSummary {
  int rounds_completed = 0;
  long long doh_records = 0;
  long long ping_records = 0;
  long long successes = 0;
  long long failures = 0;
};

/// Runs the measurement procedure over an already-loaded catalog: per round,
/// each resolver gets one DoH query per configured domain, then one ping
/// round; records are durably appended as they complete. Per-resolver task
/// chains run sequentially; at most `parallelism` resolvers are in flight.
inline CampaignSummary run_campaign(const CampaignConfig& cfg,
                                    const std::vector<ResolverEndpoint>& catalog,
                                    std::atomic<bool>* stop_flag = nullptr,
                                    std::ostream* log = nullptr) {
  validate_config(cfg);
  if (catalog.empty()) throw ConfigError("resolver catalog is empty");

  RecordWriter writer(cfg.output_path);
  std::string campaign_id = cfg.campaign_id.empty()
                                ? cfg.vantage_label + "-" + detail::now_utc_iso8601()
                                : cfg.campaign_id;

  CampaignSummary summary;
  std::mutex summary_mutex;
  auto stopped = [&] { return stop_flag && stop_flag->load(); };
  auto campaign_start = std::chrono::steady_clock::now();

  dnswire::EncodeOptions encode_opts;
  encode_opts.edns0 = cfg.edns0;

  for (int round = 0;; ++round) {
    if (cfg.rounds > 0 && round >= cfg.rounds) break;
    if (cfg.duration.count() > 0 &&
        std::chrono::steady_clock::now() - campaign_start >= cfg.duration)
      break;
    if (stopped()) break;

    auto round_start = std::chrono::steady_clock::now();
    std::atomic<std::size_t> next{0};
    int workers = std::min<int>(cfg.parallelism, static_cast<int>(catalog.size()));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        while (!stopped()) {
          std::size_t idx = next.fetch_add(1);
          if (idx >= catalog.size()) break;
          const ResolverEndpoint& ep = catalog[idx];
          // Step 1: one DoH query per domain, strictly sequential. The
          // session only matters when transport.reuse is set; otherwise
          // every query forces a fresh connection.
          DohSession session;
          for (const auto& domain : cfg.domains) {
            auto payload = dnswire::encode_query({domain, cfg.qtype, dnswire::kClassIn},
                                                 cfg.query_id, encode_opts);
            MeasurementRecord rec;
            rec.kind = RecordKind::doh;
            rec.campaign_id = campaign_id;
            rec.round = round;
            rec.doh = session.measure(ep, payload, cfg.transport);
            rec.doh.vantage = cfg.vantage_label;
            rec.doh.domain = domain;
            writer.write(rec);
            std::lock_guard<std::mutex> lock(summary_mutex);
            ++summary.doh_records;
            if (rec.doh.outcome == ErrorClass::Success) ++summary.successes;
            else ++summary.failures;
          }
          // Step 2: the ICMP round.
          if (cfg.ping_enabled) {
            MeasurementRecord rec;
            rec.kind = RecordKind::ping;
            rec.campaign_id = campaign_id;
            rec.round = round;
            try {
              rec.ping = ping_host(ep.hostname, cfg.ping, cfg.vantage_label);
            } catch (const InsufficientPrivilegeError& e) {
              rec.ping.host = ep.hostname;
              rec.ping.vantage = cfg.vantage_label;
              rec.ping.ts_utc = detail::now_utc_iso8601();
              rec.ping.detail = e.what();
            }
            writer.write(rec);
            std::lock_guard<std::mutex> lock(summary_mutex);
            ++summary.ping_records;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (stopped()) break;
    ++summary.rounds_completed;
    if (log)
      *log << "round " << round << " complete: " << summary.doh_records << " doh, "
           << summary.ping_records << " ping records\n";

    bool more_rounds = cfg.rounds <= 0 || round + 1 < cfg.rounds;
    if (cfg.duration.count() > 0 &&
        std::chrono::steady_clock::now() - campaign_start >= cfg.duration)
      more_rounds = false;
    if (!more_rounds) break;
    // Sleep out the rest of the round interval, staying responsive to stop.
    auto wake = round_start + cfg.round_interval;
    while (std::chrono::steady_clock::now() < wake && !stopped()) {
      auto remaining = wake - std::chrono::steady_clock::now();
      std::this_thread::sleep_for(
          std::min<std::chrono::steady_clock::duration>(remaining, std::chrono::milliseconds(50)));
    }
  }
  return summary;
}

/// Loads the catalog from the config's paths, then runs the campaign.
inline CampaignSummary run_campaign(const CampaignConfig& cfg,
                                    std::atomic<bool>* stop_flag = nullptr,
                                    std::ostream* log = nullptr) {
  auto catalog =
      load_catalog(cfg.resolver_list_path, cfg.geo_mapping_path, cfg.mainstream_set_path);
  return run_campaign(cfg, catalog, stop_flag, log);
}

}  // namespace dohscope
