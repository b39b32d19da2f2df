// Copyright the dohscope authors. Licensed under the terms of the Apache 2.0 license. See LICENSE in the project root.
//
// dohscope: measure public DoH resolver availability and response times,
// and reproduce the derived analyses from persisted measurement records.

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <thread>

#include <CLI11.hpp>

#include "dohscope/analysis.hpp"
#include "dohscope/campaign.hpp"
#include "dohscope/catalog.hpp"
#include "dohscope/mock/doh_server.hpp"
#include "dohscope/records.hpp"

namespace {

std::atomic<bool> g_stop{false};

void handle_signal(int) { g_stop.store(true); }

void write_output(const std::string& text, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path);
  if (!out) throw dohscope::IoError("cannot open output file: " + path);
  out << text;
}

std::vector<dohscope::MeasurementRecord> load_inputs(const std::vector<std::string>& inputs) {
  std::vector<dohscope::MeasurementRecord> records;
  for (const auto& path : inputs) {
    auto loaded = dohscope::load_records(path);
    for (const auto& warning : loaded.warnings) std::cerr << "warning: " << warning << "\n";
    records.insert(records.end(), std::make_move_iterator(loaded.records.begin()),
                   std::make_move_iterator(loaded.records.end()));
  }
  return records;
}

struct CatalogArgs {
  std::string resolvers, geo, mainstream;

  void attach(CLI::App* cmd, bool required) {
    auto* opt = cmd->add_option("--resolvers", resolvers, "Resolver list file (one URL per line)");
    if (required) opt->required();
    cmd->add_option("--geo", geo, "Region mapping CSV (key,region)");
    cmd->add_option("--mainstream", mainstream, "Mainstream hostname set file");
  }

  std::vector<dohscope::ResolverEndpoint> load(std::vector<dohscope::ParseDiagnostic>* diags) const {
    if (resolvers.empty()) return {};
    return dohscope::load_catalog(resolvers, geo, mainstream, diags);
  }
};

}  // namespace

int main(int argc, char** argv) {
  using namespace dohscope;

  CLI::App app{"DoH resolver availability and response-time measurement"};
  app.require_subcommand(1);

  // ---- measure ------------------------------------------------------------
  auto* measure = app.add_subcommand("measure", "Run a measurement campaign");
  std::string config_path;
  CatalogArgs measure_catalog;
  std::string vantage, output, method;
  int rounds = -1, parallelism = -1;
  double interval_s = -1, duration_s = -1, connect_timeout_s = -1, total_timeout_s = -1;
  std::vector<std::string> domains;
  std::string ca_file, campaign_id;
  int ping_count = -1, query_id = -1, qtype = -1;
  double ping_interval_s = -1, ping_timeout_s = -1;
  bool no_ping = false, ping_fallback = false, use_get = false, reuse = false, no_http2 = false,
       edns0 = false;
  measure->add_option("--config", config_path, "Campaign config file (TOML-style key/value)");
  measure_catalog.attach(measure, false);
  measure->add_option("--domain", domains, "Query domain (repeatable; overrides config)");
  measure->add_option("--vantage", vantage, "Vantage label recorded on every measurement");
  measure->add_option("--rounds", rounds, "Number of rounds to run");
  measure->add_option("--duration-s", duration_s, "Stop after this many seconds");
  measure->add_option("--interval-s", interval_s, "Round interval in seconds");
  measure->add_option("--parallelism", parallelism, "Concurrent resolver chains");
  measure->add_option("--connect-timeout-s", connect_timeout_s, "Connect deadline");
  measure->add_option("--timeout-s", total_timeout_s, "Total per-query deadline");
  measure->add_option("--ca-file", ca_file, "Trust anchor file for TLS verification");
  measure->add_flag("--get", use_get, "Use GET (dns= parameter) instead of POST");
  measure->add_flag("--reuse", reuse, "Allow connection reuse (warm-path studies)");
  measure->add_flag("--no-http2", no_http2, "Do not offer HTTP/2");
  measure->add_flag("--edns0", edns0, "Append a minimal EDNS(0) OPT record");
  measure->add_option("--query-id", query_id, "DNS message id for payloads (default 0)");
  measure->add_option("--qtype", qtype, "Query type code (default 1 = A)");
  measure->add_flag("--no-ping", no_ping, "Skip the ICMP round");
  measure->add_flag("--ping-fallback", ping_fallback, "Allow TCP connect-time fallback");
  measure->add_option("--ping-count", ping_count, "Probes per ICMP round");
  measure->add_option("--ping-interval-s", ping_interval_s, "Spacing between probes");
  measure->add_option("--ping-timeout-s", ping_timeout_s, "Per-probe reply deadline");
  measure->add_option("--campaign-id", campaign_id, "Campaign identifier on every record");
  measure->add_option("--output", output, "Output JSONL path (or set DOHSCOPE_OUTPUT)");

  // ---- catalog ------------------------------------------------------------
  auto* catalog_cmd = app.add_subcommand("catalog", "Parse, annotate, and print the catalog");
  CatalogArgs catalog_args;
  catalog_args.attach(catalog_cmd, true);
  std::string catalog_output;
  catalog_cmd->add_option("--output", catalog_output, "Write CSV here instead of stdout");

  // ---- analyze ------------------------------------------------------------
  auto* analyze = app.add_subcommand("analyze", "Compute derived statistics from records");
  analyze->require_subcommand(1);
  std::vector<std::string> inputs;
  std::string analyze_output;
  CatalogArgs analyze_catalog;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--input", inputs, "Input JSONL file (repeatable; files are merged)")
        ->required();
    cmd->add_option("--output", analyze_output, "Write CSV here instead of stdout");
    analyze_catalog.attach(cmd, false);
  };

  auto* errors_cmd = analyze->add_subcommand("errors", "Error class tabulation");
  add_common(errors_cmd);

  auto* medians_cmd = analyze->add_subcommand("medians", "Per-resolver summary table");
  add_common(medians_cmd);

  auto* compare_cmd = analyze->add_subcommand("compare", "Cross-vantage median differences");
  add_common(compare_cmd);
  std::string region_name, vantage_a, vantage_b;
  std::size_t top_k = 5;
  compare_cmd->add_option("--region", region_name, "Resolver region to compare")->required();
  compare_cmd->add_option("--vantage-a", vantage_a, "First vantage label")->required();
  compare_cmd->add_option("--vantage-b", vantage_b, "Second vantage label")->required();
  compare_cmd->add_option("-k,--top", top_k, "Rows to keep");

  auto* flags_cmd = analyze->add_subcommand("flags", "Latency-ratio outliers");
  add_common(flags_cmd);
  double threshold = 4.0;
  flags_cmd->add_option("--threshold", threshold, "Flag ratio threshold");

  auto* rank_cmd = analyze->add_subcommand("rank", "Fastest resolvers by median");
  add_common(rank_cmd);
  std::string rank_vantage;
  std::size_t rank_k = 5;
  rank_cmd->add_option("--vantage", rank_vantage, "Vantage to rank at")->required();
  rank_cmd->add_option("-k,--top", rank_k, "Rows to keep");

  auto* export_cmd = analyze->add_subcommand("export", "Distribution export for plotting");
  add_common(export_cmd);
  double truncate_ms = 500.0;
  bool no_truncate = false;
  export_cmd->add_option("--truncate-ms", truncate_ms, "Truncation cutoff (default 500)");
  export_cmd->add_flag("--no-truncate", no_truncate, "Export the full distributions");

  auto* avail_cmd = analyze->add_subcommand("availability", "Per-(resolver, vantage) verdicts");
  add_common(avail_cmd);

  // ---- mock-server ---------------------------------------------------------
  auto* mock_cmd = app.add_subcommand("mock-server", "Run the loopback DoH test server");
  std::uint16_t mock_port = 0;
  std::string mock_mode = "ok", cert_path, key_path, cert_out;
  int mock_status = 500, mock_delay = 0;
  bool mock_h2 = false, mock_tls12 = false;
  mock_cmd->add_option("--port", mock_port, "Listen port (0 = ephemeral)");
  mock_cmd->add_option("--mode", mock_mode,
                       "ok|http-status|garbage-body|wrong-content-type|wrong-id|empty-close|"
                       "hang|tls-legacy|h2-garbage");
  mock_cmd->add_option("--status", mock_status, "Status code for http-status mode");
  mock_cmd->add_option("--delay-ms", mock_delay, "Response delay");
  mock_cmd->add_flag("--h2", mock_h2, "Offer HTTP/2 via ALPN");
  mock_cmd->add_flag("--tls12", mock_tls12, "Cap the server at TLS 1.2");
  mock_cmd->add_option("--cert", cert_path, "PEM server certificate");
  mock_cmd->add_option("--key", key_path, "PEM private key");
  mock_cmd->add_option("--cert-out", cert_out, "Write the server certificate PEM here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (*measure) {
      CampaignConfig cfg;
      if (!config_path.empty()) {
        cfg = load_campaign_config(config_path);
      } else if (const char* env = std::getenv("DOHSCOPE_OUTPUT"); env && *env) {
        cfg.output_path = env;
      }
      if (!measure_catalog.resolvers.empty()) cfg.resolver_list_path = measure_catalog.resolvers;
      if (!measure_catalog.geo.empty()) cfg.geo_mapping_path = measure_catalog.geo;
      if (!measure_catalog.mainstream.empty())
        cfg.mainstream_set_path = measure_catalog.mainstream;
      if (!domains.empty()) cfg.domains = domains;
      if (!vantage.empty()) cfg.vantage_label = vantage;
      if (rounds >= 0) cfg.rounds = rounds;
      if (duration_s >= 0)
        cfg.duration = std::chrono::milliseconds(static_cast<long long>(duration_s * 1000));
      if (interval_s >= 0)
        cfg.round_interval = std::chrono::milliseconds(static_cast<long long>(interval_s * 1000));
      if (parallelism > 0) cfg.parallelism = parallelism;
      if (connect_timeout_s >= 0)
        cfg.transport.connect_timeout_ms = static_cast<long>(connect_timeout_s * 1000);
      if (total_timeout_s >= 0)
        cfg.transport.total_timeout_ms = static_cast<long>(total_timeout_s * 1000);
      if (!ca_file.empty()) cfg.transport.ca_file = ca_file;
      if (use_get) cfg.transport.method = HttpMethod::get;
      if (reuse) cfg.transport.reuse = true;
      if (no_http2) cfg.transport.offer_http2 = false;
      if (edns0) cfg.edns0 = true;
      if (query_id >= 0) cfg.query_id = static_cast<std::uint16_t>(query_id);
      if (qtype >= 0) cfg.qtype = static_cast<std::uint16_t>(qtype);
      if (no_ping) cfg.ping_enabled = false;
      if (ping_fallback) cfg.ping.allow_tcp_fallback = true;
      if (ping_count > 0) cfg.ping.count = ping_count;
      if (ping_interval_s >= 0)
        cfg.ping.interval = std::chrono::milliseconds(static_cast<long long>(ping_interval_s * 1000));
      if (ping_timeout_s >= 0)
        cfg.ping.per_probe_timeout =
            std::chrono::milliseconds(static_cast<long long>(ping_timeout_s * 1000));
      if (!campaign_id.empty()) cfg.campaign_id = campaign_id;
      if (!output.empty()) cfg.output_path = output;
      if (cfg.resolver_list_path.empty())
        throw ConfigError("a resolver list is required (--resolvers or config file)");

      std::signal(SIGINT, handle_signal);
      std::signal(SIGTERM, handle_signal);
      auto summary = run_campaign(cfg, &g_stop, &std::cerr);
      std::cout << "rounds completed: " << summary.rounds_completed << "\n"
                << "doh records:     " << summary.doh_records << "\n"
                << "ping records:    " << summary.ping_records << "\n"
                << "successes:       " << summary.successes << "\n"
                << "failures:        " << summary.failures << "\n"
                << "output:          " << cfg.output_path << "\n";
      return 0;
    }

    if (*catalog_cmd) {
      std::vector<ParseDiagnostic> diags;
      auto catalog = catalog_args.load(&diags);
      for (const auto& d : diags)
        std::cerr << "line " << d.line << ": " << d.reason << ": " << d.text << "\n";
      std::string csv = "url,hostname,region,mainstream,label\n";
      int na = 0, asia = 0, eu = 0, unknown = 0;
      for (const auto& ep : catalog) {
        csv += detail::csv_escape(ep.url) + "," + ep.hostname + "," + to_string(ep.region) + "," +
               (ep.mainstream ? "true" : "false") + "," + detail::csv_escape(ep.label) + "\n";
        switch (ep.region) {
          case Region::NorthAmerica: ++na; break;
          case Region::Asia: ++asia; break;
          case Region::Europe: ++eu; break;
          default: ++unknown;
        }
      }
      write_output(csv, catalog_output);
      std::cerr << catalog.size() << " endpoints (NorthAmerica " << na << ", Asia " << asia
                << ", Europe " << eu << ", Unknown " << unknown << ")\n";
      return 0;
    }

    if (*analyze) {
      auto records = load_inputs(inputs);
      std::vector<ParseDiagnostic> diags;
      auto catalog = analyze_catalog.load(&diags);

      if (*errors_cmd) {
        write_output(error_table_csv(error_table(records)), analyze_output);
      } else if (*medians_cmd) {
        write_output(summaries_csv(summarize(records, catalog)), analyze_output);
      } else if (*compare_cmd) {
        auto region = region_from_string(region_name);
        if (!region) throw ConfigError("unknown region: " + region_name);
        auto rows = regional_comparison(records, catalog, *region, vantage_a, vantage_b, top_k);
        write_output(comparison_csv(rows, vantage_a, vantage_b), analyze_output);
      } else if (*flags_cmd) {
        auto report = latency_ratio_flags(summarize(records, catalog), threshold);
        write_output(flags_csv(report), analyze_output);
      } else if (*rank_cmd) {
        auto rows = rank_resolvers(summarize(records, catalog), rank_vantage, rank_k);
        write_output(rank_csv(rows), analyze_output);
      } else if (*export_cmd) {
        DistributionExportOptions opts;
        opts.truncate_at_ms = no_truncate ? std::nullopt : std::optional<double>(truncate_ms);
        write_output(distribution_export_csv(records, catalog, opts), analyze_output);
      } else if (*avail_cmd) {
        auto summaries = summarize(records, catalog);
        std::string csv = "resolver_url,vantage,verdict,attempts,successes\n";
        for (const auto& s : summaries) {
          csv += detail::csv_escape(s.resolver_url) + "," + detail::csv_escape(s.vantage) + "," +
                 (s.available ? "available" : "unresponsive") + "," +
                 std::to_string(s.total_attempts) + "," + std::to_string(s.successes) + "\n";
        }
        write_output(csv, analyze_output);
      }
      return 0;
    }

    if (*mock_cmd) {
      using namespace dohscope::mock;
      MockDohServerConfig cfg;
      cfg.port = mock_port;
      cfg.status_code = mock_status;
      cfg.response_delay_ms = mock_delay;
      cfg.allow_h2 = mock_h2;
      cfg.pin_tls12 = mock_tls12;
      static const std::map<std::string, MockMode> modes = {
          {"ok", MockMode::ok},
          {"http-status", MockMode::http_status},
          {"garbage-body", MockMode::garbage_body},
          {"wrong-content-type", MockMode::wrong_content_type},
          {"wrong-id", MockMode::wrong_id},
          {"empty-close", MockMode::empty_close},
          {"hang", MockMode::hang},
          {"tls-legacy", MockMode::tls_legacy_only},
          {"h2-garbage", MockMode::h2_garbage},
      };
      auto it = modes.find(mock_mode);
      if (it == modes.end()) throw ConfigError("unknown mock mode: " + mock_mode);
      cfg.mode = it->second;
      if (!cert_path.empty() && !key_path.empty()) {
        std::ifstream c(cert_path), k(key_path);
        if (!c || !k) throw IoError("cannot read certificate or key file");
        std::stringstream cs, ks;
        cs << c.rdbuf();
        ks << k.rdbuf();
        cfg.identity = {cs.str(), ks.str()};
      }
      MockDohServer server(cfg);
      if (!server.start()) throw IoError("mock server failed to start");
      if (!cert_out.empty()) {
        std::ofstream out(cert_out);
        out << server.identity().cert_pem;
      }
      std::cout << "mock DoH server listening on " << server.url() << " (mode " << mock_mode
                << ")" << std::endl;
      std::signal(SIGINT, handle_signal);
      std::signal(SIGTERM, handle_signal);
      while (!g_stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      server.stop();
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
