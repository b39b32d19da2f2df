// Copyright the dohscope authors. Licensed under the terms of the Apache 2.0 license. See LICENSE in the project root.

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "dohscope/analysis.hpp"

using namespace dohscope;

namespace {

MeasurementRecord doh_record(const std::string& url, const std::string& vantage,
                             ErrorClass outcome, double total_ms = 0) {
  MeasurementRecord rec;
  rec.kind = RecordKind::doh;
  rec.doh.resolver_url = url;
  rec.doh.vantage = vantage;
  rec.doh.domain = "google.com";
  rec.doh.outcome = outcome;
  if (outcome == ErrorClass::Success) {
    rec.doh.timing.total_ms = total_ms;
    rec.doh.rcode = 0;
  }
  return rec;
}

MeasurementRecord ping_record(const std::string& host, const std::string& vantage, double avg,
                              const std::string& method = "icmp") {
  MeasurementRecord rec;
  rec.kind = RecordKind::ping;
  rec.ping.host = host;
  rec.ping.vantage = vantage;
  rec.ping.sent = 4;
  rec.ping.received = 4;
  rec.ping.rtts_ms = {avg, avg, avg, avg};
  rec.ping.average_ms = avg;
  rec.ping.method = method;
  return rec;
}

ResolverEndpoint endpoint(const std::string& url, Region region, bool mainstream = false) {
  std::string err;
  auto ep = make_endpoint(url, &err);
  REQUIRE(ep);
  ep->region = region;
  ep->mainstream = mainstream;
  return *ep;
}

// Brute-force median oracle, kept independent of the implementation path.
double median_oracle(std::vector<double> v) {
  std::sort(v.begin(), v.end(), std::greater<double>());  // descending on purpose
  std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  double hi = v[n / 2 - 1], lo = v[n / 2];
  return (lo + hi) / 2.0;
}

}  // namespace

TEST_CASE("availability follows the any-response rule", "[analysis]") {
  std::vector<MeasurementRecord> records;
  for (int i = 0; i < 5; ++i)
    records.push_back(doh_record("https://down.example/q", "Ohio", ErrorClass::CouldNotConnect));
  CHECK(availability(records, "https://down.example/q", "Ohio") == Availability::unresponsive);

  for (int i = 0; i < 99; ++i)
    records.push_back(doh_record("https://flaky.example/q", "Ohio", ErrorClass::SslTimeout));
  records.push_back(doh_record("https://flaky.example/q", "Ohio", ErrorClass::Success, 50));
  CHECK(availability(records, "https://flaky.example/q", "Ohio") == Availability::available);

  CHECK_THROWS_AS(availability(records, "https://nodata.example/q", "Ohio"), NoDataError);
  CHECK_THROWS_AS(availability(records, "https://down.example/q", "Seoul"), NoDataError);
}

TEST_CASE("eleven resolvers with zero successes are unresponsive everywhere", "[analysis]") {
  const std::vector<std::string> hosts = {
      "dns1.dnscrypt.ca",       "dns2.dnscrypt.ca",  "doh.cleanbrowsing.org",
      "doh.post-factum.tk",     "doh.linuxsec.org",  "doh.tiar.app",
      "jp.tiar.app",            "doh.appliedprivacy.net", "doh.bortzmeyer.fr",
      "doh.chewbacca.meganerd.nl", "doh.powerdns.org",
  };
  const std::vector<std::string> vantages = {"Ohio", "Seoul", "Frankfurt"};
  std::vector<MeasurementRecord> records;
  for (const auto& host : hosts) {
    for (const auto& vantage : vantages) {
      records.push_back(
          doh_record("https://" + host + "/dns-query", vantage, ErrorClass::CouldNotConnect));
      records.push_back(
          doh_record("https://" + host + "/dns-query", vantage, ErrorClass::SslTimeout));
    }
  }
  // One responsive control resolver.
  records.push_back(doh_record("https://dns.google/dns-query", "Ohio", ErrorClass::Success, 12));

  for (const auto& host : hosts) {
    for (const auto& vantage : vantages) {
      CHECK(availability(records, "https://" + host + "/dns-query", vantage) ==
            Availability::unresponsive);
    }
  }
  CHECK(availability(records, "https://dns.google/dns-query", "Ohio") ==
        Availability::available);
}

TEST_CASE("error table percentages follow the printed format", "[analysis]") {
  SECTION("3:1 split") {
    std::vector<MeasurementRecord> records;
    records.push_back(doh_record("https://r.example/q", "v", ErrorClass::CouldNotConnect));
    for (int i = 0; i < 3; ++i)
      records.push_back(doh_record("https://r.example/q", "v", ErrorClass::Success, 10));
    auto rows = error_table(records);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].label == "Couldn't Connect to Server");
    CHECK(rows[0].count == 1);
    CHECK(rows[0].percent == "25%");
    CHECK(rows[1].label == "Successful Responses");
    CHECK(rows[1].percent == "75%");
    CHECK(rows[2].label == "All Errors");
    CHECK(rows[2].count == 1);
  }
  SECTION("single success") {
    std::vector<MeasurementRecord> records = {
        doh_record("https://r.example/q", "v", ErrorClass::Success, 10)};
    auto rows = error_table(records);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].label == "Successful Responses");
    CHECK(rows[0].percent == "100%");
    CHECK(rows[1].count == 0);
  }
  SECTION("empty input") { CHECK(error_table({}).empty()); }
}

TEST_CASE("median response time uses successes only, with the even rule", "[analysis]") {
  std::vector<MeasurementRecord> records;
  for (double v : {1.0, 2.0, 3.0})
    records.push_back(doh_record("https://odd.example/q", "v", ErrorClass::Success, v));
  // Failures never contribute to timing statistics.
  records.push_back(doh_record("https://odd.example/q", "v", ErrorClass::SslTimeout));
  CHECK(median_response_time(records, "https://odd.example/q", "v") == 2.0);

  for (double v : {10.0, 20.0, 30.0, 40.0})
    records.push_back(doh_record("https://even.example/q", "v", ErrorClass::Success, v));
  CHECK(median_response_time(records, "https://even.example/q", "v") == 25.0);

  CHECK_THROWS_AS(median_response_time(records, "https://none.example/q", "v"), NoDataError);
}

TEST_CASE("slow-resolver medians survive to the decimal", "[analysis]") {
  std::vector<MeasurementRecord> records;
  const std::string url = "https://dns.twnic.tw/dns-query";
  for (double v : {31000.0, 31606.61, 33000.0})
    records.push_back(doh_record(url, "Seoul", ErrorClass::Success, v));
  for (double v : {31900.0, 32319.90, 33100.0})
    records.push_back(doh_record(url, "Frankfurt", ErrorClass::Success, v));
  CHECK(median_response_time(records, url, "Seoul") == 31606.61);
  CHECK(median_response_time(records, url, "Frankfurt") == 32319.90);
}

TEST_CASE("median equals the brute-force oracle on random sets", "[analysis][property]") {
  std::mt19937 rng(123);
  std::uniform_int_distribution<int> n_dist(1, 60);
  std::uniform_real_distribution<double> v_dist(0.01, 2000.0);
  for (int iter = 0; iter < 300; ++iter) {
    int n = n_dist(rng);
    std::vector<double> values;
    std::vector<MeasurementRecord> records;
    for (int i = 0; i < n; ++i) {
      values.push_back(v_dist(rng));
      records.push_back(doh_record("https://r.example/q", "v", ErrorClass::Success, values.back()));
    }
    REQUIRE(median_response_time(records, "https://r.example/q", "v") == median_oracle(values));
  }
}

TEST_CASE("regional comparison reproduces the remote-vantage deltas", "[analysis]") {
  // European resolvers measured locally (Frankfurt) and remotely (Seoul).
  const std::vector<std::tuple<std::string, double, double>> fixture = {
      {"https://doh.ffmuc.net/dns-query", 108.92, 1309.88},
      {"https://ibksturm.synology.me/dns-query", 132.66, 1254.47},
      {"https://dns-doh-no-safe-search.dnsforfamily.com/dns-query", 135.88, 1159.70},
      {"https://dnsforge.de/dns-query", 31.86, 1043.03},
      {"https://dns-doh.dnsforfamily.com/dns-query", 155.81, 1162.27},
      {"https://doh.mullvad.net/dns-query", 20.0, 25.0},  // small delta, below top five
  };
  std::vector<MeasurementRecord> records;
  std::vector<ResolverEndpoint> catalog;
  for (const auto& [url, frankfurt, seoul] : fixture) {
    catalog.push_back(endpoint(url, Region::Europe));
    records.push_back(doh_record(url, "Frankfurt", ErrorClass::Success, frankfurt));
    records.push_back(doh_record(url, "Seoul", ErrorClass::Success, seoul));
  }
  catalog.push_back(endpoint("https://dns.twnic.tw/dns-query", Region::Asia));
  records.push_back(doh_record("https://dns.twnic.tw/dns-query", "Frankfurt",
                               ErrorClass::Success, 32319.90));
  records.push_back(
      doh_record("https://dns.twnic.tw/dns-query", "Seoul", ErrorClass::Success, 31606.61));

  auto rows = regional_comparison(records, catalog, Region::Europe, "Frankfurt", "Seoul", 5);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].resolver_url == "https://doh.ffmuc.net/dns-query");
  CHECK(rows[1].resolver_url == "https://ibksturm.synology.me/dns-query");
  CHECK(rows[2].resolver_url == "https://dns-doh-no-safe-search.dnsforfamily.com/dns-query");
  CHECK(rows[3].resolver_url == "https://dnsforge.de/dns-query");
  CHECK(rows[4].resolver_url == "https://dns-doh.dnsforfamily.com/dns-query");
  CHECK(rows[3].median_a == 31.86);
  CHECK(rows[3].median_b == 1043.03);

  SECTION("identical medians keep the row with difference zero") {
    auto all = regional_comparison(records, catalog, Region::Europe, "Frankfurt", "Seoul", 50);
    REQUIRE(all.size() == 6);
    CHECK(all[5].resolver_url == "https://doh.mullvad.net/dns-query");
  }
  SECTION("k larger than the population clamps") {
    auto all = regional_comparison(records, catalog, Region::Asia, "Frankfurt", "Seoul", 99);
    REQUIRE(all.size() == 1);
    CHECK(all[0].resolver_url == "https://dns.twnic.tw/dns-query");
  }
  SECTION("missing vantage raises NoData") {
    CHECK_THROWS_AS(regional_comparison(records, catalog, Region::Europe, "Frankfurt", "Ohio", 5),
                    NoDataError);
  }
}

TEST_CASE("latency ratio flags resolvers past the threshold", "[analysis]") {
  std::vector<MeasurementRecord> records;
  // doh.xfinity.com: median 872 ms response vs 166 ms RTT.
  records.push_back(
      doh_record("https://doh.xfinity.com/dns-query", "Ohio", ErrorClass::Success, 872.0));
  records.push_back(ping_record("doh.xfinity.com", "Ohio", 166.0));
  // A resolver at exactly 3x stays unflagged at the default threshold.
  records.push_back(doh_record("https://ok.example/dns-query", "Ohio", ErrorClass::Success, 30.0));
  records.push_back(ping_record("ok.example", "Ohio", 10.0));
  // A resolver whose pings never answered is unratable.
  records.push_back(
      doh_record("https://noping.example/dns-query", "Ohio", ErrorClass::Success, 100.0));

  auto summaries = summarize(records);
  auto report = latency_ratio_flags(summaries, 4.0);
  REQUIRE(report.flagged.size() == 1);
  CHECK(report.flagged[0].resolver_url == "https://doh.xfinity.com/dns-query");
  CHECK(report.flagged[0].ratio == Catch::Approx(5.253).epsilon(0.001));
  REQUIRE(report.unratable.size() == 1);
  CHECK(report.unratable[0].find("noping.example") != std::string::npos);
}

TEST_CASE("summaries conserve attempts and never rate unavailable resolvers",
          "[analysis][property]") {
  std::mt19937 rng(99);
  std::vector<MeasurementRecord> records;
  for (int r = 0; r < 40; ++r) {
    std::string url = "https://r" + std::to_string(rng() % 12) + ".example/q";
    ErrorClass outcome = kAllErrorClasses[rng() % 10];
    records.push_back(doh_record(url, rng() % 2 ? "Ohio" : "Seoul", outcome,
                                 static_cast<double>(rng() % 1000)));
  }
  auto summaries = summarize(records);
  long long attempts = 0;
  for (const auto& s : summaries) {
    long long histogram_sum = 0;
    for (const auto& [cls, count] : s.error_histogram) {
      CHECK(cls != ErrorClass::Success);
      histogram_sum += count;
    }
    CHECK(s.successes + histogram_sum == s.total_attempts);
    CHECK(s.available == (s.successes >= 1));
    if (!s.available) CHECK_FALSE(s.median_response_ms.has_value());
    attempts += s.total_attempts;
  }
  CHECK(attempts == 40);

  auto rows = error_table(records);
  REQUIRE(rows.size() >= 2);
  long long success_row = rows[rows.size() - 2].count;
  long long error_row = rows[rows.size() - 1].count;
  CHECK(success_row + error_row == 40);

  // Unavailable resolvers never appear in rankings or ratio flags.
  auto flags = latency_ratio_flags(summaries, 0.0);
  for (const auto& f : flags.flagged) {
    auto s = std::find_if(summaries.begin(), summaries.end(), [&](const ResolverSummary& x) {
      return x.resolver_url == f.resolver_url && x.vantage == f.vantage;
    });
    REQUIRE(s != summaries.end());
    CHECK(s->available);
  }
}

TEST_CASE("rank_resolvers sorts ascending with lexicographic ties", "[analysis]") {
  std::vector<MeasurementRecord> records;
  records.push_back(doh_record("https://a.example/q", "Ohio", ErrorClass::Success, 10));
  records.push_back(doh_record("https://b.example/q", "Ohio", ErrorClass::Success, 5));
  records.push_back(doh_record("https://c.example/q", "Ohio", ErrorClass::Success, 20));
  records.push_back(doh_record("https://down.example/q", "Ohio", ErrorClass::CouldNotConnect));
  auto summaries = summarize(records);

  auto top2 = rank_resolvers(summaries, "Ohio", 2);
  REQUIRE(top2.size() == 2);
  CHECK(top2[0].first == "https://b.example/q");
  CHECK(top2[1].first == "https://a.example/q");

  CHECK(rank_resolvers(summaries, "Ohio", 0).empty());
  auto all = rank_resolvers(summaries, "Ohio", 99);
  CHECK(all.size() == 3);  // the unavailable resolver never ranks
  CHECK_THROWS_AS(rank_resolvers(summaries, "Nowhere", 5), NoDataError);
}

TEST_CASE("a non-mainstream resolver can outrank the big two at every vantage",
          "[analysis]") {
  const std::vector<std::string> vantages = {"Ohio", "Seoul", "Frankfurt"};
  std::vector<MeasurementRecord> records;
  for (const auto& v : vantages) {
    records.push_back(doh_record("https://dns9.quad9.net/dns-query", v, ErrorClass::Success, 7));
    records.push_back(doh_record("https://ordns.he.net/dns-query", v, ErrorClass::Success, 8));
    records.push_back(doh_record("https://dns.google/dns-query", v, ErrorClass::Success, 10));
    records.push_back(
        doh_record("https://dns.cloudflare.com/dns-query", v, ErrorClass::Success, 11));
  }
  auto summaries = summarize(records);
  for (const auto& v : vantages) {
    auto top = rank_resolvers(summaries, v, 5);
    auto index_of = [&](const std::string& url) {
      for (std::size_t i = 0; i < top.size(); ++i)
        if (top[i].first == url) return i;
      return top.size();
    };
    CHECK(index_of("https://ordns.he.net/dns-query") <
          index_of("https://dns.google/dns-query"));
    CHECK(index_of("https://ordns.he.net/dns-query") <
          index_of("https://dns.cloudflare.com/dns-query"));
  }
}

TEST_CASE("distribution export truncates with conservation", "[analysis]") {
  std::vector<MeasurementRecord> records;
  for (double v : {100.0, 400.0, 600.0})
    records.push_back(doh_record("https://r.example/q", "Ohio", ErrorClass::Success, v));
  std::vector<ResolverEndpoint> catalog = {endpoint("https://r.example/q", Region::Europe, true)};

  SECTION("default 500 ms cutoff") {
    auto csv = distribution_export_csv(records, catalog);
    auto lines = detail::split(detail::trim(csv), '\n');
    REQUIRE(lines.size() == 3);  // header + two retained samples
    auto first = detail::split(lines[1], ',');
    REQUIRE(first.size() == 11);
    CHECK(first[0] == "Ohio");
    CHECK(first[1] == "Europe");
    CHECK(first[3] == "true");
    CHECK(first[4] == "dns");
    CHECK(first[5] == "3");   // total
    CHECK(first[6] == "2");   // retained
    CHECK(first[7] == "1");   // overflow
    CHECK(first[9] == "100"); // sorted ascending
    auto second = detail::split(lines[2], ',');
    CHECK(second[9] == "400");
  }
  SECTION("no cutoff exports everything") {
    DistributionExportOptions opts;
    opts.truncate_at_ms.reset();
    auto csv = distribution_export_csv(records, catalog, opts);
    auto lines = detail::split(detail::trim(csv), '\n');
    CHECK(lines.size() == 4);
  }
  SECTION("all samples above the cutoff leave a countline") {
    DistributionExportOptions opts;
    opts.truncate_at_ms = 50.0;
    auto csv = distribution_export_csv(records, catalog, opts);
    auto lines = detail::split(detail::trim(csv), '\n');
    REQUIRE(lines.size() == 2);
    auto row = detail::split(lines[1], ',');
    CHECK(row[6] == "0");
    CHECK(row[7] == "3");
    CHECK(row[9].empty());
  }
}

TEST_CASE("distribution export keeps ping rows only where ping data exists", "[analysis]") {
  std::vector<MeasurementRecord> records;
  records.push_back(doh_record("https://withping.example/q", "Ohio", ErrorClass::Success, 42));
  records.push_back(ping_record("withping.example", "Ohio", 7.0));
  records.push_back(doh_record("https://noping.example/q", "Ohio", ErrorClass::Success, 55));
  // tcp-fallback rounds never blend into the icmp distribution.
  records.push_back(ping_record("noping.example", "Ohio", 3.0, "tcp-fallback"));
  std::vector<ResolverEndpoint> catalog = {endpoint("https://withping.example/q", Region::Asia),
                                           endpoint("https://noping.example/q", Region::Asia)};
  auto csv = distribution_export_csv(records, catalog);
  CHECK(csv.find("withping.example/q,false,ping") != std::string::npos);
  CHECK(csv.find("noping.example/q,false,ping") == std::string::npos);
  CHECK(csv.find("noping.example/q,false,dns") != std::string::npos);
}

TEST_CASE("export counts match an independent recount", "[analysis][property]") {
  std::mt19937 rng(4242);
  std::vector<MeasurementRecord> records;
  std::map<std::string, std::pair<long long, long long>> expected;  // url -> {total, retained}
  for (int r = 0; r < 3; ++r) {
    std::string url = "https://r" + std::to_string(r) + ".example/q";
    int n = 5 + static_cast<int>(rng() % 30);
    for (int i = 0; i < n; ++i) {
      double v = static_cast<double>(rng() % 10000) / 10.0;  // 0..1000 ms
      records.push_back(doh_record(url, "Ohio", ErrorClass::Success, v));
      ++expected[url].first;
      if (v <= 500.0) ++expected[url].second;
    }
    records.push_back(doh_record(url, "Ohio", ErrorClass::SslTimeout));  // not a sample
  }
  auto csv = distribution_export_csv(records, {});
  auto lines = detail::split(detail::trim(csv), '\n');
  std::map<std::string, long long> rows_per_url;
  long long data_rows = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    auto fields = detail::split(lines[i], ',');
    REQUIRE(fields.size() == 11);
    if (fields[9].empty()) continue;  // countline
    CHECK(std::stod(fields[9]) <= 500.0);
    ++rows_per_url[fields[2]];
    ++data_rows;
    // retained + overflow == total on every row
    CHECK(std::stoll(fields[6]) + std::stoll(fields[7]) == std::stoll(fields[5]));
  }
  long long total_expected_rows = 0;
  for (const auto& [url, counts] : expected) {
    CHECK(rows_per_url[url] == counts.second);
    total_expected_rows += counts.second;
  }
  CHECK(data_rows == total_expected_rows);
}
