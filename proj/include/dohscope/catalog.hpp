// Copyright the dohscope authors. Licensed under the terms of the Apache 2.0 license. See LICENSE in the project root.

#pragma once

#include <arpa/inet.h>

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dohscope/detail/util.hpp"

namespace dohscope {

enum class Region { NorthAmerica, Asia, Europe, Unknown };

inline const char* to_string(Region r) {
  switch (r) {
    case Region::NorthAmerica: return "NorthAmerica";
    case Region::Asia: return "Asia";
    case Region::Europe: return "Europe";
    case Region::Unknown: return "Unknown";
  }
  return "Unknown";
}

inline std::optional<Region> region_from_string(std::string_view s) {
  if (detail::iequals(s, "NorthAmerica")) return Region::NorthAmerica;
  if (detail::iequals(s, "Asia")) return Region::Asia;
  if (detail::iequals(s, "Europe")) return Region::Europe;
  if (detail::iequals(s, "Unknown")) return Region::Unknown;
  return std::nullopt;
}

/// A DoH endpoint: normalized https URL plus measurement metadata.
struct ResolverEndpoint {
  std::string url;       // normalized: lowercase host, default port elided
  std::string hostname;  // derived from url
  Region region = Region::Unknown;
  bool mainstream = false;
  std::string label;     // short display name, defaults to hostname

  friend bool operator==(const ResolverEndpoint& a, const ResolverEndpoint& b) {
    return a.url == b.url && a.hostname == b.hostname && a.region == b.region &&
           a.mainstream == b.mainstream && a.label == b.label;
  }
};

struct ParseDiagnostic {
  int line = 0;
  std::string text;
  std::string reason;
};

struct CatalogParseResult {
  std::vector<ResolverEndpoint> endpoints;
  std::vector<ParseDiagnostic> diagnostics;  // per-line InvalidUrl reports
};

class CatalogError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

namespace catalog_detail {

struct UrlParts {
  std::string host;
  std::uint16_t port = 443;
  std::string path_and_query;
};

// Minimal https URL parser; enough for resolver endpoints.
inline std::optional<UrlParts> parse_https_url(std::string_view url, std::string* error) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string_view::npos) {
    *error = "missing scheme";
    return std::nullopt;
  }
  if (!detail::iequals(url.substr(0, scheme_end), "https")) {
    *error = "scheme must be https";
    return std::nullopt;
  }
  std::string_view rest = url.substr(scheme_end + 3);
  auto path_start = rest.find_first_of("/?");
  UrlParts parts;
  std::string_view authority = path_start == std::string_view::npos ? rest : rest.substr(0, path_start);
  parts.path_and_query =
      path_start == std::string_view::npos ? "/" : std::string(rest.substr(path_start));
  if (parts.path_and_query[0] == '?') parts.path_and_query = "/" + parts.path_and_query;
  auto colon = authority.rfind(':');
  if (colon != std::string_view::npos) {
    std::string_view port_sv = authority.substr(colon + 1);
    if (port_sv.empty() || port_sv.find_first_not_of("0123456789") != std::string_view::npos) {
      *error = "invalid port";
      return std::nullopt;
    }
    long port = std::strtol(std::string(port_sv).c_str(), nullptr, 10);
    if (port <= 0 || port > 65535) {
      *error = "invalid port";
      return std::nullopt;
    }
    parts.port = static_cast<std::uint16_t>(port);
    authority = authority.substr(0, colon);
  }
  if (authority.empty()) {
    *error = "empty host";
    return std::nullopt;
  }
  parts.host = detail::to_lower(authority);
  return parts;
}

inline std::string normalize(const UrlParts& parts) {
  std::string url = "https://" + parts.host;
  if (parts.port != 443) url += ":" + std::to_string(parts.port);
  url += parts.path_and_query;
  return url;
}

}  // namespace catalog_detail

/// Builds an endpoint from one URL string; returns nullopt (with a reason)
/// for anything that is not a usable https URL.
inline std::optional<ResolverEndpoint> make_endpoint(std::string_view url, std::string* error) {
  std::string why;
  auto parts = catalog_detail::parse_https_url(detail::trim(url), &why);
  if (!parts) {
    if (error) *error = why;
    return std::nullopt;
  }
  ResolverEndpoint ep;
  ep.url = catalog_detail::normalize(*parts);
  ep.hostname = parts->host;
  ep.label = parts->host;
  return ep;
}

/// Parses a line-oriented resolver list: one URL per non-empty, non-comment
/// ('#') line. Exact duplicate URLs (after normalization) collapse to the
/// first occurrence; order is preserved. Bad lines become diagnostics, never
/// errors.
inline CatalogParseResult parse_resolver_list(std::string_view text) {
  CatalogParseResult result;
  std::unordered_set<std::string> seen;
  int line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t eol = text.find('\n', start);
    std::string_view line = eol == std::string_view::npos ? text.substr(start)
                                                          : text.substr(start, eol - start);
    ++line_no;
    std::string_view trimmed = detail::trim(line);
    if (!trimmed.empty() && trimmed[0] != '#') {
      std::string why;
      auto ep = make_endpoint(trimmed, &why);
      if (!ep) {
        result.diagnostics.push_back({line_no, std::string(trimmed), "InvalidUrl: " + why});
      } else if (seen.insert(ep->url).second) {
        result.endpoints.push_back(std::move(*ep));
      }
    }
    if (eol == std::string_view::npos) break;
    start = eol + 1;
  }
  return result;
}

/// Inverse of parse_resolver_list for valid catalogs: one URL per line.
inline std::string serialize_catalog(const std::vector<ResolverEndpoint>& endpoints) {
  std::string out;
  for (const auto& ep : endpoints) {
    out += ep.url;
    out += '\n';
  }
  return out;
}

/// Pluggable hostname/network -> region mapping loaded from a CSV file with
/// header `key,region`. Keys are hostnames (exact, case-insensitive) or IPv4
/// CIDR networks matched against IP-literal hostnames.
class GeoMapping {
public:
  GeoMapping() = default;

  static GeoMapping from_csv(std::string_view csv, std::string source = "") {
    GeoMapping m;
    m.source_ = std::move(source);
    int line_no = 0;
    std::size_t start = 0;
    while (start <= csv.size()) {
      std::size_t eol = csv.find('\n', start);
      std::string_view line =
          eol == std::string_view::npos ? csv.substr(start) : csv.substr(start, eol - start);
      ++line_no;
      std::string_view trimmed = detail::trim(line);
      if (!trimmed.empty() && trimmed[0] != '#') {
        auto fields = detail::split(trimmed, ',');
        if (fields.size() == 2) {
          std::string key = detail::to_lower(detail::trim(fields[0]));
          auto region = region_from_string(detail::trim(fields[1]));
          if (region && key != "key") {
            auto slash = key.find('/');
            if (slash != std::string::npos) {
              CidrRule rule;
              if (parse_cidr(key, &rule)) {
                rule.region = *region;
                m.cidrs_.push_back(rule);
              }
            } else {
              m.hosts_[key] = *region;
            }
          }
        }
      }
      if (eol == std::string_view::npos) break;
      start = eol + 1;
    }
    return m;
  }

  static GeoMapping from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CatalogError("cannot open geo mapping file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_csv(ss.str(), path);
  }

  /// Pure lookup: hostname row first, then CIDR rows for IPv4 literals,
  /// otherwise Unknown.
  Region lookup(const std::string& hostname) const {
    auto it = hosts_.find(detail::to_lower(hostname));
    if (it != hosts_.end()) return it->second;
    in_addr addr{};
    if (inet_pton(AF_INET, hostname.c_str(), &addr) == 1) {
      std::uint32_t ip = ntohl(addr.s_addr);
      for (const auto& rule : cidrs_) {
        if ((ip & rule.mask) == rule.network) return rule.region;
      }
    }
    return Region::Unknown;
  }

  const std::string& source() const { return source_; }
  std::size_t size() const { return hosts_.size() + cidrs_.size(); }

private:
  struct CidrRule {
    std::uint32_t network = 0;
    std::uint32_t mask = 0;
    Region region = Region::Unknown;
  };

  static bool parse_cidr(const std::string& key, CidrRule* rule) {
    auto slash = key.find('/');
    std::string net = key.substr(0, slash);
    int bits = std::atoi(key.c_str() + slash + 1);
    in_addr addr{};
    if (bits < 0 || bits > 32 || inet_pton(AF_INET, net.c_str(), &addr) != 1) return false;
    rule->mask = bits == 0 ? 0 : (0xFFFFFFFFu << (32 - bits));
    rule->network = ntohl(addr.s_addr) & rule->mask;
    return true;
  }

  std::unordered_map<std::string, Region> hosts_;
  std::vector<CidrRule> cidrs_;
  std::string source_;
};

inline ResolverEndpoint annotate_region(ResolverEndpoint endpoint, const GeoMapping& mapping) {
  endpoint.region = mapping.lookup(endpoint.hostname);
  return endpoint;
}

/// Hostname set of providers shipped as defaults in major browsers; data,
/// not code, because browser defaults change over time.
class MainstreamSet {
public:
  MainstreamSet() = default;

  static MainstreamSet from_text(std::string_view text) {
    MainstreamSet set;
    for (const auto& line : detail::split(text, '\n')) {
      std::string_view trimmed = detail::trim(line);
      if (!trimmed.empty() && trimmed[0] != '#') set.hosts_.insert(detail::to_lower(trimmed));
    }
    return set;
  }

  static MainstreamSet from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CatalogError("cannot open mainstream set file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
  }

  bool contains(const std::string& hostname) const {
    return hosts_.count(detail::to_lower(hostname)) > 0;
  }
  std::size_t size() const { return hosts_.size(); }

private:
  std::unordered_set<std::string> hosts_;
};

inline ResolverEndpoint tag_mainstream(ResolverEndpoint endpoint, const MainstreamSet& set) {
  endpoint.mainstream = set.contains(endpoint.hostname);
  return endpoint;
}

/// Convenience: parse + annotate + tag from files. Diagnostics, if any, are
/// appended to *diagnostics when provided.
inline std::vector<ResolverEndpoint> load_catalog(const std::string& resolver_list_path,
                                                  const std::string& geo_mapping_path = "",
                                                  const std::string& mainstream_set_path = "",
                                                  std::vector<ParseDiagnostic>* diagnostics = nullptr) {
  std::ifstream in(resolver_list_path);
  if (!in) throw CatalogError("cannot open resolver list: " + resolver_list_path);
  std::stringstream ss;
  ss << in.rdbuf();
  auto parsed = parse_resolver_list(ss.str());
  if (diagnostics)
    diagnostics->insert(diagnostics->end(), parsed.diagnostics.begin(), parsed.diagnostics.end());
  GeoMapping geo;
  if (!geo_mapping_path.empty()) geo = GeoMapping::from_file(geo_mapping_path);
  MainstreamSet mainstream;
  if (!mainstream_set_path.empty()) mainstream = MainstreamSet::from_file(mainstream_set_path);
  for (auto& ep : parsed.endpoints) {
    ep = tag_mainstream(annotate_region(std::move(ep), geo), mainstream);
  }
  return std::move(parsed.endpoints);
}

}  // namespace dohscope
