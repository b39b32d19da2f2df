// Copyright the dohscope authors. Licensed under the terms of the Apache 2.0 license. See LICENSE in the project root.

#pragma once

#include <openssl/bio.h>
#include <openssl/evp.h>
#include <openssl/pem.h>
#include <openssl/x509.h>
#include <openssl/x509v3.h>
#include <unistd.h>

#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>

namespace dohscope::mock {

struct PemIdentity {
  std::string cert_pem;
  std::string key_pem;
};

namespace cert_detail {

struct EvpKeyDeleter {
  void operator()(EVP_PKEY* k) const { EVP_PKEY_free(k); }
};
struct X509Deleter {
  void operator()(X509* c) const { X509_free(c); }
};
using KeyPtr = std::unique_ptr<EVP_PKEY, EvpKeyDeleter>;
using CertPtr = std::unique_ptr<X509, X509Deleter>;

inline KeyPtr make_key() {
  EVP_PKEY* key = EVP_PKEY_Q_keygen(nullptr, nullptr, "EC", "P-256");
  if (!key) throw std::runtime_error("EC key generation failed");
  return KeyPtr(key);
}

inline std::string bio_to_string(BIO* bio) {
  char* data = nullptr;
  long len = BIO_get_mem_data(bio, &data);
  return std::string(data, static_cast<std::size_t>(len));
}

inline std::string pem_key(EVP_PKEY* key) {
  BIO* bio = BIO_new(BIO_s_mem());
  PEM_write_bio_PrivateKey(bio, key, nullptr, nullptr, 0, nullptr, nullptr);
  std::string out = bio_to_string(bio);
  BIO_free(bio);
  return out;
}

inline std::string pem_cert(X509* cert) {
  BIO* bio = BIO_new(BIO_s_mem());
  PEM_write_bio_X509(bio, cert);
  std::string out = bio_to_string(bio);
  BIO_free(bio);
  return out;
}

inline void add_ext(X509* cert, X509* issuer, int nid, const char* value) {
  X509V3_CTX ctx;
  X509V3_set_ctx_nodb(&ctx);
  X509V3_set_ctx(&ctx, issuer, cert, nullptr, nullptr, 0);
  X509_EXTENSION* ext = X509V3_EXT_conf_nid(nullptr, &ctx, nid, value);
  if (!ext) throw std::runtime_error(std::string("bad X509 extension: ") + value);
  X509_add_ext(cert, ext, -1);
  X509_EXTENSION_free(ext);
}

inline CertPtr build_cert(const std::string& cn, EVP_PKEY* subject_key, X509* issuer_cert,
                          EVP_PKEY* issuer_key, bool is_ca, const std::string& san) {
  CertPtr cert(X509_new());
  X509_set_version(cert.get(), 2);
  static long serial = 1;
  ASN1_INTEGER_set(X509_get_serialNumber(cert.get()), serial++);
  X509_gmtime_adj(X509_get_notBefore(cert.get()), -3600);
  X509_gmtime_adj(X509_get_notAfter(cert.get()), 60L * 60 * 24 * 365);
  X509_NAME* name = X509_get_subject_name(cert.get());
  X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_ASC,
                             reinterpret_cast<const unsigned char*>(cn.c_str()), -1, -1, 0);
  X509* issuer = issuer_cert ? issuer_cert : cert.get();
  X509_set_issuer_name(cert.get(), X509_get_subject_name(issuer));
  X509_set_pubkey(cert.get(), subject_key);
  add_ext(cert.get(), issuer, NID_basic_constraints, is_ca ? "critical,CA:TRUE" : "CA:FALSE");
  if (!san.empty()) add_ext(cert.get(), issuer, NID_subject_alt_name, san.c_str());
  if (!X509_sign(cert.get(), issuer_key ? issuer_key : subject_key, EVP_sha256()))
    throw std::runtime_error("certificate signing failed");
  return cert;
}

}  // namespace cert_detail

/// Self-signed CA suitable as a test trust anchor.
inline PemIdentity make_ca(const std::string& cn = "dohscope test CA") {
  auto key = cert_detail::make_key();
  auto cert = cert_detail::build_cert(cn, key.get(), nullptr, nullptr, true, "");
  return {cert_detail::pem_cert(cert.get()), cert_detail::pem_key(key.get())};
}

/// Leaf certificate for loopback servers, signed by `ca`. SANs cover both
/// the DNS names given and the loopback address.
inline PemIdentity issue_server_cert(const PemIdentity& ca,
                                     const std::string& san = "DNS:localhost,IP:127.0.0.1") {
  BIO* cbio = BIO_new_mem_buf(ca.cert_pem.data(), static_cast<int>(ca.cert_pem.size()));
  cert_detail::CertPtr ca_cert(PEM_read_bio_X509(cbio, nullptr, nullptr, nullptr));
  BIO_free(cbio);
  BIO* kbio = BIO_new_mem_buf(ca.key_pem.data(), static_cast<int>(ca.key_pem.size()));
  cert_detail::KeyPtr ca_key(PEM_read_bio_PrivateKey(kbio, nullptr, nullptr, nullptr));
  BIO_free(kbio);
  if (!ca_cert || !ca_key) throw std::runtime_error("cannot parse CA identity");
  auto key = cert_detail::make_key();
  auto cert =
      cert_detail::build_cert("localhost", key.get(), ca_cert.get(), ca_key.get(), false, san);
  return {cert_detail::pem_cert(cert.get()), cert_detail::pem_key(key.get())};
}

/// Independent self-signed leaf; verification against any other trust anchor
/// fails, which is exactly what the bad-certificate fault mode needs.
inline PemIdentity make_self_signed(const std::string& cn = "localhost",
                                    const std::string& san = "DNS:localhost,IP:127.0.0.1") {
  auto key = cert_detail::make_key();
  auto cert = cert_detail::build_cert(cn, key.get(), nullptr, nullptr, false, san);
  return {cert_detail::pem_cert(cert.get()), cert_detail::pem_key(key.get())};
}

/// Writes content to a unique temp file and returns its path (caller owns
/// the file's lifetime; used for CURLOPT_CAINFO and friends).
inline std::string write_temp_pem(const std::string& content, const std::string& hint = "pem") {
  std::string path = "/tmp/dohscope-" + hint + "-XXXXXX";
  int fd = mkstemp(path.data());
  if (fd < 0) throw std::runtime_error("mkstemp failed");
  std::size_t off = 0;
  while (off < content.size()) {
    ssize_t n = ::write(fd, content.data() + off, content.size() - off);
    if (n <= 0) {
      ::close(fd);
      throw std::runtime_error("temp file write failed");
    }
    off += static_cast<std::size_t>(n);
  }
  ::close(fd);
  return path;
}

}  // namespace dohscope::mock
