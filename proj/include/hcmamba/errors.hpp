#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace hcm {

// Error taxonomy shared by the whole library. The CLI prints
// "<error_class>: <message>" on one line, so class strings stay stable
// and machine friendly.
class Error : public std::runtime_error {
 public:
  Error(std::string cls, const std::string& msg)
      : std::runtime_error(cls + ": " + msg), cls_(std::move(cls)) {}
  const std::string& error_class() const { return cls_; }

 private:
  std::string cls_;
};

#define HCM_DEFINE_ERROR(NAME, CLS)                                  \
  class NAME : public Error {                                        \
   public:                                                           \
    explicit NAME(const std::string& m) : Error(CLS, m) {}           \
  }

HCM_DEFINE_ERROR(DimensionError, "dimension-error");  // shape mismatches
HCM_DEFINE_ERROR(DomainError, "domain-error");        // invalid numeric domain (e.g. delta <= 0)
HCM_DEFINE_ERROR(ContractError, "contract-error");    // API misuse, bad config
HCM_DEFINE_ERROR(DataError, "data-error");            // bad runtime data (NaN, label range)
HCM_DEFINE_ERROR(FormatError, "format-error");        // malformed files (netpbm, checkpoint)
HCM_DEFINE_ERROR(TapeError, "tape-error");            // autodiff tape misuse
HCM_DEFINE_ERROR(IoError, "io-error");                // filesystem failures

#undef HCM_DEFINE_ERROR

}  // namespace hcm
