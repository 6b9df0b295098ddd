#pragma once

#include <stdexcept>
#include <string>

namespace cassle {

enum class ErrorCode {
  kShape,
  kDomain,
  kContract,
  kDegenerateInput,
  kConfig,
  kNumeric,
  kFormat,
  kParse,
  kStratification,
  kUndefinedMetric,
  kIo,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + msg),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

inline Error shape_error(const std::string& msg) { return {ErrorCode::kShape, msg}; }
inline Error domain_error(const std::string& msg) { return {ErrorCode::kDomain, msg}; }
inline Error contract_error(const std::string& msg) { return {ErrorCode::kContract, msg}; }
inline Error degenerate_input(const std::string& msg) { return {ErrorCode::kDegenerateInput, msg}; }
inline Error config_error(const std::string& msg) { return {ErrorCode::kConfig, msg}; }
inline Error numeric_error(const std::string& msg) { return {ErrorCode::kNumeric, msg}; }
inline Error format_error(const std::string& msg) { return {ErrorCode::kFormat, msg}; }
inline Error parse_error(const std::string& msg) { return {ErrorCode::kParse, msg}; }
inline Error stratification_error(const std::string& msg) { return {ErrorCode::kStratification, msg}; }
inline Error undefined_metric(const std::string& msg) { return {ErrorCode::kUndefinedMetric, msg}; }
inline Error io_error(const std::string& msg) { return {ErrorCode::kIo, msg}; }

}  // namespace cassle
