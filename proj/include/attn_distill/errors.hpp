#pragma once

#include <stdexcept>
#include <string>

namespace attn_distill {

// Error categories shared across the toolkit. Each maps onto one failure
// class callers are expected to distinguish (CLI exit codes, HTTP status).
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidState : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NotFound : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when an LLM answer does not follow the requested structure.
/// The raw text is kept so the caller can retry or route it to review.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::string raw_text)
      : std::runtime_error(what), raw_text_(std::move(raw_text)) {}

  const std::string& raw_text() const noexcept { return raw_text_; }

 private:
  std::string raw_text_;
};

}  // namespace attn_distill
