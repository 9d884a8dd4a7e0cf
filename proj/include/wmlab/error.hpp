#pragma once

#include <stdexcept>
#include <string>

namespace wmlab {

// Domain error carrying a stable machine-readable code (surfaced by the HTTP
// service as `{"error": {"code": ..., "message": ...}}`).
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

}  // namespace wmlab
