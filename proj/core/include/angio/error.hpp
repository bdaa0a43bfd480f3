#pragma once

#include <stdexcept>
#include <string>

namespace angio {

// Domain error carrying a short machine-parsable code next to the human
// message. The CLI prints these as "[E:<code>] <message>".
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

inline void require(bool cond, const std::string& code, const std::string& msg) {
  if (!cond) throw Error(code, msg);
}

}  // namespace angio
