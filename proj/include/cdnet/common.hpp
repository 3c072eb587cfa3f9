#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <sstream>

namespace cdnet {

// Error categories; the numeric value doubles as the CLI exit code.
enum class ErrKind : int {
  config = 1,   // bad configuration / bad arguments
  input = 2,    // missing or malformed input artifact
  runtime = 3,  // everything that goes wrong while computing
};

class Error : public std::runtime_error {
 public:
  Error(ErrKind kind, std::string msg)
      : std::runtime_error(std::move(msg)), kind_(kind) {}
  ErrKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

 private:
  ErrKind kind_;
};

[[noreturn]] inline void fail_config(const std::string& msg) { throw Error(ErrKind::config, msg); }
[[noreturn]] inline void fail_input(const std::string& msg) { throw Error(ErrKind::input, msg); }
[[noreturn]] inline void fail_runtime(const std::string& msg) { throw Error(ErrKind::runtime, msg); }

inline void check(bool cond, ErrKind kind, const std::string& msg) {
  if (!cond) throw Error(kind, msg);
}

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace cdnet
