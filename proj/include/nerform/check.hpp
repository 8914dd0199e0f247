#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace nf {

// Error type thrown by all library-level validation failures.  CLI entry
// points catch this and translate it into a nonzero exit code; tests assert
// on it directly.
struct error : std::runtime_error {
  explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
[[noreturn]] inline void raise_check(const char* expr, const char* file, int line,
                                     const std::string& msg) {
  std::ostringstream os;
  os << file << ":" << line << ": check failed: " << expr;
  if (!msg.empty()) os << " — " << msg;
  throw error(os.str());
}
}  // namespace detail

}  // namespace nf

// Always-on validation macro (independent of NDEBUG).  NF_CHECK(cond) or
// NF_CHECK(cond, "message " << value).
#define NF_CHECK(cond, ...)                                                     \
  do {                                                                          \
    if (!(cond)) {                                                              \
      std::ostringstream nf_check_os_;                                          \
      nf_check_os_ __VA_OPT__(<< __VA_ARGS__);                                  \
      ::nf::detail::raise_check(#cond, __FILE__, __LINE__, nf_check_os_.str()); \
    }                                                                           \
  } while (0)
