#pragma once

#include <stdexcept>
#include <string>

namespace mslau {

// Error taxonomy; the CLI maps kinds to exit codes (format/io -> 2, rest -> 1).
enum class ErrKind {
    dimension,   // shape/extent contract violated
    config,      // invalid configuration value
    contract,    // API precondition violated
    bounds,      // index out of range
    format,      // malformed file content
    io,          // filesystem failure
    load,        // checkpoint/model mismatch
};

class Error : public std::runtime_error {
  public:
    Error(ErrKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
    ErrKind kind() const { return kind_; }

  private:
    ErrKind kind_;
};

[[noreturn]] inline void throw_dim(const std::string& msg) { throw Error(ErrKind::dimension, msg); }
[[noreturn]] inline void throw_config(const std::string& msg) { throw Error(ErrKind::config, msg); }
[[noreturn]] inline void throw_contract(const std::string& msg) { throw Error(ErrKind::contract, msg); }
[[noreturn]] inline void throw_bounds(const std::string& msg) { throw Error(ErrKind::bounds, msg); }
[[noreturn]] inline void throw_format(const std::string& msg) { throw Error(ErrKind::format, msg); }
[[noreturn]] inline void throw_io(const std::string& msg) { throw Error(ErrKind::io, msg); }
[[noreturn]] inline void throw_load(const std::string& msg) { throw Error(ErrKind::load, msg); }

}  // namespace mslau
