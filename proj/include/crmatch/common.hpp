#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace crmatch {

/// Runtime failure (bad shapes, bad input files, numeric divergence, ...).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// User-facing configuration / usage problem (unknown key, bad value).
/// The CLI maps these to exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

namespace detail {
inline void cat_into(std::ostringstream&) {}
template <typename A, typename... Rest>
void cat_into(std::ostringstream& os, A&& a, Rest&&... rest) {
    os << a;
    cat_into(os, std::forward<Rest>(rest)...);
}
} // namespace detail

template <typename... A>
std::string cat(A&&... a) {
    std::ostringstream os;
    detail::cat_into(os, std::forward<A>(a)...);
    return os.str();
}

template <typename... A>
[[noreturn]] void fail(A&&... a) {
    throw Error(cat(std::forward<A>(a)...));
}

template <typename... A>
[[noreturn]] void fail_config(A&&... a) {
    throw ConfigError(cat(std::forward<A>(a)...));
}

} // namespace crmatch
