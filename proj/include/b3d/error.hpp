#ifndef B3D_ERROR_HPP
#define B3D_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace b3d {

enum class ErrorKind {
    Shape,    // dimension or rank mismatch
    Domain,   // precondition on values violated
    Parse,    // malformed input file
    Io,       // filesystem failure
    Numeric,  // non-finite result (divergence)
    Lookup,   // unknown identifier
};

inline std::string_view to_string(ErrorKind k)
{
    switch (k) {
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Io: return "io";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Lookup: return "lookup";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const char* what)
{
    if (!cond)
        throw Error(kind, what);
}

} // namespace b3d

#endif // B3D_ERROR_HPP
