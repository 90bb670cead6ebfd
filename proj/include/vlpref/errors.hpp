#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace vlpref {

// Root of every error raised by the library. Each subclass corresponds to one
// failure class that callers (and the CLI exit-code mapping) distinguish.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define VLPREF_DEFINE_ERROR(Name)              \
    class Name : public Error {                \
    public:                                    \
        using Error::Error;                    \
    }

VLPREF_DEFINE_ERROR(ConfigError);
VLPREF_DEFINE_ERROR(EmptyQuestion);

// Transport layer.
VLPREF_DEFINE_ERROR(TransportError);
VLPREF_DEFINE_ERROR(AuthError);
VLPREF_DEFINE_ERROR(ProtocolError);

VLPREF_DEFINE_ERROR(EmptyCaption);
VLPREF_DEFINE_ERROR(ScoreParseError);
VLPREF_DEFINE_ERROR(JudgeParseError);

VLPREF_DEFINE_ERROR(TooFewResponses);
VLPREF_DEFINE_ERROR(MismatchedPairing);
VLPREF_DEFINE_ERROR(NotLowConfidence);
VLPREF_DEFINE_ERROR(MixedPairingIds);

VLPREF_DEFINE_ERROR(OutOfRange);
VLPREF_DEFINE_ERROR(NonFiniteGradient);
VLPREF_DEFINE_ERROR(DivergenceError);

VLPREF_DEFINE_ERROR(IoError);
VLPREF_DEFINE_ERROR(ReconciliationError);
VLPREF_DEFINE_ERROR(MissingPrerequisite);
VLPREF_DEFINE_ERROR(FailureBudgetExceeded);
VLPREF_DEFINE_ERROR(VerificationFailed);

#undef VLPREF_DEFINE_ERROR

class SchemaError : public Error {
public:
    SchemaError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace vlpref
