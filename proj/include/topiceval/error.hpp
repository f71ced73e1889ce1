#pragma once

#include <stdexcept>
#include <string>

namespace topiceval {

// Runtime failure: bad data, broken model file, contract violation.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Misconfiguration the caller can fix: bad flags, invalid spec files.
// The CLI maps this to exit code 2, everything else to 1.
struct UsageError : Error {
    using Error::Error;
};

// Raised by the forward passes on an empty token list; predict() turns
// this into the empty-utterance policy instead of failing.
struct EmptyUtteranceError : Error {
    EmptyUtteranceError() : Error("empty utterance") {}
};

}  // namespace topiceval
