#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace topiceval {

// All randomness flows through mt19937_64 instances seeded explicitly.
// Determinism is promised within one build, not across standard libraries.
using Rng = std::mt19937_64;

// Derives an independent stream from a base seed and a stream index.
// splitmix64 finalizer; avoids correlated neighbouring seeds.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

double uniform_real(Rng& rng, double lo, double hi);

// Formats a double losslessly (round-trip) for TSV output.
std::string format_double(double value);

std::string read_text_file(const std::string& path);

// Writes to <path>.tmp.<pid> then renames, so readers never see a
// half-written file.
void write_text_atomic(const std::string& path, const std::string& content);

std::vector<std::string> split(const std::string& line, char sep);

}  // namespace topiceval
