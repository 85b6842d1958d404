#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "compprobe/expr.hpp"

namespace compprobe::dataset {

inline constexpr int kMinAnswer = 1;
inline constexpr int kMaxAnswer = 20;
inline constexpr int kFormatVersion = 1;
inline constexpr std::string_view kFormatName = "compprobe-problems";

using Operands = std::vector<int>;

struct Problem {
  std::int64_t id = 0;
  int template_id = 0;
  Operands operands;
  std::string question;
  std::int64_t answer = 0;
  std::vector<expr::SubExprAnnotation> annotations;
  friend bool operator==(const Problem&, const Problem&) = default;
};

enum class Split { train, heldout, probe };

std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct ProblemSet {
  int template_id = 0;
  std::uint64_t seed = 0;
  Split split = Split::probe;
  std::vector<Problem> problems;
  friend bool operator==(const ProblemSet&, const ProblemSet&) = default;
};

// Builds the problem for an operand vector, or returns false when the vector
// is invalid (division by zero, inexact division, answer outside 1..20).
bool make_problem(const expr::Template& tmpl, const Operands& operands, Problem& out);

// Every operand vector of the template that yields a valid problem, in
// lexicographic order.
std::vector<Operands> enumerate_valid(const expr::Template& tmpl);

// Samples n distinct valid problems outside `exclude`, water-filling the
// answer bins so the histogram is as flat as the candidate pool allows.
// Throws ExhaustionError when fewer than n candidates exist.
ProblemSet sample_set(const expr::Template& tmpl, std::size_t n, std::uint64_t seed,
                      const std::set<Operands>& exclude, Split split = Split::probe);

// Every valid problem outside `exclude`, shuffled by `seed`; no balancing.
ProblemSet full_set(const expr::Template& tmpl, std::uint64_t seed, const std::set<Operands>& exclude,
                    Split split = Split::train);

// The first n problems of full_set(tmpl, seed, exclude): a uniform sample
// without balancing. Throws ExhaustionError when fewer than n candidates exist.
ProblemSet uniform_set(const expr::Template& tmpl, std::size_t n, std::uint64_t seed,
                       const std::set<Operands>& exclude, Split split = Split::heldout);

// Answer-histogram audit. Bins that hold every candidate available to them
// are saturated and may sit below the others.
struct BalanceReport {
  std::map<std::int64_t, std::size_t> counts;
  std::map<std::int64_t, std::size_t> available;
  std::size_t slack = 0;
  bool ok = true;
  std::string detail;
};

BalanceReport check_balance(const ProblemSet& set, const std::set<Operands>& exclude = {});

// Throws FormatError describing the first problem that fails to re-derive
// from its template and operands.
void validate(const Problem& p);

void write_set(const std::filesystem::path& path, const ProblemSet& set);
// Throws FormatError, VersionError or ChecksumError.
ProblemSet read_set(const std::filesystem::path& path);

std::set<Operands> operand_set(const ProblemSet& set);

// Problem files inside a directory, sorted by name, optionally filtered by split.
std::vector<std::filesystem::path> list_sets(const std::filesystem::path& dir);
std::string set_filename(Split split, int template_id);

}  // namespace compprobe::dataset
