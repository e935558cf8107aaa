// Oracle suites shared by the unit tests, the acceptance run and
// `cbmlab selfcheck`.

#ifndef CBMLAB_TESTS_SUITES_HPP
#define CBMLAB_TESTS_SUITES_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace cbm::testing {

struct SuiteResult {
  std::string name;
  bool pass = false;
  std::size_t cases = 0;
  double worst = 0.0;  // max relative error, worst oracle margin, or mismatch count
  std::string detail;
};

// Finite-difference check of every tensor operator on `trials` random
// shapes; one result per operator.
std::vector<SuiteResult> gradient_suite(std::size_t trials = 20, std::uint64_t seed = 2024);

// run_attack against the exhaustive grid on seeded linear toy CBMs.
SuiteResult attack_oracle_suite(std::size_t instances = 50);

// Set metrics against bitmask enumeration on random set pairs.
SuiteResult metric_oracle_suite(std::size_t pairs = 1000, std::uint64_t seed = 77);

}  // namespace cbm::testing

#endif  // CBMLAB_TESTS_SUITES_HPP
