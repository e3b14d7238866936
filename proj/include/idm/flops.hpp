#pragma once

#include <cstdint>

namespace idm::flops {

// Analytic operation counts. Every kernel adds its closed-form count to a
// thread-local tally on the calling thread.
void add(std::uint64_t count);
std::uint64_t total();

// Measures the operations counted between construction and elapsed().
class Scope {
 public:
  Scope() : start_(total()) {}
  std::uint64_t elapsed() const { return total() - start_; }

 private:
  std::uint64_t start_;
};

}  // namespace idm::flops
