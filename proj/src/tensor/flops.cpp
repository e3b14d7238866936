#include "idm/flops.hpp"

namespace idm::flops {

namespace {
thread_local std::uint64_t g_total = 0;
}

void add(std::uint64_t count) { g_total += count; }
std::uint64_t total() { return g_total; }

}  // namespace idm::flops
