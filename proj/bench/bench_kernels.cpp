#include <chrono>
#include <cstdio>
#include <functional>
#include <omp.h>

#include "aloha/ccm.hpp"
#include "aloha/csm.hpp"
#include "support/oracles.hpp"

using namespace aloha;

namespace {

double seconds(const std::function<void()>& fn, int reps) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

// Reference kernel, fast kernel pinned to one thread, fast kernel on all threads.
void report(const char* name, double serial, const std::function<void()>& fast, int reps) {
  const int threads = omp_get_max_threads();
  omp_set_num_threads(1);
  const double one = seconds(fast, reps);
  omp_set_num_threads(threads);
  const double many = seconds(fast, reps);
  std::printf("%-32s reference %8.4f s | 1 thread %8.4f s | %d threads %8.4f s (%.2fx vs reference)\n", name, serial,
              one, threads, many, serial / many);
}

}  // namespace

int main() {
  std::printf("threads: %d\n", omp_get_max_threads());

  const auto P = oracle::random_matrix(1500, 300, 0.03, 1);
  csm::CsmConfig cfg;
  cfg.sweeps = 5;
  report("csm fit 1500x300, 5 sweeps", seconds([&] { csm::reference::fit(P, cfg); }, 1), [&] { csm::fit(P, cfg); },
         3);

  const auto f = oracle::clustered_factors(3000, 36, 8, 0.3, 2);
  std::vector<CharacterId> all(3000);
  for (int k = 0; k < 3000; ++k) all[k] = k;
  const ccm::CommunityConfig cc;
  report("community n=3000", seconds([&] { ccm::reference::build_community(f, 0, cc, all); }, 3),
         [&] { ccm::build_community(f, 0, cc, all); }, 3);
  return 0;
}
