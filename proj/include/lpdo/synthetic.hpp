#pragma once

#include <cstdint>
#include <ostream>
#include <string>

#include "lpdo/dataset.hpp"
#include "lpdo/random.hpp"

namespace lpdo {

struct MotifCorpusSpec {
  std::size_t users = 500;
  std::size_t items = 100;
  std::size_t min_length = 10;
  std::size_t max_length = 24;
  std::uint64_t seed = 7;
};

// Interaction log in which every user alternates between two distinct
// items drawn at random: a b a b ... The next k items after any prefix are
// fully determined by the last two, so the trajectory is learnable.
// Rows are "user<TAB>item<TAB>timestamp".
inline void write_motif_corpus(const MotifCorpusSpec& spec, std::ostream& out) {
  Rng rng(spec.seed);
  for (std::size_t u = 0; u < spec.users; ++u) {
    const long a = rng.uniform_int(1, static_cast<long>(spec.items));
    long b = a;
    while (b == a) b = rng.uniform_int(1, static_cast<long>(spec.items));
    const auto len = static_cast<std::size_t>(
        rng.uniform_int(static_cast<long>(spec.min_length), static_cast<long>(spec.max_length)));
    for (std::size_t i = 0; i < len; ++i)
      out << 'u' << u << "\ti" << (i % 2 == 0 ? a : b) << '\t' << 1000 + 60 * i << '\n';
  }
}

}  // namespace lpdo
