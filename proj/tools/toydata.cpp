// Writes the planted-motif interaction log used by the examples and tests.
//   lpdo_toydata --users 500 --items 100 --seed 7 > toy.tsv

#include <iostream>

#include "CLI11.hpp"
#include "lpdo/synthetic.hpp"

int main(int argc, char** argv) {
  lpdo::MotifCorpusSpec spec;
  CLI::App app{"Generate a synthetic alternating-motif interaction log"};
  app.add_option("--users", spec.users);
  app.add_option("--items", spec.items)->check(CLI::Range(2, 1000000));
  app.add_option("--min-length", spec.min_length);
  app.add_option("--max-length", spec.max_length);
  app.add_option("--seed", spec.seed);
  CLI11_PARSE(app, argc, argv);
  lpdo::write_motif_corpus(spec, std::cout);
  return 0;
}
