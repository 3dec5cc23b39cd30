// Writes the synthetic stylized-dialogue corpus used by the acceptance runs.
#include <CLI11.hpp>

#include <cstdio>
#include <exception>

#include "dtr/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"generate the synthetic dialogue and style corpora"};
  std::string out = "data/synthetic";
  std::uint64_t seed = 7;
  std::size_t dialogues = 1200;
  std::size_t style = 1000;
  app.add_option("--out", out, "output directory");
  app.add_option("--seed", seed, "generator seed");
  app.add_option("--dialogues", dialogues, "number of dialogues")->check(CLI::PositiveNumber);
  app.add_option("--style-size", style, "sentences per style corpus")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  try {
    dtr::synthetic::write_synthetic(out, dtr::synthetic::synth_corpus(seed, dialogues, style));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dtr_synth: %s\n", e.what());
    return 2;
  }
  std::printf("wrote %zu dialogues and %zu sentences per style to %s\n", dialogues, style, out.c_str());
  return 0;
}
