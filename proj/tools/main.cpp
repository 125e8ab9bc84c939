#include <iostream>
#include <string>
#include <vector>

#include "eeg2img/cli/commands.hpp"
#include "eeg2img/core/runtime.hpp"

int main(int argc, char** argv) {
  eeg2img::tune_allocator();
  std::vector<std::string> args(argv + 1, argv + argc);
  return eeg2img::cli::run_cli(args, std::cout, std::cerr);
}
