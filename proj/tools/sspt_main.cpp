#include <iostream>
#include <string>
#include <vector>

#include "sspt/app.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return sspt::cli::run_cli(args, std::cout, std::cerr);
}
