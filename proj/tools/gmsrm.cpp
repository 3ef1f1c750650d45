#include <iostream>

#include "gmsrm/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return gmsrm::run_cli(args, std::cout, std::cerr);
}
