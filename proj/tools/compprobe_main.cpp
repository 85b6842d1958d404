#include <iostream>
#include <string>
#include <vector>

#include "compprobe/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return compprobe::cli::run(args, std::cout, std::cerr);
}
