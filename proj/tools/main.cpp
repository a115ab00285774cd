#include <iostream>
#include <string>
#include <vector>

#include "mmsurv/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mmsurv::cli::run(args, std::cout, std::cerr);
}
