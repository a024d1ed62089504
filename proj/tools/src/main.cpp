#include <iostream>
#include <string>
#include <vector>

#include "emformer_tools/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return emformer::tools::execute_command(args, std::cout, std::cerr);
}
