#include <iostream>

#include "rsddpm/cli.hpp"

int main(int argc, char** argv) {
  return rsddpm::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
