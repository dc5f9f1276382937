#include <iostream>

#include "fgreid/cli.hpp"

int main(int argc, char** argv) {
  return fgreid::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
