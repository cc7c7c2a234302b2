#include <iostream>

#include "evasion/cli.hpp"

int main(int argc, char** argv) {
  return evasion::run_cli(argc, argv, std::cout, std::cerr);
}
