#include <iostream>

#include "aswap/cli.hpp"

int main(int argc, char** argv) {
  return aswap::cli_run(argc, argv, std::cout, std::cerr);
}
