#include <iostream>

#include "tridiff/cli/app.hpp"
#include "tridiff/numerics/fpenv.hpp"

int main(int argc, char** argv) {
  tridiff::num::enable_flush_to_zero();
  return tridiff::cli::run_cli(argc, argv, std::cout, std::cerr);
}
