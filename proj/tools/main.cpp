#include <iostream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "stmgt/runtime.hpp"

int main(int argc, char** argv) {
  stmgt::configure_runtime();
  return stmgt::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
