#include <iostream>
#include <string>
#include <vector>

#include "metaforge/cli.hpp"

int main(int argc, char** argv) {
  return metaforge::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
