#include <string>
#include <vector>

#include "cst/cli.hpp"

int main(int argc, char** argv) {
  return cst::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
