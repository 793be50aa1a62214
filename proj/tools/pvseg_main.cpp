#include <string>
#include <vector>

#include "pvseg/cli.hpp"

int main(int argc, char** argv) {
  return pvseg::run_cli(std::vector<std::string>(argv, argv + argc));
}
