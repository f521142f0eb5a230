#include "polypseg/cli.hpp"

int main(int argc, char** argv) {
  return polypseg::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
