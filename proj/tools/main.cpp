#include <vector>

#include "lskld/cli.hpp"

int main(int argc, char** argv) {
  return lskld::cli_main(std::vector<std::string>(argv + 1, argv + argc));
}
