#include <iostream>

#include "ulcerforge/cli.hpp"

int main(int argc, char** argv) {
  return ulcerforge::run_command({argv, argv + argc}, std::cout, std::cerr);
}
