#include <iostream>

#include "outliertune/cli.hpp"

int main(int argc, char** argv) { return otune::run_cli(argc, argv, std::cout, std::cerr); }
