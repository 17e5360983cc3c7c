#include <iostream>

#include "m2occ/cli.hpp"

int main(int argc, char** argv) { return m2occ::run_cli(argc, argv, std::cout, std::cerr); }
