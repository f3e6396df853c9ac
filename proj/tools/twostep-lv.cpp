#include "twostep/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return twostep::run_cli(argc, argv, std::cout, std::cerr); }
