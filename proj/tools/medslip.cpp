#include <iostream>

#include "medslip/cli.hpp"

int main(int argc, char** argv) { return medslip::cli::run(argc, argv, std::cout, std::cerr); }
