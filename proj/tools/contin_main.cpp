#include <iostream>

#include "contin/cli.hpp"

int main(int argc, char** argv) { return contin::run_cli(argc, argv, std::cout, std::cerr); }
