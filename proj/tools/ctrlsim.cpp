#include <iostream>

#include "ctrlsim/cli.hpp"

int main(int argc, char** argv) { return ctrlsim::run_cli(argc, argv, std::cout, std::cerr); }
