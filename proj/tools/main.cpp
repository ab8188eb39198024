#include <iostream>

#include "cli.hpp"

int main(int argc, char** argv) { return avedit::cli::dispatch(argc, argv, std::cout, std::cerr); }
