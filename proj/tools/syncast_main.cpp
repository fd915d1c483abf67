#include <iostream>

#include "syncast/cli.hpp"

int main(int argc, char** argv) { return syncast::cli::run(argc, argv, std::cout, std::cerr); }
