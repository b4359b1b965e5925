#include <iostream>

#include "imhsa/cli.hpp"

int main(int argc, char** argv) { return imhsa::cli_main(argc, argv, std::cout, std::cerr); }
