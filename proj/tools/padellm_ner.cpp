#include <iostream>

#include "padellm/cli.hpp"

int main(int argc, char** argv) { return padellm::cli::run(argc, argv, std::cout, std::cerr); }
