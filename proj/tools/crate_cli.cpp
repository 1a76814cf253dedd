#include <iostream>

#include "crate/cli/app.hpp"

int main(int argc, char** argv) { return crate::cli::run(argc, argv, std::cout, std::cerr); }
