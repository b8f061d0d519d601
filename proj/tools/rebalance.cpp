#include <iostream>

#include "rebalance/cli.hpp"

int main(int argc, char** argv) { return rebalance::cli::run(argc, argv, std::cout, std::cerr); }
