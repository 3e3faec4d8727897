#include <iostream>

#include "udp/cli.hpp"

int main(int argc, char** argv) { return udp::run_cli(argc, argv, std::cout, std::cerr); }
