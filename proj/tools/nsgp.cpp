#include "nsgp/cli.hpp"

int main(int argc, char** argv) { return nsgp::run_cli(argc, argv); }
