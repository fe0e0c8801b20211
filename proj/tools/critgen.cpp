#include "critgen/cli.hpp"

int main(int argc, char** argv) { return critgen::cli_main(argc, argv); }
