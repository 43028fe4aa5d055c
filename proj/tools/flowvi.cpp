#include "flowvi/cli.hpp"

int main(int argc, char** argv) { return flowvi::cli_main(argc, argv); }
