#include "nerform/cli.hpp"

int main(int argc, char** argv) { return nf::cli_main(argc, argv); }
