#include "cgssl/cli.hpp"

int main(int argc, char** argv) { return cgssl::cli_main(argc, argv); }
