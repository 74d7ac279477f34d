#include "vpr/cli.hpp"

int main(int argc, char** argv) { return vpr::run_cli(argc, argv); }
