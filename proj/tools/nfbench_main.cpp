#include "nfbench/harness.hpp"

int main(int argc, char** argv) { return nfbench::harness::cli_main(argc, argv); }
