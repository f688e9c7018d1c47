#include "muxvit/cli.hpp"

int main(int argc, char** argv) { return muxvit::cli_main(argc, argv); }
