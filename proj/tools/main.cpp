#include "beliefqa/cli.hpp"

int main(int argc, char** argv) { return beliefqa::run_cli(argc, argv); }
