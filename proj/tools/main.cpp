#include "alter/cli.hpp"

int main(int argc, char** argv) { return alter::run_cli(argc, argv); }
