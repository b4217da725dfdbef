#include "dynenc/cli.hpp"

int main(int argc, char** argv) { return dynenc::run_cli(argc, argv); }
