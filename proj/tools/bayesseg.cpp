#include "bayesseg/cli.hpp"

int main(int argc, char** argv) { return bayesseg::run_cli(argc, argv); }
