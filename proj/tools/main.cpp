#include "duv/cli.hpp"

int main(int argc, char** argv) { return duv::run_cli(argc, argv); }
