#include "cgh/cli.hpp"

int main(int argc, char** argv) { return cgh::cli::run(argc, argv); }
