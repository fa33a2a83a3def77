#include "ivoct/cli.hpp"

int main(int argc, char** argv) { return ivoct::cli::run(argc, argv); }
