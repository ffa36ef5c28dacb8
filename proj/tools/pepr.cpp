#include "pepr/cli.hpp"

int main(int argc, char** argv) { return pepr::cli::run(argc, argv); }
