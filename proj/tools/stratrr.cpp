#include "stratrr/cli.hpp"

int main(int argc, char** argv) { return stratrr::cli::run(argc, argv); }
