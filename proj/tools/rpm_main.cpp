#include "rpm/cli.hpp"

int main(int argc, char** argv) { return rpm::cli::run(argc, argv); }
