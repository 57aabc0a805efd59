#include "clipforge/cli.hpp"

int main(int argc, char** argv) { return clipforge::cli::run(argc, argv); }
