#include "adaptkit/cli.hpp"

int main(int argc, char** argv) { return adaptkit::cli::main(argc, argv); }
