#include "cli.hpp"

int main(int argc, char** argv) { return ssalab::cli::run(argc, argv); }
