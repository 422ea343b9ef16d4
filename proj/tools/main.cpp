#include "anc/cli.hpp"

int main(int argc, char** argv) { return anc::cli::run(argc, argv); }
