#include "mona/cli.hpp"

int main(int argc, char** argv) { return mona::cli::run(argc, argv); }
