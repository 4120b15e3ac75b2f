#include "germtl/cli.hpp"

int main(int argc, char** argv) { return germtl::cli::run(argc, argv); }
