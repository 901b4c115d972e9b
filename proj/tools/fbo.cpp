#include "fbo/cli.hpp"

int main(int argc, char** argv) { return fbo::cli::main_entry(argc, argv); }
