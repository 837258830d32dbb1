#include "cli.hpp"

int main(int argc, char** argv) { return peermarket::cli::run(argc, argv); }
