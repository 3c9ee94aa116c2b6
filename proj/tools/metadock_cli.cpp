#include "metadock/harness.hpp"

int main(int argc, char** argv) { return metadock::harness::cli_main(argc, argv); }
