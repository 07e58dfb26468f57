#include "afedcl/harness.hpp"

int main(int argc, char** argv) { return afedcl::run_cli(argc, argv); }
