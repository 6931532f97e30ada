#include "vcap/cli.hpp"

int main(int argc, char** argv) { return vcap::run(argc, argv); }
