#include "gcnn_stab/cli.hpp"

int main(int argc, char** argv) { return gstab::cli_main(argc, argv); }
