#include "piqt/evalcli.hpp"

int main(int argc, char **argv) { return piqt::run_cli(argc, argv); }
