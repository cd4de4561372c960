#include "mtlnet/cli.hpp"

int main(int argc, char** argv) { return mtlnet::dispatch(argc, argv); }
