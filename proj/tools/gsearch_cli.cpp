#include "gsearch/cli.hpp"

int main(int argc, char** argv) { return gsearch::dispatch(argc, argv); }
