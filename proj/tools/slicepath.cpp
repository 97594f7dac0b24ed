#include <iostream>
#include <string>
#include <vector>

#include "slicepath/cli.h"

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv + 1, argv + argc);
    return slicepath::cli::run(args, std::cout, std::cerr);
}
