#include <iostream>
#include <string>
#include <vector>

#include "mimic/cli.hpp"

int main(int argc, char** argv) {
    return mimic::cli::run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
