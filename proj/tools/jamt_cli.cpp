#include <vector>

#include "jamt/cli.hpp"

int main(int argc, char** argv) {
    return jamt::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
