#include "rtn/cli.hpp"

int main(int argc, char** argv) {
    return rtn::run_cli({argv + 1, argv + argc});
}
