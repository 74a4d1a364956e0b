#include "mqr/study.hpp"

int main(int argc, char** argv) {
    return mqr::run_cli({argv + 1, argv + argc});
}
