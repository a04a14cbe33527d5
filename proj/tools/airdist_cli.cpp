#include <cstdio>

int main() {
    std::fprintf(stderr, "airdist: no subcommand given\n");
    return 2;
}
