#include <iostream>

int main() {
    std::cerr << "diagnet: command-line surface not wired up yet\n";
    return 2;
}
