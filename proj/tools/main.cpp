#include <cstdio>

int main() {
    std::printf("poseidon cli placeholder\n");
    return 0;
}
