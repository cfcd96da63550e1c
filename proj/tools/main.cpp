#include <cstdio>

int main() {
  std::fprintf(stderr, "stylemorph: command-line interface not wired up yet\n");
  return 2;
}
