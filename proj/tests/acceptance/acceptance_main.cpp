#include <cstdio>

int main() {
  std::fprintf(stderr, "acceptance: criteria not implemented yet\n");
  return 1;
}
