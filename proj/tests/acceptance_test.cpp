// Acceptance suite: one pass/fail line per criterion. Placeholder during
// bring-up; criteria are filled in incrementally.
#include <cstdio>

int main() {
  std::printf("acceptance suite not yet implemented\n");
  return 1;
}
