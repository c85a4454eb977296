// Regenerates the committed golden fixtures (inputs + reference traces).
// Run only when the reference scenarios intentionally change, then commit
// the refreshed files.

#include <iostream>

#include "qsm/accept.hpp"

int main(int argc, char** argv) {
  const std::string dir = argc > 1 ? argv[1] : "tests/fixtures";
  try {
    qsm::accept::write_golden_fixtures(dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cout << "wrote golden fixtures to " << dir << "\n";
  return 0;
}
