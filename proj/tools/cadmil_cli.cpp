#include <iostream>

int main() {
  std::cout << "cadmil: pipeline CLI placeholder\n";
  return 0;
}
