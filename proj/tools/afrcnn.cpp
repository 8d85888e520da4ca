#include <string>
#include <vector>

#include "afrcnn/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return afrcnn::run_cli(args);
}
