#include <CLI11.hpp>

#include "delg/tensor.hpp"

int main(int argc, char** argv) {
  CLI::App app{"delg: unified local/global image feature toolkit"};
  app.require_subcommand(1);
  CLI11_PARSE(app, argc, argv);
  return 0;
}
