#include "hetspill/cli.hpp"

int main(int argc, char** argv) {
  hetspill::cli::RunConfig cfg;
  if (auto code = hetspill::cli::parse_command_line(argc, argv, cfg)) return *code;
  return hetspill::cli::run(cfg);
}
