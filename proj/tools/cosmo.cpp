// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

#include <string>
#include <vector>

#include "cosmo/cli.hpp"

int main(int argc, char** argv) {
  return cosmo::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
