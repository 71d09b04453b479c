// SPDX-License-Identifier: Apache-2.0
#include "ss3d/cli.hpp"

int main(int argc, char** argv) { return ss3d::cli::execute(argc, argv); }
