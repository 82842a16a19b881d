// Copyright 2026 The capdetect Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Command-line driver: gen-data, pretrain, finetune, eval, matrix, report.
//
// Every subcommand accepts --config <file.json>; its keys are option names
// (without dashes) and command-line flags override them. Unknown keys are
// usage errors.

#include <iostream>
#include <string>
#include <vector>

namespace capdetect::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// args[0] is the program name. Machine output goes to `out`, diagnostics
/// to `err`. Returns kExitOk, kExitUsage (bad flags or options, nothing was
/// touched) or kExitRuntime (failure while running).
int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace capdetect::cli
