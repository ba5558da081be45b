#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fvlm {

/// Dispatches one subcommand: forge, pretrain, finetune, eval, mcq, chat,
/// or report. `args` excludes the program name. Returns the process exit
/// status: 0 on success, nonzero on usage, validation, or numeric failures.
/// Artifact-producing runs write a manifest.json into their run directory.
int run_command(const std::vector<std::string>& args, std::istream& in,
                std::ostream& out, std::ostream& err);

}  // namespace fvlm
