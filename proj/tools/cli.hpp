#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace griddet::cli {

// Runs one invocation of the command-line tool. Errors are reported as a JSON
// object on `err`; the return value is the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Applies `key.path=value` to a JSON object. The value is parsed as JSON and
// falls back to a plain string.
void apply_override(nlohmann::json& j, const std::string& assignment);

}  // namespace griddet::cli
