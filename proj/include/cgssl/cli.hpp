#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace cgssl {

// args excludes the program name. Returns 0 on success, 1 on a stage failure
// and 2 on a usage error.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int cli_main(int argc, char** argv);

// Applies one dotted `key=value` override to a configuration document. The
// value is parsed as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& config, const std::string& assignment);

}  // namespace cgssl
