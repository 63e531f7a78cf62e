#pragma once

// Command-line surface: gen, pretrain, finetune, eval, gradcheck.
//
// Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
// 3 verification failure.

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace alter {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitVerify = 3;

/// Environment variable naming a root for relative --out directories.
inline constexpr const char* kOutputRootEnv = "ALTER_OUTPUT_ROOT";

struct KeySpec {
    std::string name;
    std::string fallback;
    std::string help;
};

using Settings = std::map<std::string, std::string>;

/// Parses "key = value" lines ('#' starts a comment). Keys outside the
/// schema are rejected with ConfigError.
Settings parse_settings(const std::string& text, const std::vector<KeySpec>& schema, const std::string& origin);

const std::vector<KeySpec>& gen_keys();
const std::vector<KeySpec>& pretrain_keys();
const std::vector<KeySpec>& finetune_keys();

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace alter
