#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace srlvae::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

// Runs one subcommand. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Accepts plain decimals and fractions such as "8/255".
double parse_fraction(const std::string& text, const std::string& what);

}  // namespace srlvae::cli
