#pragma once

#include <filesystem>
#include <ostream>

#include "avedit/tensor.hpp"

namespace avedit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one subcommand. Messages go to `err`, reports to `out`.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// latents.json: model-space video and audio tensors.
void write_latents(const std::filesystem::path& file, const Tensor& video, const Tensor& audio);
std::pair<Tensor, Tensor> read_latents(const std::filesystem::path& file);

/// Threads requested through AVEDIT_THREADS (default 1).
std::size_t env_threads();

}  // namespace avedit::cli
