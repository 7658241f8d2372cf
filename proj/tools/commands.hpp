#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nextscale/run_config.hpp"

namespace nextscale::cli {

// Exit codes shared by every command.
inline constexpr int kOk = 0;
inline constexpr int kPrecondition = 2;
inline constexpr int kNumeric = 3;

/// Missing input, bad flag combination, mismatched checkpoint. Exit 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  std::filesystem::path workdir = ".";
  RunConfig config;
  unsigned threads = 1;

  [[nodiscard]] std::filesystem::path at(const std::string& rel) const { return workdir / rel; }
};

struct TrainArgs {
  bool resume = false;
  /// Stop (with a checkpoint) once this step is reached; simulates an interruption.
  std::optional<long> stop_at;
};

struct SampleArgs {
  std::string label;
  std::size_t count = 1;
  bool tokens = false;
  std::string out;  // workdir-relative; empty selects paths.samples
};

struct EvalArgs {
  std::string real;
  std::string fake;
  std::string embedder;  // empty selects paths.tokenizer
  std::string model = "model";
  double time_s = 0.0;
  std::string out;  // CSV, empty selects <reports>/metrics.csv
};

struct VerifyArgs {
  std::string table;
  bool natural_log = false;
};

struct InspectArgs {
  std::string images;
  std::string checkpoint;  // empty selects paths.tokenizer
  std::string out;         // empty selects <reports>/codebook_usage.pgm
};

int cmd_datagen(const Context& ctx);
int cmd_train_tokenizer(const Context& ctx, const TrainArgs& args);
int cmd_train_prior(const Context& ctx, const TrainArgs& args);
int cmd_sample(const Context& ctx, const SampleArgs& args);
int cmd_eval(const Context& ctx, const EvalArgs& args);
int cmd_bench_verify(const Context& ctx, const VerifyArgs& args);
int cmd_bench_measure(const Context& ctx);
int cmd_inspect_codebook(const Context& ctx, const InspectArgs& args);

/// Sorted PGM files under `dir`, recursively.
std::vector<std::filesystem::path> list_pgms(const std::filesystem::path& dir);

}  // namespace nextscale::cli
