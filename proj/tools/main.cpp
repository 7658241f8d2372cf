#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "commands.hpp"
#include "nextscale/error.hpp"
#include "nextscale/parallel.hpp"

namespace fs = std::filesystem;
using namespace nextscale;
using namespace nextscale::cli;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct SamplingFlags {
  std::optional<std::uint64_t> seed;
  std::optional<double> cfg, top_p, temperature;
  std::optional<std::size_t> top_k;
  bool ramp = false;
  bool no_guidance = false;
};

void add_sampling_flags(CLI::App* app, SamplingFlags& f) {
  app->add_option("--seed", f.seed, "Sampling seed");
  app->add_option("--cfg", f.cfg, "Guidance scale s (uncond + s * (cond - uncond))");
  app->add_option("--top-k", f.top_k, "Keep the k most probable tokens (0 disables)");
  app->add_option("--top-p", f.top_p, "Nucleus mass in (0, 1] (1 disables)");
  app->add_option("--temperature", f.temperature, "Logit temperature (0 selects argmax)");
  app->add_flag("--ramp", f.ramp, "Grow guidance linearly over scales");
  app->add_flag("--no-guidance", f.no_guidance, "Skip the null-condition pass (K forwards instead of 2K)");
}

void apply(const SamplingFlags& f, SamplingConfig& s) {
  if (f.seed) s.seed = *f.seed;
  if (f.cfg) s.cfg_scale = *f.cfg;
  if (f.top_k) s.top_k = *f.top_k;
  if (f.top_p) s.top_p = *f.top_p;
  if (f.temperature) s.temperature = *f.temperature;
  if (f.ramp) s.guidance_ramp = true;
  if (f.no_guidance) s.guidance = false;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Next-scale autoregressive generation of synthetic medical slices"};
  app.require_subcommand(1);
  std::string workdir = ".";
  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--workdir", workdir, "Directory all artifact paths are relative to");
  app.add_option("--config", config_path, "JSON run config (unknown keys are rejected)");
  app.add_option("--set", overrides, "Inline JSON object merged over the config; repeatable");

  auto* datagen = app.add_subcommand("datagen", "Generate the phantom corpus");

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Train a model");
  train->require_subcommand(1);
  auto* train_tok = train->add_subcommand("tokenizer", "Train the multi-scale tokenizer");
  auto* train_prior = train->add_subcommand("prior", "Train the next-scale prior (needs a tokenizer checkpoint)");
  for (auto* t : {train_tok, train_prior}) {
    t->add_flag("--resume", train_args.resume, "Continue from the checkpoint, restoring optimizer state");
    t->add_option("--stop-at", train_args.stop_at, "Checkpoint and stop once this step is reached");
  }

  SampleArgs sample_args;
  SamplingFlags sample_flags;
  auto* sample = app.add_subcommand("sample", "Generate images for one label");
  sample->add_option("--label", sample_args.label, "Label name")->required();
  sample->add_option("--count", sample_args.count, "Number of images");
  sample->add_flag("--tokens", sample_args.tokens, "Also write MVTK token streams");
  sample->add_option("--out", sample_args.out, "Output directory (default: paths.samples)");
  add_sampling_flags(sample, sample_flags);

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "FID / KID / efficiency of a generated set against a real set");
  eval->add_option("--real", eval_args.real, "Directory of real PGMs (searched recursively)")->required();
  eval->add_option("--fake", eval_args.fake, "Directory of generated PGMs")->required();
  eval->add_option("--embedder", eval_args.embedder, "Tokenizer checkpoint used as the feature embedder");
  eval->add_option("--model", eval_args.model, "Model name for the report row");
  eval->add_option("--time", eval_args.time_s, "Median per-image generation time in seconds");
  eval->add_option("--out", eval_args.out, "CSV to append to (default: <reports>/metrics.csv)");

  VerifyArgs verify_args;
  SamplingFlags measure_flags;
  auto* bench = app.add_subcommand("bench", "Efficiency benchmarks");
  bench->require_subcommand(1);
  auto* verify = bench->add_subcommand("verify-table1", "Recompute the published efficiency column");
  verify->add_option("--table", verify_args.table, "CSV with model,time_s,fid,efficiency (default: bundled)");
  verify->add_flag("--natural-log", verify_args.natural_log, "Diagnostic: use ln instead of log10");
  auto* measure = bench->add_subcommand("measure", "Time the local generator and report (time, fid, efficiency)");
  add_sampling_flags(measure, measure_flags);

  InspectArgs inspect_args;
  auto* inspect = app.add_subcommand("inspect-codebook", "Codebook usage heatmap and utilization");
  inspect->add_option("--images", inspect_args.images, "Directory of PGMs to encode")->required();
  inspect->add_option("--checkpoint", inspect_args.checkpoint, "Tokenizer checkpoint (default: paths.tokenizer)");
  inspect->add_option("--out", inspect_args.out, "Heatmap PGM (default: <reports>/codebook_usage.pgm)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kPrecondition;
  }

  try {
    Context ctx;
    ctx.workdir = workdir;
    ctx.threads = worker_threads();
    RunConfig config;
    if (!config_path.empty()) config = merge_run_config(config, slurp(config_path));
    for (const auto& o : overrides) config = merge_run_config(config, o);
    if (*sample) apply(sample_flags, config.sampling);
    if (*measure) apply(measure_flags, config.sampling);
    config.validate();
    ctx.config = config;
    fs::create_directories(ctx.workdir);

    std::cout << run_config_json(config) << std::flush;

    if (*datagen) return cmd_datagen(ctx);
    if (*train_tok) return cmd_train_tokenizer(ctx, train_args);
    if (*train_prior) return cmd_train_prior(ctx, train_args);
    if (*sample) return cmd_sample(ctx, sample_args);
    if (*eval) return cmd_eval(ctx, eval_args);
    if (*verify) return cmd_bench_verify(ctx, verify_args);
    if (*measure) return cmd_bench_measure(ctx);
    if (*inspect) return cmd_inspect_codebook(ctx, inspect_args);
    return kPrecondition;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPrecondition;
  }
}
