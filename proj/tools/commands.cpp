#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "nextscale/checkpoint.hpp"
#include "nextscale/datagen.hpp"
#include "nextscale/image.hpp"
#include "nextscale/log.hpp"
#include "nextscale/metrics.hpp"
#include "nextscale/parallel.hpp"
#include "nextscale/prior.hpp"
#include "nextscale/rng.hpp"
#include "nextscale/sampler.hpp"
#include "nextscale/tokenizer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace nextscale::cli {

namespace {

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw UsageError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write " + p.string());
  out << text;
  if (!out) throw UsageError("write failed: " + p.string());
}

std::uint64_t file_hash(const fs::path& p) { return fnv1a64(read_file(p)); }

fs::path sidecar(const fs::path& artifact) { return fs::path(artifact.string() + ".config.json"); }

void write_sidecar(const fs::path& artifact, const RunConfig& config) {
  write_file(sidecar(artifact), run_config_json(config));
}

Corpus require_corpus(const Context& ctx) {
  const fs::path dir = ctx.at(ctx.config.paths.corpus);
  if (!fs::exists(dir / "manifest.mvcorpus")) {
    throw UsageError("corpus not found at " + dir.string() + " (run `datagen` first)");
  }
  Corpus corpus = load_corpus(dir);
  const auto& cc = ctx.config.corpus;
  if (corpus.labels.size() != static_cast<std::size_t>(cc.num_labels)) {
    throw UsageError("corpus at " + dir.string() + " has " + std::to_string(corpus.labels.size()) +
                     " labels, config expects " + std::to_string(cc.num_labels));
  }
  if (corpus.train.empty() || corpus.train.front().height != cc.resolution) {
    throw UsageError("corpus at " + dir.string() + " does not match corpus.resolution " +
                     std::to_string(cc.resolution));
  }
  return corpus;
}

fs::path require_file(const fs::path& p, const std::string& what, const std::string& hint) {
  if (!fs::exists(p)) throw UsageError(what + " not found: " + p.string() + hint);
  return p;
}

// On resume, the sections that shape the trajectory must match what the
// checkpoint was trained with. log_every and paths may change.
void check_resume_config(const fs::path& ckpt, const RunConfig& now, const std::vector<std::string>& sections) {
  const fs::path side = sidecar(ckpt);
  if (!fs::exists(side)) throw UsageError("cannot resume: missing " + side.string());
  json before = json::parse(read_file(side));
  json current = json::parse(run_config_json(now));
  for (const auto& s : sections) {
    json a = before.at(s), b = current.at(s);
    if (a.is_object()) {
      a.erase("log_every");
      b.erase("log_every");
    }
    if (a != b) {
      throw UsageError("checkpoint/config mismatch in section '" + s + "': checkpoint has " + a.dump() +
                       ", config has " + b.dump());
    }
  }
}

std::string loss_csv(const std::vector<double>& curve, const OptimizerConfig& opt) {
  std::string out = "step,lr,loss\n";
  char buf[96];
  for (std::size_t i = 0; i < curve.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", i, lr_at(static_cast<long>(i), opt), curve[i]);
    out += buf;
  }
  return out;
}

fs::path loss_csv_path(const fs::path& ckpt) { return fs::path(ckpt.string() + ".loss.csv"); }

// Steps at which training pauses to write a checkpoint.
std::vector<long> segment_ends(long from, long total, long every, std::optional<long> stop_at) {
  long end = total;
  if (stop_at) end = std::min(end, std::max(from, *stop_at));
  std::vector<long> out;
  if (every > 0) {
    for (long s = (from / every + 1) * every; s < end; s += every) out.push_back(s);
  }
  out.push_back(end);
  return out;
}

std::vector<Slice> read_slices(const fs::path& dir, const std::string& what) {
  if (!fs::is_directory(dir)) throw UsageError(what + " directory not found: " + dir.string());
  std::vector<Slice> out;
  for (const auto& p : list_pgms(dir)) {
    const Image im = read_pgm(p);
    out.push_back(Slice{im.height, im.width, im.values, DatasetLabel{0, {}}});
  }
  return out;
}

void require_uniform(const std::vector<Slice>& slices, std::size_t R, const std::string& what) {
  for (const auto& s : slices) {
    if (s.height != R || s.width != R) {
      throw UsageError(what + ": images must all be " + std::to_string(R) + "x" + std::to_string(R) + ", found " +
                       std::to_string(s.height) + "x" + std::to_string(s.width));
    }
  }
}

int label_index(const RunConfig& config, const std::string& name) {
  const auto specs = config.corpus.specs();
  std::string known;
  for (const auto& s : specs) {
    if (s.label.name == name) return s.label.id;
    known += (known.empty() ? "" : ", ") + s.label.name;
  }
  throw UsageError("unknown label '" + name + "'; known labels: " + known);
}

void append_csv_row(const fs::path& path, const MetricReport& r) {
  const bool fresh = !fs::exists(path);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw UsageError("cannot write " + path.string());
  if (fresh) out << csv_header() << "\n";
  out << csv_row(r) << "\n";
}

}  // namespace

std::vector<fs::path> list_pgms(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".pgm") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

int cmd_datagen(const Context& ctx) {
  const auto& cc = ctx.config.corpus;
  const fs::path dir = ctx.at(ctx.config.paths.corpus);
  const Corpus corpus = build_corpus(cc.specs(), cc.per_label, cc.resolution, cc.split, cc.seed, ctx.threads);
  write_corpus(corpus, dir);
  write_file(dir / "config.json", run_config_json(ctx.config));
  std::cout << "slices " << corpus.size() << " (train " << corpus.train.size() << ", val " << corpus.val.size()
            << ", test " << corpus.test.size() << ")\n";
  std::cout << "manifest_hash " << hex64(manifest_hash(corpus)) << "\n";
  return kOk;
}

int cmd_train_tokenizer(const Context& ctx, const TrainArgs& args) {
  const RunConfig& c = ctx.config;
  const Corpus corpus = require_corpus(ctx);
  const fs::path ckpt = ctx.at(c.paths.tokenizer);

  TokenizerTrainState state;
  std::optional<TokenizerModel<float>> model;
  if (args.resume) {
    require_file(ckpt, "tokenizer checkpoint", " (nothing to resume)");
    check_resume_config(ckpt, c, {"corpus", "tokenizer", "tokenizer_optim", "tokenizer_train"});
    model.emplace(tokenizer_from_checkpoint(load_checkpoint(ckpt), &state));
    log_info("resuming tokenizer at step " + std::to_string(state.step));
  } else {
    model.emplace(c.tokenizer);
  }
  if (state.step > c.tokenizer_train.steps) throw UsageError("checkpoint is past tokenizer_train.steps");

  for (long end : segment_ends(state.step, c.tokenizer_train.steps, c.checkpoint_every, args.stop_at)) {
    TokenizerTrainConfig seg = c.tokenizer_train;
    seg.steps = end;
    train_tokenizer(*model, corpus.train, c.tokenizer_optim, seg, state, [&](const TrainProgress& p) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "tokenizer step %ld loss %.5f recon %.5f commit %.5f lr %.3g", p.step, p.loss,
                    p.recon, p.commit, p.lr);
      log_info(buf);
      return true;
    });
    save_checkpoint(ckpt, tokenizer_checkpoint(*model, &state));
    write_sidecar(ckpt, c);
    write_file(loss_csv_path(ckpt), loss_csv(state.loss_curve, c.tokenizer_optim));
  }

  std::cout << "step " << state.step << "\n";
  if (!corpus.val.empty()) {
    const auto pyramids = encode_batch(corpus.val, *model);
    const auto recon = decode_batch(pyramids, *model, c.tokenizer.schedule.scales());
    double total = 0.0;
    for (std::size_t i = 0; i < recon.size(); ++i) total += psnr(recon[i].values, corpus.val[i].values);
    const auto usage = usage_from_pyramids(pyramids, c.tokenizer.vocab);
    std::printf("val_psnr_db %.3f\nutilization %.4f\n", total / static_cast<double>(recon.size()), usage.utilization);
  }
  std::cout << "checkpoint " << ckpt.string() << "\n";
  return kOk;
}

int cmd_train_prior(const Context& ctx, const TrainArgs& args) {
  const RunConfig& c = ctx.config;
  const fs::path tok_path =
      require_file(ctx.at(c.paths.tokenizer), "tokenizer checkpoint", " (run `train tokenizer` first)");
  const Corpus corpus = require_corpus(ctx);
  const TokenizerModel<float> tok = tokenizer_from_checkpoint(load_checkpoint(tok_path));
  const auto& tc = tok.config();
  if (!(tc.schedule == c.prior.schedule) || tc.vocab != c.prior.vocab || tc.channels != c.prior.channels) {
    throw UsageError("tokenizer checkpoint " + tok_path.string() + " disagrees with the prior config on schedule (" +
                     tc.schedule.str() + " vs " + c.prior.schedule.str() + "), vocab or channels");
  }
  const fs::path ckpt = ctx.at(c.paths.prior);

  PriorTrainState state;
  std::optional<PriorModel<float>> prior;
  if (args.resume) {
    require_file(ckpt, "prior checkpoint", " (nothing to resume)");
    check_resume_config(ckpt, c, {"corpus", "tokenizer", "prior", "prior_optim", "prior_train"});
    prior.emplace(prior_from_checkpoint(load_checkpoint(ckpt), &state));
    log_info("resuming prior at step " + std::to_string(state.step));
  } else {
    prior.emplace(c.prior, tok.codebook().embeddings);
  }
  if (state.step > c.prior_train.steps) throw UsageError("checkpoint is past prior_train.steps");

  const auto tokens = encode_batch(corpus.train, tok);
  std::vector<int> labels;
  for (const auto& s : corpus.train) labels.push_back(s.label.id);

  for (long end : segment_ends(state.step, c.prior_train.steps, c.checkpoint_every, args.stop_at)) {
    PriorTrainConfig seg = c.prior_train;
    seg.steps = end;
    train_prior(*prior, tokens, labels, c.prior_optim, seg, state, [&](const PriorProgress& p) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "prior step %ld loss %.5f lr %.3g", p.step, p.loss, p.lr);
      log_info(buf);
      return true;
    });
    save_checkpoint(ckpt, prior_checkpoint(*prior, &state));
    write_sidecar(ckpt, c);
    write_file(loss_csv_path(ckpt), loss_csv(state.loss_curve, c.prior_optim));
  }

  std::cout << "step " << state.step << "\n";
  if (!corpus.val.empty()) {
    const auto val_tokens = encode_batch(corpus.val, tok);
    std::vector<int> val_labels;
    for (const auto& s : corpus.val) val_labels.push_back(s.label.id);
    std::printf("val_loss %.5f\nln_vocab %.5f\n", prior_eval_loss(*prior, val_tokens, val_labels),
                std::log(static_cast<double>(c.prior.vocab)));
  }
  std::cout << "checkpoint " << ckpt.string() << "\n";
  return kOk;
}

int cmd_sample(const Context& ctx, const SampleArgs& args) {
  const RunConfig& c = ctx.config;
  const int label = label_index(c, args.label);
  const fs::path tok_path =
      require_file(ctx.at(c.paths.tokenizer), "tokenizer checkpoint", " (run `train tokenizer` first)");
  const fs::path prior_path = require_file(ctx.at(c.paths.prior), "prior checkpoint", " (run `train prior` first)");
  if (args.count == 0) {
    std::cout << "images 0\n";
    return kOk;
  }
  const TokenizerModel<float> tok = tokenizer_from_checkpoint(load_checkpoint(tok_path));
  const PriorModel<float> prior = prior_from_checkpoint(load_checkpoint(prior_path));

  const std::vector<int> labels(args.count, label);
  const auto gens = generate_batch(prior, tok, labels, c.sampling, ctx.threads);

  const fs::path out = ctx.at(args.out.empty() ? c.paths.samples : args.out);
  fs::create_directories(out);
  const std::string stem = args.label + "_" + std::to_string(c.sampling.seed);
  json files = json::array();
  for (std::size_t i = 0; i < gens.size(); ++i) {
    const std::string base = stem + "_" + std::to_string(i);
    write_pgm(out / (base + ".pgm"), gens[i].image.image());
    json f{{"image", base + ".pgm"}, {"forward_passes", gens[i].forward_passes}};
    if (args.tokens) {
      const auto bytes = encode_tokens(gens[i].pyramid, c.prior.schedule, c.prior.vocab);
      write_file(out / (base + ".mvtk"), std::string(bytes.begin(), bytes.end()));
      f["tokens"] = base + ".mvtk";
    }
    files.push_back(f);
  }
  json meta;
  meta["label"] = args.label;
  meta["label_id"] = label;
  meta["count"] = args.count;
  meta["tokenizer_hash"] = hex64(file_hash(tok_path));
  meta["prior_hash"] = hex64(file_hash(prior_path));
  meta["files"] = files;
  meta["config"] = json::parse(run_config_json(c));
  write_file(out / (stem + ".json"), meta.dump(2) + "\n");

  std::cout << "images " << gens.size() << " in " << out.string() << "\n";
  std::cout << "forward_passes_per_image " << gens.front().forward_passes << "\n";
  return kOk;
}

int cmd_eval(const Context& ctx, const EvalArgs& args) {
  const RunConfig& c = ctx.config;
  const fs::path emb_path = require_file(ctx.at(args.embedder.empty() ? c.paths.tokenizer : args.embedder),
                                         "embedder checkpoint", "");
  const auto real = read_slices(ctx.at(args.real), "real");
  const auto fake = read_slices(ctx.at(args.fake), "fake");
  if (real.size() < 2 || fake.size() < 2) {
    throw UsageError("eval needs at least 2 images in each directory (real " + std::to_string(real.size()) +
                     ", fake " + std::to_string(fake.size()) + ")");
  }
  const TokenizerModel<float> tok = tokenizer_from_checkpoint(load_checkpoint(emb_path));
  require_uniform(real, tok.config().resolution, "real");
  require_uniform(fake, tok.config().resolution, "fake");
  const FeatureEmbedder embedder(tok);
  const MetricReport r =
      evaluate(real, fake, embedder, args.time_s, args.model, c.sampling.seed, c.eval.gamma, ctx.threads);

  const fs::path csv = ctx.at(args.out.empty() ? c.paths.reports + "/metrics.csv" : args.out);
  append_csv_row(csv, r);
  write_sidecar(csv, c);
  std::cout << report_text(r);
  return kOk;
}

int cmd_bench_verify(const Context& ctx, const VerifyArgs& args) {
  fs::path table = args.table.empty() ? fs::path(NEXTSCALE_TABLE1_INSTALLED) : ctx.at(args.table);
  if (args.table.empty() && !fs::exists(table)) table = NEXTSCALE_TABLE1_SOURCE;
  const auto rows = read_table1(read_file(table));
  double worst = 0.0;
  std::string worst_model;
  std::printf("%-14s %8s %8s %10s %10s %8s\n", "model", "time_s", "fid", "published", "computed", "dev");
  for (const auto& r : rows) {
    const double e = args.natural_log ? r.fid * std::pow(std::log(1.0 + r.time_s), ctx.config.eval.gamma)
                                      : efficiency(r.fid, r.time_s, ctx.config.eval.gamma);
    const double dev = std::abs(e - r.efficiency);
    if (dev > worst) {
      worst = dev;
      worst_model = r.model;
    }
    std::printf("%-14s %8.2f %8.2f %10.2f %10.4f %8.4f\n", r.model.c_str(), r.time_s, r.fid, r.efficiency, e, dev);
  }
  std::printf("rows %zu\nlog %s\nmax_abs_deviation %.4f (%s)\n", rows.size(), args.natural_log ? "natural" : "base10",
              worst, worst_model.c_str());
  if (args.natural_log) return kOk;
  const bool pass = worst <= 0.05;
  std::printf("%s\n", pass ? "PASS" : "FAIL");
  return pass ? kOk : kNumeric;
}

int cmd_bench_measure(const Context& ctx) {
  const RunConfig& c = ctx.config;
  const fs::path tok_path =
      require_file(ctx.at(c.paths.tokenizer), "tokenizer checkpoint", " (run `train tokenizer` first)");
  const fs::path prior_path = require_file(ctx.at(c.paths.prior), "prior checkpoint", " (run `train prior` first)");
  const Corpus corpus = require_corpus(ctx);
  const TokenizerModel<float> tok = tokenizer_from_checkpoint(load_checkpoint(tok_path));
  const PriorModel<float> prior = prior_from_checkpoint(load_checkpoint(prior_path));
  const int num_labels = c.corpus.num_labels;

  std::size_t calls = 0, passes = 0;
  const TimingResult timing = time_generation(
      [&] {
        SamplingConfig one = c.sampling;
        one.seed = sample_seed(c.sampling.seed, calls);
        passes = generate(prior, tok, static_cast<int>(calls % num_labels), one).forward_passes;
        ++calls;
      },
      c.eval.timing_images, c.eval.timing_warmup);

  std::vector<int> labels;
  for (int l = 0; l < num_labels; ++l) labels.insert(labels.end(), c.eval.samples_per_label, l);
  std::vector<Slice> fake;
  for (auto& g : generate_batch(prior, tok, labels, c.sampling, ctx.threads)) fake.push_back(std::move(g.image));
  const std::vector<Slice>& real = corpus.test.size() >= 2 ? corpus.test : corpus.train;
  const FeatureEmbedder embedder(tok);
  MetricReport r =
      evaluate(real, fake, embedder, timing.median_s, "desk", c.sampling.seed, c.eval.gamma, ctx.threads);
  r.fingerprint = timing.fingerprint;

  const fs::path csv = ctx.at(c.paths.reports + "/bench.csv");
  append_csv_row(csv, r);
  write_sidecar(csv, c);
  std::printf("time_s %.6f\nfid %.6f\nefficiency %.6f\nforward_passes_per_image %zu\nscales %zu\n", r.median_time_s,
              r.fid, r.efficiency, passes, c.prior.schedule.scales());
  std::printf("fingerprint %s\n", r.fingerprint.c_str());
  return kOk;
}

int cmd_inspect_codebook(const Context& ctx, const InspectArgs& args) {
  const RunConfig& c = ctx.config;
  const fs::path ckpt =
      require_file(ctx.at(args.checkpoint.empty() ? c.paths.tokenizer : args.checkpoint), "tokenizer checkpoint", "");
  const auto slices = read_slices(ctx.at(args.images), "image");
  if (slices.empty()) throw UsageError("no PGM images under " + ctx.at(args.images).string());
  const TokenizerModel<float> tok = tokenizer_from_checkpoint(load_checkpoint(ckpt));
  require_uniform(slices, tok.config().resolution, "inspect-codebook");
  const CodebookUsage usage = codebook_usage(tok, slices);
  const fs::path out = ctx.at(args.out.empty() ? c.paths.reports + "/codebook_usage.pgm" : args.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_pgm(out, usage_heatmap(usage));
  const auto used = std::count_if(usage.histogram.begin(), usage.histogram.end(), [](double h) { return h > 0; });
  std::printf("utilization %.4f (%zu/%zu codes) over %zu images, %zu tokens\nheatmap %s\n", usage.utilization,
              static_cast<std::size_t>(used), usage.histogram.size(), slices.size(), usage.total, out.string().c_str());
  return kOk;
}

}  // namespace nextscale::cli
