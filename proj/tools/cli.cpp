#include "cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <nlohmann/json.hpp>

#include "srlvae/attacks.hpp"
#include "srlvae/checkpoint.hpp"
#include "srlvae/data.hpp"
#include "srlvae/error.hpp"
#include "srlvae/hash.hpp"
#include "srlvae/latent_analysis.hpp"
#include "srlvae/metrics.hpp"
#include "srlvae/trainer.hpp"
#include "srlvae/vae.hpp"

namespace srlvae::cli {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::vector<std::string> kMethods = {"pgd-recon", "encoder-target", "mist-textural", "poison-probe"};

const std::vector<std::string> kLedgerColumns = {
    "run_id",       "sample_count",   "attack",      "corpus_id",          "model_id",
    "mse",          "psnr_db",        "ssim",        "perceptual",         "frechet_rfid_proxy",
    "adv_mse",      "adv_psnr_db",    "adv_ssim",    "adv_perceptual",     "adv_frechet_rfid_proxy",
    "clip_proxy_cosine", "poison_reduction_ratio", "frechet_label"};

std::string to_text(const std::string& v) { return v; }
std::string to_text(bool v) { return v ? "true" : "false"; }
template <class T>
std::string to_text(const T& v) {
  return fmt::format("{}", v);
}

// Registers options on a subcommand and remembers how to read their final
// values back for the manifest.
class Options {
 public:
  explicit Options(CLI::App* app) : app_(app) {}

  template <class T>
  CLI::Option* add(const std::string& name, T& var, const std::string& desc, const std::string& short_name = "") {
    getters_.emplace_back(name, [&var] { return to_text(var); });
    const std::string spec = short_name.empty() ? "--" + name : "-" + short_name + ",--" + name;
    return app_->add_option(spec, var, desc)->capture_default_str();
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    getters_.emplace_back(name, [&var] { return to_text(var); });
    return app_->add_flag("--" + name, var, desc);
  }

  // Options that locate the run rather than define it stay out of the hash.
  void exclude(const std::string& name) { excluded_.push_back(name); }

  std::map<std::string, std::string> snapshot() const {
    std::map<std::string, std::string> out;
    for (const auto& [name, get] : getters_) {
      if (std::find(excluded_.begin(), excluded_.end(), name) == excluded_.end()) out[name] = get();
    }
    return out;
  }

 private:
  CLI::App* app_;
  std::vector<std::pair<std::string, std::function<std::string()>>> getters_;
  std::vector<std::string> excluded_;
};

struct DataArgs {
  std::string root;
  int resolution = 32;
  int channels = 3;
  double train_fraction = 0.9;
  std::uint64_t split_seed = 0;
  std::string split;
  int max_images = 0;
};

void add_data(Options& o, DataArgs& d, const std::string& split, int max_images) {
  d.split = split;
  d.max_images = max_images;
  o.add("data-root", d.root, "Image corpus directory")->required();
  o.add("resolution", d.resolution, "Square training resolution in pixels");
  o.add("image-channels", d.channels, "1 (grayscale) or 3 (RGB)");
  o.add("train-fraction", d.train_fraction, "Fraction of images in the train split");
  o.add("split-seed", d.split_seed, "Seed of the train/val assignment");
  o.add("split", d.split, "Split to use")->check(CLI::IsMember({"train", "val"}));
  o.add("max-images", d.max_images, "Use at most this many images of the split (0 = all)");
}

struct BudgetArgs {
  std::string epsilon = "8/255";
  double step_size = 0.02;
  int iterations = 10;
  std::string init = "zero";
  std::string latent = "mean";
};

void add_budget(Options& o, BudgetArgs& b) {
  o.add("epsilon", b.epsilon, "l-infinity budget, decimal or fraction such as 8/255");
  o.add("step-size", b.step_size, "PGD step size");
  o.add("iterations", b.iterations, "PGD iterations");
  o.add("init", b.init, "Initial perturbation")->check(CLI::IsMember({"zero", "uniform"}));
  o.add("attack-latent", b.latent, "Latent seen by the attack objective")->check(CLI::IsMember({"mean", "sample"}));
}

AttackBudget make_budget(const BudgetArgs& b, std::uint64_t seed) {
  AttackBudget budget;
  budget.epsilon = parse_fraction(b.epsilon, "epsilon");
  budget.step_size = b.step_size;
  budget.iterations = b.iterations;
  budget.init = b.init == "uniform" ? DeltaInit::UniformRandom : DeltaInit::Zero;
  budget.rng_seed = seed;
  budget.validate();
  return budget;
}

AttackOptions make_attack_options(const BudgetArgs& b) {
  AttackOptions opts;
  opts.latent = b.latent == "sample" ? AttackLatent::Sample : AttackLatent::Mean;
  return opts;
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

fs::path artifact_root() {
  const char* env = std::getenv("SRLVAE_ARTIFACT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

// Exclusive lock file held for the duration of a ledger update.
class LedgerLock {
 public:
  explicit LedgerLock(fs::path path) : path_(std::move(path)) {
    for (int attempt = 0; attempt < 3000; ++attempt) {
      fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd_ >= 0) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    throw Error(fmt::format("could not acquire ledger lock {}", path_.string()));
  }
  ~LedgerLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  LedgerLock(const LedgerLock&) = delete;
  LedgerLock& operator=(const LedgerLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

// Appends one line by rewriting to a temporary file and renaming it over the
// ledger, so readers never observe a partial row.
void append_ledger(const fs::path& file, const std::string& line, const std::string& header = "") {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  LedgerLock lock(fs::path(file.string() + ".lock"));
  std::string content;
  if (std::ifstream in(file, std::ios::binary); in) {
    std::ostringstream ss;
    ss << in.rdbuf();
    content = ss.str();
  }
  if (content.empty() && !header.empty()) content = header + "\n";
  content += line + "\n";
  const fs::path tmp = file.string() + fmt::format(".tmp{}", ::getpid());
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    os << content;
    if (!os) throw Error(fmt::format("failed writing ledger {}", tmp.string()));
  }
  fs::rename(tmp, file);
}

struct Run {
  std::string subcommand;
  fs::path root;
  fs::path dir;
  std::map<std::string, std::string> config;
  std::string config_hash;
  json inputs = json::object();
  json seeds = json::object();
  json results = json::object();
  std::vector<std::string> outputs;
  std::vector<std::string> tags;
  std::string started_at;
  std::chrono::steady_clock::time_point start;

  void output(const fs::path& relative) { outputs.push_back(relative.generic_string()); }
  fs::path path(const fs::path& relative) const { return dir / relative; }
};

std::unique_ptr<Run> open_run(const std::string& subcommand, const std::map<std::string, std::string>& config,
                              const std::string& run_dir) {
  auto run = std::make_unique<Run>();
  run->subcommand = subcommand;
  run->root = artifact_root();
  run->config = config;
  Fnv1a h;
  h.update(subcommand);
  for (const auto& [k, v] : config) {
    h.update(k);
    h.update("=");
    h.update(v);
    h.update("\n");
  }
  run->config_hash = h.hex();
  run->started_at = utc_now();
  run->start = std::chrono::steady_clock::now();
  if (!run_dir.empty()) {
    run->dir = run_dir;
  } else {
    const std::string base = fmt::format("{}-{}-{}", subcommand, run->started_at, run->config_hash.substr(0, 8));
    run->dir = run->root / base;
    for (int k = 2; fs::exists(run->dir); ++k) run->dir = run->root / fmt::format("{}-{}", base, k);
  }
  fs::create_directories(run->dir);
  return run;
}

void close_run(const Run& run, const std::string& status, int exit_code, const std::string& message) {
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - run.start).count();
  json m;
  m["format"] = "srlvae-manifest/1";
  m["subcommand"] = run.subcommand;
  m["config"] = run.config;
  m["config_hash"] = run.config_hash;
  m["inputs"] = run.inputs;
  m["seeds"] = run.seeds;
  m["outputs"] = run.outputs;
  m["results"] = run.results;
  m["tags"] = run.tags;
  m["status"] = status;
  m["exit_code"] = exit_code;
  if (!message.empty()) m["message"] = message;
  m["run_dir"] = run.dir.filename().string();
  m["started_at"] = run.started_at;
  m["wall_clock_seconds"] = wall;
  {
    std::ofstream os(run.dir / "manifest.json", std::ios::binary | std::ios::trunc);
    os << m.dump(2) << "\n";
  }
  append_ledger(run.root / "manifests.jsonl", m.dump());
}

DatasetSpec dataset_spec(const DataArgs& d) {
  DatasetSpec spec;
  spec.root = d.root;
  spec.height = d.resolution;
  spec.width = d.resolution;
  spec.train_fraction = d.train_fraction;
  spec.val_fraction = 1.0 - d.train_fraction;
  spec.split_seed = d.split_seed;
  spec.channels = d.channels;
  spec.validate();
  return spec;
}

ImageBatch select_images(const Dataset& ds, const DataArgs& d) {
  const Split& split = d.split == "train" ? ds.train : ds.val;
  if (d.max_images < 0) throw ConfigError("max-images must be >= 0");
  return d.max_images > 0 ? split.head(d.max_images) : split.as_batch();
}

Split select_split(const Dataset& ds, const DataArgs& d) {
  Split split = d.split == "train" ? ds.train : ds.val;
  if (d.max_images > 0 && d.max_images < split.size()) {
    ImageBatch head = split.head(d.max_images);
    split.pixels = head.pixels;
    split.ids = head.ids;
  }
  return split;
}

std::string corpus_id(const DataArgs& d, const ImageBatch& batch) {
  Fnv1a h;
  for (const auto& id : batch.ids) {
    h.update(id);
    h.update("\n");
  }
  return fmt::format("{}:{}:{}:{}", fs::path(d.root).filename().string(), d.split, batch.size(),
                     h.hex().substr(0, 8));
}

void check_image_fit(const CheckpointMeta& meta, const DataArgs& d) {
  if (meta.config.image_channels != d.channels) {
    throw ConfigError(fmt::format("checkpoint-architecture mismatch: checkpoint has {} image channels, data has {}",
                                  meta.config.image_channels, d.channels));
  }
  const int f = meta.config.downsampling_factor();
  if (d.resolution % f != 0) {
    throw ConfigError(fmt::format("resolution {} is not divisible by the checkpoint downsampling factor {}",
                                  d.resolution, f));
  }
}

void record_checkpoint(Run& run, const std::string& key, const fs::path& dir, const Checkpoint& ck) {
  json c;
  c["path"] = dir.string();
  c["encoder_hash"] = encoder_hash(ck.model);
  c["decoder_hash"] = decoder_hash(ck.model);
  if (ck.model.has_reference()) c["reference_encoder_hash"] = hash_hex(ck.model.reference_params());
  run.inputs[key] = c;
}

std::vector<int> parse_widths(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    int v = 0;
    const auto* b = part.data();
    const auto* e = part.data() + part.size();
    const auto r = std::from_chars(b, e, v);
    if (r.ec != std::errc() || r.ptr != e) throw ConfigError(fmt::format("bad channel width '{}'", part));
    out.push_back(v);
  }
  return out;
}

ImageBatch rolled(const ImageBatch& x, int offset) {
  const int n = x.size();
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = ((i + offset) % n + n) % n;
  ImageBatch out;
  out.pixels = x.pixels.gather(idx);
  for (int i : idx) out.ids.push_back(x.ids[static_cast<std::size_t>(i)]);
  return out;
}

struct MethodResult {
  AttackOutcome outcome;
  std::vector<double> ratio;
};

MethodResult run_method(const std::string& method, const VaeModel& model, const PerceptualExtractor& ext,
                        const ImageBatch& x, const ImageBatch& targets, const AttackBudget& budget, double lambda,
                        const AttackOptions& opts) {
  MethodResult r;
  if (method == "pgd-recon") {
    r.outcome = pgd_reconstruction_attack(model, ext, x, budget, lambda, opts);
  } else if (method == "encoder-target") {
    r.outcome = encoder_targeted_attack(model, x, model.encode(targets.pixels).mu(), budget, opts);
  } else if (method == "mist-textural") {
    r.outcome = mist_textural_attack(model, x, targets, budget, opts);
  } else if (method == "poison-probe") {
    PoisonProbeReport p = poison_crafting_probe(model, x, targets, budget, opts);
    r.ratio = std::move(p.per_item_ratio);
    r.outcome = std::move(p.outcome);
  } else {
    throw ConfigError(fmt::format("unknown method '{}'; expected one of {}", method, fmt::join(kMethods, ", ")));
  }
  return r;
}

std::string png_name(const std::string& id) {
  std::string s = fs::path(id).replace_extension().generic_string();
  std::replace(s.begin(), s.end(), '/', '_');
  return s + ".png";
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << text;
  if (!os) throw Error(fmt::format("failed writing {}", path.string()));
}

// ---- pretrain -------------------------------------------------------------

struct PretrainArgs {
  DataArgs data;
  int total_steps = 2000;
  int batch_size = 20;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double lpips_weight = 1.0;
  double kl_weight = 1e-6;
  std::string pixel_loss = "l2";
  std::uint64_t seed = 0;
  std::string widths = "32,64,128";
  int downsample_levels = 3;
  int latent_channels = 4;
  std::uint64_t init_seed = 0;
  std::uint64_t extractor_seed = 1234;
  int checkpoint_every = 0;
  int log_every = 50;
};

void add_pretrain(Options& o, PretrainArgs& a) {
  add_data(o, a.data, "train", 0);
  o.add("total-steps", a.total_steps, "Optimizer steps");
  o.add("batch-size", a.batch_size, "Images per step");
  o.add("lr", a.lr, "AdamW learning rate");
  o.add("weight-decay", a.weight_decay, "AdamW decoupled weight decay");
  o.add("lpips-weight", a.lpips_weight, "Perceptual loss weight");
  o.add("kl-weight", a.kl_weight, "KL weight");
  o.add("pixel-loss", a.pixel_loss, "Pixel loss")->check(CLI::IsMember({"l2", "l1"}));
  o.add("seed", a.seed, "Training seed");
  o.add("channels", a.widths, "Comma-separated feature widths per level");
  o.add("downsample-levels", a.downsample_levels, "Number of stride-2 stages");
  o.add("latent-channels", a.latent_channels, "Latent channels");
  o.add("init-seed", a.init_seed, "Parameter initialisation seed");
  o.add("extractor-seed", a.extractor_seed, "Perceptual feature extractor seed");
  o.add("checkpoint-every", a.checkpoint_every, "Intermediate checkpoint period (0 = off)");
  o.add("log-every", a.log_every, "Progress line period on stderr (0 = off)");
  o.exclude("log-every");
}

int cmd_pretrain(const PretrainArgs& a, Run& run, std::ostream& out, std::ostream& err) {
  VaeConfig vc;
  vc.image_channels = a.data.channels;
  vc.channels = parse_widths(a.widths);
  vc.downsample_levels = a.downsample_levels;
  vc.latent_channels = a.latent_channels;
  vc.init_seed = a.init_seed;
  vc.validate();
  if (a.data.resolution % vc.downsampling_factor() != 0) {
    throw ConfigError(fmt::format("resolution {} is not divisible by the downsampling factor {}", a.data.resolution,
                                  vc.downsampling_factor()));
  }
  TrainConfig tc;
  tc.total_steps = a.total_steps;
  tc.batch_size = a.batch_size;
  tc.learning_rate = a.lr;
  tc.weight_decay = a.weight_decay;
  tc.lpips_weight = a.lpips_weight;
  tc.kl_weight = a.kl_weight;
  tc.pixel_loss = a.pixel_loss == "l1" ? PixelLoss::L1 : PixelLoss::L2;
  tc.seed = a.seed;
  tc.checkpoint_every = a.checkpoint_every;
  tc.freeze_decoder = false;
  tc.validate_pretrain();

  const Dataset ds = load_dataset(dataset_spec(a.data), err);
  const Split train = select_split(ds, a.data);
  VaeModel model(vc);
  const PerceptualExtractor ext = PerceptualExtractor::seeded(vc.image_channels, a.extractor_seed);

  CheckpointMeta meta;
  meta.config = vc;
  meta.image_height = a.data.resolution;
  meta.image_width = a.data.resolution;
  meta.seed = a.seed;
  meta.extractor_seed = a.extractor_seed;
  meta.provenance = {{"kind", "baseline"},
                     {"config_hash", run.config_hash},
                     {"steps", std::to_string(a.total_steps)},
                     {"train_images", std::to_string(train.size())}};
  run.seeds = {{"seed", a.seed}, {"init_seed", a.init_seed}, {"split_seed", a.data.split_seed},
               {"extractor_seed", a.extractor_seed}};
  run.inputs["data_root"] = a.data.root;

  std::ofstream log(run.path("steps.csv"), std::ios::binary | std::ios::trunc);
  write_pretrain_header(log);
  run.output("steps.csv");
  TrainCallbacks cb;
  cb.on_step = [&](const StepRecord& r) {
    write_pretrain_row(log, r);
    if (a.log_every > 0 && (r.step % a.log_every == 0 || r.step + 1 == a.total_steps)) {
      fmt::print(err, "pretrain step {}/{} total={:.6g} mse={:.6g} lpips={:.6g}\n", r.step + 1, a.total_steps,
                 r.total, r.mse_adv, r.lpips_adv);
    }
  };
  cb.on_checkpoint = [&](int step, const VaeModel& m) {
    const fs::path rel = fs::path("checkpoints") / fmt::format("step_{:06d}", step);
    save_checkpoint(run.path(rel), m, meta);
    run.output(rel);
  };
  std::vector<StepRecord> records;
  try {
    records = pretrain_baseline(model, ext, train, tc, cb);
  } catch (const TrainingHalted& h) {
    log.flush();
    std::ofstream dump(run.path("halt.csv"), std::ios::binary | std::ios::trunc);
    write_pretrain_header(dump);
    write_pretrain_row(dump, h.last_record());
    run.output("halt.csv");
    throw;
  }
  log.flush();
  save_checkpoint(run.path("checkpoint"), model, meta);
  run.output("checkpoint");
  run.results["final_total"] = records.back().total;
  run.results["encoder_hash"] = encoder_hash(model);
  run.results["decoder_hash"] = decoder_hash(model);
  out << run.path("checkpoint").string() << "\n";
  return kExitOk;
}

// ---- finetune -------------------------------------------------------------

struct FinetuneArgs {
  DataArgs data;
  std::string baseline;
  int total_steps = 5000;
  int batch_size = 20;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double orig_weight = 0.01;
  double lpips_weight = 1.0;
  BudgetArgs budget;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;
  int log_every = 50;
};

void add_finetune(Options& o, FinetuneArgs& a) {
  add_data(o, a.data, "train", 0);
  o.add("baseline", a.baseline, "Pretrained checkpoint directory")->required();
  o.add("total-steps", a.total_steps, "Optimizer steps");
  o.add("batch-size", a.batch_size, "Images per step");
  o.add("lr", a.lr, "AdamW learning rate");
  o.add("weight-decay", a.weight_decay, "AdamW decoupled weight decay");
  o.add("orig-weight", a.orig_weight, "Originality loss weight (0 = ablation without it)");
  o.add("lpips-weight", a.lpips_weight, "Perceptual loss weight");
  add_budget(o, a.budget);
  o.add("seed", a.seed, "Training seed");
  o.add("checkpoint-every", a.checkpoint_every, "Intermediate checkpoint period (0 = off)");
  o.add("log-every", a.log_every, "Progress line period on stderr (0 = off)");
  o.exclude("log-every");
}

int cmd_finetune(const FinetuneArgs& a, Run& run, std::ostream& out, std::ostream& err) {
  TrainConfig tc;
  tc.total_steps = a.total_steps;
  tc.batch_size = a.batch_size;
  tc.learning_rate = a.lr;
  tc.weight_decay = a.weight_decay;
  tc.orig_weight = a.orig_weight;
  tc.lpips_weight = a.lpips_weight;
  tc.attack = make_budget(a.budget, 0);
  tc.attack_latent = make_attack_options(a.budget).latent;
  tc.seed = a.seed;
  tc.checkpoint_every = a.checkpoint_every;
  tc.freeze_decoder = true;
  tc.validate_finetune();

  Checkpoint ck = load_checkpoint(a.baseline);
  record_checkpoint(run, "baseline", a.baseline, ck);
  check_image_fit(ck.meta, a.data);
  if (ck.meta.image_height != a.data.resolution || ck.meta.image_width != a.data.resolution) {
    throw ConfigError(fmt::format("checkpoint-architecture mismatch: baseline trained at {}x{}, data resolution {}",
                                  ck.meta.image_height, ck.meta.image_width, a.data.resolution));
  }
  const Dataset ds = load_dataset(dataset_spec(a.data), err);
  const Split train = select_split(ds, a.data);
  const PerceptualExtractor ext = PerceptualExtractor::seeded(ck.meta.config.image_channels, ck.meta.extractor_seed);

  VaeModel& model = ck.model;
  model.snapshot_reference();
  const std::string decoder_before = decoder_hash(model);
  const std::string reference_hash = hash_hex(model.reference_params());

  CheckpointMeta meta = ck.meta;
  meta.seed = a.seed;
  const bool ablation = a.orig_weight == 0.0;
  meta.provenance = {{"kind", ablation ? "wo-originality" : "srl"},
                     {"baseline_encoder_hash", reference_hash},
                     {"config_hash", run.config_hash},
                     {"steps", std::to_string(a.total_steps)},
                     {"train_images", std::to_string(train.size())}};
  run.tags.push_back(ablation ? "wo-originality" : "srl");
  run.seeds = {{"seed", a.seed}, {"split_seed", a.data.split_seed}, {"extractor_seed", ck.meta.extractor_seed}};
  run.inputs["data_root"] = a.data.root;

  std::ofstream log(run.path("steps.csv"), std::ios::binary | std::ios::trunc);
  write_step_header(log);
  run.output("steps.csv");
  TrainCallbacks cb;
  cb.on_step = [&](const StepRecord& r) {
    write_step_row(log, r);
    if (a.log_every > 0 && (r.step % a.log_every == 0 || r.step + 1 == a.total_steps)) {
      fmt::print(err, "finetune step {}/{} total={:.6g} orig={:.6g} mse_adv={:.6g} gain={:.6g}\n", r.step + 1,
                 a.total_steps, r.total, r.orig, r.mse_adv, r.attack_gain);
    }
  };
  cb.on_checkpoint = [&](int step, const VaeModel& m) {
    const fs::path rel = fs::path("checkpoints") / fmt::format("step_{:06d}", step);
    save_checkpoint(run.path(rel), m, meta);
    run.output(rel);
  };
  std::vector<StepRecord> records;
  try {
    records = finetune(model, ext, train, tc, cb);
  } catch (const TrainingHalted& h) {
    log.flush();
    std::ofstream dump(run.path("halt.csv"), std::ios::binary | std::ios::trunc);
    write_step_header(dump);
    write_step_row(dump, h.last_record());
    run.output("halt.csv");
    throw;
  }
  log.flush();
  save_checkpoint(run.path("checkpoint"), model, meta);
  run.output("checkpoint");
  const std::string decoder_after = decoder_hash(model);
  run.results["decoder_hash_before"] = decoder_before;
  run.results["decoder_hash_after"] = decoder_after;
  run.results["reference_encoder_hash"] = hash_hex(model.reference_params());
  run.results["encoder_hash"] = encoder_hash(model);
  run.results["orig_loss_step0"] = records.front().orig;
  run.results["final_total"] = records.back().total;
  if (decoder_before != decoder_after) throw Error("decoder parameters changed during encoder fine-tuning");
  out << run.path("checkpoint").string() << "\n";
  return kExitOk;
}

// ---- attack ---------------------------------------------------------------

struct AttackArgs {
  DataArgs data;
  std::string checkpoint;
  std::string method = "pgd-recon";
  BudgetArgs budget;
  double lpips_weight = 1.0;
  std::uint64_t seed = 0;
  int batch_size = 64;
  int target_offset = 1;
  bool dump_png = false;
};

void add_attack_common(Options& o, AttackArgs& a) {
  o.add("checkpoint", a.checkpoint, "Model checkpoint directory")->required();
  add_budget(o, a.budget);
  o.add("lpips-weight", a.lpips_weight, "Perceptual weight of the pgd-recon objective");
  o.add("seed", a.seed, "Attack seed");
  o.add("batch-size", a.batch_size, "Images attacked together");
  o.add("target-offset", a.target_offset, "Targets are the selected images rolled by this many positions");
}

int cmd_attack(const AttackArgs& a, Run& run, std::ostream& out, std::ostream& err) {
  const AttackBudget base = make_budget(a.budget, a.seed);
  const AttackOptions opts = make_attack_options(a.budget);
  if (a.batch_size < 1) throw ConfigError("batch-size must be >= 1");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  record_checkpoint(run, "checkpoint", a.checkpoint, ck);
  check_image_fit(ck.meta, a.data);
  const Dataset ds = load_dataset(dataset_spec(a.data), err);
  const ImageBatch x = select_images(ds, a.data);
  const ImageBatch targets = rolled(x, a.target_offset);
  const PerceptualExtractor ext = PerceptualExtractor::seeded(ck.meta.config.image_channels, ck.meta.extractor_seed);
  run.seeds = {{"seed", a.seed}, {"split_seed", a.data.split_seed}};
  run.inputs["data_root"] = a.data.root;
  run.inputs["corpus_id"] = corpus_id(a.data, x);

  const bool poison = a.method == "poison-probe";
  std::ostringstream csv;
  csv << "id,initial_loss,final_loss,linf_norm" << (poison ? ",reduction_ratio" : "") << "\n";
  std::vector<double> initial, final_loss, ratios;
  for (int first = 0, chunk = 0; first < x.size(); first += a.batch_size, ++chunk) {
    const int count = std::min(a.batch_size, x.size() - first);
    AttackBudget budget = base;
    budget.rng_seed = mix_seed(a.seed, static_cast<std::uint64_t>(chunk));
    const ImageBatch part = x.slice(first, count);
    const MethodResult r =
        run_method(a.method, ck.model, ext, part, targets.slice(first, count), budget, a.lpips_weight, opts);
    for (int i = 0; i < count; ++i) {
      const auto k = static_cast<std::size_t>(i);
      fmt::print(csv, "{},{},{},{}", part.ids[k], r.outcome.initial_per_item[k], r.outcome.final_per_item[k],
                 r.outcome.linf_norm(i));
      if (poison) fmt::print(csv, ",{}", r.ratio[k]);
      csv << "\n";
      initial.push_back(r.outcome.initial_per_item[k]);
      final_loss.push_back(r.outcome.final_per_item[k]);
      if (poison) ratios.push_back(r.ratio[k]);
      if (a.dump_png) {
        const fs::path rel = fs::path("adv") / png_name(part.ids[k]);
        fs::create_directories(run.path("adv"));
        write_png(run.path(rel), r.outcome.x_adv, i);
      }
    }
  }
  write_text(run.path("attack.csv"), csv.str());
  run.output("attack.csv");
  if (a.dump_png) run.output("adv");
  run.results["method"] = a.method;
  run.results["epsilon"] = base.epsilon;
  run.results["mean_initial_loss"] = mean_of(initial);
  run.results["mean_final_loss"] = mean_of(final_loss);
  if (poison) run.results["mean_reduction_ratio"] = mean_of(ratios);
  out << run.path("attack.csv").string() << "\n";
  return kExitOk;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  AttackArgs attack;
  std::string mode = "none";
  std::string ledger;
};

std::string ledger_row(const std::string& run_id, const MetricReport& r) {
  std::vector<std::string> cells;
  for (const auto& col : kLedgerColumns) {
    if (col == "run_id") {
      cells.push_back(run_id);
    } else if (col == "sample_count") {
      cells.push_back(std::to_string(r.sample_count));
    } else if (auto m = r.metrics.find(col); m != r.metrics.end()) {
      cells.push_back(fmt::format("{}", m->second));
    } else if (auto l = r.labels.find(col); l != r.labels.end()) {
      std::string v = l->second;
      if (v.find_first_of(",\"") != std::string::npos) {
        std::string q = "\"";
        for (char c : v) q += c == '"' ? std::string("\"\"") : std::string(1, c);
        v = q + "\"";
      }
      cells.push_back(v);
    } else {
      cells.emplace_back();
    }
  }
  return fmt::format("{}", fmt::join(cells, ","));
}

int cmd_eval(const EvalArgs& e, Run& run, std::ostream& out, std::ostream& err) {
  const AttackArgs& a = e.attack;
  const AttackBudget base = make_budget(a.budget, a.seed);
  const AttackOptions opts = make_attack_options(a.budget);
  if (a.batch_size < 1) throw ConfigError("batch-size must be >= 1");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  record_checkpoint(run, "checkpoint", a.checkpoint, ck);
  check_image_fit(ck.meta, a.data);
  const Dataset ds = load_dataset(dataset_spec(a.data), err);
  const ImageBatch x = select_images(ds, a.data);
  if (x.size() < 1) throw ConfigError("evaluation corpus is empty");
  const ImageBatch targets = rolled(x, a.target_offset);
  std::unordered_map<std::string, int> index;
  for (int i = 0; i < x.size(); ++i) index[x.ids[static_cast<std::size_t>(i)]] = i;
  const PerceptualExtractor ext = PerceptualExtractor::seeded(ck.meta.config.image_channels, ck.meta.extractor_seed);
  run.seeds = {{"seed", a.seed}, {"split_seed", a.data.split_seed}};
  run.inputs["data_root"] = a.data.root;

  ReportOptions ro;
  ro.corpus_id = corpus_id(a.data, x);
  ro.model_id = encoder_hash(ck.model).substr(0, 16);
  ro.chunk_size = a.batch_size;
  std::vector<double> ratios;
  int chunk = 0;
  AttackGenerator gen = [&](const VaeModel& model, const ImageBatch& part) {
    std::vector<int> idx;
    for (const auto& id : part.ids) idx.push_back(index.at(id));
    ImageBatch t;
    t.pixels = targets.pixels.gather(idx);
    for (int i : idx) t.ids.push_back(targets.ids[static_cast<std::size_t>(i)]);
    AttackBudget budget = base;
    budget.rng_seed = mix_seed(a.seed, static_cast<std::uint64_t>(chunk++));
    MethodResult r = run_method(e.mode, model, ext, part, t, budget, a.lpips_weight, opts);
    ratios.insert(ratios.end(), r.ratio.begin(), r.ratio.end());
    return std::move(r.outcome);
  };
  const bool attacked = e.mode != "none";
  if (attacked) {
    ro.attack_descriptor = fmt::format("{}(eps={},step={},iters={},init={},latent={})", e.mode, a.budget.epsilon,
                                       a.budget.step_size, a.budget.iterations, a.budget.init, a.budget.latent);
  }
  MetricReport report = reconstruction_report(ck.model, ext, x, attacked ? &gen : nullptr, ro);
  if (e.mode == "poison-probe") report.metrics["poison_reduction_ratio"] = mean_of(ratios);
  report.validate();

  write_text(run.path("report.json"), report.to_json());
  write_text(run.path("report.csv"), report.csv_header() + "\n" + report.csv_row() + "\n");
  run.output("report.json");
  run.output("report.csv");
  const fs::path ledger = e.ledger.empty() ? run.root / "results.csv" : fs::path(e.ledger);
  append_ledger(ledger, ledger_row(run.dir.filename().string(), report),
                fmt::format("{}", fmt::join(kLedgerColumns, ",")));
  run.inputs["ledger"] = ledger.string();
  for (const auto& [k, v] : report.metrics) run.results[k] = v;
  out << run.path("report.json").string() << "\n";
  return kExitOk;
}

// ---- analyze --------------------------------------------------------------

struct AnalyzeArgs {
  AttackArgs attack;
  bool surface = false;
  bool pca = false;
  bool tightness = false;
  int half_res = 10;
  std::string radius = "8/255";
  int anchors = 16;
  int k = 2;
  std::string pca_attack = "none";
  std::string noise_sigma = "8/255";
};

std::string grid_csv(const Eigen::MatrixXd& g) {
  std::string s;
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    for (Eigen::Index c = 0; c < g.cols(); ++c) {
      if (c) s += ",";
      s += fmt::format("{}", g(r, c));
    }
    s += "\n";
  }
  return s;
}

int cmd_analyze(const AnalyzeArgs& z, Run& run, std::ostream& out, std::ostream& err) {
  const AttackArgs& a = z.attack;
  if (!z.surface && !z.pca && !z.tightness) {
    throw ConfigError("select at least one analysis: --surface, --pca or --tightness");
  }
  if (z.half_res < 2) throw ConfigError("half-res must be >= 2");
  if (z.anchors < 1) throw ConfigError("anchors must be >= 1");
  if (z.k < 1) throw ConfigError("k must be >= 1");
  const double radius = parse_fraction(z.radius, "radius");
  const double sigma = parse_fraction(z.noise_sigma, "noise-sigma");
  if (!(radius > 0.0)) throw ConfigError("radius must be positive");
  if (sigma < 0.0) throw ConfigError("noise-sigma must be >= 0");
  const AttackBudget base = make_budget(a.budget, a.seed);
  const AttackOptions opts = make_attack_options(a.budget);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  record_checkpoint(run, "checkpoint", a.checkpoint, ck);
  check_image_fit(ck.meta, a.data);
  const Dataset ds = load_dataset(dataset_spec(a.data), err);
  const ImageBatch x = select_images(ds, a.data);
  const PerceptualExtractor ext = PerceptualExtractor::seeded(ck.meta.config.image_channels, ck.meta.extractor_seed);
  run.seeds = {{"seed", a.seed}, {"split_seed", a.data.split_seed}};
  run.inputs["data_root"] = a.data.root;
  run.inputs["corpus_id"] = corpus_id(a.data, x);

  if (z.surface) {
    const int n = std::min(z.anchors, x.size());
    std::vector<double> scores;
    json per_anchor = json::array();
    for (int i = 0; i < n; ++i) {
      const std::uint64_t seed = mix_seed(a.seed, static_cast<std::uint64_t>(i));
      const SurfaceGrid g = loss_surface(ck.model, x.slice(i, 1), radius, z.half_res, seed);
      const double score = smoothness_score(g);
      scores.push_back(score);
      const fs::path csv = fs::path("surface") / fmt::format("anchor_{:03d}.csv", i);
      const fs::path side = fs::path("surface") / fmt::format("anchor_{:03d}.json", i);
      write_text(run.path(csv), grid_csv(g.grid));
      json j;
      j["anchor_id"] = g.anchor_id;
      j["half_res"] = g.half_res;
      j["radius"] = g.radius;
      j["seed"] = g.seed;
      j["raw_max"] = g.raw_max;
      j["normalization"] = "max";
      j["smoothness_score"] = score;
      write_text(run.path(side), j.dump(2) + "\n");
      run.output(csv);
      run.output(side);
      per_anchor.push_back({{"anchor_id", g.anchor_id}, {"smoothness_score", score}});
    }
    run.results["smoothness_score"] = mean_of(scores);
    run.results["smoothness_per_anchor"] = per_anchor;
  }

  if (z.pca) {
    Tensor inputs = x.pixels;
    if (z.pca_attack != "none") {
      const ImageBatch targets = rolled(x, a.target_offset);
      std::vector<Tensor> parts;
      for (int first = 0, chunk = 0; first < x.size(); first += a.batch_size, ++chunk) {
        const int count = std::min(a.batch_size, x.size() - first);
        AttackBudget budget = base;
        budget.rng_seed = mix_seed(a.seed, static_cast<std::uint64_t>(chunk));
        parts.push_back(run_method(z.pca_attack, ck.model, ext, x.slice(first, count),
                                   targets.slice(first, count), budget, a.lpips_weight, opts)
                            .outcome.x_adv);
      }
      inputs = concat_batch(parts);
    }
    std::vector<Tensor> mus;
    for (int first = 0; first < x.size(); first += a.batch_size) {
      mus.push_back(ck.model.encode(inputs.slice(first, std::min(a.batch_size, x.size() - first))).mu());
    }
    const PcaResult p = latent_pca(flatten_items(concat_batch(mus)), z.k);
    std::string csv = "id";
    for (int c = 1; c <= z.k; ++c) csv += fmt::format(",pc{}", c);
    csv += "\n";
    for (int i = 0; i < x.size(); ++i) {
      csv += x.ids[static_cast<std::size_t>(i)];
      for (int c = 0; c < z.k; ++c) csv += fmt::format(",{}", p.projections(i, c));
      csv += "\n";
    }
    write_text(run.path("pca/projections.csv"), csv);
    json j;
    j["k"] = z.k;
    j["samples"] = x.size();
    j["dim"] = p.mean.size();
    j["input"] = z.pca_attack;
    j["explained_variance_ratio"] =
        std::vector<double>(p.explained_variance_ratio.data(), p.explained_variance_ratio.data() + z.k);
    write_text(run.path("pca/pca.json"), j.dump(2) + "\n");
    run.output("pca/projections.csv");
    run.output("pca/pca.json");
    run.results["pca_explained_variance_ratio"] = j["explained_variance_ratio"];
  }

  if (z.tightness) {
    const TightnessStats t = cluster_tightness(ck.model, x, sigma, mix_seed(a.seed, 0x7469));
    json j;
    j["mean_pair_dist"] = t.mean_pair_dist;
    j["baseline_spread"] = t.baseline_spread;
    j["tightness_ratio"] = t.tightness_ratio;
    j["noise_sigma"] = sigma;
    j["samples"] = x.size();
    write_text(run.path("tightness.json"), j.dump(2) + "\n");
    run.output("tightness.json");
    run.results["tightness_ratio"] = t.tightness_ratio;
  }
  out << run.dir.string() << "\n";
  return kExitOk;
}

// ---- make-corpus ----------------------------------------------------------

struct CorpusArgs {
  std::string out;
  int count = 5000;
  int size = 32;
  std::uint64_t seed = 0;
};

int cmd_make_corpus(const CorpusArgs& c, Run& run, std::ostream& out) {
  if (c.count < 1) throw ConfigError("count must be >= 1");
  if (c.size < 8) throw ConfigError("size must be >= 8");
  const fs::path root = c.out.empty() ? run.path("corpus") : fs::path(c.out);
  generate_toy_corpus(root, c.count, c.size, c.seed);
  run.seeds = {{"seed", c.seed}};
  if (c.out.empty()) {
    run.output("corpus");
  } else {
    run.results["corpus_root"] = root.string();
  }
  out << root.string() << "\n";
  return kExitOk;
}

// Reads a flat TOML file into "--key=value" arguments; underscores in keys
// map to dashes.
std::vector<std::string> config_arguments(const std::string& path, CLI::App* sub) {
  if (!fs::exists(path)) throw ConfigError(fmt::format("config file {} not found", path));
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_file(path);
  } catch (const CLI::Error& e) {
    throw ConfigError(fmt::format("cannot parse config file {}: {}", path, e.what()));
  }
  std::vector<std::string> args;
  for (const auto& item : items) {
    if (!item.parents.empty() || item.name == "++" || item.name == "--") {
      throw ConfigError(fmt::format("config file {}: sections are not supported (key '{}')", path, item.fullname()));
    }
    std::string key = item.name;
    std::replace(key.begin(), key.end(), '_', '-');
    if (key == "config" || sub->get_option_no_throw("--" + key) == nullptr) {
      throw ConfigError(fmt::format("unknown config key '{}' in {}", item.name, path));
    }
    args.push_back(fmt::format("--{}={}", key, fmt::join(item.inputs, ",")));
  }
  return args;
}

std::optional<std::string> find_config(const std::vector<std::string>& args) {
  std::optional<std::string> found;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      found = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      found = args[i].substr(9);
    }
  }
  return found;
}

}  // namespace

double parse_fraction(const std::string& text, const std::string& what) {
  auto number = [&](std::string_view s) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      throw ConfigError(fmt::format("{}: '{}' is not a number or fraction", what, text));
    }
    return v;
  };
  const auto slash = text.find('/');
  if (slash == std::string::npos) return number(text);
  const double den = number(std::string_view(text).substr(slash + 1));
  if (den == 0.0) throw ConfigError(fmt::format("{}: zero denominator in '{}'", what, text));
  return number(std::string_view(text).substr(0, slash)) / den;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adversarially robust VAE encoders: training, attacks, evaluation and latent analysis", "srlvae"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path;
  std::string run_dir;
  auto common = [&](CLI::App* sub, Options& o) {
    sub->add_option("--config", config_path, "Flat TOML config file; flags override its keys");
    sub->add_option("--run-dir", run_dir, "Output directory (default: <artifact root>/<name>-<time>-<hash>)");
    (void)o;
  };

  PretrainArgs pre;
  auto* s_pre = app.add_subcommand("pretrain", "Train the baseline VAE");
  Options o_pre(s_pre);
  add_pretrain(o_pre, pre);
  common(s_pre, o_pre);

  FinetuneArgs fin;
  auto* s_fin = app.add_subcommand("finetune", "Adversarially fine-tune the encoder of a baseline");
  Options o_fin(s_fin);
  add_finetune(o_fin, fin);
  common(s_fin, o_fin);

  AttackArgs att;
  auto* s_att = app.add_subcommand("attack", "Run an encoder attack and write per-image results");
  Options o_att(s_att);
  add_data(o_att, att.data, "val", 256);
  add_attack_common(o_att, att);
  o_att.add("method", att.method, "Attack method")->check(CLI::IsMember(kMethods));
  o_att.flag("dump-png", att.dump_png, "Write perturbed images as PNG");
  common(s_att, o_att);

  EvalArgs ev;
  auto* s_ev = app.add_subcommand("eval", "Reconstruction metrics, optionally under attack");
  Options o_ev(s_ev);
  add_data(o_ev, ev.attack.data, "val", 256);
  add_attack_common(o_ev, ev.attack);
  std::vector<std::string> modes = {"none"};
  modes.insert(modes.end(), kMethods.begin(), kMethods.end());
  o_ev.add("attack", ev.mode, "Attack applied before reconstruction")->check(CLI::IsMember(modes));
  o_ev.add("ledger", ev.ledger, "Results ledger CSV (default: <artifact root>/results.csv)");
  o_ev.exclude("ledger");
  common(s_ev, o_ev);

  AnalyzeArgs an;
  auto* s_an = app.add_subcommand("analyze", "Latent loss surfaces, PCA and cluster tightness");
  Options o_an(s_an);
  add_data(o_an, an.attack.data, "val", 256);
  add_attack_common(o_an, an.attack);
  o_an.flag("surface", an.surface, "Latent loss surfaces around anchor images");
  o_an.flag("pca", an.pca, "PCA of posterior means");
  o_an.flag("tightness", an.tightness, "Clean versus noised latent cluster tightness");
  o_an.add("half-res", an.half_res, "Surface grid is (2*half_res+1) squared");
  o_an.add("radius", an.radius, "Surface radius in per-pixel RMS units");
  o_an.add("anchors", an.anchors, "Number of surface anchor images");
  o_an.add("components", an.k, "PCA components", "k");
  o_an.add("pca-attack", an.pca_attack, "Attack applied before PCA")->check(CLI::IsMember(modes));
  o_an.add("noise-sigma", an.noise_sigma, "Gaussian noise level for tightness");
  common(s_an, o_an);

  CorpusArgs cor;
  auto* s_cor = app.add_subcommand("make-corpus", "Write a procedural PNG corpus");
  Options o_cor(s_cor);
  o_cor.add("out", cor.out, "Output directory (default: <run dir>/corpus)");
  o_cor.add("count", cor.count, "Number of images");
  o_cor.add("size", cor.size, "Image side in pixels");
  o_cor.add("seed", cor.seed, "Generator seed");
  common(s_cor, o_cor);

  // Config-file keys become leading arguments so later command-line flags win.
  std::vector<std::string> full = args;
  try {
    if (const auto cfg = find_config(args); cfg && !args.empty()) {
      CLI::App* sub = nullptr;
      for (auto* s : app.get_subcommands({})) {
        if (s->get_name() == args.front()) sub = s;
      }
      if (sub != nullptr) {
        const auto extra = config_arguments(*cfg, sub);
        full.insert(full.begin() + 1, extra.begin(), extra.end());
      }
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    std::vector<std::string> reversed(full.rbegin(), full.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  std::unique_ptr<Run> run;
  auto start = [&](const std::string& name, const Options& o) {
    run = open_run(name, o.snapshot(), run_dir);
    return std::ref(*run);
  };
  try {
    int code = kExitOk;
    if (s_pre->parsed()) {
      code = cmd_pretrain(pre, start("pretrain", o_pre), out, err);
    } else if (s_fin->parsed()) {
      code = cmd_finetune(fin, start("finetune", o_fin), out, err);
    } else if (s_att->parsed()) {
      code = cmd_attack(att, start("attack", o_att), out, err);
    } else if (s_ev->parsed()) {
      code = cmd_eval(ev, start("eval", o_ev), out, err);
    } else if (s_an->parsed()) {
      if (!an.surface && !an.pca && !an.tightness) {
        throw ConfigError("select at least one analysis: --surface, --pca or --tightness");
      }
      code = cmd_analyze(an, start("analyze", o_an), out, err);
    } else if (s_cor->parsed()) {
      code = cmd_make_corpus(cor, start("make-corpus", o_cor), out);
    }
    if (run) close_run(*run, "ok", code, "");
    return code;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    if (run) close_run(*run, "config-error", kExitConfig, e.what());
    return kExitConfig;
  } catch (const TrainingHalted& e) {
    err << "error: training halted: " << e.what() << "\n";
    if (run) close_run(*run, "halted", kExitRuntime, e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    if (run) {
      try {
        close_run(*run, "failed", kExitRuntime, e.what());
      } catch (const std::exception& inner) {
        err << "error: could not write manifest: " << inner.what() << "\n";
      }
    }
    return kExitRuntime;
  }
}

}  // namespace srlvae::cli
