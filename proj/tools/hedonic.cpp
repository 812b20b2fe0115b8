// hedonic: describe listings, pretrain a ViT with DINO, extract image
// features and fit the ridge hedonic model. Exit codes are listed in
// include/hedonic/app.hpp and the README.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "hedonic/app.hpp"

namespace {

struct Flags {
  std::string config;
  std::string manifest, images, preset, weights, out, run_name, alpha_grid, split, winsorize;
  std::vector<std::string> caches;
  std::uint64_t seed = 0;
  std::size_t threads = 0, steps = 0, batch_size = 0;
  double lr = 0;
};

struct Options {
  CLI::Option* manifest = nullptr;
  CLI::Option* images = nullptr;
  CLI::Option* preset = nullptr;
  CLI::Option* weights = nullptr;
  CLI::Option* out = nullptr;
  CLI::Option* run_name = nullptr;
  CLI::Option* seed = nullptr;
  CLI::Option* threads = nullptr;
  CLI::Option* alpha_grid = nullptr;
  CLI::Option* split = nullptr;
  CLI::Option* winsorize = nullptr;
  CLI::Option* caches = nullptr;
  CLI::Option* steps = nullptr;
  CLI::Option* batch_size = nullptr;
  CLI::Option* lr = nullptr;
};

void add_common(CLI::App* cmd, Flags& f, Options& o) {
  cmd->add_option("--config", f.config, "TOML-style RunConfig file; flags override its keys");
  o.manifest = cmd->add_option("--manifest", f.manifest, "JSON listing manifest");
  o.out = cmd->add_option("--out", f.out, "directory that receives run directories (default runs)");
  o.run_name = cmd->add_option("--run-name", f.run_name, "run directory name (default UTC timestamp)");
  o.seed = cmd->add_option("--seed", f.seed, "seed for splits, initialization and training");
  o.threads = cmd->add_option("--threads", f.threads, "worker thread cap");
}

// Precedence: explicit flags > config file > defaults.
hedonic::RunConfig resolve(const Flags& f, const Options& o) {
  hedonic::RunConfig c;
  if (!f.config.empty()) c = hedonic::load_config(f.config);
  auto given = [](CLI::Option* opt) { return opt && opt->count() > 0; };
  if (given(o.manifest)) c.manifest = f.manifest;
  if (given(o.images)) c.images = f.images;
  if (given(o.preset)) c.preset = f.preset;
  if (given(o.weights)) c.weights = f.weights;
  if (given(o.out)) c.out = f.out;
  if (given(o.run_name)) c.run_name = f.run_name;
  if (given(o.seed)) c.seed = f.seed;
  if (given(o.threads)) c.threads = f.threads;
  if (given(o.alpha_grid)) c.alpha_grid = f.alpha_grid;
  if (given(o.caches)) c.caches = f.caches;
  if (given(o.steps)) c.steps = f.steps;
  if (given(o.batch_size)) c.batch_size = f.batch_size;
  if (given(o.lr)) c.learning_rate = f.lr;
  if (given(o.split)) {
    const auto r = hedonic::parse_number_list(f.split, 3, "--split");
    c.split = {r[0], r[1], r[2]};
  }
  if (given(o.winsorize)) {
    const auto w = hedonic::parse_number_list(f.winsorize, 2, "--winsorize");
    c.winsor_lower = w[0];
    c.winsor_upper = w[1];
  }
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hedonic house-price modelling with ViT image features"};
  app.require_subcommand(1);
  Flags f;
  // One Options per subcommand: only the parsed subcommand's options carry counts.
  Options od, op, ox, of;

  auto* describe = app.add_subcommand("describe", "print descriptive statistics of a manifest");
  add_common(describe, f, od);

  auto* pretrain = app.add_subcommand("pretrain", "DINO-pretrain a backbone on a directory of images");
  add_common(pretrain, f, op);
  op.images = pretrain->add_option("--images", f.images, "directory of .png/.ppm training images");
  op.preset = pretrain->add_option("--preset", f.preset, "vit-s/16, vit-s/8, vit-b/16, vit-b/8 or vit-mini/8");
  op.steps = pretrain->add_option("--steps", f.steps, "training steps");
  op.batch_size = pretrain->add_option("--batch-size", f.batch_size, "images per step");
  op.lr = pretrain->add_option("--lr", f.lr, "SGD learning rate");

  auto* extract = app.add_subcommand("extract", "pool backbone features per property into a cache");
  add_common(extract, f, ox);
  ox.images = extract->add_option("--images", f.images, "base directory for manifest image paths");
  ox.preset = extract->add_option("--preset", f.preset, "backbone preset");
  ox.weights = extract->add_option("--weights", f.weights, "VHW1 weight file (default: random init from --seed)");

  auto* fit = app.add_subcommand("fit", "fit baseline and image-augmented ridge models");
  add_common(fit, f, of);
  of.caches = fit->add_option("--cache", f.caches, "VHFC1 feature cache (repeatable)");
  of.weights = fit->add_option("--weights", f.weights, "weights the cache must have been extracted with");
  of.preset = fit->add_option("--preset", f.preset, "preset of --weights");
  of.alpha_grid = fit->add_option("--alpha-grid", f.alpha_grid, "default, a,b,c or log:lo:hi:n");
  of.split = fit->add_option("--split", f.split, "train,validation,test ratios (default 0.70,0.15,0.15)");
  of.winsorize = fit->add_option("--winsorize", f.winsorize, "lower,upper percentiles (default 1,99)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? hedonic::kExitOk : hedonic::kExitError;
  }

  const Options& o = describe->parsed() ? od : pretrain->parsed() ? op : extract->parsed() ? ox : of;
  return hedonic::run_with_exit_codes([&]() -> int {
    const hedonic::RunConfig cfg = resolve(f, o);
    if (describe->parsed()) return hedonic::cmd_describe(cfg);
    if (pretrain->parsed()) return hedonic::cmd_pretrain(cfg);
    if (extract->parsed()) return hedonic::cmd_extract(cfg);
    return hedonic::cmd_fit(cfg);
  });
}
