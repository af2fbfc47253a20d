/*
 * Copyright 2026 The HistoMIL Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// histomil: preprocess -> featurize -> train/crossval/sweep -> evaluate -> explain.
// Exit codes: 0 success, 2 invalid input or usage, 1 runtime failure.

#include <cstdio>
#include <iostream>
#include <regex>

#include "cli_support.hpp"

using namespace histomil;
using namespace histomil::cli;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  int argc = 0;
  char** argv = nullptr;
};

// --- model selection ----------------------------------------------------------

const std::vector<std::string> kModelKinds{"transformer", "attention_mil", "mean_pool"};

json model_defaults(const std::string& kind) {
  json m;
  if (kind == "transformer") m = to_json(ModelConfig{});
  else if (kind == "attention_mil") m = to_json(AttentionMilConfig{});
  else if (kind == "mean_pool") m = to_json(MeanPoolConfig{});
  else throw ValidationError("unknown model kind '" + kind + "'");
  m.erase("input_dim");
  m.erase("num_targets");
  m["kind"] = kind;
  return m;
}

TrainConfig train_defaults(const std::string& kind) {
  return kind == "transformer" ? transformer_train_config() : attention_mil_train_config();
}

// Resolves the configuration in two passes so that the model kind chosen by
// the file or flags selects its own defaults.
json resolve_config(const std::string& config_path, const Overrides& flags, json extra_defaults = json::object()) {
  auto defaults_for = [&](const std::string& kind) {
    json d = extra_defaults;
    d["model"] = model_defaults(kind);
    d["train"] = to_json(train_defaults(kind));
    return d;
  };
  json eff = effective_config(defaults_for("transformer"), config_path, flags);
  const std::string kind = eff["model"].value("kind", "transformer");
  if (kind != "transformer") eff = effective_config(defaults_for(kind), config_path, flags);
  return eff;
}

void add_model_flags(CLI::App* app, Overrides& o) {
  o.add<std::string>(app, "--model", "model", "kind", "transformer | attention_mil | mean_pool")
      ->check(CLI::IsMember(kModelKinds));
  o.add<int>(app, "--latent-dim", "model", "latent_dim", "transformer latent width");
  o.add<int>(app, "--heads", "model", "heads", "attention heads");
  o.add<int>(app, "--layers", "model", "layers", "transformer layers");
  o.add<int>(app, "--mlp-hidden", "model", "mlp_hidden", "MLP hidden width");
  o.add<std::string>(app, "--aggregation", "model", "aggregation", "class_token | global_average");
  o.add<double>(app, "--dropout", "model", "dropout", "dropout probability");
  o.add_flag(app, "--head-layer-norm", "model", "head_layer_norm", "LayerNorm before the heads");
  o.add<int>(app, "--attention-dim", "model", "attention_dim", "AttentionMIL hidden width");
}

void add_train_flags(CLI::App* app, Overrides& o) {
  o.add<std::string>(app, "--optimizer", "train", "optimizer", "adamw | adam");
  o.add<double>(app, "--lr", "train", "lr", "learning rate");
  o.add<double>(app, "--weight-decay", "train", "weight_decay", "weight decay");
  o.add<int>(app, "--epochs", "train", "epochs", "training epochs");
  o.add<int>(app, "--eval-interval", "train", "eval_interval", "steps between validations");
  o.add<double>(app, "--grad-clip", "train", "grad_clip_norm", "global gradient norm cap");
}

// Calls fn(make) where make(seed) builds a fresh model of the configured kind.
template <class Fn>
void with_model(const json& model_cfg, int input_dim, int num_targets, Fn&& fn) {
  json m = model_cfg;
  const std::string kind = m.value("kind", "transformer");
  m.erase("kind");
  m["input_dim"] = input_dim;
  m["num_targets"] = num_targets;
  if (kind == "transformer") {
    const ModelConfig c = model_config_from_json(m);
    fn([c](std::uint64_t seed) { return TransformerModel<float>(c, seed); });
  } else if (kind == "attention_mil") {
    const AttentionMilConfig c = attention_mil_config_from_json(m);
    fn([c](std::uint64_t seed) { return AttentionMilModel<float>(c, seed); });
  } else if (kind == "mean_pool") {
    const MeanPoolConfig c = mean_pool_config_from_json(m);
    fn([c](std::uint64_t seed) { return MeanPoolModel<float>(c, seed); });
  } else {
    throw ValidationError("unknown model kind '" + kind + "'");
  }
}

template <class Model>
CheckpointMeta checkpoint_meta(const TrainResult<Model>& r, std::uint64_t seed,
                               const std::vector<std::string>& targets, const json& train_cfg) {
  return {Model::kind, r.best.config_json(), r.best_iteration, r.best_val_auroc, seed,
          {{"targets", targets}, {"train", train_cfg}, {"aborted", r.aborted}}};
}

template <class Model>
std::vector<ScoreRow> score_rows(const Model& model, const std::vector<TrainingBag<float>>& bags,
                                 const std::vector<std::string>& targets, int fold) {
  std::vector<ScoreRow> rows;
  for (const auto& b : bags) {
    const RowVec<float> logits = model.logits(b.x);
    for (std::size_t j = 0; j < targets.size(); ++j) {
      if (!b.labels[j]) continue;
      rows.push_back({b.patient_id, targets[j], fold,
                      sigmoid(static_cast<double>(logits(static_cast<Eigen::Index>(j)))), *b.labels[j] ? 1 : 0});
    }
  }
  return rows;
}

void echo_config(const json& cfg) { std::cout << "effective config: " << cfg.dump() << '\n'; }

struct Dataset {
  DatasetManifest manifest;
  std::vector<EmbeddingBag> bags;
};

Dataset load_dataset(const std::string& path, RunMetadata& meta, const std::string& role = "manifest") {
  Dataset d{load_manifest(path), {}};
  meta.input(role, path);
  d.bags = load_bags(d.manifest);
  std::string combined;
  for (const auto& row : d.manifest.rows) combined += sha256_file(d.manifest.resolve(row));
  meta.doc["inputs"][role]["bags_sha256"] = sha256_bytes(combined);
  if (d.bags.empty()) throw ValidationError("manifest '" + path + "' lists no bags");
  return d;
}

// --- preprocess ---------------------------------------------------------------

FilterParams filter_from_json(const json& j) {
  FilterParams p;
  p.white_threshold = j.value("white_threshold", p.white_threshold);
  p.max_background = j.value("max_background", p.max_background);
  p.sigma = j.value("canny_sigma", p.sigma);
  p.low = j.value("canny_low", p.low);
  p.high = j.value("canny_high", p.high);
  p.min_edge_fraction = j.value("min_edge_fraction", p.min_edge_fraction);
  if (p.white_threshold < 0 || p.white_threshold > 255 || p.max_background < 0 || p.max_background > 1 ||
      p.sigma <= 0 || p.low < 0 || p.high < p.low || p.min_edge_fraction < 0)
    throw ValidationError("invalid tile filter parameters");
  return p;
}

json filter_to_json(const FilterParams& p) {
  return {{"white_threshold", p.white_threshold}, {"max_background", p.max_background},
          {"canny_sigma", p.sigma},               {"canny_low", p.low},
          {"canny_high", p.high},                 {"min_edge_fraction", p.min_edge_fraction}};
}

void add_preprocess(CLI::App& app, Globals& g, std::function<void()>& run) {
  auto* sub = app.add_subcommand("preprocess", "Tessellate an RGB image into filtered tiles");
  auto input = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto slide = std::make_shared<std::string>();
  auto config = std::make_shared<std::string>();
  auto flags = std::make_shared<Overrides>();
  sub->add_option("--input", *input, "input PNG")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", *out, "output directory")->required();
  sub->add_option("--slide-id", *slide, "slide identifier (default: input file stem)");
  sub->add_option("--config", *config, "JSON config file")->check(CLI::ExistingFile);
  flags->add<double>(sub, "--mpp", "preprocess", "mpp", "microns per pixel of the input")->required();
  flags->add<double>(sub, "--target-mpp", "preprocess", "target_mpp", "target microns per pixel");
  flags->add<int>(sub, "--tile", "preprocess", "tile", "tile edge in pixels");
  flags->add<int>(sub, "--white-threshold", "filter", "white_threshold", "background intensity cut");
  flags->add<double>(sub, "--max-background", "filter", "max_background", "max background fraction");
  flags->add<double>(sub, "--canny-sigma", "filter", "canny_sigma", "Canny Gaussian sigma");
  flags->add<double>(sub, "--canny-low", "filter", "canny_low", "Canny low threshold");
  flags->add<double>(sub, "--canny-high", "filter", "canny_high", "Canny high threshold");
  flags->add<double>(sub, "--min-edge-fraction", "filter", "min_edge_fraction", "min edge pixel fraction");
  sub->callback([=, &g, &run] {
    run = [=, &g] {
      RunMetadata meta("preprocess", g.argc, g.argv);
      const json defaults{{"preprocess", {{"target_mpp", 0.5}, {"tile", 512}}},
                          {"filter", filter_to_json(FilterParams{})}};
      const json cfg = effective_config(defaults, *config, *flags);
      echo_config(cfg);
      const FilterParams fp = filter_from_json(cfg["filter"]);
      const double mpp = cfg["preprocess"]["mpp"].get<double>();
      if (!(mpp > 0)) throw ValidationError("--mpp must be > 0");
      const std::string slide_id = slide->empty() ? fs::path(*input).stem().string() : *slide;
      meta.input("image", *input);
      TileGrid grid = tessellate(read_png(*input, mpp), cfg["preprocess"]["target_mpp"].get<double>(),
                                 cfg["preprocess"]["tile"].get<int>(), slide_id);
      filter_tiles(grid, fp);
      ensure_dir(*out);
      json tiles = json::array();
      int kept = 0;
      for (const auto& t : grid.tiles) {
        json entry{{"grid_x", t.grid_x}, {"grid_y", t.grid_y}, {"informative", t.informative}};
        if (t.informative) {
          const std::string name = slide_id + "_" + std::to_string(t.grid_x) + "_" + std::to_string(t.grid_y) + ".png";
          write_png((fs::path(*out) / name).string(), t);
          entry["file"] = name;
          ++kept;
        }
        tiles.push_back(entry);
      }
      const json manifest{{"slide_id", slide_id},
                          {"source_mpp", grid.source_mpp},
                          {"target_mpp", grid.target_mpp},
                          {"tile_px", cfg["preprocess"]["tile"]},
                          {"grid_cols", grid.grid_cols},
                          {"grid_rows", grid.grid_rows},
                          {"kept", kept},
                          {"rejected", static_cast<int>(grid.tiles.size()) - kept},
                          {"filter", filter_to_json(fp)},
                          {"tiles", tiles}};
      write_json(fs::path(*out) / "grid.json", manifest);
      meta.doc["config"] = cfg;
      meta.write_for(*out);
      std::cout << slide_id << ": kept " << kept << " of " << grid.tiles.size() << " tiles\n";
    };
  });
}

// --- stain --------------------------------------------------------------------

void add_stain_estimate(CLI::App& app, Globals& g, std::function<void()>& run) {
  auto* sub = app.add_subcommand("stain-estimate", "Estimate a Macenko stain profile from one tile");
  auto tile = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto use_template = std::make_shared<bool>(false);
  sub->add_option("--tile", *tile, "input tile PNG")->check(CLI::ExistingFile);
  sub->add_flag("--template", *use_template, "use the bundled reference template instead of --tile");
  sub->add_option("--out", *out, "output profile JSON")->required();
  sub->callback([=, &g, &run] {
    run = [=, &g] {
      if (tile->empty() == !*use_template)
        throw ValidationError("stain-estimate needs exactly one of --tile or --template");
      RunMetadata meta("stain-estimate", g.argc, g.argv);
      Tile t;
      if (*use_template) {
        t = synthetic_he_template();
        meta.doc["inputs"]["tile"] = "bundled template";
      } else {
        t = read_tile_png(*tile);
        meta.input("tile", *tile);
      }
      const StainProfile p = estimate_stain_profile(rgb_to_od(t));
      ensure_parent(*out);
      save_profile(*out, p);
      meta.write_for(*out);
      std::cout << profile_to_json(p).dump() << '\n';
    };
  });
}

std::vector<fs::path> png_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("'" + dir.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ValidationError("no PNG tiles in '" + dir.string() + "'");
  return files;
}

void add_stain_normalize(CLI::App& app, Globals& g, std::function<void()>& run) {
  auto* sub = app.add_subcommand("stain-normalize", "Macenko-normalize a directory of tiles");
  auto tiles = std::make_shared<std::string>();
  auto reference = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto per_slide = std::make_shared<bool>(false);
  sub->add_option("--tiles", *tiles, "input tile directory")->required()->check(CLI::ExistingDirectory);
  sub->add_option("--reference", *reference, "reference profile JSON (default: bundled template)")
      ->check(CLI::ExistingFile);
  sub->add_option("--out", *out, "output directory")->required();
  sub->add_flag("--per-slide", *per_slide, "estimate one source profile from all tiles");
  sub->callback([=, &g, &run] {
    run = [=, &g] {
      RunMetadata meta("stain-normalize", g.argc, g.argv);
      meta.input("tiles", *tiles);
      StainProfile ref = default_reference_profile();
      if (!reference->empty()) {
        ref = load_profile(*reference);
        meta.input("reference", *reference);
      }
      const auto files = png_files(*tiles);
      std::vector<Tile> in(files.size());
      for (std::size_t i = 0; i < files.size(); ++i) in[i] = read_tile_png(files[i].string());
      std::vector<Tile> result(files.size());
      std::vector<char> normalized(files.size(), 0);
      if (*per_slide) {
        ODImage all;
        Eigen::Index rows = 0;
        for (const auto& t : in) rows += static_cast<Eigen::Index>(t.pixel_count());
        all.values.resize(rows, 3);
        all.width = 1;
        all.height = static_cast<int>(rows);
        Eigen::Index at = 0;
        for (const auto& t : in) {
          const ODImage od = rgb_to_od(t);
          all.values.middleRows(at, od.values.rows()) = od.values;
          at += od.values.rows();
        }
        std::optional<StainProfile> source;
        try {
          source = estimate_stain_profile(all);
        } catch (const StainEstimationFailed& e) {
          std::cerr << "warning: " << e.what() << "; tiles passed through\n";
        }
        parallel_for(in.size(), [&](std::size_t i) {
          result[i] = source ? apply_stain_normalization(in[i], *source, ref) : in[i];
          normalized[i] = source.has_value();
        });
      } else {
        parallel_for(in.size(), [&](std::size_t i) {
          NormalizedTile n = normalize_tile(in[i], ref);
          result[i] = std::move(n.tile);
          normalized[i] = n.normalized;
        });
      }
      ensure_dir(*out);
      int done = 0;
      for (std::size_t i = 0; i < files.size(); ++i) {
        write_png((fs::path(*out) / files[i].filename()).string(), result[i]);
        done += normalized[i];
      }
      const fs::path grid = fs::path(*tiles) / "grid.json";
      if (fs::exists(grid)) fs::copy_file(grid, fs::path(*out) / "grid.json", fs::copy_options::overwrite_existing);
      write_json(fs::path(*out) / "normalization.json",
                 {{"mode", *per_slide ? "per_slide" : "per_tile"},
                  {"reference", profile_to_json(ref)},
                  {"normalized", done},
                  {"passthrough", static_cast<int>(files.size()) - done}});
      meta.write_for(*out);
      std::cout << "normalized " << done << " of " << files.size() << " tiles\n";
    };
  });
}

// --- featurize ----------------------------------------------------------------

void add_featurize(CLI::App& app, Globals& g, std::function<void()>& run) {
  auto* sub = app.add_subcommand("featurize", "Embed a directory of tiles into a bag file");
  auto tiles = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto slide = std::make_shared<std::string>();
  sub->add_option("--tiles", *tiles, "tile directory")->required()->check(CLI::ExistingDirectory);
  sub->add_option("--out", *out, "output bag file (.emb)")->required();
  sub->add_option("--slide-id", *slide, "slide identifier (default: from grid.json or directory name)");
  sub->callback([=, &g, &run] {
    run = [=, &g] {
      RunMetadata meta("featurize", g.argc, g.argv);
      meta.input("tiles", *tiles);
      EmbeddingBag bag;
      bag.slide_id = *slide;
      std::vector<fs::path> files;
      const fs::path grid_path = fs::path(*tiles) / "grid.json";
      if (fs::exists(grid_path)) {
        const json grid = read_json_file(grid_path.string());
        if (bag.slide_id.empty()) bag.slide_id = grid.value("slide_id", "");
        for (const auto& t : grid.at("tiles"))
          if (t.contains("file")) {
            files.push_back(fs::path(*tiles) / t["file"].get<std::string>());
            bag.coords.push_back({t["grid_x"].get<std::uint32_t>(), t["grid_y"].get<std::uint32_t>()});
          }
        if (files.empty()) throw ValidationError("grid.json lists no kept tiles");
      } else {
        files = png_files(*tiles);
        static const std::regex pattern(R"(.*_(\d+)_(\d+)\.png)");
        for (const auto& f : files) {
          std::smatch m;
          const std::string name = f.filename().string();
          if (!std::regex_match(name, m, pattern)) {
            bag.coords.clear();
            break;
          }
          bag.coords.push_back({static_cast<std::uint32_t>(std::stoul(m[1])), static_cast<std::uint32_t>(std::stoul(m[2]))});
        }
      }
      if (bag.slide_id.empty()) bag.slide_id = fs::absolute(*tiles).lexically_normal().filename().string();
      bag.embeddings.resize(static_cast<Eigen::Index>(files.size()), kStubFeatureDim);
      parallel_for(files.size(), [&](std::size_t i) {
        bag.embeddings.row(static_cast<Eigen::Index>(i)) = stub_extract(read_tile_png(files[i].string()), g.seed).transpose();
      });
      ensure_parent(*out);
      write_bag(bag, *out);
      meta.doc["config"] = {{"extractor", "stub"}, {"seed", g.seed}, {"dim", kStubFeatureDim}};
      meta.write_for(*out);
      std::cout << bag.slide_id << ": " << files.size() << " tiles -> " << *out << '\n';
    };
  });
}

// --- synth --------------------------------------------------------------------

json synth_to_json(const SynthConfig& c) {
  return {{"dim", c.dim},           {"min_bag", c.min_bag},         {"max_bag", c.max_bag},
          {"min_witness", c.min_witness}, {"max_witness", c.max_witness}, {"shift", c.shift},
          {"sigma", c.sigma},       {"prevalence", c.prevalence},   {"direction_seed", c.direction_seed}};
}

SynthConfig synth_from_json(const json& j) {
  SynthConfig c;
  c.dim = j.value("dim", c.dim);
  c.min_bag = j.value("min_bag", c.min_bag);
  c.max_bag = j.value("max_bag", c.max_bag);
  c.min_witness = j.value("min_witness", c.min_witness);
  c.max_witness = j.value("max_witness", c.max_witness);
  c.shift = j.value("shift", c.shift);
  c.sigma = j.value("sigma", c.sigma);
  c.prevalence = j.value("prevalence", c.prevalence);
  c.direction_seed = j.value("direction_seed", c.direction_seed);
  if (c.dim < 1 || c.min_bag < 1 || c.max_bag < c.min_bag || c.min_witness < 1 ||
      c.max_witness < c.min_witness || !(c.sigma > 0) || c.prevalence < 0 || c.prevalence > 1)
    throw ValidationError("invalid synthetic task parameters");
  return c;
}

// A white 1536x1024 canvas at 0.5 um/px with an elliptical H&E tissue region.
RasterImage synthetic_slide(std::uint64_t seed) {
  const int w = 1536, h = 1024;
  RasterImage img(w, h, 0.5, 255);
  const Tile tissue = synthetic_he_template(h, seed);
  const double cx = w / 2.0, cy = h / 2.0, rx = w * 0.36, ry = h * 0.38;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double u = (x - cx) / rx, v = (y - cy) / ry;
      if (u * u + v * v > 1.0) continue;
      const int tx = (x - (w - h) / 2 + h) % h;
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = tissue.pixels[(static_cast<std::size_t>(y) * h + tx) * 3 + c];
    }
  return img;
}

void add_synth(CLI::App& app, Globals& g, std::function<void()>& run) {
  auto* sub = app.add_subcommand("synth", "Generate a synthetic MIL dataset (manifest + bags)");
  auto out = std::make_shared<std::string>("synthetic");
  auto count = std::make_shared<int>(500);
  auto prefix = std::make_shared<std::string>("synth");
  auto target = std::make_shared<std::string>("LABEL");
  auto config = std::make_shared<std::string>();
  auto slide = std::make_shared<std::string>();
  auto flags = std::make_shared<Overrides>();
  sub->add_option("--out", *out, "output directory")->capture_default_str();
  sub->add_option("--slide", *slide, "also write a synthetic H&E slide PNG (0.5 um/px) for preprocess");
  sub->add_option("--bags", *count, "number of bags")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--prefix", *prefix, "slide/patient id prefix")->capture_default_str();
  sub->add_option("--target", *target, "target column name")->capture_default_str();
  sub->add_option("--config", *config, "JSON config file")->check(CLI::ExistingFile);
  flags->add<int>(sub, "--dim", "synth", "dim", "embedding dimension");
  flags->add<double>(sub, "--shift", "synth", "shift", "witness shift in sigmas");
  flags->add<int>(sub, "--min-bag", "synth", "min_bag", "smallest bag");
  flags->add<int>(sub, "--max-bag", "synth", "max_bag", "largest bag");
  flags->add<int>(sub, "--min-witness", "synth", "min_witness", "fewest witnesses per positive bag");
  flags->add<int>(sub, "--max-witness", "synth", "max_witness", "most witnesses per positive bag");
  flags->add<double>(sub, "--prevalence", "synth", "prevalence", "positive fraction");
  flags->add<std::uint64_t>(sub, "--direction-seed", "synth", "direction_seed", "seed of the witness direction");
  sub->callback([=, &g, &run] {
    run = [=, &g] {
      RunMetadata meta("synth", g.argc, g.argv);
      const json cfg = effective_config({{"synth", synth_to_json(SynthConfig{})}}, *config, *flags);
      echo_config(cfg);
      const SynthConfig sc = synth_from_json(cfg["synth"]);
      const auto bags = generate_synthetic_bags(*count, g.seed, sc, *prefix);
      const fs::path dir(*out);
      ensure_dir(dir / "bags");
      DatasetManifest m = synthetic_manifest(bags, *target);
      json witnesses = json::object();
      for (std::size_t i = 0; i < bags.size(); ++i) {
        m.rows[i].feature_path = "bags/" + m.rows[i].feature_path;
        write_bag(bags[i].bag, (dir / m.rows[i].feature_path).string());
        std::vector<int> idx;
        for (std::size_t k = 0; k < bags[i].witness.size(); ++k)
          if (bags[i].witness[k]) idx.push_back(static_cast<int>(k));
        witnesses[bags[i].bag.slide_id] = idx;
      }
      write_manifest(m, (dir / "manifest.csv").string());
      write_json(dir / "witnesses.json", witnesses);
      meta.doc["config"] = cfg;
      meta.doc["config"]["bags"] = *count;
      meta.doc["config"]["seed"] = g.seed;
      if (!slide->empty()) {
        ensure_parent(*slide);
        write_png(*slide, synthetic_slide(g.seed));
        meta.write_for(*slide);
      }
      meta.write_for(dir);
      int pos = 0;
      for (const auto& b : bags) pos += b.positive;
      std::cout << "wrote " << bags.size() << " bags (" << pos << " positive) to " << dir.string() << '\n';
    };
  });
}

// --- train / crossval / sweep -------------------------------------------------

struct TrainArgs {
  std::string manifest, config, out, val_manifest;
  std::vector<std::string> targets;
  Overrides flags;
};

void add_common_training(CLI::App* sub, TrainArgs& a) {
  sub->add_option("--manifest", a.manifest, "dataset manifest CSV")->required()->check(CLI::ExistingFile);
  sub->add_option("--target", a.targets, "target column(s)")->required()->delimiter(',');
  sub->add_option("--config", a.config, "JSON config file with 'model' and 'train' sections")
      ->check(CLI::ExistingFile);
  add_model_flags(sub, a.flags);
  add_train_flags(sub, a.flags);
}

TrainConfig train_config_of(const json& cfg, std::uint64_t seed) {
  TrainConfig tc = train_config_from_json(cfg["train"]);
  tc.seed = seed;
  return tc;
}

void add_train(CLI::App& app, Globals& g, std::function<void()>& run) {
  auto* sub = app.add_subcommand("train", "Train one model and write its best checkpoint");
  auto a = std::make_shared<TrainArgs>();
  add_common_training(sub, *a);
  sub->add_option("--val-manifest", a->val_manifest,
                  "validation manifest (default: a stratified fifth of --manifest)")
      ->check(CLI::ExistingFile);
  sub->add_option("--out", a->out, "output checkpoint")->required();
  sub->callback([=, &g, &run] {
    run = [=, &g] {
      RunMetadata meta("train", g.argc, g.argv);
      const json cfg = resolve_config(a->config, a->flags);
      echo_config(cfg);
      const TrainConfig tc = train_config_of(cfg, g.seed);
      const Dataset data = load_dataset(a->manifest, meta);
      std::vector<TrainingBag<float>> train, val;
      if (!a->val_manifest.empty()) {
        const Dataset v = load_dataset(a->val_manifest, meta, "val_manifest");
        train = training_bags<float>(data.manifest, data.bags, a->targets);
        val = training_bags<float>(v.manifest, v.bags, a->targets);
        meta.doc["validation"] = "val_manifest";
      } else {
        const SplitPlan plan = make_folds(data.manifest, a->targets.front(), 5, g.seed);
        std::vector<std::string> rest;
        for (int f = 1; f < 5; ++f)
          rest.insert(rest.end(), plan.folds[static_cast<std::size_t>(f)].begin(),
                      plan.folds[static_cast<std::size_t>(f)].end());
        train = training_bags<float>(data.manifest, data.bags, a->targets, &rest);
        val = training_bags<float>(data.manifest, data.bags, a->targets, &plan.folds[0]);
        meta.doc["validation"] = {{"split", "fold 0 of a stratified 5-fold split"}, {"patients", plan.folds[0]}};
      }
      with_model(cfg["model"], static_cast<int>(data.bags.front().d()), static_cast<int>(a->targets.size()),
                 [&](auto make) {
                   const auto r = train_loop(make(g.seed), train, val, tc);
                   ensure_parent(a->out);
                   write_checkpoint(a->out, r.best.params, checkpoint_meta(r, g.seed, a->targets, to_json(tc)));
                   meta.doc["result"] = {{"best_iteration", r.best_iteration},
                                         {"best_val_auroc", r.best_val_auroc},
                                         {"total_steps", r.total_steps},
                                         {"aborted", r.aborted}};
                   std::cout << "best validation AUROC " << r.best_val_auroc << " at step " << r.best_iteration
                             << " of " << r.total_steps << '\n';
                 });
      meta.doc["config"] = cfg;
      meta.write_for(a->out);
    };
  });
}

void add_crossval(CLI::App& app, Globals& g, std::function<void()>& run) {
  auto* sub = app.add_subcommand("crossval", "Rotating stratified k-fold cross-validation");
  auto a = std::make_shared<TrainArgs>();
  auto folds = std::make_shared<int>(5);
  add_common_training(sub, *a);
  sub->add_option("--folds", *folds, "number of folds")->capture_default_str()->check(CLI::Range(3, 100));
  sub->add_option("--out", a->out, "output directory")->required();
  sub->callback([=, &g, &run] {
    run = [=, &g] {
      RunMetadata meta("crossval", g.argc, g.argv);
      const json cfg = resolve_config(a->config, a->flags);
      echo_config(cfg);
      const TrainConfig tc = train_config_of(cfg, g.seed);
      const Dataset data = load_dataset(a->manifest, meta);
      const fs::path dir(a->out);
      ensure_dir(dir);
      json results;
      with_model(cfg["model"], static_cast<int>(data.bags.front().d()), static_cast<int>(a->targets.size()),
                 [&](auto make) {
                   using Model = decltype(make(0));
                   SplitPlan plan;
                   const auto outcomes = cross_validate<Model>(
                       data.manifest, data.bags, a->targets, *folds, g.seed, tc,
                       [&](int fold) { return make(g.seed + static_cast<std::uint64_t>(fold)); }, &plan);
                   std::vector<ScoreRow> all_scores;
                   json per_fold = json::array();
                   for (const auto& f : outcomes) {
                     const std::string name = "fold_" + std::to_string(f.fold) + ".ckpt";
                     TrainConfig fold_cfg = tc;
                     fold_cfg.seed = tc.seed + static_cast<std::uint64_t>(f.fold);
                     write_checkpoint((dir / name).string(), f.result.best.params,
                                      checkpoint_meta(f.result, fold_cfg.seed, a->targets, to_json(fold_cfg)));
                     const auto test = training_bags<float>(data.manifest, data.bags, a->targets, &f.roles.test);
                     const auto rows = score_rows(f.result.best, test, a->targets, f.fold);
                     all_scores.insert(all_scores.end(), rows.begin(), rows.end());
                     json fj{{"fold", f.fold},
                             {"checkpoint", name},
                             {"best_iteration", f.result.best_iteration},
                             {"best_val_auroc", f.result.best_val_auroc},
                             {"test", json::object()}};
                     for (std::size_t t = 0; t < a->targets.size(); ++t)
                       fj["test"][a->targets[t]] = {{"auroc", to_json(f.test[t].auroc)},
                                                    {"auprc", to_json(f.test[t].auprc)},
                                                    {"n", f.test[t].scores.size()}};
                     per_fold.push_back(fj);
                   }
                   write_scores_csv(dir / "scores.csv", all_scores);
                   write_json(dir / "splits.json", to_json(plan));
                   results = {{"model", Model::kind},
                              {"folds", *folds},
                              {"summary", crossval_summary(outcomes, a->targets)},
                              {"per_fold", per_fold}};
                 });
      results["config"] = cfg;
      write_json(dir / "results.json", results);
      meta.doc["config"] = cfg;
      meta.write_for(dir);
      for (const auto& t : a->targets) {
        const auto& s = results["summary"][t]["auroc"];
        std::printf("%s AUROC %.4f +- %.4f over %d folds\n", t.c_str(), s["mean"].get<double>(),
                    s["std"].get<double>(), *folds);
      }
    };
  });
}

void add_sweep(CLI::App& app, Globals& g, std::function<void()>& run) {
  auto* sub = app.add_subcommand("sweep", "Data-efficiency sweep over training-set sizes");
  auto a = std::make_shared<TrainArgs>();
  auto sizes = std::make_shared<std::vector<int>>();
  auto repeats = std::make_shared<int>(5);
  add_common_training(sub, *a);
  sub->add_option("--sizes", *sizes, "training-set sizes, comma separated")->required()->delimiter(',');
  sub->add_option("--repeats", *repeats, "repeats per size")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--out", a->out, "output JSON")->required();
  sub->callback([=, &g, &run] {
    run = [=, &g] {
      RunMetadata meta("sweep", g.argc, g.argv);
      const json cfg = resolve_config(a->config, a->flags);
      echo_config(cfg);
      if (a->targets.size() != 1) throw ValidationError("sweep takes exactly one --target");
      const TrainConfig tc = train_config_of(cfg, g.seed);
      const Dataset data = load_dataset(a->manifest, meta);
      json summary;
      with_model(cfg["model"], static_cast<int>(data.bags.front().d()), 1, [&](auto make) {
        using Model = decltype(make(0));
        const auto points = data_efficiency_sweep<Model>(
            data.manifest, data.bags, a->targets.front(), *sizes, *repeats, g.seed, tc,
            [&](int repeat) { return make(g.seed + static_cast<std::uint64_t>(repeat)); });
        summary = sweep_summary(points);
        summary["model"] = Model::kind;
      });
      summary["config"] = cfg;
      ensure_parent(a->out);
      write_json(a->out, summary);
      meta.doc["config"] = cfg;
      meta.write_for(a->out);
      for (const auto& s : summary["sizes"])
        std::printf("size %d: test AUROC %.4f +- %.4f\n", s["size"].get<int>(), s["mean"].get<double>(),
                    s["std"].get<double>());
    };
  });
}

// --- evaluate -----------------------------------------------------------------

void add_evaluate(CLI::App& app, Globals& g, std::function<void()>& run) {
  auto* sub = app.add_subcommand("evaluate", "Metrics and threshold report for a scores CSV");
  auto scores = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto target = std::make_shared<std::string>();
  auto selection = std::make_shared<std::string>();
  auto curves = std::make_shared<std::string>();
  sub->add_option("--scores", *scores, "CSV with score and label columns")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", *out, "output JSON")->required();
  sub->add_option("--target", *target, "only rows of this target");
  sub->add_option("--gmean-selection", *selection, "scores CSV that selects the gmean threshold")
      ->check(CLI::ExistingFile);
  sub->add_option("--curves", *curves, "directory for ROC/PR CSV and PNG files");
  sub->callback([=, &g, &run] {
    run = [=, &g] {
      RunMetadata meta("evaluate", g.argc, g.argv);
      meta.input("scores", *scores);
      const ScoredSet s = read_scores_csv(*scores, *target);
      std::optional<ScoredSet> sel;
      if (!selection->empty()) {
        sel = read_scores_csv(*selection, *target);
        meta.input("gmean_selection", *selection);
      }
      json report = evaluation_report(s, sel ? &*sel : nullptr);
      const std::string table = format_confusion_table(threshold_report(s));
      report["confusion_table"] = table;
      if (!target->empty()) report["target"] = *target;
      if (!curves->empty()) {
        const fs::path dir(*curves);
        ensure_dir(dir);
        write_curve_csv((dir / "roc.csv").string(), roc_points(s), "fpr", "tpr");
        write_curve_csv((dir / "pr.csv").string(), pr_points(s), "recall", "precision");
        write_png((dir / "roc.png").string(), plot_curve(roc_points(s), true));
        write_png((dir / "pr.png").string(), plot_curve(pr_points(s), false));
        meta.write_for(dir);
      }
      ensure_parent(*out);
      write_json(*out, report);
      meta.write_for(*out);
      std::printf("AUROC %.4f  AUPRC %.4f  n=%zu\n\n%s", report["auroc"].get<double>(),
                  report["auprc"].get<double>(), s.size(), table.c_str());
    };
  });
}

// --- explain ------------------------------------------------------------------

void add_explain(CLI::App& app, Globals& g, std::function<void()>& run) {
  auto* sub = app.add_subcommand("explain", "Attention rollout, per-head and per-patch heatmaps for one bag");
  auto ckpt = std::make_shared<std::string>();
  auto bag_path = std::make_shared<std::string>();
  auto grid = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto thumbnail = std::make_shared<std::string>();
  auto target = std::make_shared<int>(0);
  auto cell = std::make_shared<int>(8);
  sub->add_option("--checkpoint", *ckpt, "class-token transformer checkpoint")->required()->check(CLI::ExistingFile);
  sub->add_option("--bag", *bag_path, "bag file (.emb)")->required()->check(CLI::ExistingFile);
  sub->add_option("--grid", *grid, "grid.json from preprocess (default: bag coordinates)")->check(CLI::ExistingFile);
  sub->add_option("--out", *out, "output directory")->required();
  sub->add_option("--thumbnail", *thumbnail, "slide PNG drawn under the heatmaps")->check(CLI::ExistingFile);
  sub->add_option("--target-index", *target, "target (head) index")->capture_default_str()->check(CLI::NonNegativeNumber);
  sub->add_option("--cell-px", *cell, "pixels per tile")->capture_default_str()->check(CLI::PositiveNumber);
  sub->callback([=, &g, &run] {
    run = [=, &g] {
      RunMetadata meta("explain", g.argc, g.argv);
      meta.input("checkpoint", *ckpt);
      meta.input("bag", *bag_path);
      const RawCheckpoint raw = read_checkpoint(*ckpt);
      if (raw.meta.model_kind != "transformer")
        throw UnsupportedAggregation("explain needs a transformer checkpoint, got '" + raw.meta.model_kind + "'");
      TransformerModel<float> model;
      model.config = model_config_from_json(raw.meta.config);
      model.params = init_model_params<float>(model.config, 0);
      load_tensors(model.params, raw);
      const EmbeddingBag bag = read_bag(*bag_path);
      const Mat<float> x = bag.embeddings;
      const auto fwd = forward(x, model.params, model.config, true);
      const AttentionTrace& trace = *fwd.trace;
      const RolloutResult rollout = attention_rollout(trace, *target);
      const auto heads = per_head_class_attention(trace, -1, *target);
      const auto class_scores = per_patch_class_scores(model, x, *target);

      if (bag.coords.size() != static_cast<std::size_t>(bag.n()))
        throw ValidationError("bag has no tile coordinates; heatmaps need them");
      HeatmapLayout layout = layout_from_coords(bag.coords);
      if (!grid->empty()) {
        meta.input("grid", *grid);
        const json gj = read_json_file(*grid);
        layout.cols = std::max(layout.cols, gj.at("grid_cols").get<int>());
        layout.rows = std::max(layout.rows, gj.at("grid_rows").get<int>());
      }
      RasterImage thumb;
      if (!thumbnail->empty()) {
        thumb = read_png(*thumbnail);
        meta.input("thumbnail", *thumbnail);
      }
      const RasterImage* under = thumbnail->empty() ? nullptr : &thumb;
      const fs::path dir(*out);
      ensure_dir(dir);
      write_png((dir / "rollout.png").string(),
                render_heatmap(layout, quantile_clamp_normalize(rollout.scores), HeatmapMode::attention, *cell, under));
      write_png((dir / "class_scores.png").string(),
                render_heatmap(layout, class_scores, HeatmapMode::class_score, *cell, under));
      for (std::size_t h = 0; h < heads.size(); ++h)
        write_png((dir / ("head_" + std::to_string(h + 1) + ".png")).string(),
                  render_heatmap(layout, quantile_clamp_normalize(heads[h]), HeatmapMode::attention, *cell, under));
      std::ofstream csv(dir / "scores.csv");
      csv.precision(17);
      csv << "tile,grid_x,grid_y,rollout,class_score";
      for (std::size_t h = 0; h < heads.size(); ++h) csv << ",head_" << h + 1;
      csv << '\n';
      for (Eigen::Index i = 0; i < bag.n(); ++i) {
        const auto k = static_cast<std::size_t>(i);
        csv << i << ',' << bag.coords[k][0] << ',' << bag.coords[k][1] << ',' << rollout.scores[k] << ','
            << class_scores[k];
        for (const auto& hm : heads) csv << ',' << hm[k];
        csv << '\n';
      }
      meta.doc["result"] = {{"bag_logit", fwd.logits(*target)}, {"rollout_degenerate", rollout.degenerate}};
      meta.write_for(dir);
      std::cout << "wrote rollout, class-score and " << heads.size() << " head maps for " << bag.n()
                << " tiles to " << dir.string() << '\n';
    };
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"histomil: transformer multiple-instance learning for whole-slide images"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", kVersion);
  Globals g;
  g.argc = argc;
  g.argv = argv;
  app.add_option("--seed", g.seed, "seed for every stochastic component")->capture_default_str();
  app.add_option("--threads", g.threads, "worker thread cap (0 = all cores)")->capture_default_str();
  std::function<void()> run;
  add_preprocess(app, g, run);
  add_stain_estimate(app, g, run);
  add_stain_normalize(app, g, run);
  add_featurize(app, g, run);
  add_synth(app, g, run);
  add_train(app, g, run);
  add_crossval(app, g, run);
  add_sweep(app, g, run);
  add_evaluate(app, g, run);
  add_explain(app, g, run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  max_threads() = g.threads;
  try {
    run();
    return 0;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: invalid configuration value: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
