#include "cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "tsal/common.hpp"
#include "tsal/config.hpp"
#include "tsal/datapipe.hpp"
#include "tsal/encoders.hpp"
#include "tsal/geometry.hpp"
#include "tsal/image.hpp"
#include "tsal/metrics.hpp"
#include "tsal/model.hpp"
#include "tsal/tensor_io.hpp"
#include "tsal/train.hpp"

namespace tsal::cli {

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string attention, head, sim_est, skips;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonFlags& c) {
  cmd->add_option("--config", c.config, "key=value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "run seed");
  cmd->add_option("--attention", c.attention, "attention mode")->check(CLI::IsMember({"vstca", "vsta"}));
  cmd->add_option("--head", c.head, "output activation")->check(CLI::IsMember({"sigmoid", "relu"}));
  cmd->add_option("--sim-est", c.sim_est, "relevance weighting")->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--skips", c.skips, "decoder skip connections")->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--set", c.sets, "override one key=value setting (repeatable)");
}

// defaults < sidecar < --config < --set < dedicated flags
RunConfig resolve(const CommonFlags& c, const fs::path& sidecar = {}) {
  RunConfig cfg;
  if (!sidecar.empty() && fs::exists(sidecar)) cfg.apply_file(sidecar);
  if (!c.config.empty()) cfg.apply_file(c.config);
  for (const auto& s : c.sets) cfg.set(s);
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  if (!c.attention.empty()) cfg.set("model.attention", c.attention);
  if (!c.head.empty()) cfg.set("model.head", c.head);
  if (!c.sim_est.empty()) cfg.set("model.sim_est", c.sim_est);
  if (!c.skips.empty()) cfg.set("model.skips", c.skips);
  cfg.pipeline.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
  return cfg;
}

fs::path sidecar_of(const fs::path& checkpoint) { return fs::path(checkpoint.string() + ".cfg"); }

std::vector<fs::path> png_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

ErpFrameSequence load_frames(const std::vector<fs::path>& paths) {
  ErpFrameSequence seq;
  for (const auto& p : paths) seq.frames.push_back(read_png_rgb(p));
  return seq;
}

FeatureBundle encode_window(const ToyEncoder& encoder, const ViewportLayout& layout,
                            const std::vector<fs::path>& frames, const std::string& text) {
  return encoder.encode(project_to_tangents(load_frames(frames), layout), text);
}

SaliencyMap fit_to(SaliencyMap map, int height, int width) {
  if (map.height != height || map.width != width) map = resize_bilinear(map, height, width);
  return map;
}

std::string strip_newlines(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

// ---- dataset ------------------------------------------------------------------

struct DatasetArgs {
  CommonFlags common;
  std::string videos, out;
};

int cmd_dataset(const DatasetArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve(a.common);
  const auto summary = build_dataset(a.videos, a.out, cfg.pipeline);
  for (const auto& v : summary.videos)
    err << v.id << ": frames=" << v.frames << " events=" << v.events_found << " triplets=" << v.triplets
        << " no_caption=" << v.discarded_no_caption << " too_short=" << v.discarded_too_short << "\n";
  for (const auto& [id, why] : summary.skipped) err << id << ": skipped (" << why << ")\n";
  out << (fs::path(a.out) / "manifest.json").string() << "\n";
  return 0;
}

// ---- kfold --------------------------------------------------------------------

struct KfoldArgs {
  CommonFlags common;
  std::string manifest, ids, out;
  int k = 5;
};

std::vector<std::string> manifest_videos(const fs::path& manifest) {
  std::ifstream is(manifest);
  if (!is) throw Error("cannot read " + manifest.string());
  try {
    const auto j = nlohmann::json::parse(is);
    std::vector<std::string> ids;
    for (const auto& v : j.at("videos")) ids.push_back(v.at("id").get<std::string>());
    return ids;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest.string() + ": " + e.what());
  }
}

int cmd_kfold(const KfoldArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve(a.common);
  std::vector<std::string> ids;
  if (!a.manifest.empty()) {
    ids = manifest_videos(a.manifest);
  } else {
    std::ifstream is(a.ids);
    if (!is) throw Error("cannot read " + a.ids);
    for (std::string line; std::getline(is, line);)
      if (!strip_newlines(line).empty()) ids.push_back(strip_newlines(line));
  }
  const auto folds = kfold_split(ids, a.k, cfg.seed);
  write_folds(a.out, folds);
  for (std::size_t i = 0; i < folds.folds.size(); ++i)
    err << "fold " << i << ": " << folds.folds[i].size() << " ids\n";
  out << a.out << "\n";
  return 0;
}

// ---- train --------------------------------------------------------------------

struct TrainArgs {
  CommonFlags common;
  std::string data, checkpoint, folds, log;
  int fold_index = -1;
};

int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve(a.common);
  if (a.fold_index >= 0 && a.folds.empty()) throw ConfigError("--fold-index requires --folds");

  std::set<std::string> held_out;
  if (!a.folds.empty()) {
    const auto folds = read_folds(a.folds);
    if (a.fold_index < 0 || a.fold_index >= static_cast<int>(folds.folds.size()))
      throw ConfigError("--fold-index must name one of the " + std::to_string(folds.folds.size()) + " folds");
    held_out.insert(folds.folds[a.fold_index].begin(), folds.folds[a.fold_index].end());
  }

  Network<float> net(cfg.model, cfg.encoder, cfg.seed);
  const ToyEncoder encoder(cfg.encoder);
  const auto stored = read_triplet_store(a.data);
  std::vector<TrainingSample> data;
  for (std::size_t i = 0; i < stored.size(); ++i) {
    const auto& t = stored[i];
    if (held_out.count(t.video)) continue;
    if (static_cast<int>(t.frames.size()) != cfg.model.frames)
      throw ConfigError("triplet has " + std::to_string(t.frames.size()) + " frames but model.frames is " +
                        std::to_string(cfg.model.frames));
    TrainingSample s;
    s.id = t.gt.string();
    s.features = encode_window(encoder, net.layout(), t.frames, t.text);
    s.gt = fit_to(read_png_gray(t.gt), cfg.model.output_height, cfg.model.output_width);
    data.push_back(std::move(s));
  }
  err << "training on " << data.size() << " of " << stored.size() << " triplets, "
      << net.parameter_count() << " parameters\n";

  std::ofstream logfile;
  std::ostream* log = &err;
  if (!a.log.empty()) {
    logfile.open(a.log);
    if (!logfile) throw Error("cannot write " + a.log);
    log = &logfile;
  }
  *log << "epoch,step,loss\n";
  char line[96];
  Trainer trainer(net, cfg.train);
  trainer.fit(
      data,
      [&](const StepLog& s) {
        std::snprintf(line, sizeof line, "%d,%d,%.6f\n", s.epoch, s.step, s.loss);
        *log << line << std::flush;
      },
      [&](const EpochLog& e) {
        std::snprintf(line, sizeof line, "epoch %d: loss %.4f cc %.3f sim %.3f kld %.3f\n", e.epoch, e.mean_loss,
                      e.metrics.cc.mean, e.metrics.sim.mean, e.metrics.kld.mean);
        err << line;
      });

  save_network(a.checkpoint, net);
  cfg.write(sidecar_of(a.checkpoint));
  out << a.checkpoint << "\n";
  return 0;
}

// ---- predict ------------------------------------------------------------------

struct PredictArgs {
  CommonFlags common;
  std::string frames, text, features, checkpoint, out;
};

int cmd_predict(const PredictArgs& a, std::ostream& out, std::ostream&) {
  if (!fs::is_regular_file(a.checkpoint)) throw Error("checkpoint not found: " + a.checkpoint);
  const RunConfig cfg = resolve(a.common, sidecar_of(a.checkpoint));
  const auto net = load_network(a.checkpoint, cfg.model, cfg.encoder);

  FeatureBundle features;
  if (!a.features.empty()) {
    features = load_features(a.features);
  } else {
    if (a.frames.empty() || a.text.empty()) throw ConfigError("predict needs --frames and --text, or --features");
    auto files = png_files(a.frames);
    if (static_cast<int>(files.size()) < cfg.model.frames)
      throw Error(a.frames + " holds " + std::to_string(files.size()) + " frames, need " +
                  std::to_string(cfg.model.frames));
    files.erase(files.begin(), files.end() - cfg.model.frames);
    features = encode_window(ToyEncoder(cfg.encoder), net.layout(), files, a.text);
  }

  const SaliencyMap map = predict(net, features);
  const fs::path png(a.out);
  if (png.has_parent_path()) fs::create_directories(png.parent_path());
  write_png_gray(png, map);
  fs::path raw = png;
  raw.replace_extension(".tsal");
  write_checkpoint(raw, {{"saliency", Tensor({static_cast<std::size_t>(map.height),
                                              static_cast<std::size_t>(map.width)},
                                             map.values)}});
  out << png.string() << "\n" << raw.string() << "\n";
  return 0;
}

// ---- eval ---------------------------------------------------------------------

struct EvalArgs {
  CommonFlags common;
  std::string pred, gt, folds, out, per_sample;
};

int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  std::map<std::string, int> fold_of;
  if (!a.folds.empty()) {
    const auto folds = read_folds(a.folds);
    for (std::size_t f = 0; f < folds.folds.size(); ++f)
      for (const auto& id : folds.folds[f]) fold_of[id] = static_cast<int>(f);
  }

  std::vector<fs::path> rel;
  for (const auto& e : fs::recursive_directory_iterator(a.gt))
    if (e.is_regular_file() && e.path().extension() == ".png") rel.push_back(fs::relative(e.path(), a.gt));
  std::sort(rel.begin(), rel.end());
  if (rel.empty()) throw Error("no ground-truth maps in " + a.gt);

  std::vector<SampleScore> scores;
  for (const auto& r : rel) {
    const fs::path pp = fs::path(a.pred) / r;
    if (!fs::exists(pp)) throw Error("missing prediction " + pp.string());
    const SaliencyMap gt = read_png_gray(fs::path(a.gt) / r);
    const SaliencyMap pred = fit_to(read_png_gray(pp), gt.height, gt.width);
    std::string id = r;
    id.resize(id.size() - r.extension().string().size());
    int fold = 0;
    if (!fold_of.empty()) {
      const std::string video = r.begin()->string() == r.string() ? id : r.begin()->string();
      const auto it = fold_of.find(video);
      if (it == fold_of.end()) throw ConfigError("sample " + id + " belongs to no fold");
      fold = it->second;
    }
    SampleScore s;
    try {
      s = score_sample(pred, gt, fold, id);
    } catch (const ShapeError&) {
      throw;
    } catch (const Error& e) {
      err << id << ": " << e.what() << ", CC recorded as 0\n";
      s = SampleScore{fold, id, 0.0, sim(pred, gt), kld(pred, gt)};
    }
    scores.push_back(s);
  }

  const auto report = aggregate(scores);
  if (!a.out.empty()) {
    std::ofstream os(a.out);
    if (!os) throw Error("cannot write " + a.out);
    write_report_csv(os, report);
  } else {
    write_report_csv(out, report);
  }
  if (!a.per_sample.empty()) {
    std::ofstream os(a.per_sample);
    if (!os) throw Error("cannot write " + a.per_sample);
    os << "fold,id,cc,sim,kld\n";
    char line[64];
    for (const auto& s : scores) {
      std::snprintf(line, sizeof line, ",%.6f,%.6f,%.6f\n", s.cc, s.sim, s.kld);
      os << s.fold << "," << s.id << line;
    }
  }
  write_report_table(a.out.empty() ? err : out, report);
  return 0;
}

// ---- project ------------------------------------------------------------------

struct ProjectArgs {
  CommonFlags common;
  std::string frame, out;
};

int cmd_project(const ProjectArgs& a, std::ostream& out, std::ostream&) {
  const RunConfig cfg = resolve(a.common);
  const auto layout = build_layout(cfg.model.views, cfg.model.fov, cfg.encoder.patch);
  ErpFrameSequence seq;
  seq.frames.push_back(read_png_rgb(a.frame));
  const ErpGrid grid = seq.grid();
  const auto stack = project_to_tangents(seq, layout);
  const fs::path dir(a.out);
  fs::create_directories(dir);

  const int P = stack.patch, C = stack.channels;
  std::vector<SaliencyMapSet> planes(C, SaliencyMapSet{stack.views, P, {}});
  for (int t = 0; t < stack.views; ++t) {
    Image img(C, P, P);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x) {
          img.at(c, y, x) = stack.at(0, t, c, y, x);
          planes[c].values.push_back(stack.at(0, t, c, y, x));
        }
    char name[32];
    std::snprintf(name, sizeof name, "tangent_%02d.png", t);
    write_png_rgb(dir / name, img);
    out << (dir / name).string() << "\n";
  }

  Image erp(C, grid.height, grid.width);
  for (int c = 0; c < C; ++c) {
    const auto m = blend_inverse_raw(planes[c], layout, grid);
    std::copy(m.values.begin(), m.values.end(),
              erp.data.begin() + static_cast<std::ptrdiff_t>(c) * grid.height * grid.width);
  }
  write_png_rgb(dir / "reassembled.png", erp);
  out << (dir / "reassembled.png").string() << "\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Text-driven 360-degree video saliency engine", "tsal"};
  app.require_subcommand(1);

  DatasetArgs dataset;
  auto* c_dataset = app.add_subcommand("dataset", "build text/frames/saliency triplets from raw videos");
  add_common(c_dataset, dataset.common);
  c_dataset->add_option("--videos", dataset.videos, "directory of <id>/{frames,fixations,captions.tsv}")
      ->required()
      ->check(CLI::ExistingDirectory);
  c_dataset->add_option("--out", dataset.out, "output directory")->required();

  KfoldArgs kfold;
  auto* c_kfold = app.add_subcommand("kfold", "split video ids into folds");
  add_common(c_kfold, kfold.common);
  auto* o_manifest = c_kfold->add_option("--manifest", kfold.manifest, "dataset manifest")->check(CLI::ExistingFile);
  auto* o_ids = c_kfold->add_option("--ids", kfold.ids, "file with one id per line")->check(CLI::ExistingFile);
  o_manifest->excludes(o_ids);
  c_kfold->add_option("--k", kfold.k, "number of folds")->capture_default_str();
  c_kfold->add_option("--out", kfold.out, "folds JSON file")->required();

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "train a model on a dataset manifest");
  add_common(c_train, train.common);
  c_train->add_option("--data", train.data, "dataset manifest")->required()->check(CLI::ExistingFile);
  c_train->add_option("--checkpoint", train.checkpoint, "output checkpoint")->required();
  c_train->add_option("--folds", train.folds, "folds JSON file")->check(CLI::ExistingFile);
  c_train->add_option("--fold-index", train.fold_index, "held-out fold");
  c_train->add_option("--log", train.log, "CSV training log (default stderr)");

  PredictArgs pred;
  auto* c_predict = app.add_subcommand("predict", "predict the saliency map of the last frame of a window");
  add_common(c_predict, pred.common);
  c_predict->add_option("--frames", pred.frames, "directory of ERP frame PNGs; the last F are used");
  c_predict->add_option("--text", pred.text, "event description");
  c_predict->add_option("--features", pred.features, "precomputed feature file (replaces --frames/--text)")
      ->check(CLI::ExistingFile);
  c_predict->add_option("--checkpoint", pred.checkpoint, "trained checkpoint")->required();
  c_predict->add_option("--out", pred.out, "output PNG; a .tsal tensor is written next to it")->required();

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "score predicted maps against ground truth");
  add_common(c_eval, eval.common);
  c_eval->add_option("--pred", eval.pred, "directory of predicted PNGs")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--gt", eval.gt, "directory of ground-truth PNGs")->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--folds", eval.folds, "folds JSON file")->check(CLI::ExistingFile);
  c_eval->add_option("--out", eval.out, "report CSV (default stdout)");
  c_eval->add_option("--per-sample", eval.per_sample, "per-sample CSV");

  ProjectArgs project;
  auto* c_project = app.add_subcommand("project", "dump tangent images and their reassembly");
  add_common(c_project, project.common);
  c_project->add_option("--frame", project.frame, "ERP frame PNG")->required()->check(CLI::ExistingFile);
  c_project->add_option("--out", project.out, "output directory")->required();

  std::vector<std::string> argv_store{"tsal"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_store) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    const CLI::App* usage = &app;
    for (const auto* sub : app.get_subcommands({}))
      if (sub->parsed()) usage = sub;
    err << usage->help();
    return 2;
  }
  if (c_kfold->parsed() && kfold.manifest.empty() && kfold.ids.empty()) {
    err << "kfold: one of --manifest or --ids is required\n" << c_kfold->help();
    return 2;
  }

  try {
    if (c_dataset->parsed()) return cmd_dataset(dataset, out, err);
    if (c_kfold->parsed()) return cmd_kfold(kfold, out, err);
    if (c_train->parsed()) return cmd_train(train, out, err);
    if (c_predict->parsed()) return cmd_predict(pred, out, err);
    if (c_eval->parsed()) return cmd_eval(eval, out, err);
    if (c_project->parsed()) return cmd_project(project, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace tsal::cli
