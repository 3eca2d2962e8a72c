#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "griddet/augment.hpp"
#include "griddet/autodiff.hpp"
#include "griddet/budget.hpp"
#include "griddet/decode.hpp"
#include "griddet/error.hpp"
#include "griddet/lidar_io.hpp"
#include "griddet/metrics.hpp"
#include "griddet/network.hpp"
#include "griddet/rng.hpp"
#include "griddet/scene.hpp"

#ifndef GRIDDET_VERSION
#define GRIDDET_VERSION "0.0.0"
#endif

namespace griddet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kSchemaVersion = 1;

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// Writes through a temporary file in the same directory, then renames.
void write_atomic(const fs::path& path, const std::string& data) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << data;
    if (!out) throw ConfigError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_json(const fs::path& path, const json& j) { write_atomic(path, j.dump(2) + "\n"); }

int default_jobs() {
  if (const char* env = std::getenv("GRIDDET_JOBS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
    throw ConfigError("GRIDDET_JOBS must be a positive integer");
  }
  return 1;
}

uint64_t frame_seed(uint64_t seed, const std::string& frame_id) {
  return CounterRng(seed, hash_name(frame_id.c_str())).bits(0);
}

// Per-frame work over `jobs` threads. Results land in input order.
template <typename R, typename F>
std::vector<R> parallel_map(size_t n, int jobs, F&& fn) {
  std::vector<R> results(n);
  std::atomic<size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (size_t i = next++; i < n; i = next++) {
      try {
        results[i] = fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return results;
}

struct Options {
  std::string out_dir;
  std::vector<std::string> sets;
  int jobs = 1;
  uint64_t seed = 0;
  std::string config;
  std::vector<std::string> inputs;
};

json load_config(const std::string& path, const std::vector<std::string>& sets, json base = json::object()) {
  json j = path.empty() ? std::move(base) : read_json(path);
  for (const auto& s : sets) apply_override(j, s);
  return j;
}

template <typename T>
T parse_config(const json& j, const char* what) {
  try {
    return j.get<T>();
  } catch (const Error&) {
    throw;
  } catch (const json::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

Model model_from(const std::string& model_dir, const std::string& preset, const std::vector<std::string>& sets) {
  if (!model_dir.empty() && !preset.empty()) throw ConfigError("pass either --model or --preset, not both");
  if (!model_dir.empty()) {
    if (!sets.empty()) throw ConfigError("--set applies to configs, not to a saved --model");
    return load_model(model_dir);
  }
  if (preset.empty()) throw ConfigError("one of --model or --preset is required");
  json j = preset_config(preset);
  for (const auto& s : sets) apply_override(j, s);
  return build_model(parse_config<ModelConfig>(j, "model"));
}

PointCloud scene_cloud(const std::string& scene) {
  if (scene.empty() || scene == "canonical") return canonical_scene().cloud;
  if (scene == "toy") return toy_scene().cloud;
  PointCloud c = load_point_file(scene);
  c.frame_id = fs::path(scene).stem().string();
  return c;
}

// Current sweep plus up to sweeps-1 previous ones from the manifest, merged
// into the current ego frame. Dropped sweeps keep the survivors' lags.
PointCloud load_frame(const FrameManifest& m, size_t i, int sweeps, double drop_prob, uint64_t seed) {
  const FrameEntry& e = m.frames[i];
  PointCloud current = load_point_file(e.points);
  current.frame_id = e.frame_id;
  if (sweeps <= 1 || i == 0) return current;
  std::vector<PastSweep> past;
  for (size_t k = 1; k < static_cast<size_t>(sweeps) && k <= i; ++k) {
    const FrameEntry& p = m.frames[i - k];
    past.push_back({load_point_file(p.points), p.pose, static_cast<int>(k)});
  }
  if (drop_prob > 0) past = drop_frames(past, drop_prob, frame_seed(seed, e.frame_id + "/drop"));
  PointCloud merged = assemble_frames(current, past, e.pose, sweeps, m.frame_gap);
  merged.frame_id = e.frame_id;
  return merged;
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  Options* options = nullptr;
  std::string started;
};

void write_manifest(const Manifest& m) {
  if (m.options->out_dir.empty()) return;
  json j;
  j["schema_version"] = kSchemaVersion;
  j["command"] = m.command;
  j["argv"] = m.argv;
  j["config"] = m.options->config.empty() ? json(nullptr) : json(m.options->config);
  j["inputs"] = m.options->inputs;
  j["output_dir"] = m.options->out_dir;
  j["seed"] = m.options->seed;
  j["jobs"] = m.options->jobs;
  j["tool_version"] = GRIDDET_VERSION;
  j["started_at"] = m.started;
  j["finished_at"] = utc_now();
  write_json(fs::path(m.options->out_dir) / "run_manifest.json", j);
}

void error_json(std::ostream& err, const std::string& category, const std::string& message, int code) {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["error"] = {{"category", category}, {"message", message}, {"exit_code", code}};
  err << j.dump() << std::endl;
}

}  // namespace

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("--set: empty path component in '" + key + "'");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("--set: '" + key + "' descends into a non-object");
      *node = json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Grid-based lidar 3D detection toolkit", "griddet"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(GRIDDET_VERSION));

  Options o;
  try {
    o.jobs = default_jobs();
  } catch (const Error& e) {
    error_json(err, e.category(), e.what(), static_cast<int>(e.kind()));
    return static_cast<int>(e.kind());
  }
  auto add_common = [&](CLI::App* c, bool with_config) {
    c->add_option("--out", o.out_dir, "Output directory");
    c->add_option("--seed", o.seed, "Seed");
    c->add_option("--jobs", o.jobs, "Worker threads (default $GRIDDET_JOBS or 1)")->check(CLI::PositiveNumber);
    if (with_config) {
      c->add_option("--config", o.config, "JSON config");
      c->add_option("--set", o.sets, "Override a config field, key.path=value");
    }
  };

  std::string model_dir, preset, scene, frames, detections, labels, decode_config;
  int warmup = 1, iters = 3, epoch = 0, sweeps = 1, steps = 500, seeds = 10, decay_steps = 500;
  double lr = ad::kDefaultToyLr, eps = 1e-5, tol = 1e-4;
  bool per_layer = false;

  auto* build = app.add_subcommand("build", "Build a model from a config or preset and save it");
  add_common(build, true);
  build->add_option("--preset", preset, "Preset name, e.g. pillar-B");

  auto* profile = app.add_subcommand("profile", "Parameter, FLOP and latency profile");
  add_common(profile, true);
  profile->add_option("--model", model_dir, "Saved model directory");
  profile->add_option("--preset", preset, "Preset name");
  profile->add_option("--scene", scene, "Point file, 'canonical' or 'toy'")->default_str("canonical");
  profile->add_flag("--layers", per_layer, "Append the per-layer table");

  auto* infer = app.add_subcommand("infer", "Detect objects in every frame of a manifest");
  add_common(infer, false);
  infer->add_option("--model", model_dir, "Saved model directory");
  infer->add_option("--preset", preset, "Preset name");
  infer->add_option("--frames", frames, "Frame manifest JSON")->required();
  infer->add_option("--decode", decode_config, "Decode config JSON");
  infer->add_option("--set", o.sets, "Override a decode config field");
  infer->add_option("--sweeps", sweeps, "Sweeps merged per frame")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "AP / APH of detections against labels");
  add_common(eval, true);
  eval->add_option("--detections", detections, "Detections JSONL")->required();
  eval->add_option("--labels", labels, "Labels JSONL")->required();

  auto* bench = app.add_subcommand("bench", "Forward-pass latency");
  add_common(bench, true);
  bench->add_option("--model", model_dir, "Saved model directory");
  bench->add_option("--preset", preset, "Preset name");
  bench->add_option("--scene", scene, "Point file, 'canonical' or 'toy'")->default_str("canonical");
  bench->add_option("--warmup", warmup, "Untimed iterations")->check(CLI::NonNegativeNumber);
  bench->add_option("--iters", iters, "Timed iterations")->check(CLI::PositiveNumber);

  auto* gtdb = app.add_subcommand("gtdb", "Build a ground-truth sample database from labeled frames");
  add_common(gtdb, false);
  gtdb->add_option("--frames", frames, "Frame manifest JSON")->required();

  auto* augment = app.add_subcommand("augment", "Augmented copies of labeled frames");
  add_common(augment, true);
  augment->add_option("--frames", frames, "Frame manifest JSON")->required();
  augment->add_option("--epoch", epoch, "Training epoch (controls paste fading)")->check(CLI::NonNegativeNumber);
  augment->add_option("--sweeps", sweeps, "Sweeps merged per frame")->check(CLI::PositiveNumber);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference checks of the autodiff ops");
  add_common(gradcheck, false);
  gradcheck->add_option("--seeds", seeds, "Randomized seeds per op")->check(CLI::PositiveNumber);
  gradcheck->add_option("--eps", eps, "Central-difference step");
  gradcheck->add_option("--tol", tol, "Relative error tolerance");

  auto* toyfit = app.add_subcommand("toyfit", "Overfit the toy chain on a small scene");
  add_common(toyfit, false);
  toyfit->add_option("--scene", scene, "Point file with a labels JSONL beside it, or 'toy'")->default_str("toy");
  toyfit->add_option("--labels", labels, "Labels JSONL for --scene");
  toyfit->add_option("--steps", steps, "Gradient steps")->check(CLI::NonNegativeNumber);
  toyfit->add_option("--lr", lr, "Learning rate")->check(CLI::NonNegativeNumber);
  toyfit->add_option("--decay-steps", decay_steps, "Linear decay horizon, 0 for constant lr")
      ->check(CLI::NonNegativeNumber);

  auto* replay = app.add_subcommand("replay", "Re-run the command recorded in a run manifest");
  std::string replay_path;
  replay->add_option("manifest", replay_path, "run_manifest.json")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return 0;
    }
    error_json(err, "usage", e.what(), 2);
    return 2;
  }

  Manifest manifest{"", args, &o, utc_now()};
  try {
    if (*replay) {
      const json m = read_json(replay_path);
      if (!m.contains("argv") || !m.at("argv").is_array()) throw FormatError(replay_path + ": missing argv");
      return run(m.at("argv").get<std::vector<std::string>>(), out, err);
    }

    if (*build) {
      manifest.command = "build";
      json base = preset.empty() ? json::object() : json(preset_config(preset));
      if (!preset.empty() && !o.config.empty()) throw ConfigError("pass either --config or --preset, not both");
      if (preset.empty() && o.config.empty()) throw ConfigError("one of --config or --preset is required");
      if (o.out_dir.empty()) throw ConfigError("build needs --out");
      if (!o.config.empty()) o.inputs.push_back(o.config);
      json cj = load_config(o.config, o.sets, base);
      if (build->count("--seed") > 0) cj["seed"] = o.seed;
      const ModelConfig config = parse_config<ModelConfig>(cj, "model");
      const Model model = build_model(config);
      save_model(model, o.out_dir);
      out << json(config).dump(2) << "\n";
    } else if (*profile) {
      manifest.command = "profile";
      const Model model = model_from(model_dir, preset, o.sets);
      o.inputs = {model_dir.empty() ? preset : model_dir, scene.empty() ? "canonical" : scene};
      const ProfileReport report = profile_model(model, scene_cloud(scene));
      const std::string table = profile_table(report, per_layer);
      if (!o.out_dir.empty()) {
        write_json(fs::path(o.out_dir) / "profile.json", profile_json(report));
        write_atomic(fs::path(o.out_dir) / "profile.txt", table);
      }
      out << table;
    } else if (*infer) {
      manifest.command = "infer";
      const Model model = model_from(model_dir, preset, {});
      o.config = decode_config;
      const DecodeConfig dc = parse_config<DecodeConfig>(load_config(decode_config, o.sets), "decode");
      const FrameManifest fm = load_manifest(frames);
      o.inputs = {model_dir.empty() ? preset : model_dir, frames};
      const OutputGeometry geom = OutputGeometry::of(model.config);
      const auto lines = parallel_map<std::string>(fm.frames.size(), o.jobs, [&](size_t i) {
        const PointCloud cloud = load_frame(fm, i, sweeps, 0.0, o.seed);
        std::string text;
        for (const auto& d : decode_frame(forward(model, cloud), geom, dc, fm.frames[i].frame_id)) {
          text += format_detection_line(d) + "\n";
        }
        return text;
      });
      std::string all;
      for (const auto& l : lines) all += l;
      if (o.out_dir.empty()) out << all;
      else write_atomic(fs::path(o.out_dir) / "detections.jsonl", all);
    } else if (*eval) {
      manifest.command = "eval";
      o.inputs = {detections, labels};
      const EvalConfig ec = parse_config<EvalConfig>(load_config(o.config, o.sets), "eval");
      const EvalResult result = evaluate(load_detections(detections), load_labels(labels), ec);
      const json report = eval_report_json(result);
      if (!o.out_dir.empty()) {
        write_json(fs::path(o.out_dir) / "report.json", report);
        write_atomic(fs::path(o.out_dir) / "report.txt", eval_report_table(result));
      }
      out << report.dump(2) << "\n" << eval_report_table(result);
    } else if (*bench) {
      manifest.command = "bench";
      const Model model = model_from(model_dir, preset, o.sets);
      o.inputs = {model_dir.empty() ? preset : model_dir, scene.empty() ? "canonical" : scene};
      const BenchResult r = benchmark(model, scene_cloud(scene), warmup, iters);
      json j;
      j["schema_version"] = kSchemaVersion;
      j["model"] = model.config.name;
      j["warmup"] = warmup;
      j["iters"] = iters;
      j["samples_ms"] = r.samples_ms;
      j["mean_ms"] = r.mean_ms;
      j["median_ms"] = r.median_ms;
      j["p95_ms"] = r.p95_ms;
      j["deterministic"] = r.deterministic;
      if (!o.out_dir.empty()) write_json(fs::path(o.out_dir) / "bench.json", j);
      out << j.dump(2) << "\n";
    } else if (*gtdb) {
      manifest.command = "gtdb";
      if (o.out_dir.empty()) throw ConfigError("gtdb needs --out");
      o.inputs = {frames};
      const FrameManifest fm = load_manifest(frames);
      std::vector<Scene> scenes;
      for (const auto& f : fm.frames) {
        if (!f.labels) continue;
        Scene s{load_point_file(f.points), {}};
        for (auto& l : load_labels(*f.labels)) {
          if (l.frame_id == f.frame_id) s.labels.push_back(std::move(l));
        }
        scenes.push_back(std::move(s));
      }
      const GtDatabase db = build_gt_database(scenes);
      save_gt_database(db, o.out_dir);
      json j;
      j["schema_version"] = kSchemaVersion;
      j["samples"] = db.size();
      out << j.dump() << "\n";
    } else if (*augment) {
      manifest.command = "augment";
      if (o.out_dir.empty()) throw ConfigError("augment needs --out");
      json cj = load_config(o.config, o.sets);
      const fs::path config_dir = o.config.empty() ? fs::path(".") : fs::path(o.config).parent_path();
      AugmentConfig ac = parse_config<AugmentConfig>(cj, "augment");
      std::optional<GtDatabase> db;
      if (ac.paste) {
        if (ac.paste->db_path.is_relative()) ac.paste->db_path = config_dir / ac.paste->db_path;
        db = load_gt_database(ac.paste->db_path);
      }
      const FrameManifest fm = load_manifest(frames);
      o.inputs = {frames};
      const fs::path out_dir = o.out_dir;
      fs::create_directories(out_dir / "points");
      const auto scenes = parallel_map<Scene>(fm.frames.size(), o.jobs, [&](size_t i) {
        const FrameEntry& f = fm.frames[i];
        const uint64_t s = frame_seed(o.seed, f.frame_id);
        Scene sc{load_frame(fm, i, sweeps, ac.frame_drop_prob, o.seed), {}};
        if (f.labels) {
          for (auto& l : load_labels(*f.labels)) {
            if (l.frame_id == f.frame_id) sc.labels.push_back(std::move(l));
          }
        }
        if (db) sc = paste_samples(sc, *db, *ac.paste, epoch, s);
        sc = apply_global(sc, ac, s ^ 0x9E3779B97F4A7C15ULL);
        sc.cloud.frame_id = f.frame_id;
        return sc;
      });
      FrameManifest om;
      om.sequence_id = fm.sequence_id;
      om.frame_gap = fm.frame_gap;
      std::vector<BoxLabel> all_labels;
      for (size_t i = 0; i < scenes.size(); ++i) {
        const std::string name = "points/" + fm.frames[i].frame_id + ".bin";
        save_point_file(out_dir / name, scenes[i].cloud);
        FrameEntry e;
        e.frame_id = fm.frames[i].frame_id;
        e.points = out_dir / name;
        e.labels = out_dir / "labels.jsonl";
        e.timestamp = fm.frames[i].timestamp;
        e.pose = fm.frames[i].pose;
        om.frames.push_back(e);
        all_labels.insert(all_labels.end(), scenes[i].labels.begin(), scenes[i].labels.end());
      }
      save_labels(out_dir / "labels.jsonl", all_labels);
      save_manifest(out_dir / "frames.json", om);
    } else if (*gradcheck) {
      manifest.command = "gradcheck";
      const auto results = ad::gradcheck_all(seeds, eps, tol);
      json j;
      j["schema_version"] = kSchemaVersion;
      j["eps"] = eps;
      j["tol"] = tol;
      j["seeds"] = seeds;
      bool ok = true;
      for (const auto& r : results) {
        j["ops"].push_back({{"op", r.op}, {"max_rel_error", r.max_rel_error}, {"passed", r.passed}});
        ok = ok && r.passed;
        out << std::left << std::setw(16) << r.op << " " << std::scientific << std::setprecision(3)
            << r.max_rel_error << (r.passed ? "  ok" : "  FAIL") << "\n";
      }
      out << std::defaultfloat;
      j["passed"] = ok;
      if (!o.out_dir.empty()) write_json(fs::path(o.out_dir) / "gradcheck.json", j);
      if (!ok) throw InvariantError("gradient check failed");
    } else if (*toyfit) {
      manifest.command = "toyfit";
      Scene sc;
      if (scene.empty() || scene == "toy") {
        sc = toy_scene();
      } else {
        if (labels.empty()) throw ConfigError("--scene needs --labels");
        sc.cloud = load_point_file(scene);
        sc.labels = load_labels(labels);
        o.inputs = {scene, labels};
      }
      std::vector<Box3D> boxes;
      for (const auto& l : sc.labels) boxes.push_back(l.box);
      ad::ChainConfig cc;
      cc.seed = o.seed;
      cc.decay_steps = decay_steps;
      const ad::FitResult fit = ad::toy_fit(cc, sc.cloud, boxes, steps, lr);
      std::ostringstream csv;
      csv << std::setprecision(17) << "step,loss,best_so_far\n";
      for (size_t i = 0; i < fit.trace.size(); ++i) csv << i << "," << fit.trace[i] << "," << fit.best_so_far[i] << "\n";
      if (o.out_dir.empty()) out << csv.str();
      else write_atomic(fs::path(o.out_dir) / "loss.csv", csv.str());
    }
    write_manifest(manifest);
  } catch (const Error& e) {
    error_json(err, e.category(), e.what(), static_cast<int>(e.kind()));
    return static_cast<int>(e.kind());
  } catch (const fs::filesystem_error& e) {
    error_json(err, "io", e.what(), 3);
    return 3;
  } catch (const std::exception& e) {
    error_json(err, "internal", e.what(), 4);
    return 4;
  }
  return 0;
}

}  // namespace griddet::cli
