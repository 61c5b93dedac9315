// Copyright (c) 2026 the stitchflow authors
// SPDX-License-Identifier: Apache-2.0
//
// stitchflow command line: synthesize or ingest clip data, train the latent
// codec and the flow-matching denoiser, generate guided clips, and evaluate.
// Every command takes a JSON run configuration (-c) and echoes the resolved
// settings before doing any work. Artifacts are laid out under out_dir:
//
//   data/manifest.tsv        clip index
//   data/frames/<clip_id>/   one PPM per frame
//   codec.ckpt               autoencoder + codec_metrics.tsv loss curve
//   denoiser.ckpt            base or fine-tuned denoiser
//   adapter.ckpt             low-rank adapter (lora training mode only)
//   train_metrics.tsv        per-step loss and wall time
//   gen/<name>/              generated frames + metadata.json
//   eval_report.txt          reconstruction / latency / adherence report
//   bench.txt                latency samples
//
// Commands refuse to overwrite finished artifacts; delete them (or switch
// out_dir) to re-run a stage. With a fixed seed the pipeline is
// bit-reproducible except for wall-clock fields.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stitchflow/captions.hpp"
#include "stitchflow/codec.hpp"
#include "stitchflow/config.hpp"
#include "stitchflow/dataset.hpp"
#include "stitchflow/denoiser.hpp"
#include "stitchflow/errors.hpp"
#include "stitchflow/eval.hpp"
#include "stitchflow/flow.hpp"
#include "stitchflow/frames_io.hpp"
#include "stitchflow/guidance.hpp"
#include "stitchflow/lora.hpp"
#include "stitchflow/rng.hpp"
#include "stitchflow/synth.hpp"
#include "stitchflow/taxonomy.hpp"

namespace {

using namespace stitchflow;
namespace fs = std::filesystem;

struct RunPaths {
  fs::path out;
  fs::path data_dir() const { return out / "data"; }
  fs::path manifest() const { return data_dir() / "manifest.tsv"; }
  fs::path frames_dir() const { return data_dir() / "frames"; }
  fs::path codec_ckpt() const { return out / "codec.ckpt"; }
  fs::path codec_metrics() const { return out / "codec_metrics.tsv"; }
  fs::path denoiser_ckpt() const { return out / "denoiser.ckpt"; }
  fs::path adapter_ckpt() const { return out / "adapter.ckpt"; }
  fs::path train_metrics() const { return out / "train_metrics.tsv"; }
  fs::path gen_dir() const { return out / "gen"; }
  fs::path eval_report() const { return out / "eval_report.txt"; }
  fs::path bench() const { return out / "bench.txt"; }
};

void check_backend_env() {
  const char* backend = std::getenv("STITCHFLOW_BACKEND");
  if (backend != nullptr && std::string(backend) != "cpu") {
    throw ConfigError(std::string("unsupported STITCHFLOW_BACKEND '") + backend +
                      "': only 'cpu' is available");
  }
}

RunConfig load_and_echo(const std::string& config_path) {
  if (config_path.empty()) throw ConfigError("missing --config");
  RunConfig cfg = load_run_config(config_path);
  validate_run_config(cfg);
  std::cout << "# resolved config\n" << run_config_to_json(cfg).dump(2) << "\n";
  return cfg;
}

void refuse_if_exists(const fs::path& p, const char* hint) {
  if (fs::exists(p)) {
    throw PreconditionViolation(p.string() + " already exists; " + hint);
  }
}

void require_artifact(const fs::path& p, const char* hint) {
  if (!fs::exists(p)) {
    throw ArtifactMissing(p.string() + " not found; " + hint);
  }
}

Bucket parse_bucket(const std::string& s) {
  Bucket b;
  char tail = 0;
  if (std::sscanf(s.c_str(), "%dx%dx%d%c", &b.width, &b.height, &b.frame_count, &tail) != 3) {
    throw ConfigError("bucket '" + s + "' is not WIDTHxHEIGHTxFRAMES");
  }
  return b;
}

std::string bucket_str(const Bucket& b) {
  return std::to_string(b.width) + "x" + std::to_string(b.height) + "x" +
         std::to_string(b.frame_count);
}

std::set<int> parse_skip_layers(const std::string& csv) {
  std::set<int> out;
  std::string item;
  std::istringstream in(csv);
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    try {
      out.insert(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("skip layer '" + item + "' is not an integer");
    }
  }
  return out;
}

SubStitchAnnotation synthetic_annotation(const ClassTriple& cls, const std::string& session,
                                         int frame_count, double fps) {
  SubStitchAnnotation ann;
  ann.session_id = session;
  ann.task = cls.task;
  ann.action = cls.action;
  ann.quality = cls.quality;
  ann.start_time = 0.0;
  ann.end_time = static_cast<double>(frame_count) / fps;
  return ann;
}

Video<float> first_pixel_frame(const Video<float>& clip) {
  Video<float> out(1, clip.height(), clip.width(), clip.channels());
  for (int y = 0; y < clip.height(); ++y) {
    for (int x = 0; x < clip.width(); ++x) {
      for (int c = 0; c < clip.channels(); ++c) out(0, y, x, c) = clip(0, y, x, c);
    }
  }
  return out;
}

/// The denoiser with any low-rank adapter folded in; also reports whether an
/// adapter was found. Evaluation and generation run on the merged weights so
/// repeated runs are bitwise identical.
DenoiserParams<float> load_effective_denoiser(const RunPaths& paths, DenoiserConfig& dcfg_out,
                                              bool* merged_adapter = nullptr) {
  require_artifact(paths.denoiser_ckpt(), "run 'train' first");
  auto [params, dcfg] = load_denoiser(paths.denoiser_ckpt());
  if (merged_adapter != nullptr) *merged_adapter = false;
  if (fs::exists(paths.adapter_ckpt())) {
    const LoRAAdapter<float> adapter = load_adapter(paths.adapter_ckpt(), params);
    params = merge(params, adapter);
    if (merged_adapter != nullptr) *merged_adapter = true;
  }
  dcfg_out = dcfg;
  return params;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_synth_data(const RunConfig& cfg) {
  const RunPaths paths{cfg.out_dir};
  refuse_if_exists(paths.manifest(), "delete it to regenerate the dataset");
  fs::create_directories(paths.frames_dir());

  std::vector<ClipRecord> records;
  for (const ClassTriple& cls : all_classes()) {
    for (int rep = 0; rep < cfg.data.seeds_per_class; ++rep) {
      char suffix[16];
      std::snprintf(suffix, sizeof(suffix), "_s%02d", rep);
      const std::string clip_id = class_slug(cls) + suffix;

      ToyClipSpec spec;
      spec.annotation = synthetic_annotation(cls, clip_id, cfg.data.frame_count, cfg.data.fps);
      spec.seed = Rng::mix(cfg.seed, (static_cast<std::uint64_t>(class_index(cls)) << 20) |
                                         static_cast<std::uint64_t>(rep));
      spec.width = cfg.data.width;
      spec.height = cfg.data.height;
      spec.frame_count = cfg.data.frame_count;
      const Video<float> clip = synthesize_toy_clip(spec);
      write_clip_frames(paths.frames_dir() / clip_id, clip);

      ClipRecord r;
      r.clip_id = clip_id;
      r.frames_path = "frames/" + clip_id;
      r.annotation = spec.annotation;
      r.caption = generate_caption(spec.annotation);
      r.width = spec.width;
      r.height = spec.height;
      r.frame_count = spec.frame_count;
      records.push_back(std::move(r));
    }
  }
  const DatasetManifest manifest =
      build_manifest(records, {cfg.bucket()}, cfg.codec.f_t);
  save_manifest(paths.manifest(), manifest);
  std::cout << "synth-data: wrote " << records.size() << " clips ("
            << cfg.data.seeds_per_class << " per class) to " << paths.data_dir().string()
            << "\n";
}

void cmd_ingest(const RunConfig& cfg, const std::string& frames_dir,
                const std::string& annotations_path, double fps_override) {
  const RunPaths paths{cfg.out_dir};
  refuse_if_exists(paths.manifest(), "delete it to re-ingest");
  const double fps = fps_override > 0.0 ? fps_override : cfg.data.fps;

  const Video<float> session = read_clip_frames(frames_dir);
  const std::vector<SubStitchAnnotation> annotations = load_annotations(annotations_path);
  std::vector<CutClip> clips = cut_clips(session, annotations, fps);
  if (clips.empty()) throw EmptyManifest("ingest produced no clips");

  fs::create_directories(paths.frames_dir());
  std::vector<ClipRecord> records;
  std::vector<Bucket> buckets;
  for (CutClip& clip : clips) {
    write_clip_frames(paths.frames_dir() / clip.record.clip_id, clip.frames);
    clip.record.frames_path = "frames/" + clip.record.clip_id;
    const Bucket b{clip.record.width, clip.record.height, clip.record.frame_count};
    if (std::find(buckets.begin(), buckets.end(), b) == buckets.end()) buckets.push_back(b);
    records.push_back(clip.record);
  }
  const DatasetManifest manifest = build_manifest(records, buckets, cfg.codec.f_t);
  save_manifest(paths.manifest(), manifest);
  std::cout << "ingest: cut " << records.size() << " clips from " << frames_dir << " into "
            << paths.data_dir().string() << "\n";
}

void cmd_train_codec(const RunConfig& cfg) {
  const RunPaths paths{cfg.out_dir};
  require_artifact(paths.manifest(), "run 'synth-data' or 'ingest' first");
  refuse_if_exists(paths.codec_ckpt(), "delete it to retrain the codec");

  const DatasetManifest manifest = load_manifest(paths.manifest());
  std::vector<Video<float>> clips;
  clips.reserve(manifest.records.size());
  for (const ClipRecord& r : manifest.records) {
    clips.push_back(read_clip_frames(paths.data_dir() / r.frames_path));
  }

  CodecTrainOptions opt = cfg.codec_train;
  opt.seed = cfg.seed;
  const CodecTrainResult result = train_codec(clips, cfg.codec, opt);
  save_codec(paths.codec_ckpt(), result.params, cfg.codec);

  std::ofstream metrics(paths.codec_metrics());
  if (!metrics) throw ArtifactMissing("cannot write " + paths.codec_metrics().string());
  metrics << "#step\tloss\n";
  char line[64];
  for (std::size_t i = 0; i < result.loss_curve.size(); ++i) {
    std::snprintf(line, sizeof(line), "%zu\t%.10g\n", i, result.loss_curve[i]);
    metrics << line;
  }
  std::cout << "train-codec: " << result.loss_curve.size() << " steps, final loss "
            << result.loss_curve.back() << ", saved " << paths.codec_ckpt().string() << "\n";
}

void cmd_train(const RunConfig& cfg) {
  const RunPaths paths{cfg.out_dir};
  require_artifact(paths.manifest(), "run 'synth-data' or 'ingest' first");
  require_artifact(paths.codec_ckpt(), "run 'train-codec' first");
  refuse_if_exists(paths.denoiser_ckpt(), "delete it to retrain");

  const DatasetManifest manifest = load_manifest(paths.manifest());
  const CodecParams<float> codec = load_codec(paths.codec_ckpt(), cfg.codec);

  Rng init_rng(Rng::mix(cfg.seed, 0x696e6974ULL));
  const DenoiserParams<float> base = init_denoiser<float>(cfg.denoiser, init_rng);
  TrainConfig tcfg = cfg.train;
  tcfg.seed = cfg.seed;

  const TrainResult result =
      train(manifest, paths.data_dir(), codec, cfg.codec, base, cfg.denoiser, tcfg);
  save_denoiser(paths.denoiser_ckpt(), result.params, cfg.denoiser);
  if (result.has_adapter) save_adapter(paths.adapter_ckpt(), result.adapter);
  write_metrics(paths.train_metrics(), result.metrics);

  std::cout << "train: mode " << train_mode_name(tcfg.mode) << ", " << result.metrics.size()
            << " steps, final loss " << result.metrics.back().loss << ", saved "
            << paths.denoiser_ckpt().string()
            << (result.has_adapter ? " + " + paths.adapter_ckpt().string() : std::string())
            << "\n";
}

struct GenerateArgs {
  std::string caption;
  std::string out_name = "clip";
  std::string bucket;
  std::string guidance;
  std::string skip_layers;
  std::string first_frame;
  double scale = 0.0;
  long long steps = 0;
  unsigned long long seed = 0;
  bool has_scale = false;
  bool has_seed = false;
};

void cmd_generate(const RunConfig& cfg, const GenerateArgs& args) {
  const RunPaths paths{cfg.out_dir};
  require_artifact(paths.codec_ckpt(), "run 'train-codec' first");
  const fs::path clip_dir = paths.gen_dir() / args.out_name;
  refuse_if_exists(clip_dir, "pick another --out name");

  const auto [codec, ccfg] = load_codec(paths.codec_ckpt());
  DenoiserConfig dcfg;
  bool merged = false;
  const DenoiserParams<float> params = load_effective_denoiser(paths, dcfg, &merged);

  const Bucket bucket = args.bucket.empty() ? cfg.bucket() : parse_bucket(args.bucket);
  const int steps = args.steps > 0 ? static_cast<int>(args.steps) : cfg.sample_steps;
  const std::uint64_t seed = args.has_seed ? args.seed : cfg.seed;

  GuidanceConfig guidance = cfg.guidance;
  if (!args.guidance.empty()) {
    guidance.mode = guidance_mode_from_name(args.guidance);
    guidance.skip_layers.clear();
  }
  if (args.has_scale) guidance.scale = args.scale;
  if (!args.skip_layers.empty()) guidance.skip_layers = parse_skip_layers(args.skip_layers);
  if (guidance.mode == GuidanceMode::kStg && guidance.skip_layers.empty()) {
    guidance.skip_layers = default_stg_skip_layers(dcfg);
  }
  validate_guidance(guidance);

  Video<float> first;
  const Video<float>* first_ptr = nullptr;
  if (!args.first_frame.empty()) {
    first = read_ppm(args.first_frame);
    first_ptr = &first;
  }

  const Video<float> clip = generate_video(args.caption, bucket, params, dcfg, codec, ccfg,
                                           guidance, steps, seed, first_ptr);
  write_clip_frames(clip_dir, clip);

  nlohmann::json meta;
  meta["caption"] = args.caption;
  meta["bucket"] = bucket_str(bucket);
  meta["guidance"] = guidance_mode_name(guidance.mode);
  meta["scale"] = guidance.scale;
  meta["skip_layers"] =
      std::vector<int>(guidance.skip_layers.begin(), guidance.skip_layers.end());
  meta["steps"] = steps;
  meta["seed"] = seed;
  meta["image_conditioned"] = first_ptr != nullptr;
  meta["adapter_merged"] = merged;
  char hash_hex[24];
  std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                static_cast<unsigned long long>(denoiser_param_hash(params)));
  meta["model_hash"] = std::string(hash_hex);
  std::ofstream meta_out(clip_dir / "metadata.json");
  if (!meta_out) throw ArtifactMissing("cannot write " + (clip_dir / "metadata.json").string());
  meta_out << meta.dump(2) << "\n";

  std::cout << "generate: wrote " << clip.frames() << " frames to " << clip_dir.string()
            << "\n";
}

void cmd_evaluate(const RunConfig& cfg) {
  const RunPaths paths{cfg.out_dir};
  require_artifact(paths.codec_ckpt(), "run 'train-codec' first");
  refuse_if_exists(paths.eval_report(), "delete it to re-evaluate");

  const auto [codec, ccfg] = load_codec(paths.codec_ckpt());
  DenoiserConfig dcfg;
  const DenoiserParams<float> params = load_effective_denoiser(paths, dcfg);

  const Bucket bucket = cfg.bucket();
  const std::vector<ClassTriple> probes = driving_classes();

  // Reconstruction: condition on the first frame of a held-out synthetic clip
  // and measure pixel MSE against the full clip.
  double l2_sum = 0.0;
  for (int i = 0; i < cfg.eval.l2_pairs; ++i) {
    const ClassTriple cls = probes[static_cast<std::size_t>(i) % probes.size()];
    ToyClipSpec spec;
    spec.annotation =
        synthetic_annotation(cls, "holdout", cfg.data.frame_count, cfg.data.fps);
    spec.seed = Rng::mix(cfg.eval.holdout_seed, 0x67740000ULL | static_cast<std::uint64_t>(i));
    spec.width = bucket.width;
    spec.height = bucket.height;
    spec.frame_count = bucket.frame_count;
    const Video<float> truth = synthesize_toy_clip(spec);
    const Video<float> first = first_pixel_frame(truth);
    const Video<float> gen = generate_video(
        generate_caption(cls), bucket, params, dcfg, codec, ccfg, cfg.guidance,
        cfg.sample_steps,
        Rng::mix(cfg.eval.holdout_seed, 0x67656e0000ULL | static_cast<std::uint64_t>(i)),
        &first);
    l2_sum += l2_reconstruction(gen, truth);
  }

  const LatencyReport latency = benchmark_latency(
      [&] {
        (void)generate_video(generate_caption(probes[0]), bucket, params, dcfg, codec, ccfg,
                             cfg.guidance, cfg.sample_steps, cfg.eval.holdout_seed);
      },
      cfg.eval.latency_runs);

  const AdherenceResult adherence =
      class_adherence(params, dcfg, nullptr, codec, ccfg, cfg.guidance, cfg.sample_steps,
                      bucket, probes, cfg.eval.seeds_per_class, {}, cfg.eval.holdout_seed);

  EvalReport report;
  report.l2_loss = l2_sum / static_cast<double>(cfg.eval.l2_pairs);
  report.latency_mean_s = latency.mean_s;
  report.latency_runs = cfg.eval.latency_runs;
  report.class_adherence = adherence.fraction();
  report.config_fingerprint =
      config_fingerprint(denoiser_param_hash(params), cfg.guidance, cfg.sample_steps, bucket);

  const std::string text = serialize_eval_report(report);
  std::ofstream out(paths.eval_report());
  if (!out) throw ArtifactMissing("cannot write " + paths.eval_report().string());
  out << text;
  std::cout << text << "evaluate: adherence " << adherence.hits << "/" << adherence.total
            << ", report saved to " << paths.eval_report().string() << "\n";
}

void cmd_bench(const RunConfig& cfg) {
  const RunPaths paths{cfg.out_dir};
  require_artifact(paths.codec_ckpt(), "run 'train-codec' first");

  const auto [codec, ccfg] = load_codec(paths.codec_ckpt());
  DenoiserConfig dcfg;
  const DenoiserParams<float> params = load_effective_denoiser(paths, dcfg);
  const Bucket bucket = cfg.bucket();
  const std::string caption = generate_caption(driving_classes()[0]);

  const LatencyReport latency = benchmark_latency(
      [&] {
        (void)generate_video(caption, bucket, params, dcfg, codec, ccfg, cfg.guidance,
                             cfg.sample_steps, cfg.eval.holdout_seed);
      },
      cfg.eval.latency_runs);

  std::ofstream out(paths.bench());
  if (!out) throw ArtifactMissing("cannot write " + paths.bench().string());
  char line[64];
  out << "runs\t" << latency.runs_s.size() << "\n";
  std::snprintf(line, sizeof(line), "mean_s\t%.17g\n", latency.mean_s);
  out << line;
  for (std::size_t i = 0; i < latency.runs_s.size(); ++i) {
    std::snprintf(line, sizeof(line), "run_%02zu\t%.17g\n", i, latency.runs_s[i]);
    out << line;
  }
  std::cout << "bench: mean " << latency.mean_s << " s over " << latency.runs_s.size()
            << " runs (" << bucket_str(bucket) << ", " << cfg.sample_steps
            << " steps), saved " << paths.bench().string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stitchflow: suturing clip synthesis, flow-matching training, and evaluation"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("-c,--config", config_path, "run configuration JSON file");

  CLI::App* synth = app.add_subcommand("synth-data", "synthesize the labelled clip dataset");
  synth->fallthrough();
  synth->callback([&] { cmd_synth_data(load_and_echo(config_path)); });

  CLI::App* ingest = app.add_subcommand("ingest", "cut an annotated session into clips");
  ingest->fallthrough();
  std::string ingest_frames, ingest_annotations;
  double ingest_fps = 0.0;
  ingest->add_option("--frames", ingest_frames, "directory of session frames (PPM)")
      ->required();
  ingest->add_option("--annotations", ingest_annotations, "sub-stitch annotation TSV")
      ->required();
  ingest->add_option("--fps", ingest_fps, "session frame rate (default: data.fps)");
  ingest->callback([&] {
    cmd_ingest(load_and_echo(config_path), ingest_frames, ingest_annotations, ingest_fps);
  });

  CLI::App* tcodec = app.add_subcommand("train-codec", "train the latent video codec");
  tcodec->fallthrough();
  tcodec->callback([&] { cmd_train_codec(load_and_echo(config_path)); });

  CLI::App* ttrain = app.add_subcommand("train", "fine-tune the denoiser on the manifest");
  ttrain->fallthrough();
  ttrain->callback([&] { cmd_train(load_and_echo(config_path)); });

  CLI::App* gen = app.add_subcommand("generate", "sample a clip from a caption");
  gen->fallthrough();
  GenerateArgs gen_args;
  gen->add_option("--caption", gen_args.caption, "templated sub-stitch caption")->required();
  gen->add_option("--out", gen_args.out_name, "output name under gen/ (default: clip)");
  gen->add_option("--bucket", gen_args.bucket, "WIDTHxHEIGHTxFRAMES (default: data section)");
  gen->add_option("--steps", gen_args.steps, "sampler steps (default: sample.steps)");
  gen->add_option("--guidance", gen_args.guidance, "none | cfg | stg (default: sample.guidance)");
  gen->add_option("--scale", gen_args.scale, "guidance scale (default: sample.scale)");
  gen->add_option("--skip-layers", gen_args.skip_layers, "comma-separated layers for stg");
  gen->add_option("--seed", gen_args.seed, "sampling seed (default: top-level seed)");
  gen->add_option("--first-frame", gen_args.first_frame, "PPM to condition on (image-to-video)");
  gen->callback([&] {
    gen_args.has_scale = gen->count("--scale") > 0;
    gen_args.has_seed = gen->count("--seed") > 0;
    cmd_generate(load_and_echo(config_path), gen_args);
  });

  CLI::App* ev = app.add_subcommand("evaluate", "reconstruction, latency, and adherence report");
  ev->fallthrough();
  ev->callback([&] { cmd_evaluate(load_and_echo(config_path)); });

  CLI::App* bench = app.add_subcommand("bench", "generation latency benchmark");
  bench->fallthrough();
  bench->callback([&] { cmd_bench(load_and_echo(config_path)); });

  try {
    check_backend_env();
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
