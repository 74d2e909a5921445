// Command-line front end: train / eval / replay / select / bench.
// All output files are deterministic for a fixed seed (no timestamps).

#include <CLI11.hpp>

#include "aerolite/aerolite.hpp"

namespace {

using namespace aero;

std::vector<Sample> load_or_synth(const std::string& data, int synth_n, int size, uint64_t seed,
                                  std::vector<std::string>* diagnostics = nullptr) {
  if (!data.empty()) {
    LoadResult lr = load_annotations(data);
    if (diagnostics) *diagnostics = lr.diagnostics;
    std::cerr << lr.summary() << "\n";
    for (const auto& d : lr.diagnostics) std::cerr << "  note: " << d << "\n";
    return std::move(lr.samples);
  }
  std::vector<Sample> out;
  for (const SceneParams& p : default_scene_set(synth_n, size, seed))
    out.push_back(synth_scene(p));
  return out;
}

int infer_input_size(const std::vector<Sample>& samples) {
  AERO_CHECK(!samples.empty(), "no samples available");
  int size = samples[0].image.width;
  for (const Sample& s : samples)
    AERO_CHECK(s.image.width == size && s.image.height == size,
               "all images must be square and equally sized; got "
                   << s.image.width << "x" << s.image.height << " vs " << size);
  return size;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------

int cmd_train(const std::string& data, int synth_n, int size, int iters, double lr,
              uint64_t seed, double width, int batch, const std::string& out) {
  std::filesystem::create_directories(out);
  std::vector<Sample> samples = load_or_synth(data, synth_n, size, seed);
  ModelConfig cfg;
  cfg.input_size = infer_input_size(samples);
  cfg.width = width;
  Model model(cfg, seed);
  std::cerr << "model parameters: " << model.parameter_count() << "\n";

  std::vector<TrainItem> items;
  for (const Sample& s : samples) items.push_back(make_train_item(s, cfg.num_classes));

  TrainConfig tc;
  tc.iters = iters;
  tc.batch_size = batch;
  tc.lr = lr;
  tc.seed = seed;
  tc.log_csv = (std::filesystem::path(out) / "loss.csv").string();
  tc.nan_checkpoint = (std::filesystem::path(out) / "last_good.ckpt").string();
  TrainResult tr = train(model, items, tc);

  save_checkpoint((std::filesystem::path(out) / "model.ckpt").string(), model);
  ReportRows rows = {
      {"samples", std::to_string(samples.size())},
      {"parameters", std::to_string(model.parameter_count())},
      {"steps", std::to_string(tr.steps_run)},
      {"aborted_on_nan", tr.aborted_on_nan ? "1" : "0"},
      {"first_loss", tr.losses.empty() ? "n/a" : fmt(tr.losses.front())},
      {"final_loss", tr.losses.empty() ? "n/a" : fmt(tr.losses.back())},
  };
  write_kv_report((std::filesystem::path(out) / "train_report.txt").string(), rows);
  return tr.aborted_on_nan ? 1 : 0;
}

int cmd_eval(const std::string& data, int synth_n, int size, const std::string& checkpoint,
             bool oracle, double conf, double nms_iou, uint64_t seed, const std::string& out) {
  std::filesystem::create_directories(out);
  std::vector<Sample> samples = load_or_synth(data, synth_n, size, seed);
  AERO_CHECK(oracle || !checkpoint.empty(), "eval: need --checkpoint or --oracle");

  std::optional<Model> model;
  if (!oracle) {
    model.emplace(load_checkpoint(checkpoint));
    AERO_CHECK(model->config().input_size == infer_input_size(samples),
               "eval: checkpoint input size " << model->config().input_size
                                              << " does not match data "
                                              << infer_input_size(samples));
  }

  std::vector<PredictedBox> preds;
  std::vector<GroundTruthBox> gts;
  std::vector<MaskSet> pred_masks, gt_masks;
  for (size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    for (const Instance& in : s.instances) {
      GroundTruthBox g;
      g.image_id = (int)i;
      g.class_id = in.class_id;
      g.cx = in.x + in.w / 2.0;
      g.cy = in.y + in.h / 2.0;
      g.w = in.w;
      g.h = in.h;
      gts.push_back(g);
    }
    SceneObservation obs;
    if (oracle) {
      obs = make_oracle_observation(s);
    } else {
      ForwardResult fwd = model->forward(image_to_tensor(s.image));
      obs.detections = decode_detections(model->config(), fwd.raw, conf, nms_iou);
      obs.masks = decode_masks(model->config(), fwd.raw, obs.detections);
    }
    for (const DetectionBox& b : obs.detections) preds.push_back({(int)i, b});
    pred_masks.push_back(obs.masks);
    MaskSet gm;
    for (const Instance& in : s.instances) {
      InstanceMask m;
      m.class_id = in.class_id;
      m.width = s.image.width;
      m.height = s.image.height;
      m.data = in.mask;
      gm.push_back(std::move(m));
    }
    gt_masks.push_back(std::move(gm));
  }

  MapResult mp = bbox_map(preds, gts);
  IouResult ir = iou_miou(pred_masks, gt_masks);
  ReportRows rows = {
      {"images", std::to_string(samples.size())},
      {"detections", std::to_string(preds.size())},
      {"ground_truth_boxes", std::to_string(gts.size())},
      {"map50", format_metric(mp.map50)},
      {"map50_95", format_metric(mp.map50_95)},
      {"miou", format_metric(ir.miou)},
  };
  for (const auto& [cls, ap] : mp.ap50) rows.push_back({std::string("ap50_") + class_name(cls), fmt(ap)});
  for (const auto& [cls, iou] : ir.per_class) rows.push_back({std::string("iou_") + class_name(cls), fmt(iou)});
  write_kv_report((std::filesystem::path(out) / "eval_report.txt").string(), rows);
  return 0;
}

// Builds the replay episode list: every file under --episodes, or synthetic.
std::vector<Episode> gather_episodes(const std::string& episodes, int synth_n, int size,
                                     double interval, double delta, uint64_t seed,
                                     const std::string& out) {
  std::vector<Episode> eps;
  if (!episodes.empty()) {
    std::filesystem::path p(episodes);
    if (std::filesystem::is_directory(p)) {
      std::vector<std::string> files;
      for (const auto& e : std::filesystem::directory_iterator(p))
        if (e.path().extension() == ".txt") files.push_back(e.path().string());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) eps.push_back(read_episode(f));
    } else {
      eps.push_back(read_episode(episodes));
    }
    return eps;
  }
  std::filesystem::path epdir = std::filesystem::path(out) / "episodes";
  std::filesystem::create_directories(epdir);
  for (int i = 0; i < synth_n; ++i) {
    SceneParams base = default_scene_set(1, size, seed + (uint64_t)i * 1000)[0];
    TrajectoryParams traj;
    traj.duration = 4.0;
    if (i % 2 == 1) {  // odd episodes drift off target mid-descent
      traj.drift = TrajectoryParams::Drift::Step;
      traj.step_time = 2.0;
      traj.drift_dx = base.nest_w * 1.5;
      traj.drift_dy = base.nest_h * 0.5;
    }
    traj.scale_start = 0.8;
    traj.scale_end = 1.2;
    Episode ep = synth_episode(base, traj, interval, delta);
    std::ostringstream name;
    name << "ep" << std::setw(3) << std::setfill('0') << i << ".txt";
    write_episode((epdir / name.str()).string(), ep);
    eps.push_back(std::move(ep));
  }
  return eps;
}

int cmd_replay(const std::string& episodes, int synth_n, int size, double interval, double delta,
               double latency, const std::string& checkpoint, bool oracle, double conf,
               double nms_iou, uint64_t seed, const std::string& out) {
  std::filesystem::create_directories(out);
  AERO_CHECK(oracle || !checkpoint.empty(), "replay: need --checkpoint or --oracle");
  std::vector<Episode> eps = gather_episodes(episodes, synth_n, size, interval, delta, seed, out);

  PerceiveFn perceive;
  std::optional<Model> model;
  if (oracle) {
    perceive = oracle_perceiver();
  } else {
    model.emplace(load_checkpoint(checkpoint));
    perceive = [&model, conf, nms_iou](const EpisodeFrame& f) {
      Sample s = synth_scene(f.scene);
      AERO_CHECK(s.image.width == model->config().input_size,
                 "replay: episode frame size " << s.image.width << " != model input "
                                               << model->config().input_size);
      ForwardResult fwd = model->forward(image_to_tensor(s.image));
      SceneObservation obs;
      obs.detections = decode_detections(model->config(), fwd.raw, conf, nms_iou);
      obs.masks = decode_masks(model->config(), fwd.raw, obs.detections);
      obs.frame_timestamp = f.timestamp;
      obs.vision_center_x = s.image.width / 2.0;
      obs.vision_center_y = s.image.height / 2.0;
      return obs;
    };
  }

  std::vector<std::optional<double>> warn_times, onsets;
  std::vector<bool> predicted, actual;
  std::vector<std::vector<std::string>> csv_rows;
  for (size_t i = 0; i < eps.size(); ++i) {
    DeviationPolicy policy{eps[i].delta > 0 ? eps[i].delta : delta, eps[i].l_source};
    std::ostringstream alert_name;
    alert_name << "alerts_ep" << std::setw(3) << std::setfill('0') << i << ".txt";
    std::ofstream alerts(std::filesystem::path(out) / alert_name.str());
    EpisodeResult r = run_episode(eps[i], perceive, policy, latency, &alerts);
    warn_times.push_back(r.warning_time);
    onsets.push_back(eps[i].onset);
    predicted.push_back(r.warned);
    actual.push_back(eps[i].gt_label());
    csv_rows.push_back({std::to_string(i), std::to_string(r.frames_total),
                        std::to_string(r.frames_processed), r.warned ? "1" : "0",
                        r.warning_time ? fmt(*r.warning_time) : "n/a",
                        eps[i].onset ? fmt(*eps[i].onset) : "n/a"});
  }

  AwdResult aw = awd(warn_times, onsets);
  WarningRates wr = warning_rates(predicted, actual);
  ReportRows rows = {
      {"episodes", std::to_string(eps.size())},
      {"latency", fmt(latency)},
      {"awd", format_metric(aw.awd)},
      {"awd_counted", std::to_string(aw.counted)},
      {"awd_excluded", std::to_string(aw.excluded)},
      {"accuracy", fmt(wr.accuracy)},
      {"fpr", format_metric(wr.fpr)},
  };
  write_kv_report((std::filesystem::path(out) / "replay_report.txt").string(), rows);
  write_csv((std::filesystem::path(out) / "episodes.csv").string(),
            {"episode", "frames", "processed", "warned", "warning_time", "onset"}, csv_rows);
  return 0;
}

int cmd_select(const std::string& data, int synth_n, int size, int rounds, uint64_t seed,
               const std::string& out) {
  std::filesystem::create_directories(out);
  std::vector<Sample> samples = load_or_synth(data, synth_n, size, seed);
  AERO_CHECK(samples.size() >= 2, "select: need at least two samples");
  std::vector<std::vector<double>> features;
  for (const Sample& s : samples) features.push_back(gray_features(s.image));

  std::vector<size_t> labeled_ids = {0};
  std::vector<bool> is_labeled(samples.size(), false);
  is_labeled[0] = true;
  std::vector<std::vector<std::string>> csv_rows;
  for (int r = 0; r < rounds; ++r) {
    std::vector<std::vector<double>> labeled, unlabeled;
    std::vector<size_t> ids;
    for (size_t i = 0; i < features.size(); ++i)
      if (is_labeled[i]) labeled.push_back(features[i]);
    for (size_t i = 0; i < features.size(); ++i)
      if (!is_labeled[i]) {
        unlabeled.push_back(features[i]);
        ids.push_back(i);
      }
    auto pick = active_select(labeled, unlabeled);
    if (!pick) break;
    size_t chosen = ids[*pick];
    is_labeled[chosen] = true;
    labeled_ids.push_back(chosen);
    csv_rows.push_back({std::to_string(r), std::to_string(chosen)});
  }
  write_csv((std::filesystem::path(out) / "selection.csv").string(), {"round", "sample"},
            csv_rows);
  return 0;
}

int cmd_bench(double width, int size, uint64_t seed, bool run_forward, int fps_passes,
              const std::string& out) {
  ModelConfig cfg;
  cfg.input_size = size;
  cfg.width = width;
  Model model(cfg, seed);
  ReportRows rows = {
      {"input_size", std::to_string(size)},
      {"width", fmt(width)},
      {"parameters", std::to_string(model.parameter_count())},
      {"mult_adds", std::to_string(model.analytic_macs())},
  };
  if (run_forward || fps_passes > 0) {
    Tensor x({1, 3, size, size});
    std::mt19937_64 rng(seed);
    for (int64_t i = 0; i < x.size(); ++i) x[i] = ((rng() >> 11) * 0x1p-53);
    ForwardResult fwd = model.forward(x);
    for (const auto& [name, shape] : fwd.backbone_trace)
      rows.push_back({"trace_" + name, shape_str(shape)});
    for (int s = 0; s < 3; ++s)
      rows.push_back({"det_p" + std::to_string(s + 3), shape_str(fwd.raw.det[s].shape())});
    rows.push_back({"seg", shape_str(fwd.raw.seg_logits.shape())});
    if (fps_passes > 0) {
      auto t0 = std::chrono::steady_clock::now();
      for (int i = 0; i < fps_passes; ++i) model.forward(x);
      double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      rows.push_back({"fps_single_thread", fmt(fps_passes / sec)});
    }
  }
  if (out.empty()) {
    for (const auto& [k, v] : rows) std::cout << k << "=" << v << "\n";
  } else {
    std::filesystem::create_directories(out);
    write_kv_report((std::filesystem::path(out) / "bench_report.txt").string(), rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"UAV landing deviation detection toolkit"};
  app.require_subcommand(1);

  std::string data, episodes, checkpoint, out;
  uint64_t seed = 0;
  double width = 1.0, delta = 0.5, conf = 0.25, nms_iou = 0.45, lr = 0.001;
  double latency = 0.0, interval = 0.1;
  int iters = 300, synth_n = 8, size = 96, batch = 4, rounds = 5;
  bool oracle = false, run_forward = false;

  auto add_common = [&](CLI::App* c, bool needs_out) {
    c->add_option("--seed", seed, "RNG seed");
    auto* o = c->add_option("--out", out, "output directory");
    if (needs_out) o->required();
  };

  CLI::App* t = app.add_subcommand("train", "train a model");
  t->add_option("--data", data, "annotation JSON file");
  t->add_option("--synth", synth_n, "synthetic sample count when --data is absent");
  t->add_option("--size", size, "synthetic image size (multiple of 32)");
  t->add_option("--iters", iters, "optimization steps");
  t->add_option("--lr", lr, "initial learning rate");
  t->add_option("--width", width, "channel width multiplier");
  t->add_option("--batch", batch, "batch size");
  add_common(t, true);

  CLI::App* e = app.add_subcommand("eval", "evaluate detections and masks");
  e->add_option("--data", data, "annotation JSON file");
  e->add_option("--synth", synth_n, "synthetic sample count when --data is absent");
  e->add_option("--size", size, "synthetic image size");
  e->add_option("--checkpoint", checkpoint, "model checkpoint");
  e->add_flag("--oracle", oracle, "use ground-truth perception");
  e->add_option("--conf", conf, "confidence threshold");
  e->add_option("--nms-iou", nms_iou, "NMS IoU threshold");
  add_common(e, true);

  CLI::App* r = app.add_subcommand("replay", "replay landing episodes");
  r->add_option("--episodes", episodes, "episode file or directory of .txt episodes");
  r->add_option("--synth", synth_n, "synthetic episode count when --episodes is absent");
  r->add_option("--size", size, "synthetic scene size");
  r->add_option("--interval", interval, "frame interval, seconds");
  r->add_option("--delta", delta, "deviation threshold on d / l");
  r->add_option("--latency", latency, "inference latency, seconds");
  r->add_option("--checkpoint", checkpoint, "model checkpoint");
  r->add_flag("--oracle", oracle, "use ground-truth perception");
  r->add_option("--conf", conf, "confidence threshold");
  r->add_option("--nms-iou", nms_iou, "NMS IoU threshold");
  add_common(r, true);

  CLI::App* s = app.add_subcommand("select", "rank samples for labeling");
  s->add_option("--data", data, "annotation JSON file");
  s->add_option("--synth", synth_n, "synthetic sample count when --data is absent");
  s->add_option("--size", size, "synthetic image size");
  s->add_option("--rounds", rounds, "selection rounds");
  add_common(s, true);

  CLI::App* b = app.add_subcommand("bench", "report model size and shapes");
  b->add_option("--width", width, "channel width multiplier");
  b->add_option("--size", size, "input size (multiple of 32)");
  b->add_flag("--forward", run_forward, "run a forward pass and report shapes");
  int fps_passes = 0;
  b->add_option("--passes", fps_passes, "forward passes for throughput timing (0 = skip)");
  add_common(b, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (t->parsed()) return cmd_train(data, synth_n, size, iters, lr, seed, width, batch, out);
    if (e->parsed()) return cmd_eval(data, synth_n, size, checkpoint, oracle, conf, nms_iou, seed, out);
    if (r->parsed())
      return cmd_replay(episodes, synth_n, size, interval, delta, latency, checkpoint, oracle,
                        conf, nms_iou, seed, out);
    if (s->parsed()) return cmd_select(data, synth_n, size, rounds, seed, out);
    if (b->parsed()) return cmd_bench(width, size, seed, run_forward, fps_passes, out);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 1;
}
