#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "posematch/bench.hpp"
#include "posematch/gradcheck.hpp"
#include "posematch/ism.hpp"
#include "posematch/tensor_io.hpp"
#include "posematch/train.hpp"

using namespace posematch;
using nlohmann::json;

namespace {

struct Common {
  std::string out;
  std::string timing_out;
  std::string weights_path;
  std::uint64_t weight_seed = 0;
};

struct Options {
  Common common;
  PipelineConfig pipeline;
  SuiteConfig suite;
  ModelConfig model;
  std::uint64_t seed = 0;
  std::string fine_attention = "sdpt";
  std::vector<std::string> families{"box-cluster", "random-blob"};
};

void add_output(CLI::App* app, Common& c) {
  app->add_option("--out", c.out, "Result JSON path (default stdout)");
  app->add_option("--timing-out", c.timing_out, "Wall-clock timing JSON path (default stderr)");
}

void add_weights(CLI::App* app, Options& o) {
  app->add_option("--weights", o.common.weights_path, "Weight collection to load instead of seeded init");
  app->add_option("--weight-seed", o.common.weight_seed, "Seed for weight initialization")->capture_default_str();
  app->add_option("--descriptor-dim", o.model.descriptor_dim, "Descriptor width C")->capture_default_str();
}

void add_pipeline(CLI::App* app, Options& o) {
  auto& p = o.pipeline;
  app->add_option("--coarse-points", p.coarse_points)->capture_default_str();
  app->add_option("--fine-points", p.fine_points)->capture_default_str();
  app->add_option("--sparse-points", p.fine_sparse_points)->capture_default_str();
  app->add_option("--tau", p.tau)->capture_default_str();
  app->add_option("--hypotheses", p.hypotheses.n_hyp)->capture_default_str();
  app->add_option("--keep-hypotheses", p.hypotheses.keep)->capture_default_str();
  app->add_option("--pipeline-seed", p.seed)->capture_default_str();
  app->add_option("--fine-attention", o.fine_attention)
      ->check(CLI::IsMember({"sdpt", "geometric", "linear"}))
      ->capture_default_str();
}

void add_suite(CLI::App* app, Options& o) {
  auto& s = o.suite;
  app->add_option("--seed", o.seed, "Suite seed")->capture_default_str();
  app->add_option("--instances", s.instances)->capture_default_str();
  app->add_option("--model-points", s.model_points)->capture_default_str();
  app->add_option("--occlusion", s.params.occlusion)->capture_default_str();
  app->add_option("--noise", s.params.noise_sigma, "Noise sigma as a fraction of the model radius")->capture_default_str();
  app->add_option("--outliers", s.params.outlier_frac)->capture_default_str();
  app->add_option("--corruption", s.corruption)->capture_default_str();
  app->add_option("--families", o.families)
      ->check(CLI::IsMember({"sphere-cap-union", "box-cluster", "random-blob"}))
      ->capture_default_str();
}

void finalize(Options& o) {
  o.pipeline.fine_attention = parse_fine_attention(o.fine_attention);
  o.suite.descriptor_dim = o.model.descriptor_dim;
  o.suite.families.clear();
  for (const auto& f : o.families) o.suite.families.push_back(parse_family(f));
  if (o.suite.instances < 1) fail(ErrorCode::kInvalidArgument, "--instances must be >= 1");
}

ModelWeights load_weights(const Options& o) {
  if (!o.common.weights_path.empty()) return ModelWeights::load(o.common.weights_path, o.model);
  return ModelWeights::initialize(o.common.weight_seed, o.model);
}

void emit(const std::string& path, const json& doc) {
  const std::string text = doc.dump(2) + "\n";
  if (path.empty()) {
    std::cout << text << std::flush;
  } else {
    write_file(path, text);
  }
}

void emit_timing(const Common& c, const json& timing) {
  if (c.timing_out.empty()) {
    std::cerr << timing.dump() << "\n";
  } else {
    write_file(c.timing_out, timing.dump(2) + "\n");
  }
}

// ---------------------------------------------------------------------------
// File layouts

void save_instance(const SyntheticInstance& inst, const std::string& path) {
  TensorCollection c;
  c.meta = {{"family", family_name(inst.family)},
            {"seed", inst.seed},
            {"proposal", inst.params},
            {"corruption", inst.corruption},
            {"descriptor_dim", inst.descriptor_dim}};
  c.put("proposal_points", to_tensor(inst.proposal.cloud.points));
  c.put("proposal_descriptors", to_tensor(*inst.proposal.cloud.descriptors));
  std::vector<double> src(inst.proposal.source.begin(), inst.proposal.source.end());
  c.put("proposal_source", to_tensor(Vector(Eigen::Map<const Vector>(src.data(), static_cast<Index>(src.size())))));
  c.put("model_points", to_tensor(inst.object.cloud.points));
  c.put("model_descriptors", to_tensor(*inst.object.cloud.descriptors));
  c.put("model_center", to_tensor(Vector(inst.object.info.center)));
  c.put("model_radius", to_tensor(Vector(Vector::Constant(1, inst.object.info.radius))));
  c.put("gt_rotation", to_tensor(Matrix(inst.gt.rotation)));
  c.put("gt_translation", to_tensor(Vector(inst.gt.translation)));
  c.save(path);
}

struct LoadedInstance {
  PointCloud proposal, model;
  NormalizationInfo info;
  std::optional<Pose> gt;
  bool symmetric = false;
};

LoadedInstance load_instance(const std::string& path) {
  const TensorCollection c = TensorCollection::load(path);
  LoadedInstance li;
  li.proposal.points = to_points(c.get("proposal_points"));
  li.proposal.descriptors = to_matrix(c.get("proposal_descriptors"));
  li.model.points = to_points(c.get("model_points"));
  li.model.descriptors = to_matrix(c.get("model_descriptors"));
  if (c.contains("model_center") && c.contains("model_radius")) {
    const Vector center = to_vector(c.get("model_center"));
    const Vector radius = to_vector(c.get("model_radius"));
    if (center.size() != 3 || radius.size() != 1) fail(ErrorCode::kShapeMismatch, "model_center/model_radius shape");
    li.info = {center, radius[0]};
  } else {
    li.info = bounding_sphere(li.model.points);
  }
  if (c.contains("gt_rotation")) {
    const Matrix r = to_matrix(c.get("gt_rotation"));
    const Vector t = to_vector(c.get("gt_translation"));
    if (r.rows() != 3 || r.cols() != 3 || t.size() != 3) fail(ErrorCode::kShapeMismatch, "gt pose shape");
    li.gt = Pose{r, t};
  }
  li.symmetric = c.meta.value("family", "") == "sphere-cap-union";
  return li;
}

// Scoring scene: camera, model points, template bank, proposals.
void save_score_scene(std::uint64_t seed, Index templates, Index proposals, Index dim, Index patches,
                      const std::string& path) {
  Rng rng(seed, 0x5C0E);
  TensorCollection c;
  c.meta = {{"kind", "score-scene"}, {"seed", seed}, {"templates", templates}, {"proposals", proposals}};
  const Camera cam{600.0, 600.0, 320.0, 240.0, 640, 480};
  c.put("camera", to_tensor(Vector((Vector(6) << cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height).finished())));
  const SyntheticObject obj = generate_object(ObjectFamily::kBoxCluster, 512, derive_seed(seed, 1));
  c.put("model_points", to_tensor(obj.cloud.points));
  auto unit = [&](Index rows) {
    Matrix m = Matrix::NullaryExpr(rows, dim, [&] { return rng.normal(); });
    m.rowwise().normalize();
    return m;
  };
  const Matrix tcls = unit(templates);
  Matrix trot(templates, 9);
  std::vector<Matrix> tpatch;
  for (Index t = 0; t < templates; ++t) {
    const Mat3 r = random_rotation(rng);
    for (int k = 0; k < 9; ++k) trot(t, k) = r(k / 3, k % 3);
    tpatch.push_back(unit(patches));
    c.put("template_patches_" + std::to_string(t), to_tensor(tpatch.back()));
  }
  c.put("template_cls", to_tensor(tcls));
  c.put("template_rotations", to_tensor(trot));
  // Even proposals copy a template with mild noise; odd ones are unrelated.
  Matrix pcls(proposals, dim), bbox(proposals, 4), mean(proposals, 3);
  for (Index k = 0; k < proposals; ++k) {
    const Index t = static_cast<Index>(rng.index(static_cast<std::size_t>(templates)));
    const bool match = k % 2 == 0;
    Matrix patch = match ? Matrix(tpatch[t] + 0.2 * unit(patches)) : unit(patches);
    pcls.row(k) = match ? Matrix(tcls.row(t) + 0.2 * unit(1)).row(0) : unit(1).row(0);
    c.put("proposal_patches_" + std::to_string(k), to_tensor(patch));
    const Vec3 m(rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.6, 1.0));
    mean.row(k) = m.transpose();
    Mat3 r;
    for (int q = 0; q < 9; ++q) r(q / 3, q % 3) = trot(t, q);
    const BBox2D b = project_points_bbox(transform_points(Pose{r, m}, obj.cloud.points), cam);
    const double jitter = match ? 2.0 : 40.0;
    bbox.row(k) << b.x_min + rng.uniform(-jitter, jitter), b.y_min + rng.uniform(-jitter, jitter),
        b.x_max + rng.uniform(-jitter, jitter), b.y_max + rng.uniform(-jitter, jitter);
  }
  c.put("proposal_cls", to_tensor(pcls));
  c.put("proposal_bbox", to_tensor(bbox));
  c.put("proposal_mean", to_tensor(mean));
  c.save(path);
}

json run_score(const std::string& path, const ScoringConfig& cfg) {
  const TensorCollection c = TensorCollection::load(path);
  const Vector cv = to_vector(c.get("camera"));
  if (cv.size() != 6) fail(ErrorCode::kShapeMismatch, "camera needs fx, fy, cx, cy, width, height");
  const Camera cam{cv[0], cv[1], cv[2], cv[3], static_cast<int>(cv[4]), static_cast<int>(cv[5])};
  PointCloud model;
  model.points = to_points(c.get("model_points"));
  const Matrix tcls = to_matrix(c.get("template_cls"));
  const Matrix trot = to_matrix(c.get("template_rotations"));
  if (trot.rows() != tcls.rows() || trot.cols() != 9) fail(ErrorCode::kShapeMismatch, "template_rotations is T x 9");
  std::vector<Template> ts;
  for (Index t = 0; t < tcls.rows(); ++t) {
    Template tp;
    tp.embedding.cls = tcls.row(t).transpose();
    tp.embedding.patches = to_matrix(c.get("template_patches_" + std::to_string(t)));
    for (int k = 0; k < 9; ++k) tp.rotation(k / 3, k % 3) = trot(t, k);
    ts.push_back(std::move(tp));
  }
  const TemplateBank bank(std::move(ts));
  const Matrix pcls = to_matrix(c.get("proposal_cls"));
  const Matrix bbox = to_matrix(c.get("proposal_bbox"));
  const Matrix mean = to_matrix(c.get("proposal_mean"));
  if (bbox.rows() != pcls.rows() || bbox.cols() != 4 || mean.rows() != pcls.rows() || mean.cols() != 3)
    fail(ErrorCode::kShapeMismatch, "proposal_bbox is K x 4 and proposal_mean is K x 3");
  std::vector<ProposalRecord> recs(static_cast<std::size_t>(pcls.rows()));
  parallel_for(pcls.rows(), [&](Index k) {
    ProposalRecord& r = recs[static_cast<std::size_t>(k)];
    r.embedding.cls = pcls.row(k).transpose();
    r.embedding.patches = to_matrix(c.get("proposal_patches_" + std::to_string(k)));
    r.bbox = {bbox(k, 0), bbox(k, 1), bbox(k, 2), bbox(k, 3)};
    r.points_mean = mean.row(k).transpose();
    score_proposal(r, bank, model, cam, cfg);
  });
  json per = json::array();
  for (std::size_t k = 0; k < recs.size(); ++k)
    per.push_back({{"proposal", k},
                   {"s_sem", *recs[k].s_sem},
                   {"s_appe", *recs[k].s_appe},
                   {"s_geo", *recs[k].s_geo},
                   {"r_vis", *recs[k].r_vis},
                   {"s_m", *recs[k].s_m}});
  return {{"config",
           {{"input", path}, {"top_k", cfg.top_k}, {"delta_vis", cfg.delta_vis}, {"delta_m", cfg.delta_m}}},
          {"seeds", c.meta.value("seed", json())},
          {"per_instance", per},
          {"aggregates", {{"proposals", recs.size()}, {"kept", filter_proposals(recs, cfg.delta_m)}}}};
}

json error_json(const std::string& code, const std::string& message) {
  return {{"error", {{"code", code}, {"message", message}}}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-shot object matching and pose estimation toolkit"};
  app.require_subcommand(1);
  Options o;

  // score
  auto* score = app.add_subcommand("score", "Score proposals against a template bank");
  std::string score_input;
  ScoringConfig scfg;
  score->add_option("--input", score_input, "Scoring scene collection")->required();
  score->add_option("--top-k", scfg.top_k)->capture_default_str();
  score->add_option("--delta-vis", scfg.delta_vis)->capture_default_str();
  score->add_option("--delta-m", scfg.delta_m)->capture_default_str();
  add_output(score, o.common);

  // synth-generate
  auto* gen = app.add_subcommand("synth-generate", "Write seeded instance or scoring-scene collections");
  std::string gen_kind = "instance", gen_prefix;
  Index score_templates = 42, score_proposals = 8, score_patches = 16;
  gen->add_option("--kind", gen_kind)->check(CLI::IsMember({"instance", "score"}))->capture_default_str();
  gen->add_option("--prefix", gen_prefix, "Output path prefix; files are <prefix><k>.tnsr")->required();
  gen->add_option("--templates", score_templates)->capture_default_str();
  gen->add_option("--proposals", score_proposals)->capture_default_str();
  gen->add_option("--patches", score_patches)->capture_default_str();
  add_suite(gen, o);
  gen->add_option("--descriptor-dim", o.model.descriptor_dim)->capture_default_str();
  add_output(gen, o.common);

  // estimate
  auto* est = app.add_subcommand("estimate", "Estimate poses for instance collections");
  std::vector<std::string> est_inputs;
  est->add_option("--instance", est_inputs, "Instance collection(s)")->required();
  add_weights(est, o);
  add_pipeline(est, o);
  add_output(est, o.common);

  auto* bench = app.add_subcommand("synth-bench", "Run the pipeline on a seeded synthetic suite");
  auto* ab_stages = app.add_subcommand("ablate-stages", "Coarse+fine vs coarse-only vs fine-only");
  auto* ab_tr = app.add_subcommand("ablate-transformer", "SDPT vs full geometric vs linear attention");
  auto* ab_as = app.add_subcommand("ablate-assignment", "Background-token softmax vs Sinkhorn");
  for (auto* sc : {bench, ab_stages, ab_tr, ab_as}) {
    add_weights(sc, o);
    add_pipeline(sc, o);
    add_suite(sc, o);
    add_output(sc, o.common);
  }
  bool timing_only = false;
  ab_tr->add_flag("--timing-only", timing_only, "Skip the suite runs");
  AssignmentConfig acfg;
  ab_as->add_option("--sinkhorn-iterations", acfg.sinkhorn_iterations)->capture_default_str();
  ab_as->add_option("--recovery-tolerance", acfg.recovery_tolerance)->capture_default_str();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the matching loss gradient");
  std::uint64_t gc_seed = 0;
  Index gc_instances = 50, gc_max = 16;
  double gc_threshold = 1e-5;
  gc->add_option("--seed", gc_seed)->capture_default_str();
  gc->add_option("--instances", gc_instances)->capture_default_str();
  gc->add_option("--max-size", gc_max)->capture_default_str();
  gc->add_option("--threshold", gc_threshold)->capture_default_str();
  add_output(gc, o.common);

  // train-toy
  auto* tt = app.add_subcommand("train-toy", "Fit the fine output head on synthetic instances");
  ToyTrainConfig tcfg;
  std::string tt_weights_out;
  tt->add_option("--train-instances", tcfg.instances)->capture_default_str();
  tt->add_option("--points", tcfg.points)->capture_default_str();
  tt->add_option("--steps", tcfg.steps)->capture_default_str();
  tt->add_option("--learning-rate", tcfg.learning_rate)->capture_default_str();
  tt->add_option("--delta-dis", tcfg.delta_dis)->capture_default_str();
  tt->add_option("--save-weights", tt_weights_out, "Write the fitted weights here");
  add_weights(tt, o);
  add_pipeline(tt, o);
  add_suite(tt, o);
  add_output(tt, o.common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    finalize(o);
    if (score->parsed()) {
      emit(o.common.out, run_score(score_input, scfg));
    } else if (gen->parsed()) {
      json files = json::array();
      for (Index k = 0; k < o.suite.instances; ++k) {
        const std::string path = gen_prefix + std::to_string(k) + ".tnsr";
        if (gen_kind == "instance") {
          save_instance(suite_instance(o.suite, o.seed, k), path);
        } else {
          save_score_scene(derive_seed(o.seed, static_cast<std::uint64_t>(k)), score_templates, score_proposals,
                           o.model.descriptor_dim, score_patches, path);
        }
        files.push_back(path);
      }
      json cfg = {{"kind", gen_kind}, {"suite", o.suite}};
      if (gen_kind == "score")
        cfg["score_scene"] = {{"templates", score_templates}, {"proposals", score_proposals}, {"patches", score_patches}};
      emit(o.common.out, {{"config", cfg}, {"seeds", {{"suite", o.seed}}}, {"files", files}});
    } else if (est->parsed()) {
      const ModelWeights w = load_weights(o);
      json per = json::array();
      EvalReport report;
      for (const auto& path : est_inputs) {
        const LoadedInstance li = load_instance(path);
        const PoseEstimate e = estimate_pose(li.proposal, li.model, li.info, w, o.pipeline);
        json rec = {{"input", path}, {"estimate", e}};
        if (li.gt) {
          report.rows.push_back(evaluate_pose(e.pose, *li.gt, li.model, li.symmetric));
          rec["eval"] = report.rows.back();
        }
        per.push_back(rec);
      }
      json cfg = {{"model", w.config()}, {"weight_seed", w.seed()}, {"pipeline", o.pipeline}};
      if (!o.common.weights_path.empty()) cfg["weights"] = o.common.weights_path;
      emit(o.common.out, {{"config", cfg},
                          {"seeds", {{"weight", w.seed()}, {"pipeline", o.pipeline.seed}}},
                          {"per_instance", per},
                          {"aggregates", report.rows.empty() ? json::object() : report.aggregates()}});
    } else if (bench->parsed() || ab_stages->parsed() || ab_tr->parsed() || ab_as->parsed()) {
      const ModelWeights w = load_weights(o);
      Timed r;
      if (bench->parsed()) r = synth_bench(w, o.pipeline, o.suite, o.seed);
      if (ab_stages->parsed()) r = ablate_stages(w, o.pipeline, o.suite, o.seed);
      if (ab_tr->parsed()) r = ablate_transformer(w, o.pipeline, o.suite, o.seed, !timing_only);
      if (ab_as->parsed()) r = ablate_assignment(w, o.pipeline, o.suite, o.seed, acfg);
      if (!o.common.weights_path.empty()) r.result["config"]["weights"] = o.common.weights_path;
      emit(o.common.out, r.result);
      emit_timing(o.common, r.timing);
    } else if (gc->parsed()) {
      if (gc_instances < 1 || gc_max < 1) fail(ErrorCode::kInvalidArgument, "--instances and --max-size must be >= 1");
      json per = json::array();
      double worst = 0.0;
      for (Index k = 0; k < gc_instances; ++k) {
        const std::uint64_t s = derive_seed(gc_seed, static_cast<std::uint64_t>(k));
        Rng rng(s, 0);
        const Index rows = 1 + static_cast<Index>(rng.index(static_cast<std::size_t>(gc_max)));
        const Index cols = 1 + static_cast<Index>(rng.index(static_cast<std::size_t>(gc_max)));
        const auto [a, labels] = random_loss_instance(rows, cols, s);
        const GradCheckReport rep = gradcheck_matching_loss(a, labels);
        worst = std::max(worst, rep.max_relative_error);
        per.push_back({{"seed", s},
                       {"rows", rows},
                       {"cols", cols},
                       {"max_relative_error", rep.max_relative_error},
                       {"max_absolute_error", rep.max_absolute_error}});
      }
      const bool pass = worst < gc_threshold;
      emit(o.common.out,
           {{"config", {{"instances", gc_instances}, {"max_size", gc_max}, {"threshold", gc_threshold}, {"step", kGradCheckStep}, {"stencil", "central-4th-order"}}},
            {"seeds", {{"gradcheck", gc_seed}}},
            {"per_instance", per},
            {"aggregates", {{"max_relative_error", worst}, {"pass", pass}}}});
      return pass ? 0 : 1;
    } else if (tt->parsed()) {
      const ModelWeights w = load_weights(o);
      const ToyTrainResult r = train_toy(w, o.pipeline, o.suite, tcfg, o.seed);
      if (!tt_weights_out.empty()) r.weights.save(tt_weights_out);
      json cfg = {{"model", w.config()}, {"weight_seed", w.seed()}, {"pipeline", o.pipeline}, {"suite", o.suite},
                  {"train", tcfg}};
      emit(o.common.out, {{"config", cfg},
                          {"seeds", {{"suite", o.seed}, {"weight", w.seed()}}},
                          {"per_instance", json::array()},
                          {"aggregates",
                           {{"initial_loss", r.initial_loss},
                            {"final_loss", r.final_loss},
                            {"loss_curve", r.loss_curve}}}});
    }
  } catch (const Error& e) {
    std::cout << error_json(std::string(error_name(e.code())), e.what()).dump() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cout << error_json("Internal", e.what()).dump() << std::endl;
    return 1;
  }
  return 0;
}
