#include <CLI11.hpp>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "lesionseg/atlas.hpp"
#include "lesionseg/gem_fit.hpp"
#include "lesionseg/lesion_sampler.hpp"
#include "lesionseg/likelihood.hpp"
#include "lesionseg/logging.hpp"
#include "lesionseg/metrics.hpp"
#include "lesionseg/parallel.hpp"
#include "lesionseg/phantom.hpp"
#include "lesionseg/shape_prior.hpp"
#include "lesionseg/volume.hpp"

namespace fs = std::filesystem;
using namespace lesionseg;

namespace {

struct MissingInput : std::runtime_error {
  explicit MissingInput(const fs::path& p)
      : std::runtime_error("missing input: " + p.string()) {}
};

void require_exists(const fs::path& p) {
  if (!fs::exists(p)) throw MissingInput(p);
}

// Deletes everything written so far unless the command completes.
class OutputGuard {
 public:
  ~OutputGuard() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& p : written_) fs::remove(p, ec);
  }
  fs::path track(fs::path p) {
    written_.push_back(p);
    return p;
  }
  void commit() { committed_ = true; }

 private:
  std::vector<fs::path> written_;
  bool committed_ = false;
};

fs::path ensure_out_dir(const std::string& out) {
  fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

// "path" or "path:tag"; the suffix wins only when it names a known tag.
std::pair<fs::path, std::optional<ContrastTag>> parse_input_arg(const std::string& arg) {
  const auto pos = arg.rfind(':');
  if (pos != std::string::npos && pos + 1 < arg.size()) {
    try {
      const ContrastTag tag = contrast_from_name(arg.substr(pos + 1));
      return {fs::path(arg.substr(0, pos)), tag};
    } catch (const std::exception&) {
    }
  }
  return {fs::path(arg), std::nullopt};
}

ClassSharingMap phantom_sharing_map() {
  ClassSharingMap sharing;
  sharing.label_to_class = {0, 1, 2, 3};
  sharing.components_per_class = {1, 1, 1, 1};
  sharing.mixture_weights = {{1.0}, {1.0}, {1.0}, {1.0}};
  sharing.wm_class = 3;
  sharing.gm_class = 2;
  sharing.class_names = {"background", "csf", "gm", "wm"};
  return sharing;
}

int cmd_make_phantom(const std::string& out, std::uint32_t dims, double voxel_size,
                     int n_contrasts, int lesions, int outliers, std::uint64_t seed) {
  PhantomSpec spec = PhantomSpec::default_brain_contrasts(
      {dims, dims, dims}, voxel_size, static_cast<std::size_t>(n_contrasts), seed);
  spec.lesion_count = lesions;
  spec.outlier_count = outliers;
  const PhantomOutput phantom = generate(spec);

  const fs::path dir = ensure_out_dir(out);
  OutputGuard guard;
  MultiContrastImage native = phantom.image;
  for (double& v : native.data) v = std::exp(v);
  native.log_domain = false;
  save_image(guard.track(dir / "image.mvol"), native);
  save_labels(guard.track(dir / "labels.mvol"), phantom.labels);
  save_mask(guard.track(dir / "lesion_mask.mvol"), phantom.lesions);
  phantom.save_truth_json(guard.track(dir / "truth.json"));
  phantom_sharing_map().save_json(guard.track(dir / "sharing.json"));
  guard.commit();
  log_info("phantom written to ", dir.string());
  return 0;
}

int cmd_build_atlas(const std::vector<std::string>& label_paths,
                    const std::vector<std::string>& mask_paths, std::uint32_t resolution,
                    double stiffness, const std::string& out) {
  std::vector<LabelMap> labels;
  for (const auto& p : label_paths) {
    require_exists(p);
    labels.push_back(load_labels(p));
  }
  std::vector<LesionMask> masks;
  for (const auto& p : mask_paths) {
    require_exists(p);
    masks.push_back(load_mask(p));
  }
  const AtlasMesh mesh =
      build_atlas(labels, masks, {resolution, resolution, resolution}, stiffness);
  const fs::path dir = ensure_out_dir(out);
  OutputGuard guard;
  save_atlas(guard.track(dir / "atlas.amsh"), mesh);
  guard.commit();
  log_info("atlas with ", mesh.num_vertices(), " vertices, ", mesh.num_labels,
           " labels written to ", dir.string());
  return 0;
}

int cmd_train_shape_prior(const std::vector<std::string>& mask_paths,
                          const ShapeTrainConfig& config, const std::string& out) {
  std::vector<LesionMask> masks;
  for (const auto& p : mask_paths) {
    require_exists(p);
    masks.push_back(load_mask(p));
  }
  std::vector<ShapeTrainLogRow> log_rows;
  const ShapePriorModel model = train_shape_prior(masks, config, &log_rows);
  const fs::path dir = ensure_out_dir(out);
  OutputGuard guard;
  save_shape_prior(guard.track(dir / "shape_prior.vae"), model);
  save_shape_training_log(guard.track(dir / "training_log.csv"), log_rows);
  guard.commit();
  log_info("shape prior written to ", dir.string());
  return 0;
}

MultiContrastImage load_inputs(const std::vector<std::string>& inputs) {
  MultiContrastImage image;
  bool first = true;
  for (const auto& arg : inputs) {
    const auto [path, tag] = parse_input_arg(arg);
    require_exists(path);
    MultiContrastImage part = load_image(path);
    if (tag) {
      if (part.n_channels != 1)
        throw std::invalid_argument("tag override needs a single-channel file: " +
                                    path.string());
      part.contrasts[0] = *tag;
    }
    if (first) {
      image = std::move(part);
      first = false;
      continue;
    }
    if (!same_geometry(image.grid, part.grid))
      throw std::invalid_argument("input grids disagree: " + path.string());
    if (image.log_domain != part.log_domain)
      throw std::invalid_argument("inputs mix log and native intensities");
    image.n_channels += part.n_channels;
    image.contrasts.insert(image.contrasts.end(), part.contrasts.begin(),
                           part.contrasts.end());
    image.data.insert(image.data.end(), part.data.begin(), part.data.end());
  }
  if (first) throw std::invalid_argument("no inputs given");
  image.validate();
  return image;
}

struct SegmentArgs {
  std::vector<std::string> inputs;
  std::string atlas, sharing, shape_prior, out;
  double nu = 500.0, kappa = 50.0, threshold = 0.5;
  int samples = 50, burn_in = 50;
  std::uint64_t seed = 0;
  int max_iters = 30, gem_iters = 5, deform_steps = 20;
  std::uint32_t bias_order = 3;
  bool diagonal = false, any_channel = false;
  bool trace = false, dump_params = false;
};

int cmd_segment(const SegmentArgs& args) {
  require_exists(args.atlas);
  require_exists(args.sharing);
  if (!args.shape_prior.empty()) require_exists(args.shape_prior);

  MultiContrastImage image = load_inputs(args.inputs);
  if (!image.log_domain) image = log_transform(image);
  const AtlasMesh mesh = load_atlas(args.atlas);
  const ClassSharingMap sharing = ClassSharingMap::from_json_file(args.sharing);

  std::optional<ShapePriorModel> shape;
  if (!args.shape_prior.empty()) shape = load_shape_prior(args.shape_prior);
  else log_info("no shape prior given: sampling with f = 1 (ablation mode)");

  FitConfig config;
  config.max_outer_iters = args.max_iters;
  config.gem_iters_per_outer = args.gem_iters;
  config.deformation_max_steps = args.deform_steps;
  config.diagonal_mode = args.diagonal;
  config.bias_order = {args.bias_order, args.bias_order, args.bias_order};
  config.sampler_requested = true;

  LesionIntensityPrior prior;
  prior.nu_base = args.nu;
  prior.kappa = args.kappa;

  const FitResult fit = fit_lesion_augmented(image, mesh, sharing, prior, config);
  log_info("fit objective ", fit.final_objective, " after ", fit.trace.size(),
           " recorded steps");

  SamplerConfig sampler_config;
  sampler_config.samples = args.samples;
  sampler_config.burn_in = args.burn_in;
  sampler_config.gamma = args.threshold;
  sampler_config.seed = args.seed;
  sampler_config.any_channel = args.any_channel;

  std::vector<ChainRow> chain;
  const ProbabilityMap posterior = lesion_posterior(
      image, fit, shape ? &*shape : nullptr, sampler_config, &chain);

  const std::vector<double> label_post =
      label_posteriors(image, fit.prior, fit.sharing, fit.params, fit.basis);
  const auto [mask, labels] = final_segmentation(
      posterior, label_post, fit.sharing.num_labels(),
      static_cast<std::int32_t>(fit.lesion_label), args.threshold);

  const fs::path dir = ensure_out_dir(args.out);
  OutputGuard guard;
  save_probability(guard.track(dir / "posterior.mvol"), posterior);
  save_mask(guard.track(dir / "lesion_mask.mvol"), mask);
  save_labels(guard.track(dir / "labels.mvol"), labels);
  if (args.trace) {
    save_trace_csv(guard.track(dir / "trace.csv"), fit.trace);
    save_chain_csv(guard.track(dir / "chain.csv"), chain);
  }
  if (args.dump_params)
    save_params(guard.track(dir / "params.prms"), fit.params, fit.sharing);
  guard.commit();
  log_info("segmentation written to ", dir.string());
  return 0;
}

int cmd_evaluate(const std::string& pred, const std::string& truth,
                 const std::string& labels, const std::string& out) {
  require_exists(pred);
  require_exists(truth);
  const LesionMask pred_mask = load_mask(pred);
  const LesionMask truth_mask = load_mask(truth);
  std::optional<LabelMap> label_map;
  if (!labels.empty()) {
    require_exists(labels);
    label_map = load_labels(labels);
  }
  const OverlapReport report =
      overlap_report(pred_mask, truth_mask, label_map ? &*label_map : nullptr);
  const std::string json = report.to_json();
  std::cout << json << "\n";
  if (!out.empty()) {
    const fs::path dir = ensure_out_dir(out);
    OutputGuard guard;
    std::ofstream os(guard.track(dir / "report.json"));
    if (!os) throw std::runtime_error("cannot write report");
    os << json << "\n";
    os.close();
    guard.commit();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Whole-brain and white-matter-lesion segmentation"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "worker thread count")->capture_default_str();

  auto* mk = app.add_subcommand("make-phantom", "generate a synthetic test volume");
  std::string mk_out;
  std::uint32_t mk_dims = 32;
  double mk_voxel = 1.0;
  int mk_contrasts = 3, mk_lesions = 5, mk_outliers = 0;
  std::uint64_t mk_seed = 0;
  mk->add_option("--out", mk_out, "output directory")->required();
  mk->add_option("--dims", mk_dims, "cubic grid size")->capture_default_str();
  mk->add_option("--voxel-size", mk_voxel, "voxel size in mm")->capture_default_str();
  mk->add_option("--contrasts", mk_contrasts, "number of contrasts (1-3)")
      ->check(CLI::Range(1, 3))
      ->capture_default_str();
  mk->add_option("--lesions", mk_lesions, "planted lesion count")->capture_default_str();
  mk->add_option("--outliers", mk_outliers, "lesion-intensity outlier voxels")
      ->capture_default_str();
  mk->add_option("--seed", mk_seed, "rng seed")->capture_default_str();

  auto* ba = app.add_subcommand("build-atlas", "build a mesh atlas from label maps");
  std::vector<std::string> ba_labels, ba_masks;
  std::uint32_t ba_resolution = 8;
  double ba_stiffness = 0.1;
  std::string ba_out;
  ba->add_option("--labels", ba_labels, "training label map (repeatable)")->required();
  ba->add_option("--lesion-masks", ba_masks, "training lesion mask (repeatable)");
  ba->add_option("--resolution", ba_resolution, "mesh vertices per axis")
      ->check(CLI::Range(2u, 64u))
      ->capture_default_str();
  ba->add_option("--stiffness", ba_stiffness, "deformation stiffness")
      ->capture_default_str();
  ba->add_option("--out", ba_out, "output directory")->required();

  auto* ts = app.add_subcommand("train-shape-prior", "train the lesion shape model");
  std::vector<std::string> ts_masks;
  ShapeTrainConfig ts_config;
  std::string ts_out;
  ts->add_option("--masks", ts_masks, "training lesion mask (repeatable)")->required();
  ts->add_option("--epochs", ts_config.epochs)->capture_default_str();
  ts->add_option("--batch-size", ts_config.batch_size)->capture_default_str();
  ts->add_option("--learning-rate", ts_config.learning_rate)->capture_default_str();
  ts->add_option("--mc-samples", ts_config.mc_samples)->capture_default_str();
  ts->add_option("--rotation", ts_config.rotation_degrees, "augmentation degrees")
      ->capture_default_str();
  ts->add_option("--seed", ts_config.seed)->capture_default_str();
  ts->add_option("--out", ts_out, "output directory")->required();

  auto* sg = app.add_subcommand("segment", "whole-brain + lesion segmentation");
  SegmentArgs sa;
  sg->add_option("--input", sa.inputs, "image volume PATH or PATH:TAG (repeatable)")
      ->required();
  sg->add_option("--atlas", sa.atlas, "mesh atlas file")->required();
  sg->add_option("--sharing", sa.sharing, "class sharing map JSON")->required();
  sg->add_option("--shape-prior", sa.shape_prior, "trained shape prior file");
  sg->add_option("--nu", sa.nu, "lesion prior strength (1 mm^3 reference)")
      ->capture_default_str();
  sg->add_option("--kappa", sa.kappa, "lesion covariance scale")->capture_default_str();
  sg->add_option("--threshold", sa.threshold, "lesion posterior threshold gamma")
      ->capture_default_str();
  sg->add_option("--samples", sa.samples, "recorded Gibbs sweeps")->capture_default_str();
  sg->add_option("--burn-in", sa.burn_in, "discarded Gibbs sweeps")->capture_default_str();
  sg->add_option("--seed", sa.seed, "rng seed")->capture_default_str();
  sg->add_option("--max-iters", sa.max_iters, "outer fit iterations")
      ->capture_default_str();
  sg->add_option("--gem-iters", sa.gem_iters, "parameter sweeps per outer iteration")
      ->capture_default_str();
  sg->add_option("--deform-steps", sa.deform_steps, "mesh optimizer step cap (0 = off)")
      ->capture_default_str();
  sg->add_option("--bias-order", sa.bias_order, "bias basis order per axis")
      ->check(CLI::Range(1u, 8u))
      ->capture_default_str();
  sg->add_flag("--diagonal", sa.diagonal, "diagonal covariances");
  sg->add_flag("--any-channel", sa.any_channel,
               "candidate mask: exceed GM mean in any FLAIR/T2 channel");
  sg->add_flag("--trace", sa.trace, "write trace.csv and chain.csv");
  sg->add_flag("--dump-params", sa.dump_params, "write fitted parameters");
  sg->add_option("--out", sa.out, "output directory")->required();

  auto* ev = app.add_subcommand("evaluate", "overlap metrics between two masks");
  std::string ev_pred, ev_truth, ev_labels, ev_out;
  ev->add_option("--pred", ev_pred, "predicted lesion mask")->required();
  ev->add_option("--truth", ev_truth, "ground-truth lesion mask")->required();
  ev->add_option("--labels", ev_labels, "label map for per-label volumes");
  ev->add_option("--out", ev_out, "output directory for report.json");

  CLI11_PARSE(app, argc, argv);

  try {
    set_thread_count(threads);
    if (mk->parsed())
      return cmd_make_phantom(mk_out, mk_dims, mk_voxel, mk_contrasts, mk_lesions,
                              mk_outliers, mk_seed);
    if (ba->parsed())
      return cmd_build_atlas(ba_labels, ba_masks, ba_resolution, ba_stiffness, ba_out);
    if (ts->parsed()) return cmd_train_shape_prior(ts_masks, ts_config, ts_out);
    if (sg->parsed()) return cmd_segment(sa);
    if (ev->parsed()) return cmd_evaluate(ev_pred, ev_truth, ev_labels, ev_out);
  } catch (const MissingInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
