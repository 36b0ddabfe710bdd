// liealign: synth | preprocess | train | align | atlas | eval-pck

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "liealign/checkpoint.hpp"
#include "liealign/eval.hpp"
#include "liealign/features.hpp"
#include "liealign/training.hpp"
#include "png_writer.hpp"

namespace fs = std::filesystem;
using namespace liealign;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write '" + path.string() + "'");
  out << text;
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::format, "'" + path + "' is not valid JSON: " + e.what());
  }
}

// PCA is always applied in its stored float32 form, so training and later
// inference from the checkpoint see bit-identical Ṽ.
PcaModel stored_pca(const PcaModel& pca) { return pca_from_tensors(pca_tensors(pca)); }

Checkpoint load_checkpoint(const std::string& path, std::string* hash) {
  const auto bytes = binary::read_file(path);
  if (hash != nullptr) *hash = checkpoint_hash(bytes);
  return decode_checkpoint(bytes);
}

AlignmentResult infer(const Collection& col, const std::string& checkpoint_path, int threads) {
  std::string hash;
  const Checkpoint ck = load_checkpoint(checkpoint_path, &hash);
  const auto masked = reduce_collection(col, ck.pca);
  AlignmentResult r = align_collection(ck.model, masked, ck.align_options(threads));
  r.model_hash = hash;
  return r;
}

std::string alignment_text(const AlignmentResult& r) { return to_json(r).dump(2) + "\n"; }

struct SynthArgs {
  std::size_t n = 8;
  std::string family = "se2";
  double magnitude = 1.0;
  int size = 32;
  int dim = 32;
  bool mirror_half = false;
  std::uint64_t seed = 0;
  std::string out = "synthetic.sjam";
};

struct PreprocessArgs {
  std::string bundle;
  int k = kDefaultPcaChannels;
  std::string out = "pca.sjwt";
};

struct TrainArgs {
  std::string bundle;
  std::string pca;
  std::string config;
  std::string out = "run";
  std::optional<int> epochs_ae;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<int> recurrences;
  std::optional<double> lr;
  bool flips = false;
  bool no_curriculum = false;
  bool direct = false;
  int threads = 1;
};

struct AlignArgs {
  std::string bundle;
  std::string checkpoint;
  std::string out = "aligned";
  int threads = 1;
  int scale = 8;
  bool png = true;
};

struct AtlasArgs {
  std::string bundle;
  std::string checkpoint;
  std::string alignment;
  std::string source = "masked";
  std::string out = "atlas.png";
  int scale = 8;
};

struct PckArgs {
  std::string bundle;
  std::string alignment;
  std::string checkpoint;
  double alpha = kDefaultPckAlpha;
  std::string out = "pck";
};

void run_synth(const SynthArgs& a) {
  SyntheticOptions o;
  o.n = a.n;
  o.family = parse_family(a.family);
  o.magnitude = a.magnitude;
  o.height = o.width = a.size;
  o.feature_dim = a.dim;
  o.mirror_half = a.mirror_half;
  o.seed = a.seed;
  const SyntheticSet set = make_synthetic(o);
  save_bundle(a.out, set.collection);
  nlohmann::json gt = nlohmann::json::array();
  for (std::size_t i = 0; i < set.ground_truth.size(); ++i) {
    gt.push_back({{"index", i}, {"ground_truth", detail::mat_json(set.ground_truth[i])},
                  {"mirrored", set.mirrored[i] == FlipConfig::horizontal}});
  }
  const fs::path gt_path = fs::path(a.out).replace_extension(".truth.json");
  write_text(gt_path, nlohmann::json{{"images", gt}}.dump(2) + "\n");
  std::cout << "wrote " << a.out << " (" << a.n << " images) and " << gt_path.string() << "\n";
}

void run_preprocess(const PreprocessArgs& a) {
  const Collection col = load_bundle(a.bundle);
  const PcaModel pca = fit_pca(col, a.k);
  write_tensor_file(a.out, pca_tensors(pca));
  std::cout << "wrote " << a.out << " (K=" << pca.k() << ", d=" << pca.d() << ")\n";
}

void run_train(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config.empty()) cfg = load_config(a.config);
  if (a.epochs_ae) cfg.ae_epochs = *a.epochs_ae;
  if (a.epochs) cfg.joint_epochs = *a.epochs;
  if (a.seed) cfg.seed = *a.seed;
  if (a.recurrences) cfg.recurrences = *a.recurrences;
  if (a.lr) cfg.learning_rate = *a.lr;
  if (a.flips) cfg.flips_enabled = true;
  if (a.no_curriculum) cfg.curriculum_enabled = false;
  if (a.direct) cfg.parameterization = Parameterization::direct_matrix;
  cfg.threads = a.threads;
  cfg.validate();
  if (cfg.ae_epochs == 0) std::cerr << "warning: --epochs-ae 0, skipping autoencoder pretraining\n";

  const auto t0 = std::chrono::steady_clock::now();
  const Collection col = load_bundle(a.bundle);
  const PcaModel pca = stored_pca(a.pca.empty() ? fit_pca(col, cfg.pca_channels) : pca_from_tensors(read_tensor_file(a.pca)));
  cfg.pca_channels = pca.k();
  const auto masked = reduce_collection(col, pca);
  const auto t1 = std::chrono::steady_clock::now();

  TrainResult res = train(masked, cfg);
  const auto t2 = std::chrono::steady_clock::now();

  fs::create_directories(a.out);
  Checkpoint ck{res.model, pca, res.alignment.family, cfg.recurrences, cfg.flips_enabled, cfg.parameterization};
  const auto bytes = encode_checkpoint(ck);
  binary::Writer w;
  w.u8s(bytes);
  w.save((fs::path(a.out) / "checkpoint.sjwt").string());
  res.alignment.model_hash = checkpoint_hash(bytes);
  write_text(fs::path(a.out) / "alignment.json", alignment_text(res.alignment));

  std::ostringstream ae;
  ae.precision(17);
  ae << "epoch,lr,loss\n";
  for (const auto& e : res.ae_log) ae << e.epoch << ',' << e.lr << ',' << e.loss << '\n';
  write_text(fs::path(a.out) / "ae_loss.csv", ae.str());
  std::ostringstream jl;
  jl.precision(17);
  jl << "epoch,lr,loss,family,flip_switches,ae_loss,identity_target_loss\n";
  for (const auto& e : res.joint_log) {
    jl << e.epoch << ',' << e.lr << ',' << e.loss << ',' << to_string(e.family) << ',' << e.flip_switches << ','
       << e.ae_loss << ',' << e.identity_target_loss << '\n';
  }
  write_text(fs::path(a.out) / "loss.csv", jl.str());
  write_text(fs::path(a.out) / "config.txt", config_to_text(cfg));

  const auto secs = [](auto d) { return std::chrono::duration<double>(d).count(); };
  const nlohmann::json manifest{
      {"config", config_to_text(cfg)},
      {"seed", cfg.seed},
      {"bundle", a.bundle},
      {"checkpoint", (fs::path(a.out) / "checkpoint.sjwt").string()},
      {"output_dir", a.out},
      {"model_hash", res.alignment.model_hash},
      {"baseline_loss", res.baseline_loss},
      {"final_loss", res.final_loss},
      {"timings_s", {{"load_and_pca", secs(t1 - t0)}, {"train", secs(t2 - t1)}}}};
  write_text(fs::path(a.out) / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "trained on " << col.size() << " images: loss " << res.baseline_loss << " -> " << res.final_loss
            << ", wrote " << a.out << "\n";
}

void run_align(const AlignArgs& a) {
  const Collection col = load_bundle(a.bundle);
  std::string hash;
  const Checkpoint ck = load_checkpoint(a.checkpoint, &hash);
  const auto masked = reduce_collection(col, ck.pca);
  AlignmentResult r = align_collection(ck.model, masked, ck.align_options(a.threads));
  r.model_hash = hash;
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "alignment.json", alignment_text(r));
  if (a.png) {
    std::vector<FeatureMap<float>> codes;
    for (const auto& m : masked) codes.push_back(ck.model.encode(m));
    const auto aligned = aligned_maps(codes, r);
    const auto range = tools::rgb_range(aligned);
    for (std::size_t i = 0; i < aligned.size(); ++i) {
      tools::write_feature_png((fs::path(a.out) / ("aligned_" + std::to_string(i) + ".png")).string(), aligned[i],
                               range, a.scale);
    }
  }
  std::cout << "aligned " << col.size() << " images, wrote " << a.out << "\n";
}

void run_atlas(const AtlasArgs& a) {
  const Collection col = load_bundle(a.bundle);
  if (a.checkpoint.empty()) throw Error(ErrorCode::config, "atlas needs --checkpoint (for the PCA projection)");
  const AlignmentResult r = a.alignment.empty() ? infer(col, a.checkpoint, 1) : alignment_from_json(read_json(a.alignment));
  std::vector<FeatureMap<float>> maps;
  if (a.source == "raw") {
    for (const auto& b : col.images) maps.push_back(b.features);
  } else if (a.source == "masked") {
    maps = reduce_collection(col, load_checkpoint(a.checkpoint, nullptr).pca);
  } else {
    throw Error(ErrorCode::config, "--source must be 'raw' or 'masked'");
  }
  const FeatureMap<float> atlas = build_atlas(maps, r);
  tools::write_feature_png(a.out, atlas, tools::rgb_range({atlas}), a.scale);
  std::cout << "wrote " << a.out << "\n";
}

void run_pck(const PckArgs& a) {
  const Collection col = load_bundle(a.bundle);
  AlignmentResult r;
  if (!a.alignment.empty()) {
    r = alignment_from_json(read_json(a.alignment));
  } else if (!a.checkpoint.empty()) {
    r = infer(col, a.checkpoint, 1);
  } else {
    throw Error(ErrorCode::config, "eval-pck needs --alignment or --checkpoint");
  }
  if (r.images.size() != col.size()) throw Error(ErrorCode::shape_mismatch, "alignment and bundle image counts differ");
  const PckReport rep = evaluate_collection(col, r, a.alpha);
  write_text(a.out + ".csv", pck_csv(rep));
  write_text(a.out + ".json", pck_summary(rep).dump(2) + "\n");
  std::cout << "PCK@" << a.alpha << " = " << rep.mean << " over " << rep.pairs.size() << " pairs\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint alignment of feature-map collections with Lie-algebraic spatial transformers"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic collection with known ground-truth warps");
  synth->add_option("--n", sa.n, "Number of images")->check(CLI::Range(2, 100000));
  synth->add_option("--family", sa.family, "Warp family: se2, aff2 or sl3");
  synth->add_option("--magnitude", sa.magnitude, "Scale of the warp bounds (0 gives identical copies)");
  synth->add_option("--size", sa.size, "Feature map height and width");
  synth->add_option("--dim", sa.dim, "Raw feature channels");
  synth->add_flag("--mirror-half", sa.mirror_half, "Mirror every second image");
  synth->add_option("--seed", sa.seed, "Random seed");
  synth->add_option("--out", sa.out, "Output bundle path");

  PreprocessArgs pa;
  auto* pre = app.add_subcommand("preprocess", "Fit the PCA projection of a bundle");
  pre->add_option("--bundle", pa.bundle, "Input bundle")->required();
  pre->add_option("--k", pa.k, "Number of principal components");
  pre->add_option("--out", pa.out, "Output tensor file");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Pretrain the autoencoder, then train the joint aligner");
  tr->add_option("--bundle", ta.bundle, "Input bundle")->required();
  tr->add_option("--pca", ta.pca, "PCA tensor file from `preprocess` (fitted here when omitted)");
  tr->add_option("--config", ta.config, "key = value config file");
  tr->add_option("--out", ta.out, "Output directory");
  tr->add_option("--epochs-ae", ta.epochs_ae, "Autoencoder pretraining epochs (0 skips)");
  tr->add_option("--epochs", ta.epochs, "Joint training epochs");
  tr->add_option("--seed", ta.seed, "Random seed");
  tr->add_option("--recurrences", ta.recurrences, "IC-STN recurrences");
  tr->add_option("--lr", ta.lr, "Initial learning rate");
  tr->add_flag("--flips", ta.flips, "Enable horizontal-flip handling");
  tr->add_flag("--no-curriculum", ta.no_curriculum, "Train in sl3 from the first epoch");
  tr->add_flag("--direct-matrix", ta.direct, "Ablation: T = I + A instead of the exponential map");
  tr->add_option("--threads", ta.threads, "Worker threads (1 is reproducible bit-for-bit)")->check(CLI::PositiveNumber);

  AlignArgs aa;
  auto* al = app.add_subcommand("align", "Run a trained checkpoint on a bundle");
  al->add_option("--bundle", aa.bundle, "Input bundle")->required();
  al->add_option("--checkpoint", aa.checkpoint, "Checkpoint from `train`")->required();
  al->add_option("--out", aa.out, "Output directory");
  al->add_option("--threads", aa.threads, "Worker threads")->check(CLI::PositiveNumber);
  al->add_option("--scale", aa.scale, "PNG upscaling factor")->check(CLI::PositiveNumber);
  al->add_flag("!--no-png", aa.png, "Skip the aligned-feature PNGs");

  AtlasArgs at;
  auto* atl = app.add_subcommand("atlas", "Render the mean of the aligned features");
  atl->add_option("--bundle", at.bundle, "Input bundle")->required();
  atl->add_option("--checkpoint", at.checkpoint, "Checkpoint from `train`")->required();
  atl->add_option("--alignment", at.alignment, "AlignmentResult JSON (inferred when omitted)");
  atl->add_option("--source", at.source, "raw or masked");
  atl->add_option("--out", at.out, "Output PNG");
  atl->add_option("--scale", at.scale, "PNG upscaling factor")->check(CLI::PositiveNumber);

  PckArgs pk;
  auto* pck = app.add_subcommand("eval-pck", "Keypoint-transfer PCK of an alignment");
  pck->add_option("--bundle", pk.bundle, "Bundle with keypoints")->required();
  pck->add_option("--alignment", pk.alignment, "AlignmentResult JSON");
  pck->add_option("--checkpoint", pk.checkpoint, "Checkpoint to run when no alignment is given");
  pck->add_option("--alpha", pk.alpha, "Threshold as a fraction of max(h, w)");
  pck->add_option("--out", pk.out, "Report prefix (.csv and .json are appended)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) run_synth(sa);
    else if (*pre) run_preprocess(pa);
    else if (*tr) run_train(ta);
    else if (*al) run_align(aa);
    else if (*atl) run_atlas(at);
    else if (*pck) run_pck(pk);
  } catch (const Error& e) {
    std::cerr << nlohmann::json{{"error", to_string(e.code())}, {"message", e.what()}}.dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 3;
  }
  return 0;
}
