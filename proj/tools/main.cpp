// Command-line surface of the codec: weight generation, encode/decode,
// bitstream inspection, quality metrics, squeeze-deviation analysis, RD-curve
// sweeps and toy training.
//
// Exit codes: 0 success, 1 argument/IO/validation errors, 2 model hash
// mismatch, 3 corrupt bitstream.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "invcodec/codec.hpp"
#include "invcodec/image_io.hpp"
#include "invcodec/metrics.hpp"
#include "invcodec/squeeze.hpp"
#include "invcodec/training.hpp"
#include "invcodec/weights.hpp"

namespace {

using namespace invcodec;

double wall_ms(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now() - t0)
      .count();
}

std::string fmt_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

ArchConfig arch_from_flags(int blocks, int alpha, int hidden,
                           const std::vector<int>& kernels, int couplings,
                           int nz, int attn_units) {
  ArchConfig a;
  a.blocks = blocks;
  a.alpha = alpha;
  a.subnet_hidden = hidden;
  if (!kernels.empty())
    a.kernels.assign(kernels.begin(), kernels.end());
  while (static_cast<int>(a.kernels.size()) < blocks)
    a.kernels.push_back(a.kernels.back());
  a.kernels.resize(static_cast<size_t>(blocks));
  a.couplings_per_block = couplings;
  a.nz = nz;
  a.attn_units = attn_units;
  a.validate();
  return a;
}

int run(int argc, char** argv) {
  CLI::App app{"invertible-transform learned image codec"};
  app.require_subcommand(1);

  // --- genweights ------------------------------------------------------
  auto* gen = app.add_subcommand(
      "genweights", "create a seeded weight file (untrained model)");
  std::string gen_out;
  uint64_t gen_seed = 0;
  int gen_blocks = 4, gen_alpha = 6, gen_hidden = 32, gen_couplings = 3,
      gen_nz = 0, gen_attn = 3;
  std::vector<int> gen_kernels;
  gen->add_option("--out,-o", gen_out, "output .wts path")->required();
  gen->add_option("--seed", gen_seed, "PRNG seed");
  gen->add_option("--blocks", gen_blocks, "invertible blocks");
  gen->add_option("--alpha", gen_alpha, "channel squeeze ratio");
  gen->add_option("--hidden", gen_hidden, "coupling subnet width");
  gen->add_option("--kernels", gen_kernels, "coupling kernel sizes per block");
  gen->add_option("--couplings", gen_couplings, "coupling layers per block");
  gen->add_option("--nz", gen_nz, "side-latent channels (0 = N)");
  gen->add_option("--attn-units", gen_attn, "residual units per attention branch");

  // --- encode ----------------------------------------------------------
  auto* enc = app.add_subcommand("encode", "compress an image");
  std::string enc_in, enc_weights, enc_out, enc_report = "text";
  bool enc_context = false;
  enc->add_option("input", enc_in, "source image (PNG or PPM)")
      ->required()
      ->check(CLI::ExistingFile);
  enc->add_option("--weights,-w", enc_weights, "weight file")
      ->required()
      ->check(CLI::ExistingFile);
  enc->add_option("--output,-o", enc_out, "output bitstream")->required();
  enc->add_flag("--context", enc_context, "use the autoregressive context model");
  enc->add_option("--report", enc_report, "report format: text|json")
      ->check(CLI::IsMember({"text", "json"}));

  // --- decode ----------------------------------------------------------
  auto* dec = app.add_subcommand("decode", "decompress a bitstream");
  std::string dec_in, dec_weights, dec_out, dec_report = "text";
  dec->add_option("input", dec_in, "bitstream file")
      ->required()
      ->check(CLI::ExistingFile);
  dec->add_option("--weights,-w", dec_weights, "weight file")
      ->required()
      ->check(CLI::ExistingFile);
  dec->add_option("--output,-o", dec_out, "output image (PNG or .ppm)")
      ->required();
  dec->add_option("--report", dec_report, "report format: text|json")
      ->check(CLI::IsMember({"text", "json"}));

  // --- inspect ---------------------------------------------------------
  auto* ins = app.add_subcommand("inspect", "dump a bitstream header");
  std::string ins_in, ins_report = "text";
  ins->add_option("input", ins_in, "bitstream file")
      ->required()
      ->check(CLI::ExistingFile);
  ins->add_option("--report", ins_report, "report format: text|json")
      ->check(CLI::IsMember({"text", "json"}));

  // --- metrics ---------------------------------------------------------
  auto* met = app.add_subcommand("metrics", "PSNR / MS-SSIM between two images");
  std::string met_a, met_b, met_report = "text";
  met->add_option("a", met_a, "first image")->required()->check(CLI::ExistingFile);
  met->add_option("b", met_b, "second image")->required()->check(CLI::ExistingFile);
  met->add_option("--report", met_report, "report format: text|json")
      ->check(CLI::IsMember({"text", "json"}));

  // --- deviation -------------------------------------------------------
  auto* devi = app.add_subcommand(
      "deviation", "channel-squeeze averaging deviation analysis");
  std::string dev_in, dev_weights, dev_json, dev_map;
  devi->add_option("input", dev_in, "source image")
      ->required()
      ->check(CLI::ExistingFile);
  devi->add_option("--weights,-w", dev_weights, "weight file")
      ->required()
      ->check(CLI::ExistingFile);
  devi->add_option("--json", dev_json, "write the JSON record here");
  devi->add_option("--map", dev_map, "write the deviation map as PGM here");

  // --- rd --------------------------------------------------------------
  auto* rd = app.add_subcommand(
      "rd", "RD points over an image directory for a list of weight files");
  std::string rd_dir, rd_csv, rd_json;
  std::vector<std::string> rd_weights;
  bool rd_context = false;
  rd->add_option("--dir", rd_dir, "directory of images")
      ->required()
      ->check(CLI::ExistingDirectory);
  rd->add_option("--weights,-w", rd_weights, "weight files (one RD point each)")
      ->required()
      ->check(CLI::ExistingFile);
  rd->add_option("--csv", rd_csv, "write points as CSV here");
  rd->add_option("--json", rd_json, "write points as JSON here");
  rd->add_flag("--context", rd_context, "use the context model");

  // --- train-toy -------------------------------------------------------
  auto* tr = app.add_subcommand("train-toy", "desk-scale RD training");
  std::string tr_out, tr_history, tr_images, tr_distortion = "mse";
  int tr_synthetic = 16, tr_size = 32, tr_steps = 200, tr_batch = 1,
      tr_crop = 32, tr_blocks = 2, tr_alpha = 6, tr_hidden = 32,
      tr_couplings = 3, tr_nz = 0, tr_attn = 3, tr_preset = 0;
  double tr_lambda = 0.01, tr_lr = 1e-3;
  uint64_t tr_seed = 0;
  bool tr_context = false;
  std::vector<int> tr_kernels;
  tr->add_option("--out,-o", tr_out, "output weight file")->required();
  tr->add_option("--history", tr_history, "write per-step loss CSV here");
  tr->add_option("--images", tr_images, "training image directory")
      ->check(CLI::ExistingDirectory);
  tr->add_option("--synthetic", tr_synthetic,
                 "synthetic image count when no --images given");
  tr->add_option("--size", tr_size, "synthetic image side length");
  tr->add_option("--steps", tr_steps, "optimizer steps");
  tr->add_option("--batch", tr_batch, "images per step");
  tr->add_option("--crop", tr_crop, "training crop size");
  tr->add_option("--lambda", tr_lambda, "rate-distortion tradeoff weight");
  tr->add_option("--distortion", tr_distortion, "mse|msssim")
      ->check(CLI::IsMember({"mse", "msssim"}));
  tr->add_option("--preset", tr_preset,
                 "quality preset q1..q8 (sets lambda and alpha; full-scale "
                 "blocks only)");
  tr->add_option("--lr", tr_lr, "Adam learning rate");
  tr->add_option("--seed", tr_seed, "PRNG seed");
  tr->add_flag("--context", tr_context, "train with the context model");
  tr->add_option("--blocks", tr_blocks, "invertible blocks");
  tr->add_option("--alpha", tr_alpha, "channel squeeze ratio");
  tr->add_option("--hidden", tr_hidden, "coupling subnet width");
  tr->add_option("--kernels", tr_kernels, "coupling kernel sizes per block");
  tr->add_option("--couplings", tr_couplings, "coupling layers per block");
  tr->add_option("--nz", tr_nz, "side-latent channels (0 = N)");
  tr->add_option("--attn-units", tr_attn, "attention residual units");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    // Help and version are successes; anything else is an argument error.
    return code == 0 ? 0 : 1;
  }

  if (gen->parsed()) {
    const ArchConfig arch =
        arch_from_flags(gen_blocks, gen_alpha, gen_hidden, gen_kernels,
                        gen_couplings, gen_nz, gen_attn);
    const ModelParams params = init_model_params(arch, gen_seed);
    save_weights(gen_out, params);
    std::printf("wrote %s (N=%d, alpha=%d, blocks=%d, hash=%016llx)\n",
                gen_out.c_str(), arch.latent_channels(), arch.alpha,
                arch.blocks,
                static_cast<unsigned long long>(model_hash(params)));
    return 0;
  }

  if (enc->parsed()) {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelParams params = load_weights(enc_weights);
    const Tensor img = load_image(enc_in);
    const Bitstream bs = encode_image(img, params, enc_context);
    const std::vector<uint8_t> bytes = bs.serialize();
    write_file_bytes(enc_out, bytes);
    const double px = static_cast<double>(img.dim(1)) * img.dim(2);
    const double bpp = static_cast<double>(bytes.size()) * 8.0 / px;
    const double ms = wall_ms(t0);
    if (enc_report == "json")
      std::printf("{\"bpp\":%s,\"bytes\":%zu,\"wall_ms\":%.1f}\n",
                  fmt_double(bpp).c_str(), bytes.size(), ms);
    else
      std::printf("bpp=%s bytes=%zu wall_ms=%.1f\n", fmt_double(bpp).c_str(),
                  bytes.size(), ms);
    return 0;
  }

  if (dec->parsed()) {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelParams params = load_weights(dec_weights);
    const Bitstream bs = Bitstream::parse(read_file_bytes(dec_in));
    const Tensor img = decode_image(bs, params);
    save_image(dec_out, img);
    const double ms = wall_ms(t0);
    if (dec_report == "json")
      std::printf("{\"height\":%lld,\"width\":%lld,\"wall_ms\":%.1f}\n",
                  static_cast<long long>(img.dim(1)),
                  static_cast<long long>(img.dim(2)), ms);
    else
      std::printf("decoded %lldx%lld wall_ms=%.1f\n",
                  static_cast<long long>(img.dim(1)),
                  static_cast<long long>(img.dim(2)), ms);
    return 0;
  }

  if (ins->parsed()) {
    const Bitstream bs = Bitstream::parse(read_file_bytes(ins_in));
    if (ins_report == "json")
      std::printf(
          "{\"version\":%d,\"model_hash\":\"%016llx\",\"height\":%u,"
          "\"width\":%u,\"alpha\":%u,\"n\":%u,\"context\":%s,"
          "\"y_radius\":%d,\"z_lo\":%d,\"z_hi\":%d,"
          "\"z_bytes\":%zu,\"y_bytes\":%zu}\n",
          kBitstreamVersion,
          static_cast<unsigned long long>(bs.model_hash), bs.height, bs.width,
          bs.alpha, bs.n_latent, bs.context_mode ? "true" : "false",
          bs.y_radius, bs.z_lo, bs.z_hi, bs.z_payload.size(),
          bs.y_payload.size());
    else
      std::printf(
          "version=%d model_hash=%016llx size=%ux%u alpha=%u N=%u context=%d "
          "y_radius=%d z_range=[%d,%d] z_bytes=%zu y_bytes=%zu\n",
          kBitstreamVersion,
          static_cast<unsigned long long>(bs.model_hash), bs.width, bs.height,
          bs.alpha, bs.n_latent, bs.context_mode ? 1 : 0, bs.y_radius, bs.z_lo,
          bs.z_hi, bs.z_payload.size(), bs.y_payload.size());
    return 0;
  }

  if (met->parsed()) {
    const Tensor a = load_image(met_a);
    const Tensor b = load_image(met_b);
    const double p = psnr(a, b);
    const double m = ms_ssim(a, b);
    const double mdb = msssim_db(m);
    if (met_report == "json")
      std::printf("{\"psnr_db\":%s,\"msssim\":%s,\"msssim_db\":%s}\n",
                  std::isinf(p) ? "\"inf\"" : fmt_double(p).c_str(),
                  fmt_double(m).c_str(),
                  std::isinf(mdb) ? "\"inf\"" : fmt_double(mdb).c_str());
    else
      std::printf("psnr_db=%s msssim=%s msssim_db=%s\n", fmt_double(p).c_str(),
                  fmt_double(m).c_str(), fmt_double(mdb).c_str());
    return 0;
  }

  if (devi->parsed()) {
    const ModelParams params = load_weights(dev_weights);
    const Tensor img = load_image(dev_in);
    const ArchConfig& arch = params.arch;
    const int64_t m = arch.pad_multiple();
    Tensor padded = reflect_pad_to(img, ceil_to_multiple(img.dim(1), m),
                                   ceil_to_multiple(img.dim(2), m));
    Tape tape;
    BoundParams P(tape, params);
    Var u = feature_enhance(P, "enc_fe", tape.leaf(padded));
    Var v = inn_forward(P, u);
    const DeviationReport rep = deviation_report(tape.val(v), arch.alpha);
    const std::string json = deviation_to_json(rep);
    if (!dev_json.empty()) {
      std::ofstream os(dev_json);
      os << json << "\n";
    }
    if (!dev_map.empty()) deviation_map_to_pgm(rep, dev_map);
    std::printf("%s\n", json.c_str());
    return 0;
  }

  if (rd->parsed()) {
    std::vector<std::string> files;
    for (const auto& e : std::filesystem::directory_iterator(rd_dir)) {
      if (!e.is_regular_file()) continue;
      const std::string ext = e.path().extension().string();
      if (ext == ".png" || ext == ".ppm" || ext == ".pgm")
        files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    require(!files.empty(), "rd: no images in " + rd_dir);
    std::vector<RdPoint> points;
    for (const std::string& wpath : rd_weights) {
      const ModelParams params = load_weights(wpath);
      double bpp = 0.0, ps = 0.0, ms = 0.0;
      for (const std::string& f : files) {
        const Tensor img = load_image(f);
        const Bitstream bs = encode_image(img, params, rd_context);
        const Tensor rec = decode_image(bs, params);
        bpp += static_cast<double>(bs.serialize().size()) * 8.0 /
               (static_cast<double>(img.dim(1)) * img.dim(2));
        ps += psnr(img, rec);
        ms += ms_ssim(img, rec);
      }
      RdPoint p;
      p.bpp = bpp / static_cast<double>(files.size());
      p.psnr_db = ps / static_cast<double>(files.size());
      p.msssim = ms / static_cast<double>(files.size());
      p.label = std::filesystem::path(wpath).stem().string();
      points.push_back(p);
    }
    std::sort(points.begin(), points.end(),
              [](const RdPoint& a, const RdPoint& b) { return a.bpp < b.bpp; });
    const std::string csv = rd_points_to_csv(points);
    if (!rd_csv.empty()) {
      std::ofstream os(rd_csv);
      os << csv;
    }
    if (!rd_json.empty()) {
      std::ofstream os(rd_json);
      os << rd_points_to_json(points) << "\n";
    }
    std::printf("%s", csv.c_str());
    if (points.size() >= 2 && points.front().bpp < points.back().bpp)
      std::printf("auc[%.4f,%.4f]=%.4f\n", points.front().bpp,
                  points.back().bpp,
                  auc(points, points.front().bpp, points.back().bpp));
    return 0;
  }

  if (tr->parsed()) {
    ArchConfig arch = arch_from_flags(tr_blocks, tr_alpha, tr_hidden,
                                      tr_kernels, tr_couplings, tr_nz, tr_attn);
    TrainConfig cfg;
    cfg.lambda = tr_lambda;
    cfg.distortion =
        tr_distortion == "msssim" ? Distortion::kMsssim : Distortion::kMse;
    if (tr_preset > 0) {
      auto [lam, n] = quality_preset(tr_preset, cfg.distortion);
      cfg.lambda = lam;
      require(arch.d() % n == 0,
              "train-toy: preset channel count " + std::to_string(n) +
                  " does not divide d=" + std::to_string(arch.d()) +
                  " (use --blocks 4)");
      arch.alpha = arch.d() / n;
      arch.validate();
    }
    cfg.steps = tr_steps;
    cfg.batch = tr_batch;
    cfg.crop = tr_crop;
    cfg.seed = tr_seed;
    cfg.lr = tr_lr;
    cfg.context = tr_context;

    std::vector<Tensor> images;
    if (!tr_images.empty()) {
      std::vector<std::string> files;
      for (const auto& e : std::filesystem::directory_iterator(tr_images))
        if (e.is_regular_file()) files.push_back(e.path().string());
      std::sort(files.begin(), files.end());
      for (const std::string& f : files) images.push_back(load_image(f));
    } else {
      images = synthetic_gradient_images(tr_synthetic, tr_size, tr_seed);
    }

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult res = train(images, arch, cfg, [](int step, double loss) {
      if ((step + 1) % 25 == 0)
        std::printf("step %d loss %.4f\n", step + 1, loss);
    });
    save_weights(tr_out, res.params);
    if (!tr_history.empty()) {
      std::ofstream os(tr_history);
      os << history_to_csv(res.history);
    }
    std::printf(
        "trained %d steps in %.1f s: loss %.4f -> %.4f (bpp %.4f, "
        "distortion %.4f), wrote %s\n",
        cfg.steps, wall_ms(t0) / 1000.0, res.initial_eval_loss,
        res.final_eval_loss, res.final_eval_bpp, res.final_eval_distortion,
        tr_out.c_str());
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const invcodec::hash_mismatch_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const invcodec::corrupt_stream_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
