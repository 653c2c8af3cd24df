// gkd: gen-data | train | distill | eval | compress | inspect
//
// Exit codes: 0 success, 1 usage error, 2 data or model format error.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <stdexcept>
#include <string>

#include "gkd/gkd.hpp"

namespace fs = std::filesystem;
using namespace gkd;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Dataset read_dataset(const std::string& flag, const std::string& path) {
  try {
    return load_dataset(path);
  } catch (const std::exception& e) {
    throw FormatError(flag + " " + path + ": " + e.what());
  }
}

ModelParams<float> read_model(const std::string& flag, const std::string& path) {
  try {
    return load_model(path);
  } catch (const std::exception& e) {
    throw FormatError(flag + " " + path + ": " + e.what());
  }
}

void check_output(const std::string& out, std::initializer_list<std::string> inputs) {
  for (const auto& in : inputs) {
    std::error_code ec;
    if (fs::exists(out, ec) && fs::exists(in, ec) && fs::equivalent(out, in, ec)) {
      throw UsageError("--out " + out + " would overwrite the input " + in);
    }
  }
}

const std::vector<GestureSample>& pick_split(const Dataset& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "val") return d.val;
  return d.test;
}

// The model must match the corpus it is run on.
void check_compatible(const ModelParams<float>& model, const Dataset& d, const std::string& what) {
  if (model.spec.class_count != d.manifest.class_count) {
    throw FormatError(what + " has " + std::to_string(model.spec.class_count) +
                      " classes but the data has " + std::to_string(d.manifest.class_count));
  }
  if (model.spec.frame_size != d.manifest.frame_size) {
    throw FormatError(what + " expects " + std::to_string(model.spec.frame_size) +
                      " px frames but the data has " + std::to_string(d.manifest.frame_size));
  }
}

struct TrainFlags {
  std::string data, out, history;
  std::size_t epochs = 10, batch = 16;
  double lr = 1e-3, clip = 0;
  std::uint64_t seed = 0;
  bool augment = false;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--data", data, "Dataset file (.gkdd)")->required();
    cmd->add_option("--out", out, "Output model file (.gkdm)")->required();
    cmd->add_option("--epochs", epochs, "Training epochs")->check(CLI::PositiveNumber);
    cmd->add_option("--batch", batch, "Mini-batch size")->check(CLI::PositiveNumber);
    cmd->add_option("--lr", lr, "Adam learning rate")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", seed, "Seed for initialization, shuffling and augmentation");
    cmd->add_option("--clip-norm", clip, "Global gradient-norm clip (0 = off)")->check(CLI::NonNegativeNumber);
    cmd->add_option("--history", history, "Also write per-epoch records to this CSV file");
    cmd->add_flag("--augment", augment, "Random rotation / translation / zoom per sample and epoch");
  }

  TrainConfig config() const {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch;
    c.adam.lr = lr;
    c.seed = seed;
    c.clip_norm = clip;
    c.augment.enabled = augment;
    c.history_csv = history;
    c.log = &std::cout;
    return c;
  }
};

ArchSpec make_spec(const std::string& arch, const std::string& width, const std::string& input,
                   const Dataset& d) {
  ArchSpec s;
  s.family = family_from_string(arch);
  s.width = Rational::parse(width);
  s.input_mode = input_mode_from_string(input);
  s.class_count = d.manifest.class_count;
  s.frame_size = d.manifest.frame_size;
  s.validate();
  return s;
}

void report_result(const TrainResult& r, const ModelParams<float>& model, const std::string& out) {
  std::cout << "best_epoch " << r.best_epoch << "\n";
  std::cout << "param_count " << param_count(model) << "\n";
  std::cout << "wrote " << out << "\n";
}

void print_eval(const EvalResult& r, const std::string& confusion_path) {
  std::cout << "accuracy " << std::fixed << std::setprecision(2) << 100 * r.accuracy() << "\n";
  std::cout << "correct " << r.correct << " / " << r.total << "\n";
  std::cout << "confusion (rows true, columns predicted)\n";
  for (const auto& row : r.confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) std::cout << (j ? " " : "") << std::setw(5) << row[j];
    std::cout << "\n";
  }
  if (!confusion_path.empty()) {
    std::ofstream f(confusion_path);
    if (!f) throw UsageError("--confusion " + confusion_path + ": cannot write");
    for (const auto& row : r.confusion) {
      for (std::size_t j = 0; j < row.size(); ++j) f << (j ? "," : "") << row[j];
      f << "\n";
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gesture recognition with 3D-CNN / LSTM models, distillation and compression"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic gesture corpus");
  std::string gen_out;
  std::size_t n_train = 800, n_val = 100, n_test = 200, frame_size = 64;
  std::uint64_t gen_seed = 0;
  bool gen_augment = false;
  gen->add_option("--out", gen_out, "Output dataset file (.gkdd)")->required();
  gen->add_option("--train", n_train, "Training samples")->check(CLI::PositiveNumber);
  gen->add_option("--val", n_val, "Validation samples")->check(CLI::PositiveNumber);
  gen->add_option("--test", n_test, "Test samples")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "Corpus seed");
  gen->add_option("--frame-size", frame_size, "Frame side in pixels (multiple of 8)")
      ->check(CLI::Range(8, 248));
  gen->add_flag("--augment", gen_augment, "Record that training should augment this corpus");

  // train
  auto* tr = app.add_subcommand("train", "Supervised training from scratch");
  std::string arch = "joint", width = "1", input = "upper_body";
  TrainFlags tflags;
  tr->add_option("--arch", arch, "Model family")->check(CLI::IsMember({"cnn3d", "lstm", "joint"}));
  tr->add_option("--width", width, "Width scale")->check(CLI::IsMember({"1", "1/2", "1/4"}));
  tr->add_option("--input", input, "Input crop")->check(CLI::IsMember({"hand", "upper_body", "combined"}));
  tflags.add_to(tr);

  // distill
  auto* di = app.add_subcommand("distill", "Train a student against a frozen teacher");
  std::string teacher_path, d_arch = "joint", d_width = "1/4", d_input;
  double temperature = 2.0, alpha = 0.5;
  bool t2 = false, no_cache = false;
  TrainFlags dflags;
  di->add_option("--teacher", teacher_path, "Teacher model file (.gkdm)")->required();
  di->add_option("--arch", d_arch, "Student family")->check(CLI::IsMember({"cnn3d", "lstm", "joint"}));
  di->add_option("--width", d_width, "Student width scale")->check(CLI::IsMember({"1", "1/2", "1/4"}));
  di->add_option("--input", d_input, "Student input crop (default: the teacher's)")
      ->check(CLI::IsMember({"hand", "upper_body", "combined"}));
  di->add_option("--temperature", temperature, "Softening temperature T")->check(CLI::PositiveNumber);
  di->add_option("--alpha", alpha, "Weight of the soft loss")->check(CLI::Range(0.0, 1.0));
  di->add_flag("--t2-scale", t2, "Multiply the soft loss by T^2");
  di->add_flag("--no-cache", no_cache, "Recompute teacher logits every batch");
  dflags.add_to(di);

  // eval
  auto* ev = app.add_subcommand("eval", "Accuracy and confusion matrix on a split");
  std::string ev_model, ev_data, ev_split = "test", confusion;
  ev->add_option("--model", ev_model, "Model file (.gkdm)")->required();
  ev->add_option("--data", ev_data, "Dataset file (.gkdd)")->required();
  ev->add_option("--split", ev_split, "Split to score")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--confusion", confusion, "Also write the confusion matrix as CSV");

  // compress
  auto* co = app.add_subcommand("compress", "Prune and / or convert a model to half precision");
  std::string co_model, co_out;
  int prune_exp = -100;
  bool half = false;
  auto* prune_opt = co->add_option("--prune-exp", prune_exp, "Prune |w| < 2^EXP")->check(CLI::Range(-149, 127));
  co->add_option("--model", co_model, "Input model file (.gkdm)")->required();
  co->add_flag("--half", half, "Store dense tensors as binary16");
  co->add_option("--out", co_out, "Output model file (.gkdm)")->required();

  // inspect
  auto* in = app.add_subcommand("inspect", "Parameter count, sparsity and size of a model file");
  std::string in_model;
  int in_exp = -100;
  in->add_option("--model", in_model, "Model file (.gkdm)")->required();
  in->add_option("--prune-exp", in_exp, "Sparsity threshold 2^EXP")->check(CLI::Range(-149, 127));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      DatasetManifest m;
      m.train = n_train;
      m.val = n_val;
      m.test = n_test;
      m.seed = gen_seed;
      m.frame_size = frame_size;
      if (frame_size % 8 != 0) throw UsageError("--frame-size must be a multiple of 8");
      m.augmentation.enabled = gen_augment;
      const Dataset d = synth_generate(m);
      save_dataset(gen_out, d);
      std::cout << "samples " << n_train + n_val + n_test << " (train " << n_train << ", val " << n_val
                << ", test " << n_test << ")\n";
      std::cout << "wrote " << gen_out << " (" << fs::file_size(gen_out) << " bytes)\n";
    } else if (tr->parsed()) {
      check_output(tflags.out, {tflags.data});
      const Dataset d = read_dataset("--data", tflags.data);
      auto cfg = tflags.config();
      cfg.augment.enabled = cfg.augment.enabled || d.manifest.augmentation.enabled;
      if (cfg.augment.enabled) cfg.augment = {true, d.manifest.augmentation.max_rotation_deg,
                                              d.manifest.augmentation.max_shift_px,
                                              d.manifest.augmentation.min_zoom,
                                              d.manifest.augmentation.max_zoom};
      const ArchSpec spec = make_spec(arch, width, input, d);
      std::cout << "model " << to_string(spec.family) << " width " << spec.width.str() << " input "
                << to_string(spec.input_mode) << " params " << param_count(spec) << "\n";
      const auto r = train(build_model<float>(spec, tflags.seed), d.train, d.val, cfg);
      save_model(tflags.out, r.model);
      report_result(r, r.model, tflags.out);
    } else if (di->parsed()) {
      check_output(dflags.out, {dflags.data, teacher_path});
      const Dataset d = read_dataset("--data", dflags.data);
      const ModelParams<float> teacher = read_model("--teacher", teacher_path);
      check_compatible(teacher, d, "--teacher " + teacher_path);
      auto cfg = dflags.config();
      cfg.augment.enabled = cfg.augment.enabled || d.manifest.augmentation.enabled;
      const std::string student_input = d_input.empty() ? to_string(teacher.spec.input_mode) : d_input;
      const ArchSpec spec = make_spec(d_arch, d_width, student_input, d);
      DistillConfig dc;
      dc.temperature = temperature;
      dc.alpha = alpha;
      dc.scale_soft_by_t2 = t2;
      dc.cache_teacher = !no_cache;
      std::cout << "teacher " << to_string(teacher.spec.family) << " width " << teacher.spec.width.str()
                << " params " << param_count(teacher) << "\n";
      std::cout << "student " << to_string(spec.family) << " width " << spec.width.str() << " params "
                << param_count(spec) << " T " << temperature << " alpha " << alpha << "\n";
      const auto r = distill_train(teacher, build_model<float>(spec, dflags.seed), d.train, d.val, dc, cfg);
      save_model(dflags.out, r.model);
      report_result(r, r.model, dflags.out);
    } else if (ev->parsed()) {
      const Dataset d = read_dataset("--data", ev_data);
      const ModelParams<float> model = read_model("--model", ev_model);
      check_compatible(model, d, "--model " + ev_model);
      print_eval(evaluate(model, pick_split(d, ev_split)), confusion);
    } else if (co->parsed()) {
      check_output(co_out, {co_model});
      CompressedModel cm;
      try {
        cm = load_compressed(co_model);
      } catch (const std::exception& e) {
        throw FormatError("--model " + co_model + ": " + e.what());
      }
      const std::size_t before = cm.payload_bytes();
      if (prune_opt->count() > 0) {
        const ModelParams<float> dense = read_model("--model", co_model);
        auto [pruned, stats] = prune(dense, std::ldexp(1.0, prune_exp));
        std::cout << "pruned " << stats.total_removed << " of " << stats.total_elements
                  << " parameters below 2^" << prune_exp << "\n";
        cm = std::move(pruned);
      }
      if (half) {
        HalfStats hs;
        cm = to_half(std::move(cm), &hs);
        std::cout << "half " << hs.converted << " values, " << hs.clamped << " clamped\n";
      }
      save_model(co_out, cm);
      std::cout << "payload_bytes " << before << " -> " << cm.payload_bytes() << "\n";
      std::cout << "file_bytes " << fs::file_size(co_model) << " -> " << fs::file_size(co_out) << "\n";
    } else if (in->parsed()) {
      const ModelParams<float> model = read_model("--model", in_model);
      CompressedModel cm = load_compressed(in_model);
      const auto rep = sparsity_report(model, std::ldexp(1.0, in_exp));
      const ArchSpec& sp = model.spec;
      std::cout << "arch " << to_string(sp.family) << " width " << sp.width.str() << " input "
                << to_string(sp.input_mode) << " frame " << sp.frame_size << " classes "
                << sp.class_count << "\n";
      std::cout << "param_count " << param_count(model) << "\n";
      std::cout << "file_bytes " << fs::file_size(in_model) << "\n";
      std::cout << "payload_bytes " << cm.payload_bytes() << "\n";
      std::cout << "threshold 2^" << in_exp << "\n";
      std::cout << std::left << std::setw(28) << "tensor" << std::right << std::setw(10) << "encoding"
                << std::setw(12) << "elements" << std::setw(12) << "below" << std::setw(10) << "fraction\n";
      for (const auto& t : rep.tensors) {
        std::cout << std::left << std::setw(28) << t.name << std::right << std::setw(10)
                  << to_string(cm.at(t.name).encoding) << std::setw(12) << t.elements << std::setw(12)
                  << t.below << std::setw(10) << std::setprecision(4) << std::fixed << t.fraction_below()
                  << "\n";
      }
      std::cout << "total_below " << rep.total_below << " of " << rep.total_elements << "\n";
      std::cout << "projected_pruned_file_bytes " << rep.projected_file_bytes << "\n";
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DecodeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
