#pragma once

// The pipeline stages behind the `aidnet` subcommands. Each stage reads and
// writes plain files, so stages can be run separately and re-run.

#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "aidnet/cli/run_config.hpp"
#include "aidnet/error.hpp"
#include "aidnet/eval/metrics.hpp"
#include "aidnet/net/data.hpp"
#include "aidnet/net/train.hpp"
#include "aidnet/phantom/phantom.hpp"
#include "aidnet/preproc/pipeline.hpp"
#include "aidnet/xai/grad_cam.hpp"

namespace aidnet::cli {

namespace fs = std::filesystem;

inline constexpr const char* kPreprocManifest = "preprocessed.csv";
inline constexpr const char* kPreprocHeader =
    "subject_id,class,scan_ct,scan_hu130,rescan_ct,rescan_hu130,lesion";

namespace detail {

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir.string() + ": " + ec.message());
}

/// Writes through a temp file so readers never see a half-written file.
template <class Fn>
void write_text(const fs::path& path, Fn&& body) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw DataError("cannot write " + path.string());
    body(os);
    os.flush();
    if (!os) throw DataError("write failed for " + path.string());
  }
  fs::rename(tmp, path);
}

inline void echo_config(const RunConfig& c, const fs::path& dir, const std::string& command) {
  ensure_dir(dir);
  write_text(dir / (command + "_config.txt"), [&](std::ostream& os) { write_config(os, c); });
}

}  // namespace detail

// -- phantom-gen -------------------------------------------------------------

inline std::vector<phantom::ManifestRow> cmd_phantom_gen(const RunConfig& c) {
  const phantom::CohortCounts counts{c.n_control, c.n_mild, c.n_severe};
  if (counts.total() == 0) throw UsageError("phantom-gen: cohort is empty");
  phantom::PhantomOptions opt;
  opt.shape = c.phantom_shape;
  const auto cohort = phantom::build_cohort(counts, c.seed, opt);
  auto rows = phantom::write_cohort(c.cohort_dir, cohort);
  detail::echo_config(c, c.cohort_dir, "phantom-gen");
  return rows;
}

// -- preprocess --------------------------------------------------------------

struct PreprocRow {
  std::string subject_id;
  int class_label = 0;
  std::string scan_ct, scan_hu130, rescan_ct, rescan_hu130, lesion;
};

inline void write_preproc_manifest(std::ostream& os, const std::vector<PreprocRow>& rows) {
  os << kPreprocHeader << '\n';
  for (const auto& r : rows) {
    os << r.subject_id << ',' << r.class_label << ',' << r.scan_ct << ',' << r.scan_hu130 << ','
       << r.rescan_ct << ',' << r.rescan_hu130 << ',' << r.lesion << '\n';
  }
}

inline std::vector<PreprocRow> load_preproc_manifest(const fs::path& dir) {
  const fs::path path = dir / kPreprocManifest;
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string() + " (run preprocess first)");
  std::string line;
  if (!std::getline(is, line) || line != kPreprocHeader) {
    throw DataError(path.string() + ": header mismatch");
  }
  std::vector<PreprocRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw DataError(path.string() + ": row has " + std::to_string(f.size()) + " fields");
    PreprocRow r;
    r.subject_id = f[0];
    if (f[1] != "0" && f[1] != "1" && f[1] != "2") throw DataError("bad class label for " + f[0]);
    r.class_label = f[1][0] - '0';
    r.scan_ct = f[2];
    r.scan_hu130 = f[3];
    r.rescan_ct = f[4];
    r.rescan_hu130 = f[5];
    r.lesion = f[6];
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw DataError(path.string() + " lists no subjects");
  return rows;
}

inline void check_unit_range(const preproc::Volume& v, const std::string& what) {
  for (double x : v.values()) {
    if (!(x >= 0.0 && x <= 1.0)) throw DataError(what + ": intensity channel leaves [0, 1]");
  }
}

inline std::vector<PreprocRow> cmd_preprocess(const RunConfig& c) {
  const fs::path in = c.cohort_dir, out = c.data_dir;
  const auto manifest = phantom::load_manifest(in / "manifest.csv");
  preproc::PreprocConfig pc;
  pc.target_shape = c.target_shape;
  detail::ensure_dir(out);

  auto load = [&](const std::string& id, const std::string& file, const char* what) {
    if (file.empty() || !fs::exists(in / file)) {
      throw DataError("subject " + id + ": missing " + what + " file " + (in / file).string());
    }
    return preproc::load_vgrid(in / file);
  };

  std::vector<PreprocRow> rows;
  for (const auto& m : manifest) {
    const auto& id = m.subject_id;
    const auto scan = load(id, m.scan, "scan");
    const auto rescan = load(id, m.rescan, "rescan");
    const auto lung = load(id, m.lung_mask, "lung mask");
    const auto rescan_lung = load(id, m.rescan_lung_mask, "rescan lung mask");
    const auto lesion = load(id, m.lesion_mask, "lesion mask");
    const auto a = preproc::preprocess(scan, lung, pc);
    const auto b = preproc::preprocess(rescan, rescan_lung, pc);
    check_unit_range(a.ct, "subject " + id + " scan");
    check_unit_range(b.ct, "subject " + id + " rescan");

    PreprocRow r{id, m.class_label, id + "_scan_ct.vgrid", id + "_scan_hu130.vgrid",
                 id + "_rescan_ct.vgrid", id + "_rescan_hu130.vgrid", id + "_lesion.vgrid"};
    preproc::save_vgrid(out / r.scan_ct, a.ct);
    preproc::save_vgrid(out / r.scan_hu130, a.hu_mask);
    preproc::save_vgrid(out / r.rescan_ct, b.ct);
    preproc::save_vgrid(out / r.rescan_hu130, b.hu_mask);
    preproc::save_vgrid(out / r.lesion, preproc::carry_mask(lesion, a.box, pc.target_shape));
    rows.push_back(std::move(r));
  }
  detail::write_text(out / kPreprocManifest, [&](std::ostream& os) { write_preproc_manifest(os, rows); });
  detail::echo_config(c, out, "preprocess");
  return rows;
}

/// Reads a preprocessed directory back into a training dataset.
inline net::Dataset load_dataset(const fs::path& dir) {
  const auto rows = load_preproc_manifest(dir);
  net::Dataset d;
  for (const auto& r : rows) {
    const auto ct = preproc::load_vgrid(dir / r.scan_ct);
    const auto hu = preproc::load_vgrid(dir / r.scan_hu130);
    const auto rct = preproc::load_vgrid(dir / r.rescan_ct);
    const auto rhu = preproc::load_vgrid(dir / r.rescan_hu130);
    if (d.samples.empty()) d.shape = ct.shape();
    for (const auto* v : {&ct, &hu, &rct, &rhu}) {
      if (v->shape() != d.shape) {
        throw DataError("subject " + r.subject_id + ": volume " + preproc::extents_str(v->shape()) +
                        " differs from " + preproc::extents_str(d.shape));
      }
    }
    check_unit_range(ct, "subject " + r.subject_id + " scan");
    check_unit_range(rct, "subject " + r.subject_id + " rescan");
    net::Sample s;
    s.id = r.subject_id;
    s.label = static_cast<std::size_t>(r.class_label);
    s.scan = preproc::stack_channels(ct, hu);
    s.rescan = preproc::stack_channels(rct, rhu);
    if (fs::exists(dir / r.lesion)) s.lesion = preproc::load_vgrid(dir / r.lesion);
    d.samples.push_back(std::move(s));
  }
  return d;
}

inline net::Split split_for(const RunConfig& c, const net::Dataset& d) {
  std::vector<std::size_t> labels;
  for (const auto& s : d.samples) labels.push_back(s.label);
  return net::stratified_split(labels, c.n_val, c.n_test, c.seed);
}

// -- train -------------------------------------------------------------------

inline net::TrainConfig train_config(const RunConfig& c) {
  net::TrainConfig t;
  t.mode = c.mode;
  t.lr = c.lr;
  t.max_epochs = c.max_epochs;
  t.batch_size = c.batch_size;
  t.seed = c.seed;
  t.loss.lambda = c.lambda;
  t.loss.margin = c.margin;
  t.loss.class_weights = c.class_weights;
  return t;
}

inline net::TrainResult cmd_train(const RunConfig& c, std::ostream* progress = nullptr) {
  const auto data = load_dataset(c.data_dir);
  const auto split = split_for(c, data);
  const fs::path out = c.output_dir;
  detail::ensure_dir(out);
  detail::echo_config(c, out, "train");
  detail::write_text(out / "split.csv", [&](std::ostream& os) {
    os << "subject_id,split\n";
    for (const auto& [name, idx] : {std::pair{"train", &split.train}, std::pair{"val", &split.val},
                                    std::pair{"test", &split.test}}) {
      for (std::size_t i : *idx) os << data.samples[i].id << ',' << name << '\n';
    }
  });

  const fs::path log_path = out / "train_log.csv";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw DataError("cannot write " + log_path.string());
  log << net::kTrainLogHeader << '\n';
  const auto init = net::init_params(net::arch_for(c.mode), c.seed);
  auto result = net::train(init, data, split.train, split.val, train_config(c), [&](const net::EpochLog& e) {
    net::write_log_row(log, e);
    log.flush();
    if (progress) {
      *progress << "epoch " << e.epoch << "  loss " << e.total_loss << "  val acc "
                << e.val_binary_accuracy << std::endl;
    }
  });
  if (!log) throw DataError("write failed for " + log_path.string());

  net::save_model(c.checkpoint_path(), result.params);
  detail::write_text(out / "train_summary.txt", [&](std::ostream& os) {
    os << "mode = " << net::mode_name(c.mode) << '\n';
    os << "best_epoch = " << result.best_epoch << '\n';
    os << "train_subjects = " << split.train.size() << '\n';
    os << "val_subjects = " << split.val.size() << '\n';
    os << "test_subjects = " << split.test.size() << '\n';
  });
  return result;
}

// -- eval --------------------------------------------------------------------

struct EvalReport {
  std::vector<std::string> ids;
  std::vector<int> truth;
  std::vector<net::Prediction> predictions;
  eval::ConfusionMatrix m3, m2;
  eval::BinaryMetrics binary;
  std::optional<eval::RocCurve> roc;  // absent when only one binary class is present
};

inline EvalReport evaluate(const net::AidNetParams& p, const net::Dataset& d,
                           std::span<const std::size_t> idx) {
  if (idx.empty()) throw DataError("evaluation set is empty");
  EvalReport r;
  r.predictions = net::predict_indices(p, d, idx);
  std::vector<int> pred, truth_bin;
  std::vector<double> score;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& s = d.samples[idx[i]];
    r.ids.push_back(s.id);
    r.truth.push_back(static_cast<int>(s.label));
    pred.push_back(static_cast<int>(r.predictions[i].label));
    truth_bin.push_back(s.label > 0);
    score.push_back(r.predictions[i].binary_score);
  }
  r.m3 = eval::confusion(r.truth, pred, 3);
  r.m2 = eval::collapse_3to2(r.m3);
  r.binary = eval::binary_metrics(r.m2);
  try {
    r.roc = eval::roc_auc(score, truth_bin);
  } catch (const DataError&) {
    r.roc.reset();
  }
  return r;
}

inline std::vector<std::size_t> indices_for(const RunConfig& c, const net::Dataset& d) {
  const auto split = split_for(c, d);
  if (c.split == "train") return split.train;
  if (c.split == "val") return split.val;
  if (c.split == "test") return split.test;
  std::vector<std::size_t> all(d.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return all;
}

inline EvalReport cmd_eval(const RunConfig& c) {
  const auto data = load_dataset(c.data_dir);
  const auto params = net::load_model(c.checkpoint_path());
  const auto idx = indices_for(c, data);
  const auto r = evaluate(params, data, idx);
  const fs::path out = c.output_dir;
  detail::ensure_dir(out);
  detail::echo_config(c, out, "eval");
  const std::optional<double> auc = r.roc ? std::optional<double>(r.roc->auc) : std::nullopt;
  detail::write_text(out / "confusion_3x3.csv", [&](std::ostream& os) { eval::write_confusion_csv(os, r.m3); });
  detail::write_text(out / "confusion_2x2.csv", [&](std::ostream& os) { eval::write_confusion_csv(os, r.m2); });
  detail::write_text(out / "metrics.csv", [&](std::ostream& os) {
    eval::write_metrics_csv(os, r.binary, auc, idx.size());
  });
  detail::write_text(out / "metrics.txt", [&](std::ostream& os) {
    os << "split " << c.split << ", " << idx.size() << " subjects\n";
    eval::write_metrics_text(os, r.m3, r.m2, r.binary, auc);
  });
  detail::write_text(out / "roc.csv", [&](std::ostream& os) {
    if (r.roc) eval::write_roc_csv(os, *r.roc);
    else os << "fpr,tpr\n";
  });
  detail::write_text(out / "predictions.csv", [&](std::ostream& os) {
    os.precision(17);
    os << "subject_id,truth,prediction,p0,p1,p2,binary_score\n";
    for (std::size_t i = 0; i < r.ids.size(); ++i) {
      const auto& p = r.predictions[i];
      os << r.ids[i] << ',' << r.truth[i] << ',' << p.label;
      for (double q : p.probabilities) os << ',' << q;
      os << ',' << p.binary_score << '\n';
    }
  });
  return r;
}

// -- gradcam -----------------------------------------------------------------

inline xai::GradCamResult cmd_gradcam(const RunConfig& c) {
  if (c.subject.empty()) throw UsageError("gradcam needs a subject (--subject)");
  const fs::path dir = c.data_dir;
  const auto rows = load_preproc_manifest(dir);
  const PreprocRow* row = nullptr;
  for (const auto& r : rows) {
    if (r.subject_id == c.subject) row = &r;
  }
  if (!row) throw DataError("unknown subject '" + c.subject + "' in " + dir.string());
  const auto ct = preproc::load_vgrid(dir / row->scan_ct);
  const auto hu = preproc::load_vgrid(dir / row->scan_hu130);
  check_unit_range(ct, "subject " + c.subject + " scan");
  const auto params = net::load_model(c.checkpoint_path());
  const auto& s = ct.shape();
  const vg::Tensor x({1, 2, s[0], s[1], s[2]}, preproc::stack_channels(ct, hu));
  int target = c.target_class;
  if (target < 0) target = net::predict(params, x).front().label;
  auto r = xai::grad_cam(params, x, target, ct.spacing());

  const fs::path out = c.output_dir;
  detail::ensure_dir(out);
  detail::echo_config(c, out, "gradcam");
  xai::overlay_export(r, ct, out, c.subject);
  const auto peak = xai::argmax_voxel(r.heatmap);
  detail::write_text(out / (c.subject + "_gradcam.txt"), [&](std::ostream& os) {
    os.precision(17);
    os << "subject = " << c.subject << '\n';
    os << "target_class = " << r.target_class << '\n';
    os << "logits = " << r.logits[0] << ',' << r.logits[1] << ',' << r.logits[2] << '\n';
    os << "argmax_voxel = " << peak[0] << ',' << peak[1] << ',' << peak[2] << '\n';
  });
  return r;
}

}  // namespace aidnet::cli
