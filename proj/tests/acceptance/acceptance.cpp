// Acceptance run: one PASS / FAIL line per criterion, nonzero exit if any fail.
//
//   acceptance [work_dir]
//
// The end-to-end phantom experiment dominates the runtime (about 5 minutes on
// one core).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "aidnet/cli/commands.hpp"
#include "aidnet/eval/metrics.hpp"
#include "aidnet/net/loss.hpp"
#include "aidnet/net/model.hpp"
#include "aidnet/net/train.hpp"
#include "aidnet/xai/grad_cam.hpp"
#include "support/fd.hpp"
#include "support/golden_preproc.hpp"
#include "support/model_check.hpp"

using namespace aidnet;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  std::printf("%s  %-22s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

// Runs `body`; an exception counts as a failure of that criterion.
void criterion(const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
  try {
    const auto [ok, detail] = body();
    report(ok, name, detail);
  } catch (const std::exception& e) {
    report(false, name, std::string("threw: ") + e.what());
  }
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

vg::Tensor random_input(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return testing::random_tensor({n, 2, 12, 8, 8}, rng, 0.0, 1.0, false);
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream is(e.path(), std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    out[fs::relative(e.path(), dir).string()] = os.str();
  }
  return out;
}

// -- criteria ----------------------------------------------------------------

std::pair<bool, std::string> gradient_suite() {
  using vg::Tensor;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(100);
  double per_op = 0.0;
  auto op = [&](std::vector<Tensor*> in, const std::function<Tensor()>& f) {
    per_op = std::max(per_op, testing::op_grad_error(std::move(in), f));
  };
  {
    Tensor x = testing::random_tensor({2, 2, 4, 4, 4}, rng), w = testing::random_tensor({3, 2, 3, 3, 3}, rng),
           b = testing::random_tensor({3}, rng);
    op({&x, &w, &b}, [&] { return vg::conv3d(x, w, b); });
  }
  {
    Tensor x = testing::random_tensor({1, 2, 4, 6, 4}, rng);
    op({&x}, [&] { return vg::maxpool3d(x, {2, 2, 2}, {2, 2, 2}); });
    op({&x}, [&] { return vg::global_avg_pool(x); });
  }
  {
    Tensor x = testing::random_tensor({1, 2, 2, 3, 2}, rng);
    op({&x}, [&] { return vg::upsample_nearest(x, {4, 6, 4}); });
  }
  {
    Tensor a = testing::random_tensor({2, 3, 4}, rng), b = testing::random_tensor({2, 1, 4}, rng),
           c = testing::random_tensor({2, 2, 4}, rng);
    op({&a}, [&] { return vg::sigmoid(a); });
    op({&a}, [&] { return vg::relu(a); });
    op({&a}, [&] { return vg::softmax(a, 1); });
    op({&a}, [&] { return vg::log_softmax(a, 2); });
    op({&a, &b}, [&] { return vg::add(a, b); });
    op({&a, &b}, [&] { return vg::mul(a, b); });
    op({&a, &c}, [&] { return vg::concat(a, c, 1); });
  }
  {
    Tensor x = testing::random_tensor({3, 5}, rng), w = testing::random_tensor({5, 4}, rng),
           b = testing::random_tensor({4}, rng), y = testing::random_tensor({3, 5}, rng);
    op({&x, &w, &b}, [&] { return vg::dense(x, w, b); });
    op({&x, &y}, [&] { return vg::pair_distance(x, y); });
    op({&x}, [&] { return vg::pick(x, std::vector<std::size_t>{1, 0, 4}); });
  }

  double model = 0.0;
  std::string where;
  std::size_t entries = 0;
  struct Case {
    net::Mode mode;
    double margin;
    std::uint64_t seed;
  };
  for (const Case k : {Case{net::Mode::Aid, 1.0, 21}, Case{net::Mode::Aid, 50.0, 22},
                       Case{net::Mode::Id, 50.0, 23}}) {
    auto p = net::init_params(net::arch_for(k.mode), k.seed);
    const auto c = testing::random_pair_case({2, 2, 12, 8, 8}, k.seed + 100);
    net::LossConfig cfg;
    cfg.lambda = 0.001;
    cfg.margin = k.margin;
    const auto a = testing::audit_model_gradients(p, c, cfg, k.seed + 200);
    entries += a.entries + a.directions;
    if (a.worst >= model) {
      model = a.worst;
      where = net::mode_name(k.mode) + " " + a.worst_entry;
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = per_op < 1e-5 && model < 1e-4 && secs < 300.0;
  return {ok, "full model max rel err " + fmt("%.2e", model) + " (" + where + ", " +
                  std::to_string(entries) + " checks; limit 1e-4), per-op " + fmt("%.2e", per_op) +
                  " (limit 1e-5), " + fmt("%.1f", secs) + " s (limit 300)"};
}

std::pair<bool, std::string> loss_exactness() {
  using vg::Tensor;
  const std::vector<int> same{0}, diff{1};
  const double a = net::contrastive_loss(Tensor({1}, {2.0}), same, 1.0).item();
  const double b = net::contrastive_loss(Tensor({1}, {2.0}), diff, 1.0).item();
  const double c = net::contrastive_loss(Tensor({1}, {0.5}), diff, 2.0).item();
  const double worst = std::max({std::abs(a - 2.0), std::abs(b), std::abs(c - 1.125)});

  const auto p = net::init_params({}, 2);
  const auto pc = testing::random_pair_case({2, 2, 12, 8, 8}, 3);
  net::LossConfig cfg;
  cfg.lambda = 0.0;
  const auto parts = net::total_loss(net::forward_pair(p, pc.scan, pc.rescan), pc.label_scan,
                                     pc.label_rescan, pc.y, cfg);
  const bool exact = parts.total.item() == parts.ce1.item() + parts.ce2.item();
  return {worst < 1e-12 && exact, "examples 2.0 / 0.0 / 1.125 max dev " + fmt("%.1e", worst) +
                                       ", lambda = 0 total == CE1 + CE2 " + (exact ? "exactly" : "NOT exactly")};
}

std::pair<bool, std::string> siamese_symmetry() {
  const auto p = net::init_params({}, 9);
  const auto a = random_input(2, 11), b = random_input(2, 12);
  const auto f = net::forward_pair(p, a, b), g = net::forward_pair(p, b, a);
  auto same = [](const vg::Tensor& x, const vg::Tensor& y) {
    return std::equal(x.data().begin(), x.data().end(), y.data().begin(), y.data().end());
  };
  const bool swapped = same(f.first.logits, g.second.logits) && same(f.second.logits, g.first.logits);
  const bool dist = same(f.d_w, g.d_w);
  const auto h = net::forward_pair(p, a, a);
  bool zero = true;
  for (double d : h.d_w.data()) zero = zero && d == 0.0;
  return {swapped && dist && zero, std::string("swap exchanges logits bit-identically: ") +
                                       (swapped ? "yes" : "no") + ", D_w unchanged: " + (dist ? "yes" : "no") +
                                       ", identical inputs D_w == 0: " + (zero ? "yes" : "no")};
}

std::pair<bool, std::string> sag_contract(const fs::path& work) {
  double lo = 1.0, hi = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = net::init_params({}, seed);
    const auto f = net::forward_single(p, random_input(2, seed + 100));
    for (double a : f.alpha.data()) {
      lo = std::min(lo, a);
      hi = std::max(hi, a);
    }
  }
  auto p = net::init_params({}, 6);
  p.sag->b_psi.mutable_data()[0] = 50.0;
  const auto f = net::forward_single(p, random_input(2, 8));
  const auto att = net::sag_gate(*p.sag, f.x_l, f.pre_gap_maps);
  double sat = 0.0;
  for (std::size_t i = 0; i < f.x_l.numel(); ++i) sat = std::max(sat, std::abs(att.attended[i] - f.x_l[i]));

  // The ablation grid, end to end through the command layer on a small cohort.
  cli::RunConfig c;
  c.n_control = 4;
  c.n_mild = 2;
  c.n_severe = 2;
  c.n_val = 2;
  c.n_test = 2;
  c.max_epochs = 2;
  c.lr = 1e-3;
  c.cohort_dir = (work / "ablation_cohort").string();
  c.data_dir = (work / "ablation_data").string();
  cli::cmd_phantom_gen(c);
  cli::cmd_preprocess(c);
  std::string grid;
  bool ran = true;
  for (const auto mode : {net::Mode::Aid, net::Mode::Id}) {
    for (const double lambda : {0.0, 0.001}) {
      cli::RunConfig r = c;
      r.mode = mode;
      r.lambda = lambda;
      r.output_dir = (work / ("ablation_" + net::mode_name(mode) + "_" + fmt("%g", lambda))).string();
      const auto res = cli::cmd_train(r);
      const auto ev = cli::cmd_eval(r);
      const bool has_sag = net::load_model(r.checkpoint_path()).sag.has_value();
      ran = ran && res.log.size() == 2 && has_sag == (mode == net::Mode::Aid) && ev.m3.total() == 2;
      grid += (grid.empty() ? "" : ", ") + net::mode_name(mode) + "/" + fmt("%g", lambda);
    }
  }
  const bool ok = lo > 0.0 && hi < 1.0 && sat <= 1e-12 && ran;
  return {ok, "alpha in [" + fmt("%.3g", lo) + ", " + fmt("%.3g", hi) + "], saturated gate dev " +
                  fmt("%.1e", sat) + " (limit 1e-12), ablation runs {" + grid + "} " +
                  (ran ? "completed" : "FAILED")};
}

std::pair<bool, std::string> preprocessing_golden() {
  const long bad = testing::golden_preproc_mismatches(testing::golden_preproc_case());
  return {bad == 0, bad < 0 ? std::string("crop box wrong")
                            : std::to_string(bad) + " mismatching outputs over 16x16x8 (10x12x6 crop, 2 channels)"};
}

std::pair<bool, std::string> evaluation_oracle() {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> len(2, 60), coarse(0, 6), cls(0, 2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = static_cast<std::size_t>(len(rng));
    std::vector<double> s(n);
    std::vector<int> t(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rep % 2 ? coarse(rng) / 6.0 : u(rng);
      t[i] = u(rng) < 0.4;
    }
    t[0] = 0;
    t[1] = 1;
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (!t[i] || t[j]) continue;
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
    }
    worst = std::max(worst, std::abs(eval::roc_auc(s, t).auc - wins / pairs));
  }
  bool collapse_ok = true;
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<int> t(37), p(37), tb(37), pb(37);
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = cls(rng);
      p[i] = cls(rng);
      tb[i] = t[i] > 0;
      pb[i] = p[i] > 0;
    }
    const auto m3 = eval::confusion(t, p, 3);
    const auto a = eval::collapse_3to2(m3);
    collapse_ok = collapse_ok && a.total() == m3.total() && a.counts == eval::confusion(tb, pb, 2).counts;
  }
  return {worst <= 1e-12 && collapse_ok, "AUC vs pairwise max dev " + fmt("%.1e", worst) +
                                             " over 100 instances, collapse " +
                                             (collapse_ok ? "matches" : "DIFFERS FROM") + " direct tabulation"};
}

struct EndToEnd {
  cli::RunConfig aid, id;
  net::Dataset data;
  net::Split split;
  net::AidNetParams aid_params;
};

std::pair<bool, std::string> end_to_end(const fs::path& work, EndToEnd& e2e) {
  const auto t0 = Clock::now();
  cli::RunConfig c;  // 211 subjects (100/77/34), 48x32x16, seed 2024
  c.max_epochs = 30;
  c.cohort_dir = (work / "cohort").string();
  c.data_dir = (work / "data").string();
  cli::cmd_phantom_gen(c);
  cli::cmd_preprocess(c);

  e2e.aid = c;
  e2e.aid.output_dir = (work / "aid").string();
  const auto aid = cli::cmd_train(e2e.aid);
  const auto test = cli::cmd_eval(e2e.aid);

  e2e.id = c;
  e2e.id.mode = net::Mode::Id;
  e2e.id.output_dir = (work / "id").string();
  const auto id = cli::cmd_train(e2e.id);

  e2e.data = cli::load_dataset(c.data_dir);
  e2e.split = cli::split_for(c, e2e.data);
  e2e.aid_params = aid.params;
  const auto aid_val = cli::evaluate(aid.params, e2e.data, e2e.split.val);
  const auto id_val = cli::evaluate(id.params, e2e.data, e2e.split.val);
  const double secs = seconds_since(t0);

  const double acc = test.binary.accuracy;
  const double auc = test.roc ? test.roc->auc : 0.0;
  const double aid_auc = aid_val.roc ? aid_val.roc->auc : 0.0;
  const double id_auc = id_val.roc ? id_val.roc->auc : 0.0;
  const bool ok = e2e.data.samples.size() == 211 && test.m3.total() == 40 && acc >= 0.90 && auc >= 0.95 &&
                  aid_auc >= id_auc && secs < 1800.0 && c.max_epochs <= 50;
  return {ok, "211 subjects, " + std::to_string(c.max_epochs) + " epochs: test(" +
                  std::to_string(test.m3.total()) + ") acc " + fmt("%.3f", acc) + " (>= 0.90), AUC " +
                  fmt("%.4f", auc) + " (>= 0.95); val AUC AID " + fmt("%.4f", aid_auc) + " vs ID " +
                  fmt("%.4f", id_auc) + "; best epochs " + std::to_string(aid.best_epoch) + "/" +
                  std::to_string(id.best_epoch) + "; " + fmt("%.0f", secs) + " s (limit 1800)"};
}

std::pair<bool, std::string> gradcam_localization(const EndToEnd& e2e) {
  std::vector<std::size_t> held = e2e.split.val;
  held.insert(held.end(), e2e.split.test.begin(), e2e.split.test.end());
  std::size_t cases = 0, inside = 0, negative = 0, maps = 0;
  for (std::size_t i : held) {
    const auto& s = e2e.data.samples[i];
    const std::vector<std::size_t> one{i};
    const vg::Tensor x = net::stack(e2e.data, one);
    const auto pred = net::predict(e2e.aid_params, x).front();
    const auto cam = xai::grad_cam(e2e.aid_params, x, pred.label);
    ++maps;
    for (double v : cam.heatmap.values()) negative += v < 0.0;
    if (s.label == 0 || pred.label == 0 || s.lesion.size() == 0) continue;
    ++cases;
    const auto zone = xai::dilate(s.lesion, 2);
    const auto [z, y, xx] = xai::argmax_voxel(cam.heatmap);
    inside += preproc::is_set(zone.at(z, y, xx));
  }
  const double frac = cases ? static_cast<double>(inside) / static_cast<double>(cases) : 0.0;
  const bool ok = cases >= 20 && frac >= 0.80 && negative == 0;
  return {ok, std::to_string(inside) + "/" + std::to_string(cases) +
                  " correctly classified held-out positives peak inside the 2-voxel-dilated lesion (" +
                  fmt("%.1f%%", 100.0 * frac) + ", need >= 80% over >= 20), negative voxels " +
                  std::to_string(negative) + " over " + std::to_string(maps) + " maps"};
}

std::pair<bool, std::string> determinism(const fs::path& work) {
  cli::RunConfig c;
  c.n_control = 4;
  c.n_mild = 2;
  c.n_severe = 2;
  c.n_val = 2;
  c.n_test = 2;
  c.max_epochs = 3;
  c.lr = 1e-3;
  c.seed = 77;
  const fs::path dir = work / "determinism";
  c.cohort_dir = (dir / "cohort").string();
  c.data_dir = (dir / "data").string();
  c.output_dir = (dir / "run").string();
  c.split = "all";
  c.subject = "S0006";
  auto run_all = [&] {
    cli::cmd_phantom_gen(c);
    cli::cmd_preprocess(c);
    cli::cmd_train(c);
    cli::cmd_eval(c);
    cli::cmd_gradcam(c);
    return snapshot(dir);
  };
  fs::remove_all(dir);
  const auto first = run_all();
  fs::remove_all(dir);
  const auto second = run_all();
  std::size_t differ = 0;
  for (const auto& [k, v] : first) differ += !second.count(k) || second.at(k) != v;
  differ += second.size() > first.size() ? second.size() - first.size() : 0;
  return {differ == 0 && !first.empty(), std::to_string(first.size()) +
                                             " files from phantom-gen, preprocess, train, eval, gradcam; " +
                                             std::to_string(differ) + " differ on re-run"};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "aidnet_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);
  const auto t0 = Clock::now();

  criterion("gradient-suite", gradient_suite);
  criterion("loss-exactness", loss_exactness);
  criterion("siamese-symmetry", siamese_symmetry);
  criterion("sag-contract", [&] { return sag_contract(work); });
  criterion("preprocessing-golden", preprocessing_golden);
  criterion("evaluation-oracle", evaluation_oracle);
  EndToEnd e2e;
  bool trained = false;
  criterion("end-to-end-phantom", [&] {
    auto r = end_to_end(work, e2e);
    trained = true;
    return r;
  });
  if (trained) {
    criterion("gradcam-localization", [&] { return gradcam_localization(e2e); });
  } else {
    report(false, "gradcam-localization", "skipped: no trained model from the end-to-end run");
  }
  criterion("determinism", [&] { return determinism(work); });

  std::printf("%d criteria failed, %.0f s total\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
