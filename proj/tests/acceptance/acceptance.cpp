// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Exit status is non-zero when any selected criterion fails.
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "dualnet/config.hpp"
#include "dualnet/gradcheck.hpp"
#include "dualnet/metrics.hpp"
#include "dualnet/trainer.hpp"

using namespace dualnet;

namespace {

// ---- pinned tolerances -----------------------------------------------------

constexpr double kGradTolerance = 1e-4;
constexpr std::size_t kGradSeeds = 20;
constexpr double kGradSeconds = 120;
constexpr double kLookaheadTolerance = 1e-12;
constexpr double kBarlowHandTolerance = 1e-12;
constexpr double kKlHandTolerance = 1e-4;
// 0.9 - 0.6 and (0.9 + 0.8) / 2 are not exactly 0.3 and 0.85 in binary64,
// so the hand matrix is held to a few ulps.
constexpr double kHandMatrixTolerance = 1e-15;
constexpr double kBruteForceTolerance = 1e-12;
constexpr double kSigmas = 3;
constexpr double kFinetuneMargin = 0.15;
constexpr double kErMargin = 0.02;
constexpr double kSslScalingSlack = 0.005;
constexpr double kInterferenceSlack = 0.005;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100 * v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

// ---- desk-scale benchmark configurations ----------------------------------

/// Split-MNIST at 16x16 grayscale, 400 train / 100 val images per class.
StreamConfig split_mnist(Protocol protocol) {
  StreamConfig s;
  s.kind = "split-mnist";
  s.protocol = protocol;
  s.mode = StreamMode::online;
  s.classes_per_task = 2;
  s.tasks = 5;
  s.train_per_class = 400;
  s.val_per_class = 100;
  s.format = {1, 16};
  return s;
}

/// Three unrelated five-way tasks: MNIST digits, textures, and
/// FashionMNIST (blobs when FashionMNIST is not installed).
StreamConfig plasticity_stream(SourceRegistry& registry) {
  StreamConfig s;
  s.kind = "ctrl-S_pl";
  s.format = {1, 16};
  s.ctrl.pl_tasks = 3;
  s.ctrl.sources = {"mnist", "textures", registry.available("fashion_mnist") ? "fashion_mnist" : "blobs"};
  s.ctrl.small_train = 1000;
  s.ctrl.small_val = 500;
  return s;
}

TrainConfig desk_train(Method m) {
  TrainConfig c;
  c.method = m;
  c.arch.widths = {16, 32, 64};
  c.arch.projector_hidden = 64;
  c.arch.projector_out = 64;
  c.ssl_augment.crop_padding = 2;
  c.sup_augment.crop_padding = 2;
  c.sup_augment.flip_probability = 0;  // digits are not mirror-symmetric
  return c;
}

class Runs {
 public:
  explicit Runs(SourceRegistry& registry) : registry_(registry) {}

  /// Cached by `key`: criteria that share a configuration share its runs.
  const RunResult& get(const std::string& key, const TrainConfig& base, const StreamConfig& sc, std::uint64_t seed) {
    const std::string full = key + "/seed" + std::to_string(seed);
    if (auto it = cache_.find(full); it != cache_.end()) return it->second;
    return cache_.emplace(full, fresh(full, base, sc, seed)).first->second;
  }

  RunResult fresh(const std::string& label, const TrainConfig& base, const StreamConfig& sc, std::uint64_t seed) {
    TrainConfig c = base;
    c.seed = seed;
    const TaskStream stream = build_stream(sc, registry_, seed);
    const auto t0 = Clock::now();
    RunResult r = run_once(c, stream);
    const Metrics m = compute_metrics(r.matrix);
    std::cerr << "  " << std::left << std::setw(34) << label << " ACC " << pct(m.acc) << "  FM " << pct(m.fm)
              << "  (" << std::fixed << std::setprecision(1) << seconds_since(t0) << " s)\n";
    return r;
  }

  /// Per-seed metrics of one configuration.
  std::vector<Metrics> metrics(const std::string& key, const TrainConfig& base, const StreamConfig& sc,
                               const std::vector<std::uint64_t>& seeds) {
    std::vector<Metrics> out;
    for (auto s : seeds) out.push_back(compute_metrics(get(key, base, sc, s).matrix));
    return out;
  }

 private:
  SourceRegistry& registry_;
  std::map<std::string, RunResult> cache_;
};

double mean_acc(const std::vector<Metrics>& ms) {
  double s = 0;
  for (const auto& m : ms) s += m.acc;
  return s / static_cast<double>(ms.size());
}

double mean_fm(const std::vector<Metrics>& ms) {
  double s = 0;
  for (const auto& m : ms) s += m.fm;
  return s / static_cast<double>(ms.size());
}

const std::vector<std::uint64_t> kTrendSeeds = {1, 2, 3};

// ---- criteria ---------------------------------------------------------------

Verdict gradient_suite() {
  const auto t0 = Clock::now();
  GradCheckOptions opt;
  opt.tolerance = kGradTolerance;
  const auto reports = gradcheck_suite(kGradSeeds, opt);
  const double elapsed = seconds_since(t0);
  double worst = 0;
  std::string worst_name, failed;
  std::size_t checked = 0;
  for (const auto& r : reports) {
    checked += r.checked;
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
    if (!r.passed(kGradTolerance)) failed += " " + r.name;
  }
  std::ostringstream os;
  os << reports.size() << " checks x " << kGradSeeds << " seeds, " << checked << " coordinates, max rel err "
     << sci(worst) << " (" << worst_name << "), " << std::fixed << std::setprecision(1) << elapsed << " s";
  if (!failed.empty()) os << "; over tolerance:" << failed;
  return {failed.empty() && elapsed < kGradSeconds, os.str()};
}

Verdict lookahead_equivalence() {
  // f(x) = 0.5 x^T A x - b^T x, A = M^T M + I.
  constexpr std::size_t n = 8;
  Rng rng(2024);
  std::vector<double> m(n * n), a(n * n, 0), b(n);
  for (auto& v : m) v = rng.uniform(-1, 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < n; ++k) a[i * n + j] += m[k * n + i] * m[k * n + j];
      a[i * n + j] += i == j;
    }
  for (auto& v : b) v = rng.uniform(-1, 1);
  auto grad_into = [&](Parameter& p) {
    for (std::size_t i = 0; i < n; ++i) {
      double g = -b[i];
      for (std::size_t j = 0; j < n; ++j) g += a[i * n + j] * p.value[j];
      p.grad[i] += g;
    }
    return Scalar(0);
  };
  Parameter la("x", Tensor({n})), sgd("x", Tensor({n}));
  for (std::size_t i = 0; i < n; ++i) la.value[i] = sgd.value[i] = rng.uniform(-3, 3);
  const LookaheadConfig cfg{1, Scalar(0.05), Scalar(0.5)};
  double worst = 0;
  for (int step = 0; step < 100; ++step) {
    lookahead_round({&la}, [&] { return grad_into(la); }, cfg);
    sgd.zero_grad();
    grad_into(sgd);
    sgd_step({&sgd}, cfg.beta * cfg.epsilon);
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(la.value[i] - sgd.value[i]));
  }
  return {worst <= kLookaheadTolerance, "100 steps, max |diff| " + sci(worst)};
}

Verdict loss_oracles() {
  Tensor identity({4, 4});
  for (std::size_t i = 0; i < 4; ++i) identity[i * 5] = 1;
  const double at_identity = barlow_twins_loss(identity, Scalar(2e-3)).loss;
  const double hand = barlow_twins_loss(Tensor({2, 2}, {1, -1, -1, 1}), Scalar(2e-3)).loss;
  // KL(softmax([ln 3, 0]) || softmax([0, 0])) = 0.75 ln 1.5 + 0.25 ln 0.5.
  const double kl = kl_divergence(Tensor({1, 2}, {0, 0}), Tensor({1, 2}, {std::log(3.0), 0}), 1).loss;
  const bool pass = at_identity == 0 && std::abs(hand - 0.004) <= kBarlowHandTolerance &&
                    std::abs(kl - 0.1308) <= kKlHandTolerance;
  std::ostringstream os;
  os << std::setprecision(17) << "BT(I) = " << at_identity << ", BT(hand) = " << hand << ", KL(hand) = " << kl;
  return {pass, os.str()};
}

Verdict metric_oracles() {
  const auto hand = AccuracyMatrix::from_rows({{0.9}, {0.6, 0.8}});
  const Metrics h = compute_metrics(hand);
  bool pass = std::abs(h.acc - 0.7) <= kHandMatrixTolerance && std::abs(h.fm - 0.3) <= kHandMatrixTolerance &&
              std::abs(h.bwt + 0.3) <= kHandMatrixTolerance && std::abs(h.la - 0.85) <= kHandMatrixTolerance;

  // Brute force over 1-based indices, straight from the definitions.
  Rng rng(77);
  double worst_brute = 0, worst_identity = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t T = trial < 500 ? 3 + rng.index(4) : 2 + rng.index(9);
    AccuracyMatrix m(T);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.set(i, j, rng.uniform());
    auto A = [&](std::size_t i, std::size_t j) { return m.at(i - 1, j - 1); };
    const Metrics got = compute_metrics(m);
    if (trial < 500) {
      double acc = 0, fm = 0, bwt = 0, la = 0;
      for (std::size_t j = 1; j <= T; ++j) {
        acc += A(T, j) / T;
        la += A(j, j) / T;
      }
      for (std::size_t j = 1; j < T; ++j) {
        double best = 0;
        for (std::size_t l = j; l < T; ++l) best = std::max(best, A(l, j));
        fm += (best - A(T, j)) / (T - 1);
        bwt += (A(T, j) - A(j, j)) / (T - 1);
      }
      worst_brute = std::max({worst_brute, std::abs(got.acc - acc), std::abs(got.fm - fm), std::abs(got.bwt - bwt),
                              std::abs(got.la - la)});
    } else {
      worst_identity = std::max(worst_identity, std::abs(got.acc - (got.la + got.bwt * (T - 1) / double(T))));
    }
  }
  // The identity check uses 1000 fresh matrices.
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t T = 2 + rng.index(9);
    AccuracyMatrix m(T);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.set(i, j, rng.uniform());
    const Metrics got = compute_metrics(m);
    worst_identity = std::max(worst_identity, std::abs(got.acc - (got.la + got.bwt * (T - 1) / double(T))));
  }
  pass = pass && worst_brute <= kBruteForceTolerance && worst_identity <= kBruteForceTolerance;
  std::ostringstream os;
  os << std::setprecision(17) << "hand " << h.acc << " / " << h.fm << " / " << h.bwt << " / " << h.la
     << "; brute force max err " << sci(worst_brute) << "; identity max err " << sci(worst_identity);
  return {pass, os.str()};
}

Verdict memory_statistics() {
  std::ostringstream os;
  bool pass = true;

  constexpr std::size_t m = 5, n = 50, trials = 10000;
  std::vector<std::size_t> kept(n, 0);
  Rng rng(5150);
  for (std::size_t t = 0; t < trials; ++t) {
    EpisodicMemory mem(MemoryPolicy::reservoir, m);
    for (std::size_t i = 0; i < n; ++i) {
      MemoryEntry e;
      e.input = Tensor({1});
      e.label = static_cast<int>(i);
      mem.insert(std::move(e), rng);
    }
    for (const auto* e : mem.entries()) ++kept[static_cast<std::size_t>(e->label)];
  }
  const double p = double(m) / n, sigma = std::sqrt(trials * p * (1 - p));
  double worst_z = 0;
  for (auto k : kept) worst_z = std::max(worst_z, std::abs(double(k) - trials * p) / sigma);
  pass = pass && worst_z <= kSigmas;
  os << "reservoir worst |z| " << std::fixed << std::setprecision(2) << worst_z << " over " << n << " items";

  EpisodicMemory ring(MemoryPolicy::ring, 50);
  for (int i = 0; i < 137; ++i) {
    MemoryEntry e;
    e.input = Tensor({1});
    e.label = i;
    e.task_id = 0;
    ring.insert(std::move(e), rng);
  }
  bool fifo = ring.size() == 50;
  int expect = 87;
  for (const auto* e : ring.entries()) fifo = fifo && e->label == expect++;
  pass = pass && fifo;
  os << "; ring FIFO " << (fifo ? "exact" : "WRONG");

  constexpr double drop = 0.2;
  constexpr std::size_t masks = 10000, channels = 64;
  std::size_t zeros = 0;
  double sum = 0;
  for (std::size_t d = 0; d < masks; ++d) {
    const Tensor mask = spatial_dropout_mask(drop, channels, 1, 1, rng, Mode::train);
    for (Scalar v : mask.values()) {
      zeros += v == 0;
      sum += v;
    }
  }
  const double total = double(masks * channels);
  const double z_drop = std::abs(zeros / total - drop) / std::sqrt(drop * (1 - drop) / total);
  const double z_mean = std::abs(sum / total - 1) / std::sqrt(drop / (1 - drop) / total);
  pass = pass && z_drop <= kSigmas && z_mean <= kSigmas;
  os << "; dropout |z| fraction " << z_drop << ", mean " << z_mean;
  return {pass, os.str()};
}

Verdict dropout_identity(Runs& runs) {
  const StreamConfig sc = split_mnist(Protocol::task_free);
  TrainConfig pp = desk_train(Method::dualnet_pp);
  pp.dropout_p = 0.0;
  const RunResult& a = runs.get("dualnet", desk_train(Method::dualnet), sc, kTrendSeeds[0]);
  const RunResult& b = runs.get("dualnetpp-p0", pp, sc, kTrendSeeds[0]);
  const bool same = a.matrix == b.matrix;
  return {same, std::string("split-MNIST seed 1, accuracy matrices ") + (same ? "bit-identical" : "DIFFER") +
                    " (ACC " + pct(acc(a.matrix)) + " vs " + pct(acc(b.matrix)) + ")"};
}

Verdict trend_reproduction(Runs& runs) {
  const StreamConfig sc = split_mnist(Protocol::task_free);
  const auto dn = runs.metrics("dualnet", desk_train(Method::dualnet), sc, kTrendSeeds);
  const auto der = runs.metrics("derpp", desk_train(Method::derpp), sc, kTrendSeeds);
  const auto er = runs.metrics("er", desk_train(Method::er), sc, kTrendSeeds);
  const auto ft = runs.metrics("finetune", desk_train(Method::finetune), sc, kTrendSeeds);
  const double a_dn = mean_acc(dn), a_der = mean_acc(der), a_er = mean_acc(er), a_ft = mean_acc(ft);
  std::vector<std::string> missed;
  if (!(a_dn >= a_der)) missed.push_back("DualNet >= DER++");
  if (!(a_der >= a_er)) missed.push_back("DER++ >= ER");
  if (!(a_er >= a_ft)) missed.push_back("ER >= Finetune");
  if (!(a_dn - a_ft >= kFinetuneMargin)) missed.push_back("DualNet - Finetune >= 15");
  if (!(a_dn - a_er >= kErMargin)) missed.push_back("DualNet - ER >= 2");
  if (!(mean_fm(dn) <= mean_fm(er))) missed.push_back("FM(DualNet) <= FM(ER)");
  std::ostringstream os;
  os << "ACC DualNet " << pct(a_dn) << ", DER++ " << pct(a_der) << ", ER " << pct(a_er) << ", Finetune " << pct(a_ft)
     << "; FM DualNet " << pct(mean_fm(dn)) << ", ER " << pct(mean_fm(er));
  if (!missed.empty()) {
    os << "; missed:";
    for (const auto& s : missed) os << " [" << s << "]";
  }
  return {missed.empty(), os.str()};
}

Verdict ssl_scaling(Runs& runs) {
  const StreamConfig sc = split_mnist(Protocol::task_free);
  TrainConfig one = desk_train(Method::dualnet), ten = desk_train(Method::dualnet);
  one.ssl_iters = 1;
  ten.ssl_iters = 10;
  const double a1 = mean_acc(runs.metrics("dualnet-n1", one, sc, kTrendSeeds));
  const double a10 = mean_acc(runs.metrics("dualnet-n10", ten, sc, kTrendSeeds));
  return {a10 >= a1 - kSslScalingSlack, "ACC n=10 " + pct(a10) + " vs n=1 " + pct(a1)};
}

Verdict semi_supervised(Runs& runs) {
  StreamConfig sc = split_mnist(Protocol::task_aware);
  sc.label_fraction = 0.1;
  const double dn = mean_acc(runs.metrics("dualnet-rho10", desk_train(Method::dualnet), sc, kTrendSeeds));
  const double er = mean_acc(runs.metrics("er-rho10", desk_train(Method::er), sc, kTrendSeeds));
  return {dn > er, "task-aware, 10% labels: ACC DualNet " + pct(dn) + " vs ER " + pct(er)};
}

Verdict interference(Runs& runs, SourceRegistry& registry) {
  const StreamConfig sc = plasticity_stream(registry);
  const std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  TrainConfig pp = desk_train(Method::dualnet_pp), dn = desk_train(Method::dualnet);
  pp.dropout_p = 0.2;
  const double a_pp = mean_acc(runs.metrics("pl-dualnetpp", pp, sc, seeds));
  const double a_dn = mean_acc(runs.metrics("pl-dualnet", dn, sc, seeds));
  std::ostringstream os;
  os << sc.ctrl.sources[0] << " / " << sc.ctrl.sources[1] << " / " << sc.ctrl.sources[2] << ", 5 seeds: ACC DualNet++ "
     << pct(a_pp) << " vs DualNet " << pct(a_dn) << " (gap " << std::showpos << pct(a_pp - a_dn) << ")";
  return {a_pp >= a_dn - kInterferenceSlack, os.str()};
}

Verdict determinism(Runs& runs, SourceRegistry& registry) {
  StreamConfig sc = split_mnist(Protocol::task_free);
  sc.train_per_class = 100;
  TrainConfig c = desk_train(Method::dualnet_pp);
  const std::string m1 = manifest(build_stream(sc, registry, 9)).dump();
  const std::string m2 = manifest(build_stream(sc, registry, 9)).dump();
  const RunResult a = runs.fresh("dualnetpp-small (1st)", c, sc, 9);
  const RunResult b = runs.fresh("dualnetpp-small (2nd)", c, sc, 9);
  const bool pass = m1 == m2 && a.matrix == b.matrix;
  return {pass, std::string("manifests ") + (m1 == m2 ? "identical" : "DIFFER") + ", accuracy matrices " +
                    (a.matrix == b.matrix ? "bit-identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-11"};
  std::vector<int> only;
  std::string data_root;
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 11));
  app.add_option("--data", data_root, "Dataset root (default: $DUALNET_DATA or ./data)");
  CLI11_PARSE(app, argc, argv);

  SourceRegistry registry(data_root.empty() ? default_data_root() : std::filesystem::path(data_root));
  Runs runs(registry);
  const bool have_mnist = registry.available("mnist");

  struct Criterion {
    int id;
    std::string name;
    bool needs_mnist;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient suite", false, gradient_suite},
      {2, "look-ahead K=1 equals SGD(beta*eps)", false, lookahead_equivalence},
      {3, "loss oracles", false, loss_oracles},
      {4, "metric oracles", false, metric_oracles},
      {5, "memory and dropout statistics", false, memory_statistics},
      {6, "DualNet++ p=0 identity", true, [&] { return dropout_identity(runs); }},
      {7, "split-MNIST trend", true, [&] { return trend_reproduction(runs); }},
      {8, "SSL iteration scaling", true, [&] { return ssl_scaling(runs); }},
      {9, "semi-supervised trend", true, [&] { return semi_supervised(runs); }},
      {10, "interference trend", true, [&] { return interference(runs, registry); }},
      {11, "determinism", true, [&] { return determinism(runs, registry); }},
  };

  const std::set<int> selected(only.begin(), only.end());
  std::vector<std::string> lines;
  bool all_pass = true;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    std::cerr << "[" << c.id << "] " << c.name << '\n';
    const auto t0 = Clock::now();
    Verdict v;
    if (c.needs_mnist && !have_mnist) {
      v = {false, "MNIST not found under " + registry.root().string()};
    } else {
      try {
        v = c.run();
      } catch (const std::exception& e) {
        v = {false, std::string("error: ") + e.what()};
      }
    }
    std::ostringstream line;
    line << (v.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << c.id << "  " << c.name << ": " << v.detail << "  ["
         << std::fixed << std::setprecision(0) << seconds_since(t0) << " s]";
    std::cout << line.str() << std::endl;
    all_pass = all_pass && v.pass;
  }
  return all_pass ? 0 : 1;
}
