#include <doctest.h>

#include <cmath>
#include <numbers>

#include "tunnelfp/gradcheck.hpp"
#include "tunnelfp/rng.hpp"

using namespace tunnelfp;

namespace {

NetConfig tiny() { return GradCheckOptions{}.net; }

std::vector<const ParallelFlowPair*> ptrs(const std::vector<ParallelFlowPair>& pairs) {
  std::vector<const ParallelFlowPair*> out;
  for (const auto& p : pairs) out.push_back(&p);
  return out;
}

Vec random_vec(Rng& rng, int n, double scale = 1.0) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.uniform(-scale, scale);
  return v;
}

double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

void copy_branch(ModelState& s, Branch from, Branch to) {
  for (const std::string part : {".enc_p", ".enc_a", ".proto_head"}) {
    const ParamGroup& src = s.layout.group(std::string(branch_name(from)) + part);
    const ParamGroup& dst = s.layout.group(std::string(branch_name(to)) + part);
    std::copy(s.params.begin() + static_cast<std::ptrdiff_t>(src.begin),
              s.params.begin() + static_cast<std::ptrdiff_t>(src.end),
              s.params.begin() + static_cast<std::ptrdiff_t>(dst.begin));
  }
}

LossWeights only(int k, double value = 1.0) {
  LossWeights w{0, 0, 0, 0, 0};
  double* slots[] = {&w.lambda1, &w.lambda2, &w.lambda3, &w.lambda4, &w.lambda5};
  *slots[k] = value;
  return w;
}

}  // namespace

TEST_CASE("reconstruction error: hand-evaluated examples") {
  ReconSample s;
  s.x_tls = Mat::Zero(2, 1);
  s.x_tls(0, 0) = 1;
  s.recon_tls = Mat::Zero(2, 1);
  s.steps_tls = {0};
  s.x_tun = s.x_tls;
  s.recon_tun = s.recon_tls;
  s.steps_tun = {0};
  const std::vector<ReconSample> one = {s};
  CHECK(loss_src(one) == 2.0);
  const std::vector<ReconSample> two = {s, s};
  CHECK(loss_src(two) == 2.0);

  ReconSample perfect = s;
  perfect.recon_tls = perfect.x_tls;
  perfect.recon_tun = perfect.x_tun;
  CHECK(loss_src(std::vector<ReconSample>{perfect}) == 0.0);
  CHECK(loss_cpd(std::vector<ReconSample>{perfect}) == 0.0);
  CHECK(loss_cpd(std::vector<ReconSample>{perfect, s}) == loss_cpd(std::vector<ReconSample>{s, perfect}));

  // Pad columns are ignored entirely.
  Mat t = Mat::Zero(2, 3), r = Mat::Zero(2, 3);
  t(0, 0) = 1;
  r(1, 2) = 100;
  const std::vector<int> steps = {0};
  CHECK(reconstruction_error(t, r, steps) == 1.0);
}

TEST_CASE("cross-entropy of uniform logits is ln C per branch") {
  for (int c : {2, 3, 10, 54}) {
    LogitSample s{Vec::Zero(c), Vec::Zero(c), 0};
    const std::vector<LogitSample> batch = {s, {Vec::Zero(c), Vec::Zero(c), c - 1}};
    CHECK(loss_psm(batch) == doctest::Approx(2 * std::log(c)).epsilon(1e-15));
    CHECK(loss_asc(batch) == doctest::Approx(2 * std::log(c)).epsilon(1e-15));
  }
  CHECK(loss_psm(std::vector<LogitSample>{{Vec::Zero(54), Vec::Zero(54), 3}}) == doctest::Approx(7.978).epsilon(1e-4));
  CHECK(loss_psm(std::vector<LogitSample>{{Vec::Zero(2), Vec::Zero(2), 1}}) == doctest::Approx(1.386).epsilon(1e-3));

  Vec confident = Vec::Zero(4);
  confident[2] = 800;
  CHECK(cross_entropy(confident, 2) < 1e-300);
  CHECK(std::isfinite(cross_entropy(confident, 0)));
  CHECK(cross_entropy(confident, 0) == doctest::Approx(800));

  Vec l(3);
  l << 0.3, -1.2, 2.0;
  const std::vector<LogitSample> a = {{l, l, 0}};
  const std::vector<LogitSample> b = {{l, l, 2}};
  CHECK(loss_asc(a) != loss_asc(b));
  Vec lp(3);
  lp << 2.0, -1.2, 0.3;
  CHECK(loss_asc(std::vector<LogitSample>{{lp, lp, 0}}) == doctest::Approx(loss_asc(b)));
}

TEST_CASE("cosine distance landmarks") {
  Vec a(3), b(3);
  a << 1, 2, 3;
  CHECK(cosine_distance(a, a) == doctest::Approx(0).epsilon(1e-12));
  b << -2, 1, 0;
  CHECK(cosine_distance(a, b) == doctest::Approx(1));
  CHECK(cosine_distance(a, -a) == doctest::Approx(2));
  CHECK(cosine_distance(Vec::Zero(3), a) == 1.0);
  const std::vector<PooledSample> batch = {{a, a}, {a, -a}};
  CHECK(loss_asa(batch) == doctest::Approx(1));
}

TEST_CASE("total loss arithmetic and ablation switch") {
  LossReport ones{1, 1, 1, 1, 1};
  LossReport r = total_loss(ones, LossWeights{});
  CHECK(r.frd == 3);
  CHECK(r.afa == 2);
  CHECK(r.total == 5);
  r = total_loss(ones, LossWeights{}, Ablation::Asa);
  CHECK(r.total == 4);
  CHECK(r.asa == 0);
  CHECK(r.afa == 1);
  LossReport src;
  src.src = 1.5;
  src.psm = 9;
  CHECK(total_loss(src, LossWeights{2, 0, 0, 0, 0}).total == 3.0);

  for (Ablation a : kAllVariants) {
    const LossWeights w = LossWeights{}.with_ablation(a);
    const int zeros = (w.lambda1 == 0) + (w.lambda2 == 0) + (w.lambda3 == 0) + (w.lambda4 == 0) + (w.lambda5 == 0);
    CHECK(zeros == (a == Ablation::None ? 0 : 1));
    CHECK(parse_ablation(to_string(a)) == a);
  }
  CHECK(parse_ablation("ASC") == Ablation::Asc);
  CHECK_THROWS_AS(parse_ablation("frd"), InputError);
  CHECK(variant_name(Ablation::None) == "Full");
  CHECK(variant_name(Ablation::Cpd) == "/CPD");
  CHECK_THROWS_AS((LossWeights{1, -1, 1, 1, 1}).validate(), InputError);
}

TEST_CASE("primitive gradients agree with central differences") {
  Rng rng(8);
  const double h = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    const Vec a = random_vec(rng, 5), b = random_vec(rng, 5);
    Vec da = Vec::Zero(5), db = Vec::Zero(5);
    cosine_distance(a, b, &da, &db, 1.0);
    for (int i = 0; i < 5; ++i) {
      Vec ap = a, am = a;
      ap[i] += h;
      am[i] -= h;
      CHECK(da[i] == doctest::Approx((cosine_distance(ap, b) - cosine_distance(am, b)) / (2 * h)).epsilon(1e-6));
    }

    const Vec l = random_vec(rng, 4, 3);
    const int y = static_cast<int>(rng.uniform_int(0, 3));
    Vec dl = Vec::Zero(4);
    cross_entropy(l, y, &dl, 2.0);
    for (int i = 0; i < 4; ++i) {
      Vec lp = l, lm = l;
      lp[i] += h;
      lm[i] -= h;
      CHECK(dl[i] == doctest::Approx(2.0 * (cross_entropy(lp, y) - cross_entropy(lm, y)) / (2 * h)).epsilon(1e-6));
    }

    Mat t = Mat::Random(3, 4), r = Mat::Random(3, 4);
    const std::vector<int> steps = {0, 2, 3};
    Mat dr = Mat::Zero(3, 4);
    reconstruction_error(t, r, steps, &dr);
    for (int j = 0; j < 4; ++j)
      for (int i = 0; i < 3; ++i) {
        Mat rp = r, rm = r;
        rp(i, j) += h;
        rm(i, j) -= h;
        const double fd = (reconstruction_error(t, rp, steps) - reconstruction_error(t, rm, steps)) / (2 * h);
        CHECK(dr(i, j) == doctest::Approx(fd).epsilon(1e-6).scale(1e-9));
      }
  }
}

TEST_CASE("full objective gradient check on the tiny config") {
  const GradCheckReport rep = grad_check(GradCheckOptions{});
  CHECK(rep.groups.size() == ModelState::initialize(tiny(), 1).layout.groups.size());
  for (const GroupError& g : rep.groups) {
    CHECK_MESSAGE(g.rel_error <= 1e-4, g.group << " rel error " << g.rel_error);
    CHECK(g.analytic_norm > 0);
  }
  CHECK(rep.passed());
  CHECK(rep.failing().empty());
}

TEST_CASE("restricted oracle: reconstruction term alone") {
  GradCheckOptions o;
  o.weights = only(0);
  const GradCheckReport rep = grad_check(o);
  for (const GroupError& g : rep.groups) {
    CHECK_MESSAGE(g.rel_error <= 1e-4, g.group);
    const bool touched = g.group == "embedding" || g.group.find("enc_") != std::string::npos ||
                         g.group.rfind("decoder", 0) == 0;
    if (!touched) CHECK(g.analytic_norm == 0);
  }
}

TEST_CASE("each ablation still passes the gradient check") {
  for (Ablation a : kAllVariants) {
    if (a == Ablation::None) continue;
    GradCheckOptions o;
    o.ablation = a;
    o.seed = 11;
    const GradCheckReport rep = grad_check(o);
    CHECK_MESSAGE(rep.passed(), to_string(a) << " worst " << rep.worst());
  }
}

TEST_CASE("severed term: gradient equals the weighted sum of the remaining terms") {
  const NetConfig net = tiny();
  const ModelState s = ModelState::initialize(net, 4);
  const auto pairs = random_pairs(net, 3, 9);
  const auto batch = ptrs(pairs);
  const LossWeights w{0.7, 1.3, 0.5, 2.0, 1.1};
  const double lam[] = {w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.lambda5};
  const Ablation by_index[] = {Ablation::Src, Ablation::Psm, Ablation::Cpd, Ablation::Asa, Ablation::Asc};

  std::vector<std::vector<double>> single(5);
  for (int k = 0; k < 5; ++k) {
    ObjectiveOptions o;
    o.weights = only(k, lam[k]);
    batch_objective(s, batch, o, &single[static_cast<std::size_t>(k)]);
  }
  for (int cut = 0; cut < 5; ++cut) {
    ObjectiveOptions o;
    o.weights = w;
    o.ablation = by_index[cut];
    std::vector<double> g;
    const LossReport rep = batch_objective(s, batch, o, &g);
    std::vector<double> sum(g.size(), 0.0);
    for (int k = 0; k < 5; ++k)
      if (k != cut)
        for (std::size_t i = 0; i < g.size(); ++i) sum[i] += single[static_cast<std::size_t>(k)][i];
    CHECK(rel_error(g, sum) < 1e-12);

    ObjectiveOptions full;
    full.weights = w;
    const LossReport all = batch_objective(s, batch, full);
    const double parts[] = {all.src, all.psm, all.cpd, all.asa, all.asc};
    CHECK(rep.total == doctest::Approx(all.total - lam[cut] * parts[cut]).epsilon(1e-12));
  }
}

TEST_CASE("reversal layer negates the protocol-term gradient on Enc^P exactly") {
  const NetConfig net = tiny();
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const ModelState s = ModelState::initialize(net, seed);
    const auto pairs = random_pairs(net, 2, seed + 10);
    const GrlCheck c = grl_negation_check(s, pairs);
    CHECK(c.exact);
    CHECK(c.max_abs_gap == 0.0);
    CHECK(c.nonzero > 0);
    CHECK(c.compared == s.layout.group("tls.enc_p").end - s.layout.group("tls.enc_p").begin +
                            s.layout.group("tun.enc_p").end - s.layout.group("tun.enc_p").begin);
  }
}

TEST_CASE("adversarial direction: encoders raise the protocol loss, heads lower it") {
  const NetConfig net = tiny();
  const ModelState s = ModelState::initialize(net, 21);
  const auto pairs = random_pairs(net, 4, 22);
  const auto batch = ptrs(pairs);
  ObjectiveOptions o;
  o.weights = only(1);
  std::vector<double> g;
  const double before = batch_objective(s, batch, o, &g).psm;

  auto stepped = [&](const std::vector<std::string>& groups) {
    ModelState t = s;
    for (const std::string& name : groups) {
      const ParamGroup& pg = t.layout.group(name);
      for (std::size_t i = pg.begin; i < pg.end; ++i) t.params[i] -= 1e-3 * g[i];
    }
    return batch_objective(t, batch, o).psm;
  };
  CHECK(stepped({"tls.enc_p", "tun.enc_p"}) > before);
  CHECK(stepped({"tls.proto_head", "tun.proto_head"}) < before);
}

TEST_CASE("cross decoding equals self decoding under equal inputs and branches") {
  Rng rng(33);
  const NetConfig net = tiny();
  for (int trial = 0; trial < 10; ++trial) {
    ModelState s = ModelState::initialize(net, static_cast<std::uint64_t>(trial) + 100);
    copy_branch(s, Branch::Tls, Branch::Tun);
    auto pairs = random_pairs(net, 1, static_cast<std::uint64_t>(trial));
    pairs[0].tun.tokens = pairs[0].tls.tokens;
    pairs[0].tun.true_len = pairs[0].tls.true_len;
    const LossReport r = pair_objective(s, pairs[0], ObjectiveOptions{});
    CHECK(r.cpd == doctest::Approx(r.src).epsilon(1e-14));
    CHECK(r.asa == doctest::Approx(0).scale(1));
  }
}

TEST_CASE("batch losses are permutation and duplication invariant") {
  const NetConfig net = tiny();
  const ModelState s = ModelState::initialize(net, 5);
  auto pairs = random_pairs(net, 4, 6);
  const LossReport a = batch_objective(s, ptrs(pairs), ObjectiveOptions{});
  std::reverse(pairs.begin(), pairs.end());
  const LossReport b = batch_objective(s, ptrs(pairs), ObjectiveOptions{});
  auto doubled = pairs;
  doubled.insert(doubled.end(), pairs.begin(), pairs.end());
  const LossReport c = batch_objective(s, ptrs(doubled), ObjectiveOptions{});
  for (const LossReport* r : {&b, &c}) {
    CHECK(r->src == doctest::Approx(a.src).epsilon(1e-13));
    CHECK(r->psm == doctest::Approx(a.psm).epsilon(1e-13));
    CHECK(r->cpd == doctest::Approx(a.cpd).epsilon(1e-13));
    CHECK(r->asa == doctest::Approx(a.asa).epsilon(1e-13));
    CHECK(r->asc == doctest::Approx(a.asc).epsilon(1e-13));
    CHECK(r->total == doctest::Approx(a.total).epsilon(1e-13));
  }
  CHECK(a.src >= 0);
  CHECK(a.cpd >= 0);
  CHECK(a.asa >= 0);
  CHECK(a.asa <= 2);
  CHECK(a.psm >= 0);
  CHECK(a.asc >= 0);
}

TEST_CASE("threaded batch objective matches the serial one exactly for a fixed thread count") {
  const NetConfig net = tiny();
  const ModelState s = ModelState::initialize(net, 5);
  const auto pairs = random_pairs(net, 7, 6);
  std::vector<double> g1, g1b, g3;
  const LossReport r1 = batch_objective(s, ptrs(pairs), ObjectiveOptions{}, &g1, 1);
  const LossReport r1b = batch_objective(s, ptrs(pairs), ObjectiveOptions{}, &g1b, 1);
  const LossReport r3 = batch_objective(s, ptrs(pairs), ObjectiveOptions{}, &g3, 3);
  CHECK(r1.total == r1b.total);
  CHECK(g1 == g1b);
  CHECK(r3.total == doctest::Approx(r1.total).epsilon(1e-13));
  CHECK(rel_error(g1, g3) < 1e-13);
}

TEST_CASE("tunnel-only objective is the tunnel app-head cross-entropy") {
  const NetConfig net = tiny();
  const ModelState s = ModelState::initialize(net, 5);
  const auto pairs = random_pairs(net, 1, 3);
  ObjectiveOptions o;
  o.kind = ModelKind::TunnelOnly;
  std::vector<double> g(s.params.size(), 0.0);
  const LossReport r = pair_objective(s, pairs[0], o, 1.0, g.data());
  const TunnelInference inf = infer_tunnel(s, pairs[0].tun);
  CHECK(r.asc == doctest::Approx(cross_entropy(inf.logits, pairs[0].label)).epsilon(1e-14));
  CHECK(r.src == 0);
  CHECK(r.psm == 0);
  CHECK(r.cpd == 0);
  CHECK(r.asa == 0);
  CHECK(r.total == r.asc);
  for (const ParamGroup& pg : s.layout.groups) {
    double norm = 0;
    for (std::size_t i = pg.begin; i < pg.end; ++i) norm += std::abs(g[i]);
    const bool used = pg.name == "embedding" || pg.name == "tun.enc_a" || pg.name == "app_head";
    CHECK_MESSAGE((norm > 0) == used, pg.name);
  }
  CHECK(parse_model_kind(to_string(ModelKind::TunnelOnly)) == ModelKind::TunnelOnly);
}
