#include "tunnelfp/gru.hpp"

namespace tunnelfp {

namespace {

template <typename Derived>
auto sigmoid(const Eigen::ArrayBase<Derived>& a) {
  return (1.0 + (-a).exp()).inverse();
}

}  // namespace

Vec gru_cell(const Vec& x, const Vec& h_prev, const GruView& p) {
  const int h = p.hidden();
  const Vec xw = p.w * x + p.b;
  const Vec rz = xw.head(2 * h) + p.u.topRows(2 * h) * h_prev;
  const Eigen::ArrayXd r = sigmoid(rz.head(h).array());
  const Eigen::ArrayXd z = sigmoid(rz.tail(h).array());
  const Vec q = (r * h_prev.array()).matrix();
  const Eigen::ArrayXd cand = (xw.tail(h) + p.u.bottomRows(h) * q).array().tanh();
  return ((1.0 - z) * cand + z * h_prev.array()).matrix();
}

void gru_forward(const GruView& p, const Mat& inputs, std::span<const int> steps, GruCache& c) {
  const int h = p.hidden();
  const auto t_count = static_cast<Eigen::Index>(steps.size());
  c.steps.assign(steps.begin(), steps.end());
  c.x.resize(inputs.rows(), t_count);
  for (Eigen::Index k = 0; k < t_count; ++k) c.x.col(k) = inputs.col(steps[static_cast<std::size_t>(k)]);

  Mat xw = p.w * c.x;
  xw.colwise() += p.b;

  c.h_prev.resize(h, t_count);
  c.r.resize(h, t_count);
  c.z.resize(h, t_count);
  c.cand.resize(h, t_count);
  c.q.resize(h, t_count);
  c.h.resize(h, t_count);

  Vec state = Vec::Zero(h);
  Vec rz(2 * h);
  for (Eigen::Index k = 0; k < t_count; ++k) {
    c.h_prev.col(k) = state;
    rz.noalias() = p.u.topRows(2 * h) * state;
    rz += xw.col(k).head(2 * h);
    c.r.col(k) = sigmoid(rz.head(h).array()).matrix();
    c.z.col(k) = sigmoid(rz.tail(h).array()).matrix();
    c.q.col(k) = c.r.col(k).cwiseProduct(state);
    Vec a = xw.col(k).tail(h);
    a.noalias() += p.u.bottomRows(h) * c.q.col(k);
    c.cand.col(k) = a.array().tanh().matrix();
    state = ((1.0 - c.z.col(k).array()) * c.cand.col(k).array() + c.z.col(k).array() * state.array()).matrix();
    c.h.col(k) = state;
  }
}

void gru_backward(const GruView& p, const GruCache& c, const Mat& d_h, GruGradView& grad, Mat& d_inputs) {
  const int h = p.hidden();
  const auto t_count = static_cast<Eigen::Index>(c.steps.size());
  if (t_count == 0) return;
  Mat da(3 * h, t_count);
  Vec dh_next = Vec::Zero(h);
  Vec dq(h);
  for (Eigen::Index k = t_count - 1; k >= 0; --k) {
    const Eigen::ArrayXd dh = (d_h.col(k) + dh_next).array();
    const auto z = c.z.col(k).array();
    const auto r = c.r.col(k).array();
    const auto cand = c.cand.col(k).array();
    const auto hp = c.h_prev.col(k).array();

    const Eigen::ArrayXd da_h = dh * (1.0 - z) * (1.0 - cand.square());
    const Eigen::ArrayXd da_z = dh * (hp - cand) * z * (1.0 - z);
    dq.noalias() = p.u.bottomRows(h).transpose() * da_h.matrix();
    const Eigen::ArrayXd da_r = dq.array() * hp * r * (1.0 - r);

    da.col(k).segment(0, h) = da_r.matrix();
    da.col(k).segment(h, h) = da_z.matrix();
    da.col(k).segment(2 * h, h) = da_h.matrix();

    dh_next = (dh * z + dq.array() * r).matrix();
    dh_next.noalias() += p.u.topRows(2 * h).transpose() * da.col(k).head(2 * h);
  }
  grad.w.noalias() += da * c.x.transpose();
  grad.b += da.rowwise().sum();
  grad.u.topRows(2 * h).noalias() += da.topRows(2 * h) * c.h_prev.transpose();
  grad.u.bottomRows(h).noalias() += da.bottomRows(h) * c.q.transpose();
  const Mat dx = p.w.transpose() * da;
  for (Eigen::Index k = 0; k < t_count; ++k) d_inputs.col(c.steps[static_cast<std::size_t>(k)]) += dx.col(k);
}

std::vector<int> valid_steps(std::span<const unsigned char> mask) {
  std::vector<int> out;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out.push_back(static_cast<int>(i));
  return out;
}

Mat bigru_forward(const double* params, const BiGruSlot& slot, const Mat& inputs, std::span<const int> steps,
                  BiGruCache* cache) {
  const int h = slot.fwd.hidden;
  BiGruCache local;
  BiGruCache& c = cache ? *cache : local;
  std::vector<int> reversed(steps.rbegin(), steps.rend());
  gru_forward(GruView(params, slot.fwd), inputs, steps, c.fwd);
  gru_forward(GruView(params, slot.bwd), inputs, reversed, c.bwd);

  Mat out = Mat::Zero(2 * h, inputs.cols());
  for (std::size_t k = 0; k < c.fwd.steps.size(); ++k) {
    out.col(c.fwd.steps[k]).head(h) = c.fwd.h.col(static_cast<Eigen::Index>(k));
    out.col(c.bwd.steps[k]).tail(h) = c.bwd.h.col(static_cast<Eigen::Index>(k));
  }
  return out;
}

Mat bigru_backward(const double* params, const BiGruSlot& slot, const BiGruCache& cache, const Mat& d_out,
                   int input_rows, double* grad) {
  const int h = slot.fwd.hidden;
  const auto t_count = static_cast<Eigen::Index>(cache.fwd.steps.size());
  Mat d_in = Mat::Zero(input_rows, d_out.cols());
  Mat d_fwd(h, t_count), d_bwd(h, t_count);
  for (Eigen::Index k = 0; k < t_count; ++k) {
    d_fwd.col(k) = d_out.col(cache.fwd.steps[static_cast<std::size_t>(k)]).head(h);
    d_bwd.col(k) = d_out.col(cache.bwd.steps[static_cast<std::size_t>(k)]).tail(h);
  }
  GruGradView g_fwd(grad, slot.fwd);
  GruGradView g_bwd(grad, slot.bwd);
  gru_backward(GruView(params, slot.fwd), cache.fwd, d_fwd, g_fwd, d_in);
  gru_backward(GruView(params, slot.bwd), cache.bwd, d_bwd, g_bwd, d_in);
  return d_in;
}

Mat stack_forward(const double* params, const StackSlot& slot, const Mat& inputs, std::span<const int> steps,
                  StackCache* cache) {
  if (steps.empty()) throw InputError("bidirectional encoder: no valid timestep");
  if (cache) {
    cache->hidden0 = bigru_forward(params, slot.layers[0], inputs, steps, &cache->layers[0]);
    return bigru_forward(params, slot.layers[1], cache->hidden0, steps, &cache->layers[1]);
  }
  const Mat hidden0 = bigru_forward(params, slot.layers[0], inputs, steps, nullptr);
  return bigru_forward(params, slot.layers[1], hidden0, steps, nullptr);
}

Mat stack_backward(const double* params, const StackSlot& slot, const StackCache& cache, const Mat& d_out,
                   int input_rows, double* grad) {
  const Mat d_hidden0 =
      bigru_backward(params, slot.layers[1], cache.layers[1], d_out, static_cast<int>(cache.hidden0.rows()), grad);
  return bigru_backward(params, slot.layers[0], cache.layers[0], d_hidden0, input_rows, grad);
}

}  // namespace tunnelfp
