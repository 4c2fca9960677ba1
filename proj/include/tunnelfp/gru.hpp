#pragma once

// GRU cell, masked bidirectional GRU layers and 2-layer stacks, each with a
// hand-written backward pass. Sequences are column-major: one column per
// timestep.
//
// Cell convention:
//   r  = sigmoid(W_r x + U_r h + b_r)
//   z  = sigmoid(W_z x + U_z h + b_z)
//   h~ = tanh(W_h x + U_h (r * h) + b_h)
//   h' = (1 - z) * h~ + z * h

#include <span>
#include <vector>

#include "tunnelfp/params.hpp"

namespace tunnelfp {

struct GruView {
  ConstMatMap w;
  ConstMatMap u;
  ConstVecMap b;

  GruView(const double* base, const GruSlot& s)
      : w(base + s.w, 3 * s.hidden, s.in), u(base + s.u, 3 * s.hidden, s.hidden), b(base + s.b, 3 * s.hidden) {}
  int hidden() const { return static_cast<int>(u.cols()); }
};

struct GruGradView {
  MatMap w;
  MatMap u;
  VecMap b;

  GruGradView(double* base, const GruSlot& s)
      : w(base + s.w, 3 * s.hidden, s.in), u(base + s.u, 3 * s.hidden, s.hidden), b(base + s.b, 3 * s.hidden) {}
};

Vec gru_cell(const Vec& x, const Vec& h_prev, const GruView& p);

/// Per-direction activations kept for the backward pass. Column k belongs
/// to steps[k].
struct GruCache {
  std::vector<int> steps;
  Mat x;
  Mat h_prev;
  Mat r;
  Mat z;
  Mat cand;
  Mat q;  // r * h_prev
  Mat h;
};

/// Runs the recurrence over `steps` in the given order starting from h = 0.
void gru_forward(const GruView& p, const Mat& inputs, std::span<const int> steps, GruCache& cache);

/// d_h holds dL/dh for each processed step (same column order as the
/// cache). Accumulates parameter gradients and adds dL/dx into d_inputs.
void gru_backward(const GruView& p, const GruCache& cache, const Mat& d_h, GruGradView& grad,
                  Mat& d_inputs);

/// Valid timesteps of a mask, ascending.
std::vector<int> valid_steps(std::span<const unsigned char> mask);

struct BiGruCache {
  GruCache fwd;
  GruCache bwd;
};

/// Forward pass over valid steps ascending, backward pass descending; pad
/// steps carry the state unchanged and are zero in the 2H x n output.
Mat bigru_forward(const double* params, const BiGruSlot& slot, const Mat& inputs,
                  std::span<const int> steps, BiGruCache* cache);
Mat bigru_backward(const double* params, const BiGruSlot& slot, const BiGruCache& cache,
                   const Mat& d_out, int input_rows, double* grad);

struct StackCache {
  std::array<BiGruCache, 2> layers;
  Mat hidden0;  // layer 0 output
};

Mat stack_forward(const double* params, const StackSlot& slot, const Mat& inputs,
                  std::span<const int> steps, StackCache* cache);
Mat stack_backward(const double* params, const StackSlot& slot, const StackCache& cache,
                   const Mat& d_out, int input_rows, double* grad);

}  // namespace tunnelfp
