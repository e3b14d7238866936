#include <Eigen/Dense>
#include <cmath>

#include "idm/flops.hpp"
#include "idm/invblocks.hpp"
#include "idm/ops.hpp"

namespace idm {

namespace {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

MatrixRM to_matrix(const Tensor& t) {
  if (t.rank() != 2 || t.dim(0) != t.dim(1)) throw ShapeError("expected a square matrix, got " + shape_string(t.shape()));
  MatrixRM m(t.dim(0), t.dim(1));
  for (std::int64_t i = 0; i < t.numel(); ++i) m.data()[i] = t.get(i);
  return m;
}

Tensor to_tensor(const MatrixRM& m, DType dtype) {
  Tensor t({m.rows(), m.cols()}, dtype);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, m.data()[i]);
  return t;
}

struct Resample {
  std::int64_t batch, channels, d, h, w;  // fine-grid dims
};

Resample fine_dims(const Shape& s) {
  if (s.size() != 5) throw ShapeError("orthogonal resampling needs [B,C,D,H,W], got " + shape_string(s));
  if (s[2] % 2 || s[3] % 2 || s[4] % 2)
    throw ShapeError("orthogonal downsampling needs even spatial extents, got " + shape_string(s));
  return {s[0], s[1], s[2], s[3], s[4]};
}

Resample coarse_to_fine(const Shape& s) {
  if (s.size() != 5) throw ShapeError("orthogonal resampling needs [B,C,D,H,W], got " + shape_string(s));
  if (s[1] % 8) throw ShapeError("orthogonal upsampling needs channels divisible by 8, got " + shape_string(s));
  return {s[0], s[1] / 8, s[2] * 2, s[3] * 2, s[4] * 2};
}

void check_q(const Tensor& q, DType dtype) {
  if (q.shape() != Shape{8, 8}) throw ShapeError("resampling matrix must be [8,8]");
  if (q.dtype() != dtype) throw ShapeError("resampling matrix dtype mismatch");
}

// Visits every 2x2x2 block: fn(fine_offsets[8], coarse_offset, channel c, batch b).
template <class Fn>
void for_each_block(const Resample& r, Fn fn) {
  const std::int64_t cd = r.d / 2, ch = r.h / 2, cw = r.w / 2;
  const std::int64_t fine_vol = r.d * r.h * r.w, coarse_vol = cd * ch * cw;
  for (std::int64_t b = 0; b < r.batch; ++b)
    for (std::int64_t c = 0; c < r.channels; ++c) {
      const std::int64_t fine_base = (b * r.channels + c) * fine_vol;
      const std::int64_t coarse_base = (b * r.channels * 8 + c * 8) * coarse_vol;
      for (std::int64_t z = 0; z < cd; ++z)
        for (std::int64_t y = 0; y < ch; ++y)
          for (std::int64_t x = 0; x < cw; ++x) {
            std::int64_t fine[8];
            for (int j = 0; j < 8; ++j) {
              const int dz = j >> 2, dy = (j >> 1) & 1, dx = j & 1;
              fine[j] = fine_base + ((2 * z + dz) * r.h + (2 * y + dy)) * r.w + (2 * x + dx);
            }
            const std::int64_t coarse = coarse_base + (z * ch + y) * cw + x;
            fn(fine, coarse, coarse_vol);
          }
    }
}

// G[k][j] = sum over blocks of coarse[c*8+k] * fine_block[j].
Tensor block_outer(const Tensor& coarse, const Tensor& fine) {
  const auto r = fine_dims(fine.shape());
  Tensor g({8, 8}, fine.dtype());
  visit_dtype(fine.dtype(), [&]<class T>() {
    auto cp = coarse.data<T>();
    auto fp = fine.data<T>();
    double acc[64] = {};
    for_each_block(r, [&](const std::int64_t* fi, std::int64_t co, std::int64_t stride) {
      for (int k = 0; k < 8; ++k) {
        const double ck = cp[static_cast<std::size_t>(co + k * stride)];
        for (int j = 0; j < 8; ++j) acc[k * 8 + j] += ck * static_cast<double>(fp[static_cast<std::size_t>(fi[j])]);
      }
    });
    auto gp = g.data<T>();
    for (int i = 0; i < 64; ++i) gp[static_cast<std::size_t>(i)] = static_cast<T>(acc[i]);
  });
  flops::add(128ull * static_cast<std::uint64_t>(fine.numel() / 8));
  return g;
}

}  // namespace

Tensor cayley_orthogonal(const Tensor& params) {
  const MatrixRM p = to_matrix(params);
  const MatrixRM s = p - p.transpose();
  const MatrixRM id = MatrixRM::Identity(p.rows(), p.cols());
  const MatrixRM q = (id - s) * (id + s).partialPivLu().inverse();
  return to_tensor(q, params.dtype());
}

Tensor cayley_backward(const Tensor& params, const Tensor& grad_q) {
  const MatrixRM p = to_matrix(params);
  const MatrixRM g = to_matrix(grad_q);
  const MatrixRM s = p - p.transpose();
  const MatrixRM id = MatrixRM::Identity(p.rows(), p.cols());
  const MatrixRM a_inv = (id + s).partialPivLu().inverse();
  const MatrixRM q = (id - s) * a_inv;
  // dQ = -(I + Q) dS A^-1  =>  dL/dS = -(I + Q)^T G A^-T.
  const MatrixRM grad_s = -(id + q).transpose() * g * a_inv.transpose();
  const MatrixRM grad_p = grad_s - grad_s.transpose();
  return to_tensor(grad_p, params.dtype());
}

double orthogonality_error(const Tensor& q) {
  const MatrixRM m = to_matrix(q);
  return (m.transpose() * m - MatrixRM::Identity(m.rows(), m.cols())).cwiseAbs().maxCoeff();
}

Tensor ortho_down(const Tensor& x, const Tensor& q) {
  check_q(q, x.dtype());
  const auto r = fine_dims(x.shape());
  Tensor out({r.batch, r.channels * 8, r.d / 2, r.h / 2, r.w / 2}, x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data<T>();
    auto qm = q.data<T>();
    for_each_block(r, [&](const std::int64_t* fi, std::int64_t co, std::int64_t stride) {
      T v[8];
      for (int j = 0; j < 8; ++j) v[j] = src[static_cast<std::size_t>(fi[j])];
      for (int k = 0; k < 8; ++k) {
        T acc = 0;
        for (int j = 0; j < 8; ++j) acc += qm[static_cast<std::size_t>(k * 8 + j)] * v[j];
        dst[static_cast<std::size_t>(co + k * stride)] = acc;
      }
    });
  });
  flops::add(16ull * static_cast<std::uint64_t>(x.numel()));
  return out;
}

Tensor ortho_up(const Tensor& y, const Tensor& q) {
  check_q(q, y.dtype());
  const auto r = coarse_to_fine(y.shape());
  Tensor out({r.batch, r.channels, r.d, r.h, r.w}, y.dtype());
  visit_dtype(y.dtype(), [&]<class T>() {
    auto src = y.data<T>();
    auto dst = out.data<T>();
    auto qm = q.data<T>();
    for_each_block(r, [&](const std::int64_t* fi, std::int64_t co, std::int64_t stride) {
      T v[8];
      for (int k = 0; k < 8; ++k) v[k] = src[static_cast<std::size_t>(co + k * stride)];
      for (int j = 0; j < 8; ++j) {
        T acc = 0;
        for (int k = 0; k < 8; ++k) acc += qm[static_cast<std::size_t>(k * 8 + j)] * v[k];
        dst[static_cast<std::size_t>(fi[j])] = acc;
      }
    });
  });
  flops::add(16ull * static_cast<std::uint64_t>(y.numel()));
  return out;
}

OrthoResample::OrthoResample(std::string name, Direction direction, DType dtype)
    : name_(std::move(name)), direction_(direction), skew_(name_ + ".skew", Tensor({8, 8}, dtype)) {}

TensorList OrthoResample::forward(const TensorList& in, const RunContext&) const {
  const Tensor qm = q();
  return {direction_ == Direction::Down ? ortho_down(in.at(0), qm) : ortho_up(in.at(0), qm)};
}

TensorList OrthoResample::inverse(const TensorList& out, const RunContext&) const {
  const Tensor qm = q();
  return {direction_ == Direction::Down ? ortho_up(out.at(0), qm) : ortho_down(out.at(0), qm)};
}

Tensor OrthoResample::resample_backward(bool apply_down, const Tensor& x, const Tensor& grad) {
  const Tensor qm = q();
  Tensor grad_x;
  Tensor grad_q;
  if (apply_down) {
    // y = down(x): dx = up(dy), dQ[k][j] = sum dy_k x_j.
    grad_x = ortho_up(grad, qm);
    grad_q = block_outer(grad, x);
  } else {
    // y = up(x): dx = down(dy), dQ[k][j] = sum x_k dy_j.
    grad_x = ortho_down(grad, qm);
    grad_q = block_outer(x, grad);
  }
  ops::accumulate(skew_.grad, cayley_backward(skew_.value, grad_q));
  return grad_x;
}

TensorList OrthoResample::backward(const TensorList& in, const TensorList& grad_out, const RunContext&) {
  return {resample_backward(direction_ == Direction::Down, in.at(0), grad_out.at(0))};
}

TensorList OrthoResample::inverse_backward(const TensorList& out, const TensorList& grad_in, const RunContext&) {
  return {resample_backward(direction_ == Direction::Up, out.at(0), grad_in.at(0))};
}

}  // namespace idm
