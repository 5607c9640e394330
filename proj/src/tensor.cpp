#include "ramp/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "ramp/error.hpp"

namespace ramp {

namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

thread_local Tape* g_active_tape = nullptr;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

using NodePtr = std::shared_ptr<detail::Node>;

const NodePtr& checked(const Tensor& t, const char* op) {
  if (!t.defined()) fail(ErrorKind::contract, std::string(op) + ": undefined tensor");
  return t.node();
}

void require_matrix(const Tensor& t, const char* op) {
  if (checked(t, op)->shape.size() != 2) {
    fail(ErrorKind::dimension, std::string(op) + ": expected a matrix, got " +
                                   shape_string(t.shape()));
  }
}

void check_finite(const detail::Node& node, const char* op) {
  for (double v : node.value) {
    if (!std::isfinite(v)) {
      fail(ErrorKind::numeric, std::string(op) + ": non-finite value produced");
    }
  }
}

// Builds the output node and wires it onto the active tape when any input
// needs a gradient.
NodePtr make_output(Shape shape, std::vector<double> value, const char* op,
                    std::initializer_list<NodePtr> inputs,
                    std::function<void(detail::Node&)> backward) {
  auto out = std::make_shared<detail::Node>();
  out->shape = std::move(shape);
  out->value = std::move(value);
  check_finite(*out, op);
  Tape* tape = g_active_tape;
  if (tape == nullptr) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in->requires_grad;
  if (!needs) return out;
  out->requires_grad = true;
  out->leaf = false;
  out->inputs.assign(inputs.begin(), inputs.end());
  out->backward = std::move(backward);
  tape->record(out);
  return out;
}

NodePtr make_output_many(Shape shape, std::vector<double> value, const char* op,
                         std::vector<NodePtr> inputs,
                         std::function<void(detail::Node&)> backward) {
  auto out = std::make_shared<detail::Node>();
  out->shape = std::move(shape);
  out->value = std::move(value);
  check_finite(*out, op);
  Tape* tape = g_active_tape;
  if (tape == nullptr) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in->requires_grad;
  if (!needs) return out;
  out->requires_grad = true;
  out->leaf = false;
  out->inputs = std::move(inputs);
  out->backward = std::move(backward);
  tape->record(out);
  return out;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) fail(ErrorKind::dimension, "tensor dimensions must be positive");
  }
  if (product(shape) != data.size()) {
    fail(ErrorKind::dimension, "shape " + shape_string(shape) + " does not match " +
                                   std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  check_finite(*node, "from_data");
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = product(shape);
  return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

const Shape& Tensor::shape() const { return checked(*this, "shape")->shape; }
std::size_t Tensor::size() const { return checked(*this, "size")->value.size(); }

std::size_t Tensor::rows() const {
  require_matrix(*this, "rows");
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  require_matrix(*this, "cols");
  return node_->shape[1];
}

std::span<const double> Tensor::data() const { return checked(*this, "data")->value; }

double Tensor::at(std::size_t r, std::size_t c) const {
  require_matrix(*this, "at");
  if (r >= node_->shape[0] || c >= node_->shape[1]) {
    fail(ErrorKind::index, "at: index out of range");
  }
  return node_->value[r * node_->shape[1] + c];
}

double Tensor::item() const {
  if (size() != 1) fail(ErrorKind::contract, "item: tensor is not a scalar");
  return node_->value[0];
}

bool Tensor::requires_grad() const { return checked(*this, "requires_grad")->requires_grad; }
bool Tensor::is_leaf() const { return checked(*this, "is_leaf")->leaf; }
std::span<const double> Tensor::grad() const { return checked(*this, "grad")->grad; }

void Tensor::zero_grad() {
  auto& g = checked(*this, "zero_grad")->grad;
  std::fill(g.begin(), g.end(), 0.0);
}

std::span<double> Tensor::leaf_data() {
  if (!checked(*this, "leaf_data")->leaf) {
    fail(ErrorKind::contract, "leaf_data: tensor is not a leaf");
  }
  return node_->value;
}

// ---- Gradients / Tape -----------------------------------------------------

bool Gradients::contains(const Tensor& leaf) const { return grads_.count(leaf.id()) != 0; }

Tensor Gradients::operator[](const Tensor& leaf) const {
  auto it = grads_.find(leaf.id());
  if (it == grads_.end()) fail(ErrorKind::lookup, "no gradient recorded for tensor");
  return it->second;
}

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() noexcept { return g_active_tape; }

void Tape::record(std::shared_ptr<detail::Node> node) { ops_.push_back(std::move(node)); }

Gradients Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    fail(ErrorKind::contract, "backward: loss must be a scalar tensor");
  }
  Gradients result;
  const auto& root = loss.node();
  if (!root->requires_grad) {
    ops_.clear();
    return result;
  }
  // Intermediate grads live only for this pass; leaves keep accumulating.
  root->grad_buffer()[0] += 1.0;
  std::vector<detail::Node*> leaves;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    detail::Node& node = **it;
    if (node.grad.empty()) continue;
    for (const auto& in : node.inputs) {
      if (in->requires_grad) in->grad_buffer();
      if (in->leaf && in->requires_grad) leaves.push_back(in.get());
    }
    node.backward(node);
  }
  std::sort(leaves.begin(), leaves.end());
  leaves.erase(std::unique(leaves.begin(), leaves.end()), leaves.end());
  for (detail::Node* leaf : leaves) {
    auto snapshot = std::make_shared<detail::Node>();
    snapshot->shape = leaf->shape;
    snapshot->value = leaf->grad;
    result.grads_.emplace(leaf, Tensor(std::move(snapshot)));
  }
  for (auto& node : ops_) {
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->inputs.clear();
    node->backward = nullptr;
  }
  ops_.clear();
  return result;
}

Gradients backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) fail(ErrorKind::contract, "backward: no active tape");
  return tape->backward(loss);
}

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    fail(ErrorKind::dimension, "matmul: inner dimensions differ (" +
                                   shape_string(a.shape()) + " x " +
                                   shape_string(b.shape()) + ")");
  }
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  auto an = a.node(), bn = b.node();
  return Tensor(make_output({m, n}, std::move(out), "matmul", {an, bn},
                            [an, bn, m, k, n](detail::Node& self) {
                              ConstMap g(self.grad.data(), m, n);
                              if (an->requires_grad) {
                                MutMap(an->grad.data(), m, k).noalias() +=
                                    g * ConstMap(bn->value.data(), k, n).transpose();
                              }
                              if (bn->requires_grad) {
                                MutMap(bn->grad.data(), k, n).noalias() +=
                                    ConstMap(an->value.data(), m, k).transpose() * g;
                              }
                            }));
}

Tensor transpose(const Tensor& x) {
  require_matrix(x, "transpose");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  MutMap(out.data(), n, m) = ConstMap(x.data().data(), m, n).transpose();
  auto xn = x.node();
  return Tensor(make_output({n, m}, std::move(out), "transpose", {xn},
                            [xn, m, n](detail::Node& self) {
                              MutMap(xn->grad.data(), m, n) +=
                                  ConstMap(self.grad.data(), n, m).transpose();
                            }));
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (checked(a, "add")->shape != checked(b, "add")->shape) {
    fail(ErrorKind::dimension, "add: shapes differ (" + shape_string(a.shape()) +
                                   " vs " + shape_string(b.shape()) + ")");
  }
  std::vector<double> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node(), bn = b.node();
  return Tensor(make_output(a.shape(), std::move(out), "add", {an, bn},
                            [an, bn](detail::Node& self) {
                              for (auto* in : {an.get(), bn.get()}) {
                                if (!in->requires_grad) continue;
                                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                  in->grad[i] += self.grad[i];
                                }
                              }
                            }));
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_bias");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.size() != n) {
    fail(ErrorKind::dimension, "add_bias: bias " + shape_string(bias.shape()) +
                                   " does not match " + shape_string(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bv = bias.data();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  }
  auto xn = x.node(), bn = bias.node();
  return Tensor(make_output({m, n}, std::move(out), "add_bias", {xn, bn},
                            [xn, bn, m, n](detail::Node& self) {
                              if (xn->requires_grad) {
                                for (std::size_t i = 0; i < m * n; ++i) xn->grad[i] += self.grad[i];
                              }
                              if (bn->requires_grad) {
                                for (std::size_t r = 0; r < m; ++r) {
                                  for (std::size_t c = 0; c < n; ++c) {
                                    bn->grad[c] += self.grad[r * n + c];
                                  }
                                }
                              }
                            }));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (checked(a, "mul")->shape != checked(b, "mul")->shape) {
    fail(ErrorKind::dimension, "mul: shapes differ (" + shape_string(a.shape()) +
                                   " vs " + shape_string(b.shape()) + ")");
  }
  std::vector<double> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node(), bn = b.node();
  return Tensor(make_output(a.shape(), std::move(out), "mul", {an, bn},
                            [an, bn](detail::Node& self) {
                              const std::size_t n = self.grad.size();
                              if (an->requires_grad) {
                                for (std::size_t i = 0; i < n; ++i) an->grad[i] += self.grad[i] * bn->value[i];
                              }
                              if (bn->requires_grad) {
                                for (std::size_t i = 0; i < n; ++i) bn->grad[i] += self.grad[i] * an->value[i];
                              }
                            }));
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(checked(x, "scale")->value);
  for (double& v : out) v *= factor;
  auto xn = x.node();
  return Tensor(make_output(x.shape(), std::move(out), "scale", {xn},
                            [xn, factor](detail::Node& self) {
                              for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                xn->grad[i] += self.grad[i] * factor;
                              }
                            }));
}

Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto xv = checked(x, "gelu")->value;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  auto xn = x.node();
  return Tensor(make_output(x.shape(), std::move(out), "gelu", {xn},
                            [xn](detail::Node& self) {
                              for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                const double v = xn->value[i];
                                const double u = kC * (v + kA * v * v * v);
                                const double t = std::tanh(u);
                                const double du = kC * (1.0 + 3.0 * kA * v * v);
                                const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                                xn->grad[i] += self.grad[i] * d;
                              }
                            }));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.size() != n || bias.size() != n) {
    fail(ErrorKind::dimension, "layer_norm: gain/bias size does not match " +
                                   shape_string(x.shape()));
  }
  const auto xv = x.data(), gv = gain.data(), bv = bias.data();
  std::vector<double> out(m * n), xhat(m * n), inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xv.data() + r * n;
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += row[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mean) * inv_std[r];
      xhat[r * n + c] = h;
      out[r * n + c] = h * gv[c] + bv[c];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return Tensor(make_output(
      {m, n}, std::move(out), "layer_norm", {xn, gn, bn},
      [xn, gn, bn, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& g = self.grad;
        if (gn->requires_grad || bn->requires_grad) {
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
              if (gn->requires_grad) gn->grad[c] += g[r * n + c] * xhat[r * n + c];
              if (bn->requires_grad) bn->grad[c] += g[r * n + c];
            }
          }
        }
        if (!xn->requires_grad) return;
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < m; ++r) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t c = 0; c < n; ++c) {
            const double dh = g[r * n + c] * gn->value[c];
            s1 += dh;
            s2 += dh * xhat[r * n + c];
          }
          for (std::size_t c = 0; c < n; ++c) {
            const double dh = g[r * n + c] * gn->value[c];
            xn->grad[r * n + c] +=
                inv_std[r] * (dh - s1 * inv_n - xhat[r * n + c] * s2 * inv_n);
          }
        }
      }));
}

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  const auto xv = x.data();
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xv.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      out[r * n + c] = std::exp(row[c] - mx);
      z += out[r * n + c];
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= z;
  }
  auto xn = x.node();
  auto probs = std::make_shared<std::vector<double>>(out);
  return Tensor(make_output({m, n}, std::move(out), "softmax_rows", {xn},
                            [xn, probs, m, n](detail::Node& self) {
                              const auto& p = *probs;
                              for (std::size_t r = 0; r < m; ++r) {
                                double dot = 0.0;
                                for (std::size_t c = 0; c < n; ++c) dot += self.grad[r * n + c] * p[r * n + c];
                                for (std::size_t c = 0; c < n; ++c) {
                                  xn->grad[r * n + c] += p[r * n + c] * (self.grad[r * n + c] - dot);
                                }
                              }
                            }));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t t_len = logits.rows(), vocab = logits.cols();
  if (targets.size() != t_len) {
    fail(ErrorKind::dimension, "cross_entropy: " + std::to_string(targets.size()) +
                                   " targets for " + std::to_string(t_len) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      fail(ErrorKind::index, "cross_entropy: target id " + std::to_string(t) +
                                 " outside vocabulary of " + std::to_string(vocab));
    }
  }
  const auto lv = logits.data();
  auto probs = std::make_shared<std::vector<double>>(t_len * vocab);
  double total = 0.0;
  for (std::size_t r = 0; r < t_len; ++r) {
    const double* row = lv.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      const double e = std::exp(row[c] - mx);
      (*probs)[r * vocab + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < vocab; ++c) (*probs)[r * vocab + c] /= z;
    total += (mx + std::log(z)) - row[targets[r]];
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  auto ln = logits.node();
  return Tensor(make_output({1}, {total / static_cast<double>(t_len)}, "cross_entropy", {ln},
                            [ln, probs, tgt = std::move(tgt), t_len, vocab](detail::Node& self) {
                              const double g = self.grad[0] / static_cast<double>(t_len);
                              for (std::size_t r = 0; r < t_len; ++r) {
                                for (std::size_t c = 0; c < vocab; ++c) {
                                  ln->grad[r * vocab + c] += g * (*probs)[r * vocab + c];
                                }
                                ln->grad[r * vocab + static_cast<std::size_t>(tgt[r])] -= g;
                              }
                            }));
}

Tensor sum(const Tensor& x) {
  const auto xv = checked(x, "sum")->value;
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  auto xn = x.node();
  return Tensor(make_output({1}, {s}, "sum", {xn}, [xn](detail::Node& self) {
    for (double& g : xn->grad) g += self.grad[0];
  }));
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  if (ids.empty()) fail(ErrorKind::dimension, "embedding: empty id list");
  std::vector<double> out(ids.size() * d);
  const auto tv = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      fail(ErrorKind::index, "embedding: id " + std::to_string(ids[r]) +
                                 " outside table of " + std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  auto tn = table.node();
  return Tensor(make_output({ids.size(), d}, std::move(out), "embedding", {tn},
                            [tn, idv = std::move(idv), d](detail::Node& self) {
                              for (std::size_t r = 0; r < idv.size(); ++r) {
                                double* dst = tn->grad.data() + static_cast<std::size_t>(idv[r]) * d;
                                for (std::size_t c = 0; c < d; ++c) dst[c] += self.grad[r * d + c];
                              }
                            }));
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) fail(ErrorKind::dimension, "concat_rows: no parts");
  if (parts.size() == 1) return parts[0];
  const std::size_t d = parts[0].cols();
  std::size_t total = 0;
  std::vector<NodePtr> inputs;
  std::vector<std::size_t> counts;
  for (const auto& p : parts) {
    require_matrix(p, "concat_rows");
    if (p.cols() != d) {
      fail(ErrorKind::dimension, "concat_rows: column counts differ (" +
                                     std::to_string(p.cols()) + " vs " + std::to_string(d) + ")");
    }
    total += p.rows();
    counts.push_back(p.rows());
    inputs.push_back(p.node());
  }
  std::vector<double> out;
  out.reserve(total * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  auto ins = inputs;
  return Tensor(make_output_many({total, d}, std::move(out), "concat_rows", std::move(inputs),
                                 [ins = std::move(ins), d](detail::Node& self) {
                                   std::size_t offset = 0;
                                   for (const auto& in : ins) {
                                     const std::size_t n = in->value.size();
                                     if (in->requires_grad) {
                                       for (std::size_t i = 0; i < n; ++i) in->grad[i] += self.grad[offset + i];
                                     }
                                     offset += n;
                                   }
                                   (void)d;
                                 }));
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) fail(ErrorKind::dimension, "concat_cols: no parts");
  if (parts.size() == 1) return parts[0];
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  std::vector<NodePtr> inputs;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    if (p.rows() != m) fail(ErrorKind::dimension, "concat_cols: row counts differ");
    widths.push_back(p.cols());
    total += p.cols();
    inputs.push_back(p.node());
  }
  std::vector<double> out(m * total);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t r = 0; r < m; ++r) {
      std::copy_n(p.data().data() + r * w, w, out.data() + r * total + c0);
    }
    c0 += w;
  }
  auto ins = inputs;
  return Tensor(make_output_many({m, total}, std::move(out), "concat_cols", std::move(inputs),
                                 [ins = std::move(ins), widths, m, total](detail::Node& self) {
                                   std::size_t col = 0;
                                   for (std::size_t k = 0; k < ins.size(); ++k) {
                                     const std::size_t w = widths[k];
                                     if (ins[k]->requires_grad) {
                                       for (std::size_t r = 0; r < m; ++r) {
                                         for (std::size_t c = 0; c < w; ++c) {
                                           ins[k]->grad[r * w + c] += self.grad[r * total + col + c];
                                         }
                                       }
                                     }
                                     col += w;
                                   }
                                 }));
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_rows");
  const std::size_t d = x.cols();
  if (count == 0 || begin + count > x.rows()) {
    fail(ErrorKind::index, "slice_rows: [" + std::to_string(begin) + ", " +
                               std::to_string(begin + count) + ") outside " +
                               std::to_string(x.rows()) + " rows");
  }
  if (begin == 0 && count == x.rows()) return x;
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * d),
                          x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * d));
  auto xn = x.node();
  return Tensor(make_output({count, d}, std::move(out), "slice_rows", {xn},
                            [xn, begin, d](detail::Node& self) {
                              for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                xn->grad[begin * d + i] += self.grad[i];
                              }
                            }));
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (count == 0 || begin + count > n) fail(ErrorKind::index, "slice_cols: range outside tensor");
  std::vector<double> out(m * count);
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(x.data().data() + r * n + begin, count, out.data() + r * count);
  }
  auto xn = x.node();
  return Tensor(make_output({m, count}, std::move(out), "slice_cols", {xn},
                            [xn, begin, count, m, n](detail::Node& self) {
                              for (std::size_t r = 0; r < m; ++r) {
                                for (std::size_t c = 0; c < count; ++c) {
                                  xn->grad[r * n + begin + c] += self.grad[r * count + c];
                                }
                              }
                            }));
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix(x, "gather_rows");
  const std::size_t d = x.cols();
  if (rows.empty()) fail(ErrorKind::index, "gather_rows: empty row set");
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= x.rows()) {
      fail(ErrorKind::index, "gather_rows: row " + std::to_string(rows[i]) + " outside " +
                                 std::to_string(x.rows()) + " rows");
    }
    std::copy_n(x.data().data() + rows[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  auto xn = x.node();
  return Tensor(make_output({rows.size(), d}, std::move(out), "gather_rows", {xn},
                            [xn, idx = std::move(idx), d](detail::Node& self) {
                              for (std::size_t i = 0; i < idx.size(); ++i) {
                                for (std::size_t c = 0; c < d; ++c) {
                                  xn->grad[idx[i] * d + c] += self.grad[i * d + c];
                                }
                              }
                            }));
}

Tensor causal_attention(const Tensor& q, const Tensor& keys, const Tensor& values,
                        std::size_t n_heads, std::size_t prefix) {
  require_matrix(q, "causal_attention");
  require_matrix(keys, "causal_attention");
  require_matrix(values, "causal_attention");
  const std::size_t t_len = q.rows(), d = q.cols(), s_len = keys.rows();
  if (n_heads == 0 || d % n_heads != 0) {
    fail(ErrorKind::dimension, "causal_attention: width not divisible by head count");
  }
  if (keys.cols() != d || values.cols() != d || values.rows() != s_len ||
      s_len != prefix + t_len) {
    fail(ErrorKind::dimension, "causal_attention: q " + shape_string(q.shape()) + ", k " +
                                   shape_string(keys.shape()) + ", v " +
                                   shape_string(values.shape()) + ", prefix " +
                                   std::to_string(prefix));
  }
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const double* qv = q.data().data();
  const double* kv = keys.data().data();
  const double* vv = values.data().data();
  // probs[h][t][j] for j <= prefix + t, stored densely per (h, t) with stride s_len.
  auto probs = std::make_shared<std::vector<double>>(n_heads * t_len * s_len, 0.0);
  std::vector<double> out(t_len * d, 0.0);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t t = 0; t < t_len; ++t) {
      const std::size_t visible = prefix + t + 1;
      double* p = probs->data() + (h * t_len + t) * s_len;
      const double* qt = qv + t * d + off;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < visible; ++j) {
        const double* kj = kv + j * d + off;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qt[c] * kj[c];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < visible; ++j) {
        p[j] = std::exp(p[j] - mx);
        z += p[j];
      }
      double* ot = out.data() + t * d + off;
      for (std::size_t j = 0; j < visible; ++j) {
        p[j] /= z;
        const double* vj = vv + j * d + off;
        for (std::size_t c = 0; c < dh; ++c) ot[c] += p[j] * vj[c];
      }
    }
  }
  auto qn = q.node(), kn = keys.node(), vn = values.node();
  return Tensor(make_output(
      {t_len, d}, std::move(out), "causal_attention", {qn, kn, vn},
      [qn, kn, vn, probs, n_heads, prefix, t_len, s_len, d, dh, inv_sqrt](detail::Node& self) {
        std::vector<double> dp(s_len);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t t = 0; t < t_len; ++t) {
            const std::size_t visible = prefix + t + 1;
            const double* p = probs->data() + (h * t_len + t) * s_len;
            const double* go = self.grad.data() + t * d + off;
            double dot = 0.0;
            for (std::size_t j = 0; j < visible; ++j) {
              const double* vj = vn->value.data() + j * d + off;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
              dp[j] = s;
              dot += s * p[j];
              if (vn->requires_grad) {
                double* gv = vn->grad.data() + j * d + off;
                for (std::size_t c = 0; c < dh; ++c) gv[c] += p[j] * go[c];
              }
            }
            const double* qt = qn->value.data() + t * d + off;
            for (std::size_t j = 0; j < visible; ++j) {
              const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
              if (ds == 0.0) continue;
              if (qn->requires_grad) {
                const double* kj = kn->value.data() + j * d + off;
                double* gq = qn->grad.data() + t * d + off;
                for (std::size_t c = 0; c < dh; ++c) gq[c] += ds * kj[c];
              }
              if (kn->requires_grad) {
                double* gk = kn->grad.data() + j * d + off;
                for (std::size_t c = 0; c < dh; ++c) gk[c] += ds * qt[c];
              }
            }
          }
        }
      }));
}

}  // namespace ramp
