#include "mpt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mpt/errors.hpp"

namespace mpt {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : d_(std::make_shared<TensorData>()) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw DimensionError("tensor init: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    for (auto e : shape)
        if (e <= 0) throw DimensionError("tensor init: nonpositive extent in " + shape_str(shape));
    d_->shape = std::move(shape);
    d_->data = std::move(values);
    d_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(Shape{1}, {value}, requires_grad);
}

std::vector<double>& Tensor::grad() {
    d_->ensure_grad();
    return d_->grad;
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape()));
    return d_->data[0];
}

// ---------------------------------------------------------------------------

namespace {

int normalize_axis(int axis, std::size_t rank) {
    int a = axis < 0 ? axis + static_cast<int>(rank) : axis;
    if (a < 0 || a >= static_cast<int>(rank))
        throw DimensionError("axis " + std::to_string(axis) + " invalid for rank " +
                             std::to_string(rank));
    return a;
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    for (std::size_t i = 0; i < small.size(); ++i)
        if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    return true;
}

}  // namespace

Tensor Tape::make_output(Shape shape, std::vector<double> values,
                         std::initializer_list<const Tensor*> inputs) {
    bool rg = false;
    if (recording_)
        for (const Tensor* t : inputs)
            if (t->requires_grad()) rg = true;
    return Tensor(std::move(shape), std::move(values), rg);
}

// ---- matmul ---------------------------------------------------------------

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2)
        throw DimensionError("matmul needs rank >= 2: " + shape_str(sa) + " x " + shape_str(sb));
    const std::int64_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    const std::int64_t k2 = sb[sb.size() - 2], n = sb[sb.size() - 1];
    if (k != k2)
        throw DimensionError("matmul inner extents disagree: " + shape_str(sa) + " x " + shape_str(sb));

    const std::size_t nb = std::max(sa.size(), sb.size()) - 2;
    std::vector<std::int64_t> ba(nb, 1), bb(nb, 1), bo(nb, 1);
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) ba[nb - (sa.size() - 2) + i] = sa[i];
    for (std::size_t i = 0; i + 2 < sb.size(); ++i) bb[nb - (sb.size() - 2) + i] = sb[i];
    for (std::size_t i = 0; i < nb; ++i) {
        if (ba[i] != bb[i] && ba[i] != 1 && bb[i] != 1)
            throw DimensionError("matmul batch extents disagree: " + shape_str(sa) + " x " +
                                 shape_str(sb));
        bo[i] = std::max(ba[i], bb[i]);
    }
    std::int64_t batches = 1;
    for (auto e : bo) batches *= e;

    Shape so(bo.begin(), bo.end());
    so.push_back(m);
    so.push_back(n);

    // per-batch element offsets with broadcast (stride 0 on extent-1 dims)
    auto offsets = [&](const std::vector<std::int64_t>& bd, std::int64_t mat) {
        std::vector<std::int64_t> off(static_cast<std::size_t>(batches));
        for (std::int64_t idx = 0; idx < batches; ++idx) {
            std::int64_t rem = idx, o = 0, stride = mat;
            for (int d = static_cast<int>(nb) - 1; d >= 0; --d) {
                std::int64_t c = rem % bo[d];
                rem /= bo[d];
                if (bd[d] != 1) {
                    o += c * stride;
                    stride *= bd[d];
                }
            }
            off[static_cast<std::size_t>(idx)] = o;
        }
        return off;
    };
    auto aoff = offsets(ba, m * k);
    auto boff = offsets(bb, k * n);

    std::vector<double> out(static_cast<std::size_t>(batches * m * n), 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::int64_t bi = 0; bi < batches; ++bi) {
        const double* A = ad + aoff[static_cast<std::size_t>(bi)];
        const double* B = bd + boff[static_cast<std::size_t>(bi)];
        double* C = out.data() + bi * m * n;
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t p = 0; p < k; ++p) {
                const double av = A[i * k + p];
                if (av == 0.0) continue;
                const double* Bp = B + p * n;
                double* Ci = C + i * n;
                for (std::int64_t j = 0; j < n; ++j) Ci[j] += av * Bp[j];
            }
    }

    Tensor outt = make_output(std::move(so), std::move(out), {&a, &b});
    if (outt.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = outt.node();
        record([an, bn, on, aoff, boff, batches, m, k, n] {
            if (on->grad.empty()) return;
            const double* G = on->grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t bi = 0; bi < batches; ++bi) {
                    const double* Gi = G + bi * m * n;
                    const double* B = bn->data.data() + boff[static_cast<std::size_t>(bi)];
                    double* dA = an->grad.data() + aoff[static_cast<std::size_t>(bi)];
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t p = 0; p < k; ++p) {
                            double acc = 0.0;
                            const double* Gr = Gi + i * n;
                            const double* Bp = B + p * n;
                            for (std::int64_t j = 0; j < n; ++j) acc += Gr[j] * Bp[j];
                            dA[i * k + p] += acc;
                        }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t bi = 0; bi < batches; ++bi) {
                    const double* Gi = G + bi * m * n;
                    const double* A = an->data.data() + aoff[static_cast<std::size_t>(bi)];
                    double* dB = bn->grad.data() + boff[static_cast<std::size_t>(bi)];
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t p = 0; p < k; ++p) {
                            const double av = A[i * k + p];
                            if (av == 0.0) continue;
                            const double* Gr = Gi + i * n;
                            double* dBp = dB + p * n;
                            for (std::int64_t j = 0; j < n; ++j) dBp[j] += av * Gr[j];
                        }
                }
            }
        });
    }
    return outt;
}

// ---- softmax --------------------------------------------------------------

Tensor Tape::softmax(const Tensor& x, int axis) {
    const Shape& s = x.shape();
    const int ax = normalize_axis(axis, s.size());
    std::int64_t outer = 1, inner = 1, ext = s[static_cast<std::size_t>(ax)];
    for (int i = 0; i < ax; ++i) outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(ax) + 1; i < s.size(); ++i) inner *= s[i];

    std::vector<double> out(x.data().size());
    const double* xd = x.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * ext * inner + in;
            double mx = xd[base];
            for (std::int64_t e = 1; e < ext; ++e) mx = std::max(mx, xd[base + e * inner]);
            double z = 0.0;
            for (std::int64_t e = 0; e < ext; ++e) {
                double v = std::exp(xd[base + e * inner] - mx);
                out[static_cast<std::size_t>(base + e * inner)] = v;
                z += v;
            }
            for (std::int64_t e = 0; e < ext; ++e)
                out[static_cast<std::size_t>(base + e * inner)] /= z;
        }

    Tensor outt = make_output(s, std::move(out), {&x});
    if (outt.requires_grad()) {
        auto xn = x.node(), on = outt.node();
        record([xn, on, outer, inner, ext] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            const double* y = on->data.data();
            const double* g = on->grad.data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * ext * inner + in;
                    double dot = 0.0;
                    for (std::int64_t e = 0; e < ext; ++e) {
                        const std::int64_t i = base + e * inner;
                        dot += y[i] * g[i];
                    }
                    for (std::int64_t e = 0; e < ext; ++e) {
                        const std::int64_t i = base + e * inner;
                        xn->grad[static_cast<std::size_t>(i)] += y[i] * (g[i] - dot);
                    }
                }
        });
    }
    return outt;
}

// ---- layernorm ------------------------------------------------------------

Tensor Tape::layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, int axis,
                       double eps) {
    const Shape& s = x.shape();
    const int ax = normalize_axis(axis, s.size());
    const std::int64_t ext = s[static_cast<std::size_t>(ax)];
    if (ext < 1) throw DimensionError("layernorm axis extent < 1");
    if (gain.size() != ext || bias.size() != ext)
        throw DimensionError("layernorm gain/bias length " + std::to_string(gain.size()) + "/" +
                             std::to_string(bias.size()) + " vs axis extent " + std::to_string(ext));
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < ax; ++i) outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(ax) + 1; i < s.size(); ++i) inner *= s[i];

    std::vector<double> out(x.data().size());
    std::vector<double> inv_std(static_cast<std::size_t>(outer * inner));
    std::vector<double> xhat(x.data().size());
    const double* xd = x.data().data();
    const double* gd = gain.data().data();
    const double* bd = bias.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * ext * inner + in;
            double mu = 0.0;
            for (std::int64_t e = 0; e < ext; ++e) mu += xd[base + e * inner];
            mu /= static_cast<double>(ext);
            double var = 0.0;
            for (std::int64_t e = 0; e < ext; ++e) {
                double d = xd[base + e * inner] - mu;
                var += d * d;
            }
            var /= static_cast<double>(ext);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(o * inner + in)] = is;
            for (std::int64_t e = 0; e < ext; ++e) {
                const std::int64_t i = base + e * inner;
                const double h = (xd[i] - mu) * is;
                xhat[static_cast<std::size_t>(i)] = h;
                out[static_cast<std::size_t>(i)] = gd[e] * h + bd[e];
            }
        }

    Tensor outt = make_output(s, std::move(out), {&x, &gain, &bias});
    if (outt.requires_grad()) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = outt.node();
        record([xn, gn, bn, on, outer, inner, ext, inv_std = std::move(inv_std),
                xhat = std::move(xhat)] {
            if (on->grad.empty()) return;
            const double* g = on->grad.data();
            const double* gd = gn->data.data();
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * ext * inner + in;
                    const double is = inv_std[static_cast<std::size_t>(o * inner + in)];
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (std::int64_t e = 0; e < ext; ++e) {
                        const std::int64_t i = base + e * inner;
                        const double dh = g[i] * gd[e];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[static_cast<std::size_t>(i)];
                        if (gn->requires_grad)
                            gn->grad[static_cast<std::size_t>(e)] +=
                                g[i] * xhat[static_cast<std::size_t>(i)];
                        if (bn->requires_grad) bn->grad[static_cast<std::size_t>(e)] += g[i];
                    }
                    if (xn->requires_grad) {
                        const double ne = static_cast<double>(ext);
                        for (std::int64_t e = 0; e < ext; ++e) {
                            const std::int64_t i = base + e * inner;
                            const double dh = g[i] * gd[e];
                            const double h = xhat[static_cast<std::size_t>(i)];
                            xn->grad[static_cast<std::size_t>(i)] +=
                                is * (dh - sum_dh / ne - h * sum_dh_h / ne);
                        }
                    }
                }
        });
    }
    return outt;
}

// ---- elementwise ----------------------------------------------------------

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    if (!is_suffix(b.shape(), a.shape()))
        throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::int64_t nb = b.size();
    std::vector<double> out(a.data().size());
    for (std::int64_t i = 0; i < a.size(); ++i) out[static_cast<std::size_t>(i)] = a.data()[static_cast<std::size_t>(i)] + b.data()[static_cast<std::size_t>(i % nb)];
    Tensor outt = make_output(a.shape(), std::move(out), {&a, &b});
    if (outt.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = outt.node();
        record([an, bn, on, nb] {
            if (on->grad.empty()) return;
            const std::int64_t n = on->size();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) an->grad[static_cast<std::size_t>(i)] += on->grad[static_cast<std::size_t>(i)];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) bn->grad[static_cast<std::size_t>(i % nb)] += on->grad[static_cast<std::size_t>(i)];
            }
        });
    }
    return outt;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    if (!is_suffix(b.shape(), a.shape()))
        throw DimensionError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::int64_t nb = b.size();
    std::vector<double> out(a.data().size());
    for (std::int64_t i = 0; i < a.size(); ++i)
        out[static_cast<std::size_t>(i)] = a.data()[static_cast<std::size_t>(i)] * b.data()[static_cast<std::size_t>(i % nb)];
    Tensor outt = make_output(a.shape(), std::move(out), {&a, &b});
    if (outt.requires_grad()) {
        auto an = a.node(), bn = b.node(), on = outt.node();
        record([an, bn, on, nb] {
            if (on->grad.empty()) return;
            const std::int64_t n = on->size();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    an->grad[static_cast<std::size_t>(i)] +=
                        on->grad[static_cast<std::size_t>(i)] * bn->data[static_cast<std::size_t>(i % nb)];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i)
                    bn->grad[static_cast<std::size_t>(i % nb)] +=
                        on->grad[static_cast<std::size_t>(i)] * an->data[static_cast<std::size_t>(i)];
            }
        });
    }
    return outt;
}

Tensor Tape::relu(const Tensor& x) {
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    Tensor outt = make_output(x.shape(), std::move(out), {&x});
    if (outt.requires_grad()) {
        auto xn = x.node(), on = outt.node();
        record([xn, on] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->data.size(); ++i)
                if (xn->data[i] > 0.0) xn->grad[i] += on->grad[i];
        });
    }
    return outt;
}

Tensor Tape::scale(const Tensor& x, double c) {
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x.data()[i];
    Tensor outt = make_output(x.shape(), std::move(out), {&x});
    if (outt.requires_grad()) {
        auto xn = x.node(), on = outt.node();
        record([xn, on, c] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += c * on->grad[i];
        });
    }
    return outt;
}

// ---- embedding ------------------------------------------------------------

Tensor Tape::embed(const std::vector<int>& ids, const Tensor& table) {
    if (table.shape().size() != 2)
        throw DimensionError("embed table must be rank 2, got " + shape_str(table.shape()));
    const std::int64_t v = table.shape()[0], c = table.shape()[1];
    for (int id : ids)
        if (id < 0 || id >= v)
            throw VocabularyError("id " + std::to_string(id) + " outside vocabulary of size " +
                                  std::to_string(v));
    const std::int64_t l = static_cast<std::int64_t>(ids.size());
    std::vector<double> out(static_cast<std::size_t>(l * c));
    for (std::int64_t i = 0; i < l; ++i)
        std::copy_n(table.data().data() + static_cast<std::int64_t>(ids[static_cast<std::size_t>(i)]) * c,
                    c, out.data() + i * c);
    Tensor outt = make_output(Shape{l, c}, std::move(out), {&table});
    if (outt.requires_grad()) {
        auto tn = table.node(), on = outt.node();
        record([tn, on, ids, c] {
            if (on->grad.empty() || !tn->requires_grad) return;
            tn->ensure_grad();
            for (std::size_t i = 0; i < ids.size(); ++i) {
                double* dst = tn->grad.data() + static_cast<std::int64_t>(ids[i]) * c;
                const double* src = on->grad.data() + static_cast<std::int64_t>(i) * c;
                for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
            }
        });
    }
    return outt;
}

// ---- dropout --------------------------------------------------------------

Tensor Tape::dropout(const Tensor& x, double p, bool training, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0,1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    const double keep = 1.0 - p;
    std::vector<double> mask(x.data().size());
    for (auto& m : mask) m = rng.uniform() < p ? 0.0 : 1.0 / keep;
    std::vector<double> out(x.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
    Tensor outt = make_output(x.shape(), std::move(out), {&x});
    if (outt.requires_grad()) {
        auto xn = x.node(), on = outt.node();
        record([xn, on, mask = std::move(mask)] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < mask.size(); ++i) xn->grad[i] += on->grad[i] * mask[i];
        });
    }
    return outt;
}

// ---- layout ops -----------------------------------------------------------

Tensor Tape::transpose_last2(const Tensor& x) {
    const Shape& s = x.shape();
    if (s.size() < 2) throw DimensionError("transpose_last2 needs rank >= 2");
    const std::int64_t r = s[s.size() - 2], c = s[s.size() - 1];
    std::int64_t batches = 1;
    for (std::size_t i = 0; i + 2 < s.size(); ++i) batches *= s[i];
    Shape so = s;
    std::swap(so[so.size() - 2], so[so.size() - 1]);
    std::vector<double> out(x.data().size());
    for (std::int64_t b = 0; b < batches; ++b) {
        const double* src = x.data().data() + b * r * c;
        double* dst = out.data() + b * r * c;
        for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
    }
    Tensor outt = make_output(std::move(so), std::move(out), {&x});
    if (outt.requires_grad()) {
        auto xn = x.node(), on = outt.node();
        record([xn, on, batches, r, c] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::int64_t b = 0; b < batches; ++b) {
                const double* g = on->grad.data() + b * r * c;
                double* dx = xn->grad.data() + b * r * c;
                for (std::int64_t i = 0; i < r; ++i)
                    for (std::int64_t j = 0; j < c; ++j) dx[i * c + j] += g[j * r + i];
            }
        });
    }
    return outt;
}

Tensor Tape::reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor outt = make_output(std::move(shape), x.data(), {&x});
    if (outt.requires_grad()) {
        auto xn = x.node(), on = outt.node();
        record([xn, on] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
        });
    }
    return outt;
}

Tensor Tape::split_heads(const Tensor& x, int heads) {
    const Shape& s = x.shape();
    if (s.size() != 2) throw DimensionError("split_heads expects [L,d], got " + shape_str(s));
    const std::int64_t l = s[0], d = s[1];
    if (heads < 1 || d % heads != 0)
        throw DimensionError("d_model " + std::to_string(d) + " not divisible by " +
                             std::to_string(heads) + " heads");
    const std::int64_t dk = d / heads;
    std::vector<double> out(x.data().size());
    for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t i = 0; i < l; ++i)
            for (std::int64_t j = 0; j < dk; ++j)
                out[static_cast<std::size_t>((h * l + i) * dk + j)] =
                    x.data()[static_cast<std::size_t>(i * d + h * dk + j)];
    Tensor outt = make_output(Shape{heads, l, dk}, std::move(out), {&x});
    if (outt.requires_grad()) {
        auto xn = x.node(), on = outt.node();
        record([xn, on, heads, l, dk, d] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::int64_t h = 0; h < heads; ++h)
                for (std::int64_t i = 0; i < l; ++i)
                    for (std::int64_t j = 0; j < dk; ++j)
                        xn->grad[static_cast<std::size_t>(i * d + h * dk + j)] +=
                            on->grad[static_cast<std::size_t>((h * l + i) * dk + j)];
        });
    }
    return outt;
}

Tensor Tape::merge_heads(const Tensor& x) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw DimensionError("merge_heads expects [h,L,dk], got " + shape_str(s));
    const std::int64_t heads = s[0], l = s[1], dk = s[2], d = heads * dk;
    std::vector<double> out(x.data().size());
    for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t i = 0; i < l; ++i)
            for (std::int64_t j = 0; j < dk; ++j)
                out[static_cast<std::size_t>(i * d + h * dk + j)] =
                    x.data()[static_cast<std::size_t>((h * l + i) * dk + j)];
    Tensor outt = make_output(Shape{l, d}, std::move(out), {&x});
    if (outt.requires_grad()) {
        auto xn = x.node(), on = outt.node();
        record([xn, on, heads, l, dk, d] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (std::int64_t h = 0; h < heads; ++h)
                for (std::int64_t i = 0; i < l; ++i)
                    for (std::int64_t j = 0; j < dk; ++j)
                        xn->grad[static_cast<std::size_t>((h * l + i) * dk + j)] +=
                            on->grad[static_cast<std::size_t>(i * d + h * dk + j)];
        });
    }
    return outt;
}

Tensor Tape::row(const Tensor& m, int k) {
    const Shape& s = m.shape();
    if (s.size() != 2) throw DimensionError("row expects rank 2, got " + shape_str(s));
    if (k < 0 || k >= s[0]) throw DimensionError("row index " + std::to_string(k) + " out of range");
    const std::int64_t c = s[1];
    std::vector<double> out(m.data().begin() + k * c, m.data().begin() + (k + 1) * c);
    Tensor outt = make_output(Shape{c}, std::move(out), {&m});
    if (outt.requires_grad()) {
        auto mn = m.node(), on = outt.node();
        record([mn, on, k, c] {
            if (on->grad.empty() || !mn->requires_grad) return;
            mn->ensure_grad();
            for (std::int64_t j = 0; j < c; ++j)
                mn->grad[static_cast<std::size_t>(k * c + j)] += on->grad[static_cast<std::size_t>(j)];
        });
    }
    return outt;
}

Tensor Tape::weighted_sum(const Tensor& w, const std::vector<Tensor>& xs) {
    if (w.shape().size() != 1 || w.size() != static_cast<std::int64_t>(xs.size()))
        throw DimensionError("weighted_sum: " + std::to_string(xs.size()) + " terms vs weights " +
                             shape_str(w.shape()));
    if (xs.empty()) throw DimensionError("weighted_sum of zero terms");
    for (const auto& x : xs)
        if (x.shape() != xs[0].shape())
            throw DimensionError("weighted_sum term shape mismatch");
    std::vector<double> out(xs[0].data().size(), 0.0);
    for (std::size_t j = 0; j < xs.size(); ++j) {
        const double wj = w.data()[j];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += wj * xs[j].data()[i];
    }
    bool rg = recording_ && (w.requires_grad() ||
                             std::any_of(xs.begin(), xs.end(),
                                         [](const Tensor& t) { return t.requires_grad(); }));
    Tensor outt(xs[0].shape(), std::move(out), rg);
    if (rg) {
        auto wn = w.node();
        auto on = outt.node();
        std::vector<std::shared_ptr<TensorData>> xn;
        for (const auto& x : xs) xn.push_back(x.node());
        record([wn, on, xn = std::move(xn)] {
            if (on->grad.empty()) return;
            for (std::size_t j = 0; j < xn.size(); ++j) {
                if (xn[j]->requires_grad) {
                    xn[j]->ensure_grad();
                    const double wj = wn->data[j];
                    for (std::size_t i = 0; i < on->grad.size(); ++i)
                        xn[j]->grad[i] += wj * on->grad[i];
                }
                if (wn->requires_grad) {
                    wn->ensure_grad();
                    double acc = 0.0;
                    for (std::size_t i = 0; i < on->grad.size(); ++i)
                        acc += on->grad[i] * xn[j]->data[i];
                    wn->grad[j] += acc;
                }
            }
        });
    }
    return outt;
}

// ---- reductions -----------------------------------------------------------

Tensor Tape::sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor outt = make_output(Shape{1}, {s}, {&x});
    if (outt.requires_grad()) {
        auto xn = x.node(), on = outt.node();
        record([xn, on] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            for (auto& g : xn->grad) g += on->grad[0];
        });
    }
    return outt;
}

Tensor Tape::mean(const Tensor& x) {
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// ---- loss -----------------------------------------------------------------

Tensor Tape::cross_entropy_smoothed(const Tensor& logits, const std::vector<int>& targets,
                                    double smoothing, int pad_id) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw DimensionError("cross entropy expects [L,V] logits, got " + shape_str(s));
    const std::int64_t l = s[0], v = s[1];
    if (static_cast<std::int64_t>(targets.size()) != l)
        throw DimensionError("targets length " + std::to_string(targets.size()) + " vs L " +
                             std::to_string(l));
    if (smoothing < 0.0 || smoothing >= 1.0)
        throw ConfigError("label smoothing must be in [0,1)");
    std::int64_t n_valid = 0;
    for (int t : targets) {
        if (t == pad_id) continue;
        if (t < 0 || t >= v)
            throw VocabularyError("target id " + std::to_string(t) + " outside vocabulary of size " +
                                  std::to_string(v));
        ++n_valid;
    }
    if (n_valid == 0) throw ContractError("cross entropy on all-pad target");

    const double off = v > 1 ? smoothing / static_cast<double>(v - 1) : 0.0;
    const double on_mass = 1.0 - smoothing;
    const double* x = logits.data().data();
    std::vector<double> probs(logits.data().size(), 0.0);  // kept for backward
    double loss = 0.0;
    for (std::int64_t i = 0; i < l; ++i) {
        if (targets[static_cast<std::size_t>(i)] == pad_id) continue;
        const double* xi = x + i * v;
        double mx = xi[0];
        for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < v; ++j) z += std::exp(xi[j] - mx);
        const double lse = mx + std::log(z);
        double qdotx = 0.0;
        for (std::int64_t j = 0; j < v; ++j) {
            const double q = j == targets[static_cast<std::size_t>(i)] ? on_mass : off;
            qdotx += q * xi[j];
            probs[static_cast<std::size_t>(i * v + j)] = std::exp(xi[j] - lse);
        }
        loss += lse - qdotx;
    }
    loss /= static_cast<double>(n_valid);

    Tensor outt = make_output(Shape{1}, {loss}, {&logits});
    if (outt.requires_grad()) {
        auto xn = logits.node(), on = outt.node();
        record([xn, on, targets, pad_id, on_mass, off, n_valid, l, v, probs = std::move(probs)] {
            if (on->grad.empty() || !xn->requires_grad) return;
            xn->ensure_grad();
            const double g = on->grad[0] / static_cast<double>(n_valid);
            for (std::int64_t i = 0; i < l; ++i) {
                if (targets[static_cast<std::size_t>(i)] == pad_id) continue;
                for (std::int64_t j = 0; j < v; ++j) {
                    const double q = j == targets[static_cast<std::size_t>(i)] ? on_mass : off;
                    xn->grad[static_cast<std::size_t>(i * v + j)] +=
                        g * (probs[static_cast<std::size_t>(i * v + j)] - q);
                }
            }
        });
    }
    return outt;
}

// ---- backward -------------------------------------------------------------

void Tape::backward(const Tensor& loss) {
    if (!recording_) throw ContractError("backward on a non-recording tape");
    if (loss.size() != 1) throw ContractError("backward requires a scalar loss");
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

}  // namespace mpt
