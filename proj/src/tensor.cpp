#include "mvtn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mvtn {

namespace {

void check(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

std::string two_shapes(const Tensor& a, const Tensor& b) {
    return shape_str(a.shape) + " vs " + shape_str(b.shape);
}

void axpy(std::vector<double>& acc, const std::vector<double>& inc) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += inc[i];
}

// Merges all leading axes into one: [a x b x ... x d] -> [N x d].
Tensor flatten_to_2d(const Tensor& x) {
    Tensor out = x;
    int d = x.shape.back();
    out.shape = {static_cast<int>(x.numel() / d), d};
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
    for (int d : shape)
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
}

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
    Tensor t(std::move(shape));
    if (static_cast<std::int64_t>(values.size()) != t.numel())
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not fill shape " + shape_str(t.shape));
    t.data = std::move(values);
    return t;
}

Tensor Tensor::uniform(std::vector<int> shape, double lo, double hi, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.data) v = dist(rng);
    return t;
}

Tensor Tensor::normal(std::vector<int> shape, double mean, double sigma, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(mean, sigma);
    for (double& v : t.data) v = dist(rng);
    return t;
}

std::int64_t Tensor::numel() const { return numel_of(shape); }

double& Tensor::at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
double Tensor::at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
double& Tensor::at(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
}
double Tensor::at(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
}

std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

bool all_finite(const Tensor& t) {
    return std::all_of(t.data.begin(), t.data.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(b.rank() == 2, "matmul rhs must be rank 2, got " + shape_str(b.shape));
    check(a.rank() == 2 || a.rank() == 3,
          "matmul lhs must be rank 2 or 3, got " + shape_str(a.shape));
    int k = a.shape.back();
    check(k == b.shape[0], "matmul inner dims disagree: " + two_shapes(a, b));
    int n = b.shape[1];
    int batch = a.rank() == 3 ? a.shape[0] : 1;
    int m = a.rank() == 3 ? a.shape[1] : a.shape[0];

    Tensor c(a.rank() == 3 ? std::vector<int>{batch, m, n} : std::vector<int>{m, n});
    for (int bi = 0; bi < batch; ++bi) {
        const double* ap = a.data.data() + static_cast<std::size_t>(bi) * m * k;
        double* cp = c.data.data() + static_cast<std::size_t>(bi) * m * n;
        for (int i = 0; i < m; ++i) {
            for (int p = 0; p < k; ++p) {
                double av = ap[static_cast<std::size_t>(i) * k + p];
                const double* bp = b.data.data() + static_cast<std::size_t>(p) * n;
                double* cr = cp + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) cr[j] += av * bp[j];
            }
        }
    }
    return c;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    check(a.rank() == 3 && b.rank() == 3, "bmm wants rank-3 operands: " + two_shapes(a, b));
    check(a.shape[0] == b.shape[0] && a.shape[2] == b.shape[1],
          "bmm shapes disagree: " + two_shapes(a, b));
    int batch = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[2];
    Tensor c({batch, m, n});
    for (int bi = 0; bi < batch; ++bi) {
        const double* ap = a.data.data() + static_cast<std::size_t>(bi) * m * k;
        const double* bp = b.data.data() + static_cast<std::size_t>(bi) * k * n;
        double* cp = c.data.data() + static_cast<std::size_t>(bi) * m * n;
        for (int i = 0; i < m; ++i) {
            for (int p = 0; p < k; ++p) {
                double av = ap[static_cast<std::size_t>(i) * k + p];
                const double* br = bp + static_cast<std::size_t>(p) * n;
                double* cr = cp + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) cr[j] += av * br[j];
            }
        }
    }
    return c;
}

Tensor transpose_last2(const Tensor& x) {
    check(x.rank() == 2 || x.rank() == 3, "transpose wants rank 2 or 3: " + shape_str(x.shape));
    int batch = x.rank() == 3 ? x.shape[0] : 1;
    int m = x.rank() == 3 ? x.shape[1] : x.shape[0];
    int n = x.shape.back();
    Tensor out(x.rank() == 3 ? std::vector<int>{batch, n, m} : std::vector<int>{n, m});
    for (int bi = 0; bi < batch; ++bi) {
        const double* xp = x.data.data() + static_cast<std::size_t>(bi) * m * n;
        double* op = out.data.data() + static_cast<std::size_t>(bi) * m * n;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                op[static_cast<std::size_t>(j) * m + i] = xp[static_cast<std::size_t>(i) * n + j];
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    check(a.shape == b.shape, "add shapes disagree: " + two_shapes(a, b));
    Tensor c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
    return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape == b.shape, "mul shapes disagree: " + two_shapes(a, b));
    Tensor c = a;
    for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] *= b.data[i];
    return c;
}

Tensor scale(const Tensor& x, double c) {
    Tensor out = x;
    for (double& v : out.data) v *= c;
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    check(bias.rank() == 1 && bias.shape[0] == x.shape.back(),
          "bias width disagrees: " + two_shapes(x, bias));
    Tensor out = x;
    int d = bias.shape[0];
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bias.data[i % d];
    return out;
}

Tensor add_rows(const Tensor& x, const Tensor& rows) {
    check(x.rank() == 3 && rows.rank() == 2 && x.shape[1] == rows.shape[0] &&
              x.shape[2] == rows.shape[1],
          "row-broadcast add shapes disagree: " + two_shapes(x, rows));
    Tensor out = x;
    std::size_t plane = rows.data.size();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += rows.data[i % plane];
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return out;
}

Tensor softmax(const Tensor& x, int axis) {
    check(axis >= 0 && axis < x.rank(),
          "softmax axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape));
    int n = x.shape[static_cast<std::size_t>(axis)];
    std::int64_t inner = 1, outer = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.shape[static_cast<std::size_t>(i)];
    for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<std::size_t>(i)];

    Tensor out = x;
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            std::size_t base = static_cast<std::size_t>(o * n * inner + in);
            std::size_t stride = static_cast<std::size_t>(inner);
            double mx = out.data[base];
            for (int i = 1; i < n; ++i) mx = std::max(mx, out.data[base + i * stride]);
            double sum = 0.0;
            for (int i = 0; i < n; ++i) {
                double e = std::exp(out.data[base + i * stride] - mx);
                out.data[base + i * stride] = e;
                sum += e;
            }
            for (int i = 0; i < n; ++i) out.data[base + i * stride] /= sum;
        }
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    int d = x.shape.back();
    check(gain.rank() == 1 && gain.shape[0] == d, "layer_norm gain width disagrees: " + two_shapes(x, gain));
    check(bias.rank() == 1 && bias.shape[0] == d, "layer_norm bias width disagrees: " + two_shapes(x, bias));
    Tensor out = x;
    std::int64_t rows = x.numel() / d;
    for (std::int64_t r = 0; r < rows; ++r) {
        double* row = out.data.data() + static_cast<std::size_t>(r) * d;
        double mean = 0.0;
        for (int i = 0; i < d; ++i) mean += row[i];
        mean /= d;
        double var = 0.0;
        for (int i = 0; i < d; ++i) var += (row[i] - mean) * (row[i] - mean);
        var /= d;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int i = 0; i < d; ++i) row[i] = (row[i] - mean) * inv * gain.data[i] + bias.data[i];
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    check(w.rank() == 2, "linear weight must be rank 2, got " + shape_str(w.shape));
    check(x.shape.back() == w.shape[0], "linear input width disagrees: " + two_shapes(x, w));
    Tensor flat = flatten_to_2d(x);
    Tensor out = add_bias(matmul(flat, w), b);
    out.shape = x.shape;
    out.shape.back() = w.shape[1];
    return out;
}

double cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    check(logits.rank() == 2, "cross_entropy wants rank-2 logits, got " + shape_str(logits.shape));
    int batch = logits.shape[0], n = logits.shape[1];
    if (static_cast<int>(targets.size()) != batch)
        throw ShapeError("cross_entropy target count " + std::to_string(targets.size()) +
                         " vs batch " + std::to_string(batch));
    for (int t : targets)
        if (t < 0 || t >= n)
            throw IndexError("cross_entropy target " + std::to_string(t) + " out of range [0," +
                             std::to_string(n) + ")");
    Tensor probs = softmax(logits, 1);
    double loss = 0.0;
    for (int bi = 0; bi < batch; ++bi)
        loss -= std::log(probs.at(bi, targets[static_cast<std::size_t>(bi)]));
    return loss / batch;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Var Tape::emplace(Tensor value, std::function<void(Tape&)> back) {
    nodes_.push_back({std::move(value), std::move(back)});
    return Var{static_cast<int>(nodes_.size()) - 1};
}

std::vector<double>& Tape::adj(Var v) {
    auto& a = adjoints_[static_cast<std::size_t>(v.id)];
    if (a.empty()) a.assign(val(v).data.size(), 0.0);
    return a;
}

Var Tape::input(const Tensor& t) { return emplace(t); }

Var Tape::constant(const Tensor& t) {
    Tensor c = t;
    c.requires_grad = false;
    return emplace(std::move(c));
}

const Tensor& Tape::value(Var v) const {
    if (!v.valid() || v.id >= size()) throw ContractError("Var does not belong to this tape");
    return nodes_[static_cast<std::size_t>(v.id)].value;
}

Var Tape::matmul(Var a, Var b) {
    Tensor c = mvtn::matmul(val(a), val(b));
    macs_ += val(a).numel() * val(b).shape[1];
    return emplace(std::move(c), [a, b, out = Var{size()}](Tape& t) {
        const Tensor& A = t.val(a);
        const Tensor& B = t.val(b);
        Tensor dC = A.rank() == 3 ? Tensor({A.shape[0], A.shape[1], B.shape[1]})
                                  : Tensor({A.shape[0], B.shape[1]});
        dC.data = t.adj(out);
        axpy(t.adj(a), mvtn::matmul(dC, mvtn::transpose_last2(B)).data);
        axpy(t.adj(b), mvtn::matmul(mvtn::transpose_last2(flatten_to_2d(A)), flatten_to_2d(dC)).data);
    });
}

Var Tape::bmm(Var a, Var b) {
    Tensor c = mvtn::bmm(val(a), val(b));
    macs_ += val(a).numel() * val(b).shape[2];
    return emplace(std::move(c), [a, b, out = Var{size()}](Tape& t) {
        const Tensor& A = t.val(a);
        const Tensor& B = t.val(b);
        Tensor dC({A.shape[0], A.shape[1], B.shape[2]});
        dC.data = t.adj(out);
        axpy(t.adj(a), mvtn::bmm(dC, mvtn::transpose_last2(B)).data);
        axpy(t.adj(b), mvtn::bmm(mvtn::transpose_last2(A), dC).data);
    });
}

Var Tape::transpose_last2(Var x) {
    Tensor c = mvtn::transpose_last2(val(x));
    return emplace(std::move(c), [x, out = Var{size()}](Tape& t) {
        Tensor dC = t.val(out);
        dC.data = t.adj(out);
        axpy(t.adj(x), mvtn::transpose_last2(dC).data);
    });
}

Var Tape::add(Var a, Var b) {
    Tensor c = mvtn::add(val(a), val(b));
    return emplace(std::move(c), [a, b, out = Var{size()}](Tape& t) {
        axpy(t.adj(a), t.adj(out));
        axpy(t.adj(b), t.adj(out));
    });
}

Var Tape::mul(Var a, Var b) {
    Tensor c = mvtn::mul(val(a), val(b));
    return emplace(std::move(c), [a, b, out = Var{size()}](Tape& t) {
        const auto& d = t.adj(out);
        auto& da = t.adj(a);
        auto& db = t.adj(b);
        const auto& A = t.val(a).data;
        const auto& B = t.val(b).data;
        for (std::size_t i = 0; i < d.size(); ++i) {
            da[i] += d[i] * B[i];
            db[i] += d[i] * A[i];
        }
    });
}

Var Tape::scale(Var x, double c) {
    Tensor out = mvtn::scale(val(x), c);
    return emplace(std::move(out), [x, c, out = Var{size()}](Tape& t) {
        const auto& d = t.adj(out);
        auto& dx = t.adj(x);
        for (std::size_t i = 0; i < d.size(); ++i) dx[i] += c * d[i];
    });
}

Var Tape::add_bias(Var x, Var bias) {
    Tensor c = mvtn::add_bias(val(x), val(bias));
    return emplace(std::move(c), [x, bias, out = Var{size()}](Tape& t) {
        const auto& d = t.adj(out);
        axpy(t.adj(x), d);
        auto& db = t.adj(bias);
        std::size_t w = db.size();
        for (std::size_t i = 0; i < d.size(); ++i) db[i % w] += d[i];
    });
}

Var Tape::add_rows(Var x, Var rows) {
    Tensor c = mvtn::add_rows(val(x), val(rows));
    return emplace(std::move(c), [x, rows, out = Var{size()}](Tape& t) {
        const auto& d = t.adj(out);
        axpy(t.adj(x), d);
        auto& dr = t.adj(rows);
        std::size_t plane = dr.size();
        for (std::size_t i = 0; i < d.size(); ++i) dr[i % plane] += d[i];
    });
}

Var Tape::add_const_rows(Var x, const Tensor& rows) {
    Tensor c = mvtn::add_rows(val(x), rows);
    return emplace(std::move(c), [x, out = Var{size()}](Tape& t) { axpy(t.adj(x), t.adj(out)); });
}

Var Tape::relu(Var x) {
    Tensor c = mvtn::relu(val(x));
    return emplace(std::move(c), [x, out = Var{size()}](Tape& t) {
        const auto& d = t.adj(out);
        const auto& xin = t.val(x).data;
        auto& dx = t.adj(x);
        for (std::size_t i = 0; i < d.size(); ++i)
            if (xin[i] > 0.0) dx[i] += d[i];
    });
}

Var Tape::softmax(Var x, int axis) {
    Tensor y = mvtn::softmax(val(x), axis);
    return emplace(std::move(y), [x, axis, out = Var{size()}](Tape& t) {
        const Tensor& Y = t.val(out);
        const auto& dY = t.adj(out);
        auto& dX = t.adj(x);
        int n = Y.shape[static_cast<std::size_t>(axis)];
        std::int64_t inner = 1, outer = 1;
        for (int i = axis + 1; i < Y.rank(); ++i) inner *= Y.shape[static_cast<std::size_t>(i)];
        for (int i = 0; i < axis; ++i) outer *= Y.shape[static_cast<std::size_t>(i)];
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                std::size_t base = static_cast<std::size_t>(o * n * inner + in);
                std::size_t stride = static_cast<std::size_t>(inner);
                double dot = 0.0;
                for (int i = 0; i < n; ++i)
                    dot += dY[base + i * stride] * Y.data[base + i * stride];
                for (int i = 0; i < n; ++i)
                    dX[base + i * stride] +=
                        Y.data[base + i * stride] * (dY[base + i * stride] - dot);
            }
        }
    });
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
    Tensor y = mvtn::layer_norm(val(x), val(gain), val(bias), eps);
    return emplace(std::move(y), [x, gain, bias, eps, out = Var{size()}](Tape& t) {
        const Tensor& X = t.val(x);
        const Tensor& G = t.val(gain);
        const auto& dOut = t.adj(out);
        auto& dX = t.adj(x);
        auto& dG = t.adj(gain);
        auto& dB = t.adj(bias);
        int d = X.shape.back();
        std::int64_t rows = X.numel() / d;
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* xr = X.data.data() + static_cast<std::size_t>(r) * d;
            const double* dr = dOut.data() + static_cast<std::size_t>(r) * d;
            double mean = 0.0;
            for (int i = 0; i < d; ++i) mean += xr[i];
            mean /= d;
            double var = 0.0;
            for (int i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
            var /= d;
            double inv = 1.0 / std::sqrt(var + eps);
            // dyhat = g * dout; dx = (dyhat - mean(dyhat) - yhat*mean(dyhat*yhat)) / sigma
            double m1 = 0.0, m2 = 0.0;
            for (int i = 0; i < d; ++i) {
                double yhat = (xr[i] - mean) * inv;
                double dyhat = G.data[static_cast<std::size_t>(i)] * dr[i];
                m1 += dyhat;
                m2 += dyhat * yhat;
                dG[static_cast<std::size_t>(i)] += dr[i] * yhat;
                dB[static_cast<std::size_t>(i)] += dr[i];
            }
            m1 /= d;
            m2 /= d;
            double* dxr = dX.data() + static_cast<std::size_t>(r) * d;
            for (int i = 0; i < d; ++i) {
                double yhat = (xr[i] - mean) * inv;
                double dyhat = G.data[static_cast<std::size_t>(i)] * dr[i];
                dxr[i] += (dyhat - m1 - yhat * m2) * inv;
            }
        }
    });
}

Var Tape::linear(Var x, Var w, Var b) {
    const Tensor& X = val(x);
    const Tensor& W = val(w);
    if (W.rank() != 2 || X.shape.back() != W.shape[0])
        throw ShapeError("linear input width disagrees: " + two_shapes(X, W));
    std::vector<int> out_shape = X.shape;
    out_shape.back() = W.shape[1];
    int d = X.shape.back();
    Var flat = X.rank() == 2 ? x : reshape(x, {static_cast<int>(X.numel() / d), d});
    Var y = add_bias(matmul(flat, w), b);
    return val(y).shape == out_shape ? y : reshape(y, out_shape);
}

Var Tape::cross_entropy(Var logits, const std::vector<int>& targets) {
    const Tensor& L = val(logits);
    // validates shape/targets on the same path as the kernel
    double loss = mvtn::cross_entropy(L, targets);
    Tensor probs = mvtn::softmax(L, 1);
    Tensor out = Tensor::from({1}, {loss});
    return emplace(std::move(out),
                   [logits, targets, probs = std::move(probs), out = Var{size()}](Tape& t) {
                       double d = t.adj(out)[0];
                       auto& dL = t.adj(logits);
                       int batch = probs.shape[0], n = probs.shape[1];
                       for (int bi = 0; bi < batch; ++bi) {
                           for (int j = 0; j < n; ++j) {
                               double onehot = j == targets[static_cast<std::size_t>(bi)] ? 1.0 : 0.0;
                               dL[static_cast<std::size_t>(bi) * n + j] +=
                                   d * (probs.at(bi, j) - onehot) / batch;
                           }
                       }
                   });
}

Var Tape::sum(Var x) {
    double s = std::accumulate(val(x).data.begin(), val(x).data.end(), 0.0);
    return emplace(Tensor::from({1}, {s}), [x, out = Var{size()}](Tape& t) {
        double d = t.adj(out)[0];
        auto& dx = t.adj(x);
        for (double& v : dx) v += d;
    });
}

Var Tape::reshape(Var x, std::vector<int> shape) {
    const Tensor& X = val(x);
    if (numel_of(shape) != X.numel())
        throw ShapeError("reshape " + shape_str(X.shape) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor out = X;
    out.shape = std::move(shape);
    return emplace(std::move(out), [x, out = Var{size()}](Tape& t) { axpy(t.adj(x), t.adj(out)); });
}

Var Tape::split_heads(Var x, int heads) {
    const Tensor& X = val(x);
    if (X.rank() != 3) throw ShapeError("split_heads wants rank 3, got " + shape_str(X.shape));
    int B = X.shape[0], L = X.shape[1], d = X.shape[2];
    if (heads <= 0 || d % heads != 0)
        throw ConfigError("attention dim " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    int dh = d / heads;
    Tensor out({B * heads, L, dh});
    for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l)
            for (int h = 0; h < heads; ++h)
                for (int i = 0; i < dh; ++i)
                    out.at(b * heads + h, l, i) = X.at(b, l, h * dh + i);
    return emplace(std::move(out), [x, heads, B, L, dh, out = Var{size()}](Tape& t) {
        const auto& d = t.adj(out);
        auto& dx = t.adj(x);
        int width = heads * dh;
        for (int b = 0; b < B; ++b)
            for (int l = 0; l < L; ++l)
                for (int h = 0; h < heads; ++h)
                    for (int i = 0; i < dh; ++i)
                        dx[(static_cast<std::size_t>(b) * L + l) * width + h * dh + i] +=
                            d[(static_cast<std::size_t>(b * heads + h) * L + l) * dh + i];
    });
}

Var Tape::merge_heads(Var x, int heads) {
    const Tensor& X = val(x);
    if (X.rank() != 3 || X.shape[0] % heads != 0)
        throw ShapeError("merge_heads wants rank 3 with batch divisible by heads, got " +
                         shape_str(X.shape));
    int B = X.shape[0] / heads, L = X.shape[1], dh = X.shape[2];
    Tensor out({B, L, heads * dh});
    for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l)
            for (int h = 0; h < heads; ++h)
                for (int i = 0; i < dh; ++i)
                    out.at(b, l, h * dh + i) = X.at(b * heads + h, l, i);
    return emplace(std::move(out), [x, heads, B, L, dh, out = Var{size()}](Tape& t) {
        const auto& d = t.adj(out);
        auto& dx = t.adj(x);
        int width = heads * dh;
        for (int b = 0; b < B; ++b)
            for (int l = 0; l < L; ++l)
                for (int h = 0; h < heads; ++h)
                    for (int i = 0; i < dh; ++i)
                        dx[(static_cast<std::size_t>(b * heads + h) * L + l) * dh + i] +=
                            d[(static_cast<std::size_t>(b) * L + l) * width + h * dh + i];
    });
}

Var Tape::concat_token(Var token, Var x) {
    const Tensor& Tok = val(token);
    const Tensor& X = val(x);
    if (Tok.rank() != 1 || X.rank() != 3 || Tok.shape[0] != X.shape[2])
        throw ShapeError("concat_token shapes disagree: " + two_shapes(Tok, X));
    int B = X.shape[0], T = X.shape[1], d = X.shape[2];
    Tensor out({B, T + 1, d});
    for (int b = 0; b < B; ++b) {
        for (int i = 0; i < d; ++i) out.at(b, 0, i) = Tok.data[static_cast<std::size_t>(i)];
        for (int t = 0; t < T; ++t)
            for (int i = 0; i < d; ++i) out.at(b, t + 1, i) = X.at(b, t, i);
    }
    return emplace(std::move(out), [token, x, B, T, d, out = Var{size()}](Tape& t) {
        const auto& dOut = t.adj(out);
        auto& dTok = t.adj(token);
        auto& dX = t.adj(x);
        for (int b = 0; b < B; ++b) {
            std::size_t base = static_cast<std::size_t>(b) * (T + 1) * d;
            for (int i = 0; i < d; ++i) dTok[static_cast<std::size_t>(i)] += dOut[base + i];
            for (int tt = 0; tt < T; ++tt)
                for (int i = 0; i < d; ++i)
                    dX[(static_cast<std::size_t>(b) * T + tt) * d + i] +=
                        dOut[base + static_cast<std::size_t>(tt + 1) * d + i];
        }
    });
}

Var Tape::select_token(Var x, int pos) {
    const Tensor& X = val(x);
    if (X.rank() != 3) throw ShapeError("select_token wants rank 3, got " + shape_str(X.shape));
    if (pos < 0 || pos >= X.shape[1])
        throw IndexError("token position " + std::to_string(pos) + " out of range [0," +
                         std::to_string(X.shape[1]) + ")");
    int B = X.shape[0], L = X.shape[1], d = X.shape[2];
    Tensor out({B, d});
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < d; ++i) out.at(b, i) = X.at(b, pos, i);
    return emplace(std::move(out), [x, pos, B, L, d, out = Var{size()}](Tape& t) {
        const auto& dOut = t.adj(out);
        auto& dX = t.adj(x);
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < d; ++i)
                dX[(static_cast<std::size_t>(b) * L + pos) * d + i] +=
                    dOut[static_cast<std::size_t>(b) * d + i];
    });
}

Var Tape::mean_tokens(Var x) {
    const Tensor& X = val(x);
    if (X.rank() != 3) throw ShapeError("mean_tokens wants rank 3, got " + shape_str(X.shape));
    int B = X.shape[0], L = X.shape[1], d = X.shape[2];
    Tensor out({B, d});
    for (int b = 0; b < B; ++b)
        for (int l = 0; l < L; ++l)
            for (int i = 0; i < d; ++i) out.at(b, i) += X.at(b, l, i) / L;
    return emplace(std::move(out), [x, B, L, d, out = Var{size()}](Tape& t) {
        const auto& dOut = t.adj(out);
        auto& dX = t.adj(x);
        for (int b = 0; b < B; ++b)
            for (int l = 0; l < L; ++l)
                for (int i = 0; i < d; ++i)
                    dX[(static_cast<std::size_t>(b) * L + l) * d + i] +=
                        dOut[static_cast<std::size_t>(b) * d + i] / L;
    });
}

Var Tape::dropout(Var x, double rate, std::mt19937_64& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ConfigError("dropout rate " + std::to_string(rate) + " outside [0,1)");
    if (rate == 0.0) return x;
    const Tensor& X = val(x);
    std::vector<double> mask(X.data.size());
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    double keep = 1.0 - rate;
    for (double& m : mask) m = dist(rng) < keep ? 1.0 / keep : 0.0;
    Tensor out = X;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mask[i];
    return emplace(std::move(out), [x, mask = std::move(mask), out = Var{size()}](Tape& t) {
        const auto& d = t.adj(out);
        auto& dx = t.adj(x);
        for (std::size_t i = 0; i < d.size(); ++i) dx[i] += d[i] * mask[i];
    });
}

void Tape::backward(Var loss) {
    if (!loss.valid() || loss.id >= size()) throw ContractError("loss Var does not belong to this tape");
    if (val(loss).numel() != 1)
        throw ContractError("backward wants a scalar loss, got " + shape_str(val(loss).shape));
    if (ran_backward_) throw ContractError("tape already ran backward; tapes are single-use");
    ran_backward_ = true;

    adjoints_.assign(nodes_.size(), {});
    adj(loss)[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        if (adjoints_[static_cast<std::size_t>(i)].empty()) continue;  // not reachable from loss
        if (nodes_[static_cast<std::size_t>(i)].back) nodes_[static_cast<std::size_t>(i)].back(*this);
    }
    // leaves untouched by the sweep read back as zero gradients
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (adjoints_[i].empty()) adjoints_[i].assign(nodes_[i].value.data.size(), 0.0);
}

const std::vector<double>& Tape::grad(Var v) const {
    if (!ran_backward_) throw ContractError("grad() before backward()");
    if (!v.valid() || v.id >= size()) throw ContractError("Var does not belong to this tape");
    return adjoints_[static_cast<std::size_t>(v.id)];
}

void Tape::write_grad(Var v, Tensor& leaf) const {
    const auto& g = grad(v);
    if (g.size() != leaf.data.size())
        throw ContractError("grad size does not match leaf tensor");
    leaf.grad = g;
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps) {
    Tape tape;
    Var vx = tape.input(x);
    Var loss = f(tape, vx);
    if (tape.value(loss).numel() != 1) throw ContractError("grad_check: f must return a scalar");
    tape.backward(loss);
    std::vector<double> analytic = tape.grad(vx);

    auto eval = [&](const Tensor& probe) {
        Tape t;
        Var v = t.input(probe);
        return t.value(f(t, v)).data[0];
    };

    double max_err = 0.0;
    Tensor probe = x;
    for (std::size_t i = 0; i < probe.data.size(); ++i) {
        double orig = probe.data[i];
        probe.data[i] = orig + eps;
        double fp = eval(probe);
        probe.data[i] = orig - eps;
        double fm = eval(probe);
        probe.data[i] = orig;
        double numeric = (fp - fm) / (2.0 * eps);
        double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
        max_err = std::max(max_err, std::abs(analytic[i] - numeric) / denom);
    }
    return max_err;
}

}  // namespace mvtn
