#pragma once
// Test-only oracles, independent of the library code paths they check:
// central finite differences, brute-force point sampling, a literal
// step-by-step scan unroll, and double-loop loss recomputations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <tuple>
#include <vector>

#include "pointcsp/tensor.hpp"

namespace oracles {

// Central-difference gradient of a scalar function with respect to every
// element of every listed tensor. loss_fn re-evaluates the loss from the
// tensors' current contents.
inline std::vector<std::vector<double>> finite_diff(const std::function<double()>& loss_fn,
                                                    const std::vector<pointcsp::Tensor*>& params,
                                                    double eps = 1e-5) {
    std::vector<std::vector<double>> out;
    for (pointcsp::Tensor* p : params) {
        std::vector<double> g(p->data.size());
        for (size_t i = 0; i < p->data.size(); ++i) {
            const double saved = p->data[i];
            p->data[i] = saved + eps;
            const double up = loss_fn();
            p->data[i] = saved - eps;
            const double dn = loss_fn();
            p->data[i] = saved;
            g[i] = (up - dn) / (2.0 * eps);
        }
        out.push_back(std::move(g));
    }
    return out;
}

// max over elements of |ad - fd| / max(|ad|, |fd|, floor). The floor keeps
// finite-difference roundoff noise on near-zero gradients from registering
// as relative error.
inline double max_rel_err(const std::vector<std::vector<double>>& fd,
                          const std::vector<const pointcsp::Tensor*>& ad, double floor = 1e-4) {
    double worst = 0.0;
    for (size_t p = 0; p < fd.size(); ++p) {
        for (size_t i = 0; i < fd[p].size(); ++i) {
            const double a = ad[p]->data[i];
            const double f = fd[p][i];
            const double denom = std::max({std::abs(a), std::abs(f), floor});
            worst = std::max(worst, std::abs(a - f) / denom);
        }
    }
    return worst;
}

// Greedy max-min farthest point sampling, written directly from the
// definition: O(N*k) full rescan each round, ties to the lowest index.
inline std::vector<int> fps_bruteforce(const std::vector<std::array<double, 3>>& pts, int k, int seed_index) {
    std::vector<int> chosen = {seed_index};
    std::vector<char> in(pts.size(), 0);
    in[static_cast<size_t>(seed_index)] = 1;
    while (static_cast<int>(chosen.size()) < k) {
        int best = -1;
        double best_d = -1.0;
        for (size_t i = 0; i < pts.size(); ++i) {
            if (in[i]) continue;
            double dmin = 1e300;
            for (int c : chosen) {
                const double dx = pts[i][0] - pts[static_cast<size_t>(c)][0];
                const double dy = pts[i][1] - pts[static_cast<size_t>(c)][1];
                const double dz = pts[i][2] - pts[static_cast<size_t>(c)][2];
                dmin = std::min(dmin, dx * dx + dy * dy + dz * dz);
            }
            if (dmin > best_d) {
                best_d = dmin;
                best = static_cast<int>(i);
            }
        }
        chosen.push_back(best);
        in[static_cast<size_t>(best)] = 1;
    }
    return chosen;
}

// Occupied-voxel census via an ordered map keyed on integer cell coordinates.
inline size_t voxel_count_oracle(const std::vector<std::array<double, 3>>& pts, double cell) {
    std::map<std::tuple<int64_t, int64_t, int64_t>, int> cells;
    for (const auto& p : pts) {
        cells[{static_cast<int64_t>(std::floor(p[0] / cell)), static_cast<int64_t>(std::floor(p[1] / cell)),
               static_cast<int64_t>(std::floor(p[2] / cell))}]++;
    }
    return cells.size();
}

// Literal recursion: h_t = f(A h_{t-1} + B f_t), y_t = C h_t, stepped with
// per-token matrix-vector products and no batching.
struct NaiveScanParams {
    const pointcsp::Tensor* a;
    const pointcsp::Tensor* b;
    const pointcsp::Tensor* c;
    const pointcsp::Tensor* gate;  // Ch vector (static) or Ch x C matrix (input gate)
    bool gated_tanh = true;
    bool input_gate = false;
};

inline pointcsp::Tensor naive_ssm_unroll(const pointcsp::Tensor& tokens, const NaiveScanParams& p) {
    const int64_t len = tokens.shape[0];
    const int64_t cw = tokens.shape[1];
    const int64_t ch = p.a->shape[0];
    const int64_t co = p.c->shape[0];
    std::vector<double> h(static_cast<size_t>(ch), 0.0);
    pointcsp::Tensor y({len, co});
    for (int64_t t = 0; t < len; ++t) {
        std::vector<double> z(static_cast<size_t>(ch), 0.0);
        for (int64_t i = 0; i < ch; ++i) {
            double acc = 0.0;
            for (int64_t j = 0; j < ch; ++j) acc += p.a->at(i, j) * h[static_cast<size_t>(j)];
            for (int64_t j = 0; j < cw; ++j) acc += p.b->at(i, j) * tokens.at(t, j);
            z[static_cast<size_t>(i)] = acc;
        }
        for (int64_t i = 0; i < ch; ++i) {
            if (p.gated_tanh) {
                double pre;
                if (p.input_gate) {
                    pre = 0.0;
                    for (int64_t j = 0; j < cw; ++j) pre += p.gate->at(i, j) * tokens.at(t, j);
                } else {
                    pre = p.gate->data[static_cast<size_t>(i)];
                }
                const double s = 1.0 / (1.0 + std::exp(-pre));
                h[static_cast<size_t>(i)] = s * std::tanh(z[static_cast<size_t>(i)]);
            } else {
                h[static_cast<size_t>(i)] = z[static_cast<size_t>(i)];
            }
        }
        for (int64_t i = 0; i < co; ++i) {
            double acc = 0.0;
            for (int64_t j = 0; j < ch; ++j) acc += p.c->at(i, j) * h[static_cast<size_t>(j)];
            y.at(t, i) = acc;
        }
    }
    return y;
}

// Direct double-loop form of the cross-view consistency loss.
inline double csc_double_loop(const std::vector<std::vector<double>>& teacher,
                              const std::vector<std::vector<double>>& student) {
    const size_t n = teacher.size();
    const size_t mn = student.size();
    double total = 0.0;
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < mn; ++j)
            for (size_t k = 0; k < teacher[i].size(); ++k)
                total += teacher[i][k] * std::log(std::max(student[j][k], 1e-12));
    return -total / (static_cast<double>(n) * static_cast<double>(mn));
}

// Direct double-loop mean squared feature distance.
inline double mse_double_loop(const pointcsp::Tensor& a, const pointcsp::Tensor& b) {
    double total = 0.0;
    for (int64_t i = 0; i < a.rows(); ++i)
        for (int64_t j = 0; j < a.cols(); ++j) {
            const double d = a.at(i, j) - b.at(i, j);
            total += d * d;
        }
    return total / static_cast<double>(a.rows());
}

}  // namespace oracles
