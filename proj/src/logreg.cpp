#include "fuseclin/error.hpp"
#include "fuseclin/tabular.hpp"

#include <algorithm>
#include <cmath>

namespace fuseclin::tabular {

namespace {

struct PenaltyMix {
    double l1 = 0.0;
    double l2 = 0.0;
};

PenaltyMix mix(const LogregParams& p) {
    switch (p.penalty) {
        case Penalty::l1: return {p.alpha, 0.0};
        case Penalty::l2: return {0.0, p.alpha};
        case Penalty::elasticnet: return {p.alpha * p.l1_ratio, p.alpha * (1.0 - p.l1_ratio)};
    }
    return {};
}

double log_loss(double z, int y) { return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// Smooth part (mean log-loss) and, optionally, its gradient. theta = (w..., b).
double smooth(const Matrix& x, std::span<const int> y, std::span<const double> theta, std::vector<double>* grad) {
    const std::size_t p = x.cols;
    const double b = theta[p];
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < x.rows; ++i) {
        auto row = x.row(i);
        double z = b;
        for (std::size_t j = 0; j < p; ++j) z += row[j] * theta[j];
        loss += log_loss(z, y[i]);
        if (grad) {
            const double r = sigmoid(z) - y[i];
            for (std::size_t j = 0; j < p; ++j) (*grad)[j] += r * row[j];
            (*grad)[p] += r;
        }
    }
    const double n = static_cast<double>(x.rows);
    if (grad)
        for (double& g : *grad) g /= n;
    return loss / n;
}

double nonsmooth(std::span<const double> theta, std::size_t p, PenaltyMix m) {
    double l1 = 0.0, l2 = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
        l1 += std::abs(theta[j]);
        l2 += theta[j] * theta[j];
    }
    return m.l1 * l1 + 0.5 * m.l2 * l2;
}

void prox(std::vector<double>& v, std::size_t p, double step, PenaltyMix m) {
    const double shrink = 1.0 / (1.0 + step * m.l2);
    const double thresh = step * m.l1;
    for (std::size_t j = 0; j < p; ++j) {
        const double a = std::abs(v[j]) - thresh;
        v[j] = a > 0.0 ? std::copysign(a, v[j]) * shrink : 0.0;
    }
}

void validate_xy(const Matrix& x, std::span<const int> y) {
    if (x.rows != y.size()) throw PreconditionError("X and y differ in length");
    if (x.rows == 0) throw PreconditionError("empty training set");
    for (double v : x.values)
        if (!std::isfinite(v)) throw DataError("feature matrix contains a non-finite value");
    std::size_t pos = 0;
    for (int v : y) {
        if (v != 0 && v != 1) throw DataError("labels must be 0 or 1");
        pos += static_cast<std::size_t>(v);
    }
    if (pos == 0 || pos == y.size()) throw PreconditionError("training labels contain a single class");
}

}  // namespace

double LogregModel::decision(std::span<const double> x) const {
    if (x.size() != weights.size()) throw PreconditionError("logreg: feature vector has the wrong length");
    double z = intercept;
    for (std::size_t j = 0; j < x.size(); ++j) z += weights[j] * x[j];
    return z;
}

double LogregModel::predict_proba(std::span<const double> x) const { return sigmoid(decision(x)); }

double logreg_objective(const Matrix& x, std::span<const int> y, std::span<const double> w, double b,
                        const LogregParams& params) {
    std::vector<double> theta(w.begin(), w.end());
    theta.push_back(b);
    return smooth(x, y, theta, nullptr) + nonsmooth(theta, x.cols, mix(params));
}

LogregModel fit_logreg_elasticnet(const Matrix& x, std::span<const int> y, const LogregParams& params,
                                  std::uint64_t /*seed*/) {
    validate_xy(x, y);
    if (!(params.alpha >= 0.0)) throw PreconditionError("alpha must be non-negative");
    if (params.penalty == Penalty::elasticnet && !(params.l1_ratio >= 0.0 && params.l1_ratio <= 1.0))
        throw PreconditionError("l1_ratio must lie in [0, 1]");
    const std::size_t p = x.cols;
    const PenaltyMix m = mix(params);
    auto objective = [&](std::span<const double> th) { return smooth(x, y, th, nullptr) + nonsmooth(th, p, m); };

    const double pos = static_cast<double>(std::count(y.begin(), y.end(), 1));
    std::vector<double> xk(p + 1, 0.0);
    xk[p] = std::log(pos / (static_cast<double>(y.size()) - pos));
    double fx = objective(xk);
    std::vector<double> yk = xk, grad(p + 1), z(p + 1), diff(p + 1);
    double t = 1.0, lipschitz = 1.0;

    LogregModel model;
    model.params = params;
    for (int it = 0; it < params.max_iter; ++it) {
        model.iterations = it + 1;
        const double fy = smooth(x, y, yk, &grad);
        double fz_smooth = 0.0;
        for (;;) {
            for (std::size_t j = 0; j <= p; ++j) z[j] = yk[j] - grad[j] / lipschitz;
            prox(z, p, 1.0 / lipschitz, m);
            fz_smooth = smooth(x, y, z, nullptr);
            double lin = 0.0, sq = 0.0;
            for (std::size_t j = 0; j <= p; ++j) {
                diff[j] = z[j] - yk[j];
                lin += grad[j] * diff[j];
                sq += diff[j] * diff[j];
            }
            if (fz_smooth <= fy + lin + 0.5 * lipschitz * sq + 1e-12 * std::abs(fy)) break;
            lipschitz *= 2.0;
            if (lipschitz > 1e300) throw NumericError("logreg: step size underflow");
        }
        double mapping = 0.0;
        for (std::size_t j = 0; j <= p; ++j) mapping = std::max(mapping, lipschitz * std::abs(diff[j]));

        const double fz = fz_smooth + nonsmooth(z, p, m);
        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        std::vector<double> x_prev = xk;
        if (fz <= fx) {
            xk = z;
            fx = fz;
        }
        for (std::size_t j = 0; j <= p; ++j)
            yk[j] = xk[j] + (t / t_next) * (z[j] - xk[j]) + ((t - 1.0) / t_next) * (xk[j] - x_prev[j]);
        t = t_next;
        if (mapping < params.tolerance) {
            model.converged = true;
            break;
        }
        lipschitz *= 0.95;
    }
    model.weights.assign(xk.begin(), xk.begin() + static_cast<std::ptrdiff_t>(p));
    model.intercept = xk[p];
    return model;
}

}  // namespace fuseclin::tabular
