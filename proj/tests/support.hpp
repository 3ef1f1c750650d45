#pragma once

// Independent reference implementations and test utilities. Nothing here
// calls into the library code it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace gmsrm::testing {

// ---- oracles ---------------------------------------------------------------------

// KL(N(mu, sigma^2) || N(0, 1)) by composite Simpson quadrature of
// p(x) (log p(x) - log q(x)) over mu +- 14 sigma.
inline double kl_quadrature(double mu, double sigma, int intervals = 40000) {
  const double lo = mu - 14.0 * sigma;
  const double hi = mu + 14.0 * sigma;
  const double h = (hi - lo) / intervals;
  const double log_norm = -0.5 * std::log(2.0 * M_PI);
  auto integrand = [&](double x) {
    const double z = (x - mu) / sigma;
    const double log_p = log_norm - std::log(sigma) - 0.5 * z * z;
    const double log_q = log_norm - 0.5 * x * x;
    return std::exp(log_p) * (log_p - log_q);
  };
  double sum = integrand(lo) + integrand(hi);
  for (int i = 1; i < intervals; ++i) sum += integrand(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  return sum * h / 3.0;
}

// Per window and channel: fit a by explicit least squares, accumulate
// ||a p - g||^2 and ||g||^2 over all windows, return the ratio.
inline double lmse_bruteforce(const torch::Tensor& pred, const torch::Tensor& gt, int64_t window, int64_t stride) {
  auto p = pred.to(torch::kFloat64).contiguous();
  auto g = gt.to(torch::kFloat64).contiguous();
  auto ap = p.accessor<double, 3>();
  auto ag = g.accessor<double, 3>();
  double err = 0.0;
  double energy = 0.0;
  for (int64_t y0 = 0; y0 + window <= p.size(1); y0 += stride) {
    for (int64_t x0 = 0; x0 + window <= p.size(2); x0 += stride) {
      for (int64_t c = 0; c < p.size(0); ++c) {
        double num = 0.0;
        double den = 0.0;
        for (int64_t y = y0; y < y0 + window; ++y) {
          for (int64_t x = x0; x < x0 + window; ++x) {
            num += ap[c][y][x] * ag[c][y][x];
            den += ap[c][y][x] * ap[c][y][x];
          }
        }
        const double a = den > 0.0 ? num / den : 0.0;
        for (int64_t y = y0; y < y0 + window; ++y) {
          for (int64_t x = x0; x < x0 + window; ++x) {
            const double r = a * ap[c][y][x] - ag[c][y][x];
            err += r * r;
            energy += ag[c][y][x] * ag[c][y][x];
          }
        }
      }
    }
  }
  return err / energy;
}

// Textbook SSIM with explicit loops: Gaussian 11x11 (sigma 1.5) weights,
// weighted means, variances and covariance at every valid position.
inline double ssim_textbook(const torch::Tensor& pred, const torch::Tensor& gt) {
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  const double c1 = std::pow(0.01, 2);
  const double c2 = std::pow(0.03, 2);
  double wts[kWin][kWin];
  double wsum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    for (int j = 0; j < kWin; ++j) {
      const double di = i - kWin / 2;
      const double dj = j - kWin / 2;
      wts[i][j] = std::exp(-(di * di + dj * dj) / (2.0 * kSigma * kSigma));
      wsum += wts[i][j];
    }
  }
  for (auto& row : wts) {
    for (double& v : row) v /= wsum;
  }
  auto x = pred.to(torch::kFloat64).contiguous();
  auto y = gt.to(torch::kFloat64).contiguous();
  auto ax = x.accessor<double, 3>();
  auto ay = y.accessor<double, 3>();
  double total = 0.0;
  int64_t count = 0;
  for (int64_t c = 0; c < x.size(0); ++c) {
    for (int64_t r0 = 0; r0 + kWin <= x.size(1); ++r0) {
      for (int64_t q0 = 0; q0 + kWin <= x.size(2); ++q0) {
        double mx = 0, my = 0;
        for (int i = 0; i < kWin; ++i) {
          for (int j = 0; j < kWin; ++j) {
            mx += wts[i][j] * ax[c][r0 + i][q0 + j];
            my += wts[i][j] * ay[c][r0 + i][q0 + j];
          }
        }
        double vx = 0, vy = 0, cov = 0;
        for (int i = 0; i < kWin; ++i) {
          for (int j = 0; j < kWin; ++j) {
            const double dx = ax[c][r0 + i][q0 + j] - mx;
            const double dy = ay[c][r0 + i][q0 + j] - my;
            vx += wts[i][j] * dx * dx;
            vy += wts[i][j] * dy * dy;
            cov += wts[i][j] * dx * dy;
          }
        }
        total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

inline double largest_singular_value(const torch::Tensor& m) {
  return torch::linalg_svdvals(m.to(torch::kFloat64).reshape({m.size(0), -1})).max().item<double>();
}

// ---- finite differences ----------------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
};

// Compares autograd against central differences for every tensor in
// `inputs` (double precision, requires_grad set by the caller). At most
// `max_entries` entries per tensor are probed. The relative error of each
// tensor is ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-4);
// the floor keeps gradients that vanish analytically (a bias feeding an
// instance norm) from being judged on rounding noise alone.
inline GradCheckResult gradcheck(const std::function<torch::Tensor()>& loss,
                                 const std::vector<std::pair<std::string, torch::Tensor>>& inputs,
                                 double step = 1e-6, int64_t max_entries = 48, uint64_t seed = 0) {
  for (const auto& [_, t] : inputs) {
    if (t.grad().defined()) t.mutable_grad().zero_();
  }
  loss().backward();
  GradCheckResult result;
  std::mt19937_64 rng(seed);
  for (const auto& [name, t] : inputs) {
    auto analytic_all = t.grad().defined() ? t.grad().detach().clone().reshape({-1}) : torch::zeros({t.numel()}, t.options());
    const int64_t n = t.numel();
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    if (n > max_entries) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<size_t>(max_entries));
    }
    std::vector<double> a, num;
    auto flat = t.detach().view({-1});
    for (int64_t i : idx) {
      torch::NoGradGuard ng;
      const double orig = flat[i].item<double>();
      flat[i] = orig + step;
      const double up = loss().item<double>();
      flat[i] = orig - step;
      const double down = loss().item<double>();
      flat[i] = orig;
      num.push_back((up - down) / (2.0 * step));
      a.push_back(analytic_all[i].item<double>());
    }
    double diff = 0, na = 0, nn = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      diff += (a[i] - num[i]) * (a[i] - num[i]);
      na += a[i] * a[i];
      nn += num[i] * num[i];
    }
    const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-4});
    const double rel = std::sqrt(diff) / scale;
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst = name;
    }
  }
  return result;
}

// Parameters of a module as named gradcheck inputs.
inline std::vector<std::pair<std::string, torch::Tensor>> named_inputs(torch::nn::Module& m) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (auto& p : m.named_parameters()) {
    if (p.value().requires_grad()) out.emplace_back(p.key(), p.value());
  }
  return out;
}

// ---- files ----------------------------------------------------------------------------

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("gmsrm_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace gmsrm::testing
