#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "relnav/dynamics.hpp"
#include "relnav/measurement.hpp"

namespace relnav {

using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

/// Scaled unscented-transform parameters for an L-dimensional state.
struct UtConfig {
    double alpha = 1.0;
    double beta = 2.0;
    double kappa = 0.0;
    int dim = sv::kDim;

    double lambda() const { return alpha * alpha * (dim + kappa) - dim; }
};

struct UtWeights {
    VecX mean_w;  // 2L+1
    VecX cov_w;   // 2L+1
    double lambda = 0.0;
};

/// Mean/covariance weights: W_m(0) = lambda/(L+lambda),
/// W_c(0) = W_m(0) + (1 - alpha^2 + beta), W(i) = 1/(2(L+lambda)).
inline UtWeights ut_weights(const UtConfig& cfg) {
    if (cfg.dim < 1) {
        throw std::invalid_argument("ut_weights: state dimension must be >= 1");
    }
    if (cfg.alpha == 0.0) {
        throw std::invalid_argument("ut_weights: alpha must be nonzero");
    }
    const double lambda = cfg.lambda();
    const double scale = cfg.dim + lambda;
    if (!(scale > 0.0)) {
        throw std::invalid_argument("ut_weights: L + lambda must be positive");
    }
    const int n = 2 * cfg.dim + 1;
    UtWeights w;
    w.lambda = lambda;
    w.mean_w = VecX::Constant(n, 1.0 / (2.0 * scale));
    w.mean_w[0] = lambda / scale;
    w.cov_w = w.mean_w;
    w.cov_w[0] += 1.0 - cfg.alpha * cfg.alpha + cfg.beta;
    return w;
}

/// Generates the 2L+1 sigma points as columns:
/// col 0 is the mean, col i (1..L) adds column i-1 of the lower-triangular
/// Cholesky factor of (L+lambda)P, col L+i subtracts it.
///
/// A failed factorization is retried up to 3 times with symmetric jitter
/// eps*I, eps starting at max(1e-12 * trace(P)/L, 1e-30) and growing 100x
/// per retry, then fails.
inline MatX sigma_points(const VecX& mean, const MatX& cov, const UtConfig& cfg) {
    const int dim = cfg.dim;
    if (mean.size() != dim || cov.rows() != dim || cov.cols() != dim) {
        throw std::invalid_argument("sigma_points: dimension mismatch");
    }
    const double scale = dim + ut_weights(cfg).lambda;

    MatX root;
    double eps = std::max(1e-12 * cov.trace() / dim, 1e-30);
    bool ok = false;
    for (int attempt = 0; attempt <= 3 && !ok; ++attempt) {
        MatX candidate = scale * cov;
        if (attempt > 0) {
            candidate += scale * eps * MatX::Identity(dim, dim);
            eps *= 100.0;
        }
        Eigen::LLT<MatX> llt(candidate);
        if (llt.info() == Eigen::Success) {
            root = llt.matrixL();
            ok = root.allFinite();
        }
    }
    if (!ok) {
        throw std::runtime_error("sigma_points: covariance is not positive semidefinite");
    }

    MatX pts(dim, 2 * dim + 1);
    pts.col(0) = mean;
    for (int i = 0; i < dim; ++i) {
        pts.col(1 + i) = mean + root.col(i);
        pts.col(1 + dim + i) = mean - root.col(i);
    }
    return pts;
}

/// Optional state-space fixups used by the spacecraft filter: MRP sigma
/// points are mapped onto the representation nearest the reference point
/// before averaging (shadow switching preserves the rotation, so this
/// only picks a consistent chart), and the averaged mean is shadow
/// enforced afterwards.
struct SigmaHooks {
    std::function<void(MatX&)> align_points;
    std::function<void(VecX&)> canonicalize_mean;
};

/// Everything the time update produces. Both sigma sets and the raw
/// (pre-canonicalization) prior mean are retained for the
/// cross-covariance-guided process inflation used during dropouts.
struct UkfPrediction {
    VecX mean;       // x_{k|k-1}, canonicalized
    MatX cov;        // P_{k|k-1} (Q included)
    VecX mean_raw;   // weighted average before canonicalization
    VecX mean_prev;  // x_{k-1}
    MatX cov_prev;   // P_{k-1}
    MatX sigma_prev;  // chi_{k-1}
    MatX sigma_prop;  // chi_{k|k-1}, aligned
};

/// Unscented time update: propagates every sigma point through
/// `propagate_point`, recovers the prior mean and covariance by weighted
/// summation and adds Q.
template <typename F>
UkfPrediction ut_predict(const VecX& mean, const MatX& cov, const MatX& process_noise,
                         const UtConfig& cfg, F&& propagate_point,
                         const SigmaHooks& hooks = {}) {
    const UtWeights w = ut_weights(cfg);
    UkfPrediction out;
    out.mean_prev = mean;
    out.cov_prev = cov;
    out.sigma_prev = sigma_points(mean, cov, cfg);

    const int n = static_cast<int>(out.sigma_prev.cols());
    out.sigma_prop.resize(cfg.dim, n);
    for (int i = 0; i < n; ++i) {
        try {
            out.sigma_prop.col(i) = propagate_point(VecX(out.sigma_prev.col(i)));
        } catch (const std::exception& err) {
            throw std::runtime_error("ut_predict: sigma point " + std::to_string(i) +
                                     " failed: " + err.what());
        }
        if (!out.sigma_prop.col(i).allFinite()) {
            throw std::runtime_error("ut_predict: sigma point " + std::to_string(i) +
                                     " propagated to a non-finite state");
        }
    }
    if (hooks.align_points) {
        hooks.align_points(out.sigma_prop);
    }

    out.mean_raw = out.sigma_prop * w.mean_w;
    MatX dev = out.sigma_prop.colwise() - out.mean_raw;
    out.cov = dev * w.cov_w.asDiagonal() * dev.transpose() + process_noise;
    out.cov = 0.5 * (out.cov + out.cov.transpose());

    out.mean = out.mean_raw;
    if (hooks.canonicalize_mean) {
        hooks.canonicalize_mean(out.mean);
    }
    return out;
}

/// Innovation-based measurement covariance inflation:
/// R_eff = R + max(0, diag(e e' - S - R)) element-wise on the diagonal.
/// S is the full innovation covariance (R included). R_eff never falls
/// below R in any diagonal entry.
inline MatX adaptive_r(const VecX& innovation, const MatX& innovation_cov, const MatX& noise) {
    if (innovation.size() != innovation_cov.rows() || innovation_cov.rows() != noise.rows() ||
        innovation_cov.cols() != noise.cols()) {
        throw std::invalid_argument("adaptive_r: dimension mismatch");
    }
    MatX r_eff = noise;
    for (int i = 0; i < innovation.size(); ++i) {
        const double excess =
            innovation[i] * innovation[i] - innovation_cov(i, i) - noise(i, i);
        if (excess > 0.0) {
            r_eff(i, i) += excess;
        }
    }
    return r_eff;
}

/// Forward cross-covariance between pre- and post-propagation sigma-point
/// deviations: D = sum_i Wc(i) (chi_{k-1}(i) - x_{k-1})(chi_{k|k-1}(i) - x_{k|k-1})'.
inline MatX cross_covariance(const MatX& sigma_prev, const MatX& sigma_prop,
                             const VecX& mean_prev, const VecX& mean_prop, const VecX& cov_w) {
    if (sigma_prev.rows() != sigma_prop.rows() || sigma_prev.cols() != sigma_prop.cols() ||
        sigma_prev.cols() != cov_w.size()) {
        throw std::invalid_argument("cross_covariance: mismatched sigma sets");
    }
    const MatX dev_prev = sigma_prev.colwise() - mean_prev;
    const MatX dev_prop = sigma_prop.colwise() - mean_prop;
    return dev_prev * cov_w.asDiagonal() * dev_prop.transpose();
}

/// Covariance injection applied when no measurement update is performed:
/// Q_adaptive = D (P_{k|k-1} - P_{k-1}) D'.
inline MatX dropout_injection(const MatX& cross_cov, const MatX& cov_prior,
                              const MatX& cov_prev) {
    MatX injection = cross_cov * (cov_prior - cov_prev) * cross_cov.transpose();
    return 0.5 * (injection + injection.transpose());
}

struct UkfUpdateResult {
    VecX mean;
    MatX cov;
    VecX innovation;
    MatX innovation_cov;  // S with the effective (possibly inflated) R
    double r_inflation_trace = 0.0;
};

/// Unscented measurement update. Sigma points are regenerated from the
/// Q-inclusive prior so process noise is reflected in S and T; the gain
/// solve uses a Cholesky factorization with one per-channel diagonal
/// floor retry before failing.
template <typename H>
UkfUpdateResult ut_update(const VecX& mean, const MatX& cov, const VecX& z, const MatX& noise,
                          const UtConfig& cfg, H&& measure_point, bool adaptive = true) {
    if (z.size() != noise.rows() || noise.rows() != noise.cols()) {
        throw std::invalid_argument("ut_update: measurement dimension mismatch");
    }
    const UtWeights w = ut_weights(cfg);
    const MatX pts = sigma_points(mean, cov, cfg);
    const int n = static_cast<int>(pts.cols());
    const int m = static_cast<int>(z.size());

    MatX gammas(m, n);
    for (int i = 0; i < n; ++i) {
        const VecX gamma = measure_point(VecX(pts.col(i)));
        if (gamma.size() != m) {
            throw std::invalid_argument("ut_update: measurement function dimension mismatch");
        }
        gammas.col(i) = gamma;
    }

    const VecX z_hat = gammas * w.mean_w;
    const MatX dev_z = gammas.colwise() - z_hat;
    const MatX s_ut = dev_z * w.cov_w.asDiagonal() * dev_z.transpose();

    UkfUpdateResult out;
    out.innovation = z - z_hat;
    const MatX s_base = s_ut + noise;
    MatX noise_eff = noise;
    if (adaptive) {
        noise_eff = adaptive_r(out.innovation, s_base, noise);
    }
    out.r_inflation_trace = (noise_eff - noise).trace();
    out.innovation_cov = s_ut + noise_eff;

    const MatX dev_x = pts.colwise() - mean;
    const MatX t_cross = dev_x * w.cov_w.asDiagonal() * dev_z.transpose();

    MatX s_eff = 0.5 * (out.innovation_cov + out.innovation_cov.transpose());
    MatX gain;
    for (int attempt = 0; attempt < 2; ++attempt) {
        Eigen::LLT<MatX> llt(s_eff);
        if (llt.info() == Eigen::Success) {
            gain = llt.solve(t_cross.transpose()).transpose();
            if (gain.allFinite()) {
                break;
            }
        }
        if (attempt == 1) {
            throw std::runtime_error("ut_update: innovation covariance is singular");
        }
        for (int i = 0; i < m; ++i) {
            s_eff(i, i) += 1e-12 + 1e-9 * std::abs(s_eff(i, i));
        }
    }

    out.mean = mean + gain * out.innovation;
    out.cov = cov - gain * out.innovation_cov * gain.transpose();
    out.cov = 0.5 * (out.cov + out.cov.transpose());
    return out;
}

/// Maps every sigma point's MRP block onto the representation (direct or
/// shadow) nearest the reference point in column 0. Both representations
/// encode the same rotation, so this only selects a consistent chart for
/// the additive averaging that follows.
inline void align_mrp_points(MatX& pts) {
    const Vec3 ref = pts.col(0).segment<3>(sv::kMrp);
    for (int i = 1; i < pts.cols(); ++i) {
        const Vec3 p = pts.col(i).segment<3>(sv::kMrp);
        const double n2 = p.squaredNorm();
        if (n2 < 1e-30) {
            continue;
        }
        const Vec3 shadow = -p / n2;
        if ((shadow - ref).squaredNorm() < (p - ref).squaredNorm()) {
            pts.col(i).segment<3>(sv::kMrp) = shadow;
        }
    }
}

inline SigmaHooks mrp_sigma_hooks() {
    SigmaHooks hooks;
    hooks.align_points = align_mrp_points;
    hooks.canonicalize_mean = [](VecX& x) {
        x.segment<3>(sv::kMrp) = mrp_shadow(x.segment<3>(sv::kMrp));
    };
    return hooks;
}

/// Filter tuning shared by the scenario layer.
struct FilterConfig {
    UtConfig ut{};
    int substeps = 10;              // internal RK4 steps per epoch
    double inertia_cond_limit = kInertiaCondLimitDefault;
    bool adaptive_r = true;
    bool adaptive_q = true;         // cross-covariance injection on dropouts
    int min_visible = 3;            // below this an epoch is a dropout
    Vec3 torque = Vec3::Zero();     // pluggable external torque
};

struct EpochDiagnostics {
    bool updated = false;
    int visible = 0;
    double innovation_norm = 0.0;
    double r_inflation_trace = 0.0;
    double q_injection_trace = 0.0;
};

/// The augmented UKF over the 19-element state: relative position,
/// velocity, MRPs, angular rate, six inertia elements and the depth bias.
class AugmentedUkf {
public:
    AugmentedUkf(const VecX& x0, const MatX& p0, const MatX& process_noise,
                 const Vec3& marker_noise_diag, const FilterConfig& cfg)
        : x_(x0), cov_(p0), process_noise_(process_noise), marker_noise_diag_(marker_noise_diag),
          cfg_(cfg) {
        cfg_.ut.dim = sv::kDim;
        if (x_.size() != sv::kDim || cov_.rows() != sv::kDim || cov_.cols() != sv::kDim ||
            process_noise_.rows() != sv::kDim || process_noise_.cols() != sv::kDim) {
            throw std::invalid_argument("AugmentedUkf: state dimension mismatch");
        }
    }

    /// Time update over one measurement interval. Every sigma point is
    /// advanced through the coupled orbit/relative dynamics by RK4;
    /// both sigma sets are retained for the dropout inflation law.
    void predict(const ChaserOrbitState& orbit, double mu, double dt) {
        prediction_ = ut_predict(
            x_, cov_, process_noise_, cfg_.ut,
            [&](const VecX& pt) {
                StateVec s = pt;
                ChaserOrbitState o = orbit;
                propagate_state(s, o, mu, cfg_.torque, dt, cfg_.substeps,
                                cfg_.inertia_cond_limit);
                return VecX(s);
            },
            mrp_sigma_hooks());
        x_ = prediction_->mean;
        cov_ = prediction_->cov;
    }

    /// Measurement update for a frame with enough visible markers. R is
    /// assembled block-diagonally over the visible markers only, so the
    /// measurement dimension is 3 x (visible count). Throws
    /// BehindCameraError when any sigma point puts a marker behind the
    /// camera; the caller demotes the epoch to the dropout path.
    EpochDiagnostics update(const MeasurementFrame& frame, const MarkerSet& markers,
                            const CameraModel& cam) {
        require_prediction("update");
        if (frame.visible_count() < cfg_.min_visible) {
            throw std::logic_error("AugmentedUkf::update: not enough visible markers");
        }
        const std::vector<int> ids = frame_marker_ids(frame);
        const VecX z = frame_measurement_vector(frame);
        const int m = static_cast<int>(z.size());

        MatX noise = MatX::Zero(m, m);
        for (int k = 0; k < frame.visible_count(); ++k) {
            noise.block<3, 3>(3 * k, 3 * k) = marker_noise_diag_.asDiagonal();
        }

        UkfUpdateResult res = ut_update(
            x_, cov_, z, noise, cfg_.ut,
            [&](const VecX& pt) { return predict_measurements(pt, ids, markers, cam); },
            cfg_.adaptive_r);

        x_ = res.mean;
        x_.segment<3>(sv::kMrp) = mrp_shadow(x_.segment<3>(sv::kMrp));
        cov_ = res.cov;
        prediction_.reset();

        EpochDiagnostics diag;
        diag.updated = true;
        diag.visible = frame.visible_count();
        diag.innovation_norm = res.innovation.norm();
        diag.r_inflation_trace = res.r_inflation_trace;
        return diag;
    }

    /// Dropout path: no measurement update; the covariance grows by the
    /// cross-covariance-guided injection. The mean is unchanged.
    EpochDiagnostics dropout_inflate(int visible = 0) {
        require_prediction("dropout_inflate");
        EpochDiagnostics diag;
        diag.visible = visible;
        if (cfg_.adaptive_q) {
            const MatX d = cross_covariance(prediction_->sigma_prev, prediction_->sigma_prop,
                                            prediction_->mean_prev, prediction_->mean_raw,
                                            ut_weights(cfg_.ut).cov_w);
            const MatX injection = dropout_injection(d, prediction_->cov, prediction_->cov_prev);
            cov_ += injection;
            cov_ = 0.5 * (cov_ + cov_.transpose());
            diag.q_injection_trace = injection.trace();
        }
        prediction_.reset();
        return diag;
    }

    /// One full epoch: measurement update when the frame has enough
    /// markers (demoted to the dropout path on degenerate sigma-point
    /// geometry), dropout inflation otherwise.
    EpochDiagnostics assimilate(const MeasurementFrame& frame, const MarkerSet& markers,
                                const CameraModel& cam) {
        if (frame.visible_count() >= cfg_.min_visible) {
            try {
                return update(frame, markers, cam);
            } catch (const BehindCameraError&) {
                // fall through to the dropout path
            }
        }
        return dropout_inflate(frame.visible_count());
    }

    const VecX& state() const { return x_; }
    const MatX& covariance() const { return cov_; }
    const MatX& process_noise() const { return process_noise_; }
    const std::optional<UkfPrediction>& last_prediction() const { return prediction_; }
    const FilterConfig& config() const { return cfg_; }

private:
    void require_prediction(const char* who) const {
        if (!prediction_) {
            throw std::logic_error(std::string("AugmentedUkf::") + who +
                                   ": no retained prediction for this epoch");
        }
    }

    VecX x_;
    MatX cov_;
    MatX process_noise_;
    Vec3 marker_noise_diag_;  // per-marker [sigma_u^2, sigma_d^2, sigma_v^2]
    FilterConfig cfg_;
    std::optional<UkfPrediction> prediction_;
};

}  // namespace relnav
