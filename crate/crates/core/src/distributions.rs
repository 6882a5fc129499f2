//! Densities and losses for the polar displacement distribution.
//!
//! Distance is modelled by a Gaussian `N(mu_r, sigma2_r)`, direction by a von
//! Mises-Fisher distribution on the unit circle with mean direction `mu_theta`
//! and concentration `kappa`. Every loss comes with a closed-form gradient so
//! the trainer can splice it into the tape as a single node.

use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

/// Below this ground-truth distance the direction target is undefined and the
/// direction loss is masked out.
pub const EPS_DIR: f64 = 1e-6;

/// The cosine fed to `acos` is kept inside `[-1 + m, 1 - m]`.
pub const ACOS_MARGIN: f64 = 1e-7;

/// Tolerance for accepting caller-supplied unit vectors.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Orientation predictions with a smaller norm cannot be normalized.
pub const EPS_NORM: f64 = 1e-9;

/// Floor on the direction-logit norm used when normalizing `mu_theta`.
pub const EPS_MU_THETA: f64 = 1e-8;

/// Range of the raw log-variance logit.
pub const LOG_VARIANCE_CLAMP: (f64, f64) = (-10.0, 10.0);

pub(crate) fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub(crate) fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_unit(v: Vec2, what: &str) -> Result<()> {
    let n = norm(v);
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Contract(format!(
            "{what} must be a unit vector, has norm {n}"
        )));
    }
    Ok(())
}

/// Predicted displacement distribution for one hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementDistribution {
    pub mu_r: f64,
    pub sigma2_r: f64,
    pub mu_theta: Vec2,
    pub kappa: f64,
}

impl DisplacementDistribution {
    pub fn new(mu_r: f64, sigma2_r: f64, mu_theta: Vec2, kappa: f64) -> Result<Self> {
        if !(mu_r >= 0.0 && mu_r.is_finite()) {
            return Err(Error::Domain(format!("mean distance {mu_r} must be >= 0")));
        }
        if !(sigma2_r > 0.0 && sigma2_r.is_finite()) {
            return Err(Error::Domain(format!("variance {sigma2_r} must be > 0")));
        }
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::Domain(format!("concentration {kappa} must be >= 0")));
        }
        if (norm(mu_theta) - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "mean direction norm {} is not 1",
                norm(mu_theta)
            )));
        }
        Ok(DisplacementDistribution {
            mu_r,
            sigma2_r,
            mu_theta,
            kappa,
        })
    }

    /// Map raw head outputs `(a_r, b_r, c1, c2, d_kappa)` onto a valid
    /// distribution: softplus distance, clamped log-variance, normalized
    /// direction, softplus concentration.
    pub fn from_raw(raw: [f64; 5]) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite head output {raw:?}")));
        }
        let [a_r, b_r, c1, c2, d_k] = raw;
        let (lo, hi) = LOG_VARIANCE_CLAMP;
        Ok(DisplacementDistribution {
            mu_r: softplus(a_r),
            sigma2_r: b_r.clamp(lo, hi).exp(),
            mu_theta: normalize_direction([c1, c2]),
            kappa: softplus(d_k),
        })
    }
}

/// `c / max(|c|, EPS_MU_THETA)`, falling back to `+x` for a vanishing input.
pub fn normalize_direction(c: Vec2) -> Vec2 {
    let n = norm(c);
    if n < EPS_MU_THETA {
        [1.0, 0.0]
    } else {
        [c[0] / n, c[1] / n]
    }
}

/// Ground-truth displacement in polar form. `theta_gt` is `None` when the
/// distance is too small for a direction to exist.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementTarget {
    pub r_gt: f64,
    pub theta_gt: Option<Vec2>,
}

impl DisplacementTarget {
    /// Target for the displacement vector `u = q_gt - q0`.
    pub fn from_displacement(u: Vec2) -> Self {
        let r = norm(u);
        let theta_gt = (r >= EPS_DIR).then(|| [u[0] / r, u[1] / r]);
        DisplacementTarget { r_gt: r, theta_gt }
    }

    pub fn is_masked(&self) -> bool {
        self.theta_gt.is_none()
    }
}

/// Heading ground truth on the unit circle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationTarget {
    pub g_gamma: Vec2,
}

impl OrientationTarget {
    pub fn from_degrees(deg: f64) -> Self {
        let rad = deg.to_radians();
        OrientationTarget {
            g_gamma: [rad.cos(), rad.sin()],
        }
    }

    pub fn from_unit(g: Vec2) -> Result<Self> {
        if (norm(g) - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "orientation target norm {} is not 1",
                norm(g)
            )));
        }
        Ok(OrientationTarget { g_gamma: g })
    }
}

/// Modified Bessel function of the first kind, order zero.
///
/// Power series below 15, Hankel asymptotic expansion above.
pub fn bessel_i0(kappa: f64) -> Result<f64> {
    Ok(bessel_i0e(kappa)? * kappa.exp())
}

/// Exponentially scaled `I0(x) * exp(-x)`, finite for every `x >= 0`.
pub fn bessel_i0e(x: f64) -> Result<f64> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!(
            "I0 argument {x} must be finite and >= 0"
        )));
    }
    if x < 15.0 {
        let q = x * x / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            term *= q / (k * k);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
            k += 1.0;
        }
        Ok(sum * (-x).exp())
    } else {
        // I0(x) ~ e^x / sqrt(2 pi x) * sum_k ((2k-1)!!)^2 / (k! (8x)^k)
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            let next: f64 = term * (2.0 * k - 1.0_f64).powi(2) / (k * 8.0 * x);
            if next.abs() >= term.abs() || next.abs() < 1e-17 * sum {
                break;
            }
            term = next;
            sum += term;
            k += 1.0;
        }
        Ok(sum / (2.0 * PI * x).sqrt())
    }
}

/// Density of `u` under vMF(mu_theta, kappa) on the unit circle.
pub fn vmf_density(u: Vec2, mu_theta: Vec2, kappa: f64) -> Result<f64> {
    Ok(vmf_log_density(u, mu_theta, kappa)?.exp())
}

pub fn vmf_log_density(u: Vec2, mu_theta: Vec2, kappa: f64) -> Result<f64> {
    if !(kappa >= 0.0) {
        return Err(Error::Domain(format!("concentration {kappa} must be >= 0")));
    }
    check_unit(u, "u")?;
    check_unit(mu_theta, "mu_theta")?;
    // log C2(k) + k mu.u, with I0 scaled to avoid overflow
    let i0e = bessel_i0e(kappa)?;
    Ok(kappa * (dot(mu_theta, u) - 1.0) - (2.0 * PI * i0e).ln())
}

/// Distance loss without the `½ log 2π` constant.
pub fn gaussian_nll(r_gt: f64, mu_r: f64, sigma2_r: f64) -> Result<f64> {
    Ok(gaussian_nll_grad(r_gt, mu_r, sigma2_r)?.value)
}

/// Full Gaussian negative log-density, for reporting only.
pub fn gaussian_nll_full(r_gt: f64, mu_r: f64, sigma2_r: f64) -> Result<f64> {
    Ok(gaussian_nll(r_gt, mu_r, sigma2_r)? + 0.5 * (2.0 * PI).ln())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianNllGrad {
    pub value: f64,
    pub d_r_gt: f64,
    pub d_mu_r: f64,
    pub d_sigma2_r: f64,
}

pub fn gaussian_nll_grad(r_gt: f64, mu_r: f64, sigma2_r: f64) -> Result<GaussianNllGrad> {
    if !(sigma2_r > 0.0) {
        return Err(Error::Domain(format!("variance {sigma2_r} must be > 0")));
    }
    let e = r_gt - mu_r;
    Ok(GaussianNllGrad {
        value: 0.5 * (e * e / sigma2_r + sigma2_r.ln()),
        d_r_gt: e / sigma2_r,
        d_mu_r: -e / sigma2_r,
        d_sigma2_r: 0.5 * (1.0 / sigma2_r - e * e / (sigma2_r * sigma2_r)),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngmfGrad {
    pub value: f64,
    pub d_mu_theta: Vec2,
    pub d_kappa: f64,
    pub d_theta_gt: Vec2,
}

/// Angular vMF loss `-log(k²+1) + k·acos(mu·theta) + log(1 + e^{-kπ})`.
pub fn angmf_loss(mu_theta: Vec2, kappa: f64, theta_gt: Vec2) -> Result<f64> {
    Ok(angmf_loss_grad(mu_theta, kappa, theta_gt)?.value)
}

pub fn angmf_loss_grad(mu_theta: Vec2, kappa: f64, theta_gt: Vec2) -> Result<AngmfGrad> {
    check_unit(mu_theta, "mu_theta")?;
    check_unit(theta_gt, "theta_gt")?;
    if !(kappa >= 0.0) {
        return Err(Error::Domain(format!("concentration {kappa} must be >= 0")));
    }
    Ok(angmf_grad_unchecked(mu_theta, kappa, theta_gt))
}

/// Same as [`angmf_loss_grad`] without the unit-norm checks, so that
/// off-manifold perturbations (finite differences, normalization slack) are
/// allowed.
pub fn angmf_grad_unchecked(mu_theta: Vec2, kappa: f64, theta_gt: Vec2) -> AngmfGrad {
    let raw = dot(mu_theta, theta_gt);
    let c = raw.clamp(-1.0 + ACOS_MARGIN, 1.0 - ACOS_MARGIN);
    let angle = c.acos();
    let value = -(kappa * kappa + 1.0).ln() + kappa * angle + softplus(-kappa * PI);
    let d_kappa = -2.0 * kappa / (kappa * kappa + 1.0) + angle - PI * sigmoid(-kappa * PI);
    let d_c = if raw == c {
        -kappa / (1.0 - c * c).sqrt()
    } else {
        0.0
    };
    AngmfGrad {
        value,
        d_mu_theta: [d_c * theta_gt[0], d_c * theta_gt[1]],
        d_kappa,
        d_theta_gt: [d_c * mu_theta[0], d_c * mu_theta[1]],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientationGrad {
    pub value: f64,
    pub d_p: Vec2,
    pub d_g: Vec2,
}

/// `1 - p̂·g` with `p̂` the normalized prediction; lies in `[0, 2]`.
pub fn orientation_loss(p_gamma: Vec2, g_gamma: Vec2) -> Result<f64> {
    Ok(orientation_loss_grad(p_gamma, g_gamma)?.value)
}

pub fn orientation_loss_grad(p_gamma: Vec2, g_gamma: Vec2) -> Result<OrientationGrad> {
    let n = norm(p_gamma);
    if !(n > EPS_NORM) {
        return Err(Error::Numeric(format!(
            "degenerate orientation prediction with norm {n}"
        )));
    }
    let p_hat = [p_gamma[0] / n, p_gamma[1] / n];
    let cos = dot(p_hat, g_gamma);
    Ok(OrientationGrad {
        value: 1.0 - cos,
        d_p: [
            -(g_gamma[0] - cos * p_hat[0]) / n,
            -(g_gamma[1] - cos * p_hat[1]) / n,
        ],
        d_g: [-p_hat[0], -p_hat[1]],
    })
}

/// Per-sample loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_r: f64,
    pub loss_theta: f64,
    pub loss_gamma: Option<f64>,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.loss_r + self.loss_theta + self.loss_gamma.unwrap_or(0.0)
    }
}

/// Sum of distance and direction losses, plus the orientation loss when a
/// `(prediction, target)` pair is given. Masked directions contribute zero.
pub fn total_loss(
    dist: &DisplacementDistribution,
    target: &DisplacementTarget,
    orientation: Option<(Vec2, OrientationTarget)>,
) -> Result<LossBreakdown> {
    let loss_r = gaussian_nll(target.r_gt, dist.mu_r, dist.sigma2_r)?;
    let loss_theta = match target.theta_gt {
        Some(theta) => angmf_loss(dist.mu_theta, dist.kappa, theta)?,
        None => 0.0,
    };
    let loss_gamma = orientation
        .map(|(p, g)| orientation_loss(p, g.g_gamma))
        .transpose()?;
    Ok(LossBreakdown {
        loss_r,
        loss_theta,
        loss_gamma,
    })
}

/// Value of the direction loss at zero concentration.
pub const ANGMF_AT_ZERO_KAPPA: f64 = LN_2;
