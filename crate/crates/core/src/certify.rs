//! Monte Carlo certification of the noisy ensemble `g(x) = F*(x + ε)`.
//!
//! One noise draw picks the candidate class `ŷ_A` (and the rank-verification
//! p-value from its top-two counts); `n` further draws count how often the
//! ensemble returns `ŷ_A`. With `p̲_A` the one-sided Clopper-Pearson lower
//! bound on that frequency, the certified L² radius is `σ·Φ⁻¹(p̲_A)` when
//! `p̲_A > 1/2`, and zero otherwise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::defense::{finish_vote, perturb_input, Classifier, Ensemble, Label, QueryPolicy};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{binom_test_two_sided, clopper_pearson_lower, inv_norm_cdf};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub sigma: f64,
    pub n: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Significance for the rank-verification flag; `None` never flags.
    #[serde(default)]
    pub rv_alpha: Option<f64>,
}

impl CertifyConfig {
    pub fn new(sigma: f64, n: usize, alpha: f64, seed: u64) -> Self {
        CertifyConfig {
            sigma,
            n,
            alpha,
            seed,
            rv_alpha: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Parameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.n == 0 {
            return Err(Error::Parameter("need at least one Monte Carlo sample".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if let Some(a) = self.rv_alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Parameter(format!("rv_alpha must lie in (0, 1), got {a}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertStatus {
    Certified,
    #[serde(rename = "abstain_low_pA")]
    AbstainLowPA,
    AbstainRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub label: usize,
    pub rv_pvalue: f64,
    /// Draws (out of `n`) on which the ensemble returned `label`.
    pub n_a: usize,
    pub n: usize,
    pub p_lower: f64,
    pub sigma: f64,
    pub radius: f64,
    pub status: CertStatus,
}

/// `σ·Φ⁻¹(p̲_A)` for `p̲_A > 1/2`, else 0.
pub fn certified_radius(sigma: f64, p_lower: f64) -> Result<f64> {
    if p_lower <= 0.5 {
        return Ok(0.0);
    }
    if p_lower >= 1.0 {
        return Err(Error::Domain {
            value: p_lower,
            domain: "(0.5, 1)",
        });
    }
    Ok(sigma * inv_norm_cdf(p_lower)?)
}

/// Count, over `n` independent noise draws, how often the ensemble votes `label`.
fn count_votes_for<C: Classifier>(ens: &Ensemble<C>, x: &[f64], label: usize, cfg: &CertifyConfig) -> usize {
    (0..cfg.n as u64)
        .into_par_iter()
        .filter(|&i| {
            let mut rng = rng::stream(cfg.seed, "certify-sample", i);
            let noisy = perturb_input(x, cfg.sigma, &mut rng);
            ens.vote_raw(&noisy).top2.y_a == label
        })
        .count()
}

pub fn certify<C: Classifier>(ens: &Ensemble<C>, x: &Tensor, cfg: &CertifyConfig) -> Result<Certificate> {
    cfg.validate()?;
    ens.check_input(x)?;

    let mut select_rng = rng::stream(cfg.seed, "certify-select", 0);
    let selection = ens.vote_raw(&perturb_input(x.data(), cfg.sigma, &mut select_rng));
    let top = selection.top2;
    let rv_pvalue = binom_test_two_sided(top.n_a as u64, (top.n_a + top.n_b) as u64, 0.5)?;

    let n_a = count_votes_for(ens, x.data(), top.y_a, cfg);
    let p_lower = clopper_pearson_lower(n_a as u64, cfg.n as u64, cfg.alpha)?;
    let radius = certified_radius(cfg.sigma, p_lower)?;
    let status = if p_lower <= 0.5 {
        CertStatus::AbstainLowPA
    } else if cfg.rv_alpha.is_some_and(|a| rv_pvalue >= a) {
        CertStatus::AbstainRank
    } else {
        CertStatus::Certified
    };
    Ok(Certificate {
        label: top.y_a,
        rv_pvalue,
        n_a,
        n: cfg.n,
        p_lower,
        sigma: cfg.sigma,
        radius,
        status,
    })
}

/// Statistical spot-check of a certificate: perturb `x` by `trials` vectors
/// drawn uniformly from the L² sphere of the certified radius (clipped back
/// into the unit box), answer each with one noisy query at the certificate's
/// σ, and return the fraction that still predict the certified label.
pub fn empirical_radius_check<C: Classifier>(
    ens: &Ensemble<C>,
    x: &Tensor,
    cert: &Certificate,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    ens.check_input(x)?;
    if trials == 0 || cert.radius == 0.0 {
        return Ok(1.0);
    }
    let policy = QueryPolicy::noisy(cert.sigma, rng::derive_seed(seed, "radius-check-noise", 0));
    let hits = (0..trials as u64)
        .into_par_iter()
        .map(|t| -> Result<bool> {
            let mut rng = rng::stream(seed, "radius-check", t);
            let dir = rng::gaussian_vec(&mut rng, x.len(), 1.0);
            let norm = crate::tensor::l2_norm(&dir);
            let shifted: Vec<f64> = x
                .data()
                .iter()
                .zip(&dir)
                .map(|(v, d)| (v + cert.radius * d / norm).clamp(0.0, 1.0))
                .collect();
            let mut qrng = policy.query_rng(t);
            let noisy = perturb_input(&shifted, policy.noise_sigma, &mut qrng);
            let r = finish_vote(ens.vote_raw(&noisy), &policy)?;
            Ok(r.label == Label::Class(cert.label))
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / trials as f64)
}

/// One line of a certificates JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    pub index: usize,
    pub true_label: Option<usize>,
    #[serde(flatten)]
    pub certificate: Certificate,
    pub config: CertifyConfig,
}
