//! Numerical verification of the Bayes-posterior sensitivity analysis on
//! explicit discrete evidence models.
//!
//! For a finite set of snippets with priors `p(z)` and fixed query
//! likelihoods `p(x|z)`, the derivative of the posterior `p(z|x)` with
//! respect to the single prior `p(z)` (other priors and all likelihoods held
//! fixed, evidence recomputed) has the closed form
//!
//! ```text
//! d p(z|x) / d p(z) = p(x|z) * sum_{z' != z} p(x|z') p(z') / p(x)^2
//! ```
//!
//! which is strictly positive whenever any competing snippet carries evidence
//! mass. [`sensitivity_fd`] checks the closed form by central differences
//! under exactly that perturbation convention: the prior moves by `±h`
//! without renormalizing the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Priors over a finite snippet set plus per-snippet query likelihoods.
#[derive(Debug, Clone)]
pub struct DiscreteEvidenceModel {
    priors: Vec<f64>,
    likelihoods: Vec<f64>,
}

impl DiscreteEvidenceModel {
    pub fn new(priors: Vec<f64>, likelihoods: Vec<f64>) -> Result<Self> {
        if priors.len() != likelihoods.len() || priors.len() < 2 {
            return Err(Error::contract(format!(
                "need matching priors/likelihoods of length >= 2, got {}/{}",
                priors.len(),
                likelihoods.len()
            )));
        }
        let sum: f64 = priors.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("priors sum to {sum}, not 1")));
        }
        if priors.iter().any(|p| !(0.0..=1.0).contains(p))
            || likelihoods.iter().any(|l| !(0.0..=1.0).contains(l))
        {
            return Err(Error::contract("entries must lie in [0, 1]"));
        }
        if likelihoods.iter().filter(|l| **l > 0.0).count() < 2 {
            return Err(Error::contract(
                "need at least two snippets with positive likelihood",
            ));
        }
        Ok(DiscreteEvidenceModel {
            priors,
            likelihoods,
        })
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor requires length >= 2
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn likelihoods(&self) -> &[f64] {
        &self.likelihoods
    }

    /// `p(x) = sum_z p(x|z) p(z)`, optionally with one prior overridden.
    fn evidence_with(&self, z_index: Option<(usize, f64)>) -> f64 {
        self.priors
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let p = match z_index {
                    Some((z, v)) if z == i => v,
                    _ => p,
                };
                self.likelihoods[i] * p
            })
            .sum()
    }

    /// Deterministic random model for the verification suites. Every
    /// likelihood is strictly positive and priors stay well away from the
    /// simplex corners so the `±h` perturbation remains valid.
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let m = rng.gen_range(2..=8);
        let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let mut priors: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        // renormalize exactly against rounding in the division above
        let correction: f64 = priors.iter().sum();
        priors[0] += 1.0 - correction;
        let likelihoods: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..1.0)).collect();
        DiscreteEvidenceModel::new(priors, likelihoods).expect("generator keeps invariants")
    }
}

/// Bayes posterior `p(z|x) = p(x|z) p(z) / p(x)`.
pub fn posterior(model: &DiscreteEvidenceModel, z_index: usize) -> Result<f64> {
    let px = model.evidence_with(None);
    if px <= 0.0 {
        return Err(Error::domain(
            "posterior",
            format!("evidence probability {px} is not positive"),
        ));
    }
    Ok(model.likelihoods[z_index] * model.priors[z_index] / px)
}

/// Closed-form sensitivity of the posterior to its own prior:
/// `p(x|z) * sum_{z' != z} p(x|z') p(z') / p(x)^2`.
pub fn sensitivity_closed_form(model: &DiscreteEvidenceModel, z_index: usize) -> Result<f64> {
    let px = model.evidence_with(None);
    if px <= 0.0 {
        return Err(Error::domain(
            "sensitivity",
            format!("evidence probability {px} is not positive"),
        ));
    }
    let competing: f64 = model
        .likelihoods
        .iter()
        .zip(&model.priors)
        .enumerate()
        .filter(|(i, _)| *i != z_index)
        .map(|(_, (&l, &p))| l * p)
        .sum();
    Ok(model.likelihoods[z_index] * competing / (px * px))
}

/// Central-difference estimate of the same derivative: the prior of `z`
/// moves by `±h` with everything else frozen and the evidence recomputed on
/// each side.
pub fn sensitivity_fd(model: &DiscreteEvidenceModel, z_index: usize, h: f64) -> Result<f64> {
    let p = model.priors[z_index];
    if h <= 0.0 || p + h > 1.0 || p - h < 0.0 {
        return Err(Error::domain(
            "sensitivity-fd",
            format!("step {h} leaves [0,1] from prior {p}"),
        ));
    }
    let post_at = |prior: f64| -> Result<f64> {
        let px = model.evidence_with(Some((z_index, prior)));
        if px <= 0.0 {
            return Err(Error::domain(
                "sensitivity-fd",
                format!("perturbed evidence probability {px} is not positive"),
            ));
        }
        Ok(model.likelihoods[z_index] * prior / px)
    };
    Ok((post_at(p + h)? - post_at(p - h)?) / (2.0 * h))
}

/// Result of the randomized verification suite.
#[derive(Debug, Clone)]
pub struct TheoryReport {
    pub models_checked: usize,
    pub worst_rel_err: f64,
    pub positivity_violations: usize,
    pub posterior_sum_worst: f64,
    pub pass: bool,
}

/// Runs the derivation checks on `n_models` random evidence models:
/// closed form vs central differences (h = 1e-6) within relative 1e-6,
/// strict positivity of the derivative, and posterior normalization.
pub fn run_theory_suite(n_models: usize, seed: u64) -> Result<TheoryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_rel_err: f64 = 0.0;
    let mut positivity_violations = 0;
    let mut posterior_sum_worst: f64 = 0.0;
    for _ in 0..n_models {
        let model = DiscreteEvidenceModel::random(&mut rng);
        let z = rng.gen_range(0..model.len());

        let closed = sensitivity_closed_form(&model, z)?;
        let fd = sensitivity_fd(&model, z, 1e-6)?;
        let rel = (closed - fd).abs() / closed.abs().max(fd.abs()).max(1e-300);
        worst_rel_err = worst_rel_err.max(rel);
        if closed <= 0.0 {
            positivity_violations += 1;
        }

        let total: f64 = (0..model.len())
            .map(|i| posterior(&model, i))
            .sum::<Result<f64>>()?;
        posterior_sum_worst = posterior_sum_worst.max((total - 1.0).abs());
    }
    Ok(TheoryReport {
        models_checked: n_models,
        worst_rel_err,
        positivity_violations,
        posterior_sum_worst,
        pass: worst_rel_err < 1e-6 && positivity_violations == 0 && posterior_sum_worst < 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn symmetric_two() -> DiscreteEvidenceModel {
        DiscreteEvidenceModel::new(vec![0.5, 0.5], vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn symmetric_posterior_is_half() {
        assert_eq!(posterior(&symmetric_two(), 0).unwrap(), 0.5);
        assert_eq!(posterior(&symmetric_two(), 1).unwrap(), 0.5);
    }

    #[test]
    fn zero_likelihood_gives_zero_posterior() {
        let m = DiscreteEvidenceModel::new(vec![0.4, 0.3, 0.3], vec![0.0, 0.5, 0.7]).unwrap();
        assert_eq!(posterior(&m, 0).unwrap(), 0.0);
    }

    #[test]
    fn posteriors_sum_to_one_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let m = DiscreteEvidenceModel::random(&mut rng);
            let total: f64 = (0..m.len()).map(|i| posterior(&m, i).unwrap()).sum();
            assert!((total - 1.0).abs() < 1e-12, "sum {total}");
        }
    }

    #[test]
    fn closed_form_matches_direct_substitution() {
        // p(x|z) * (p(x|z') p(z')) / p(x)^2 = 0.5 * 0.25 / 0.25 = 0.5
        let got = sensitivity_closed_form(&symmetric_two(), 0).unwrap();
        assert!((got - 0.5).abs() < 1e-15);
    }

    #[test]
    fn no_competing_evidence_means_zero_derivative() {
        let m = DiscreteEvidenceModel::new(vec![0.5, 0.25, 0.25], vec![0.8, 0.0, 0.0]);
        // constructor refuses single-support models; build the check through
        // a model whose competitors have zero likelihood mass only for z=0
        assert!(m.is_err());
        let m = DiscreteEvidenceModel::new(vec![0.5, 0.5], vec![0.8, 0.3]).unwrap();
        // remove the competitor's mass by zeroing its prior instead
        let m2 = DiscreteEvidenceModel::new(vec![1.0, 0.0], m.likelihoods().to_vec());
        let m2 = m2.unwrap();
        assert_eq!(sensitivity_closed_form(&m2, 0).unwrap(), 0.0);
    }

    #[test]
    fn finite_difference_matches_symmetric_case() {
        let fd = sensitivity_fd(&symmetric_two(), 0, 1e-6).unwrap();
        assert!((fd - 0.5).abs() < 1e-6, "{fd}");
    }

    #[test]
    fn closed_form_matches_finite_difference_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let m = DiscreteEvidenceModel::random(&mut rng);
            let z = rng.gen_range(0..m.len());
            let closed = sensitivity_closed_form(&m, z).unwrap();
            let fd = sensitivity_fd(&m, z, 1e-6).unwrap();
            let rel = (closed - fd).abs() / closed.abs().max(fd.abs());
            assert!(rel < 1e-6, "closed {closed} vs fd {fd}");
        }
    }

    #[test]
    fn derivative_is_strictly_positive_with_competing_evidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        for _ in 0..1000 {
            let m = DiscreteEvidenceModel::random(&mut rng);
            let z = rng.gen_range(0..m.len());
            assert!(sensitivity_closed_form(&m, z).unwrap() > 0.0);
        }
    }

    #[test]
    fn degenerate_models_are_rejected() {
        // single positive-likelihood support violates the assumption
        assert!(DiscreteEvidenceModel::new(vec![0.5, 0.5], vec![0.8, 0.0]).is_err());
        // bad prior normalization
        assert!(DiscreteEvidenceModel::new(vec![0.6, 0.6], vec![0.5, 0.5]).is_err());
        // out-of-range entries
        assert!(DiscreteEvidenceModel::new(vec![0.5, 0.5], vec![1.5, 0.5]).is_err());
    }

    #[test]
    fn zero_evidence_is_a_domain_error() {
        let m = DiscreteEvidenceModel::new(vec![0.0, 1.0], vec![0.5, 0.0]);
        // constructor demands two positive likelihoods, so force the
        // evidence to zero through priors concentrated on a zero likelihood
        assert!(m.is_err());
        let m = DiscreteEvidenceModel::new(vec![1.0, 0.0], vec![0.0, 0.9]);
        assert!(m.is_err() || posterior(&m.unwrap(), 0).is_err());
    }

    #[test]
    fn posterior_and_derivative_are_scale_consistent() {
        let m = DiscreteEvidenceModel::new(vec![0.3, 0.45, 0.25], vec![0.6, 0.2, 0.9]).unwrap();
        let scaled = DiscreteEvidenceModel::new(
            m.priors().to_vec(),
            m.likelihoods().iter().map(|l| l * 0.5).collect(),
        )
        .unwrap();
        for z in 0..3 {
            let p0 = posterior(&m, z).unwrap();
            let p1 = posterior(&scaled, z).unwrap();
            assert!((p0 - p1).abs() < 1e-12);
            let d0 = sensitivity_closed_form(&m, z).unwrap();
            let d1 = sensitivity_closed_form(&scaled, z).unwrap();
            assert!((d0 - d1).abs() < 1e-12);
            assert!(d1 > 0.0);
        }
    }

    #[test]
    fn suite_passes_on_shipped_defaults() {
        let report = run_theory_suite(1000, 42).unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.models_checked, 1000);
        assert!(report.worst_rel_err < 1e-6);
        assert_eq!(report.positivity_violations, 0);
    }
}
