//! Rényi DP accounting for the Gaussian mechanism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHAS: [f64; 8] = [1.25, 1.5, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];

const SIGMA_MIN: f64 = 1e-6;
const SIGMA_MAX: f64 = 1e6;

/// RDP ε of one Gaussian release with noise std `sigma` and L2
/// sensitivity `sensitivity` at order `alpha`: `αΔ²/(2σ²)`.
pub fn gaussian_rdp_eps(sigma: f64, sensitivity: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::Domain(format!("RDP order must exceed 1, got {alpha}")));
    }
    if sigma < 0.0 || sensitivity < 0.0 || sigma.is_nan() || sensitivity.is_nan() {
        return Err(Error::Domain(format!("sigma {sigma} and sensitivity {sensitivity} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(if sensitivity == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(alpha * sensitivity * sensitivity / (2.0 * sigma * sigma))
}

/// Noise level and the sensitivity `c/τ` of a mean of clipped gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub c: f64,
    pub tau: usize,
}

impl NoiseSpec {
    pub fn sensitivity(&self) -> f64 {
        self.c / self.tau as f64
    }
}

/// Accumulated RDP ε per order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpLedger {
    alphas: Vec<f64>,
    eps: Vec<f64>,
    steps: usize,
}

impl Default for RdpLedger {
    fn default() -> Self {
        Self::new(&DEFAULT_ALPHAS).unwrap()
    }
}

impl RdpLedger {
    pub fn new(alphas: &[f64]) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Domain("empty RDP order grid".into()));
        }
        if let Some(a) = alphas.iter().find(|&&a| !(a > 1.0)) {
            return Err(Error::Domain(format!("RDP order must exceed 1, got {a}")));
        }
        Ok(Self { alphas: alphas.to_vec(), eps: vec![0.0; alphas.len()], steps: 0 })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Adds one step's ε (given on this ledger's grid) to every order.
    pub fn compose(&mut self, step_eps: &[(f64, f64)]) -> Result<()> {
        if step_eps.len() != self.alphas.len() || step_eps.iter().zip(&self.alphas).any(|((a, _), b)| a != b) {
            return Err(Error::Contract("step ε is not on the ledger's α grid".into()));
        }
        if let Some((a, e)) = step_eps.iter().find(|(_, e)| !(*e >= 0.0)) {
            return Err(Error::Contract(format!("negative ε {e} at α={a}")));
        }
        for (acc, (_, e)) in self.eps.iter_mut().zip(step_eps) {
            *acc += e;
        }
        self.steps += 1;
        Ok(())
    }

    /// Per-order ε of one Gaussian step on this ledger's grid.
    pub fn gaussian_step(&self, sigma: f64, sensitivity: f64) -> Result<Vec<(f64, f64)>> {
        self.alphas.iter().map(|&a| Ok((a, gaussian_rdp_eps(sigma, sensitivity, a)?))).collect()
    }

    pub fn compose_gaussian(&mut self, noise: &NoiseSpec) -> Result<()> {
        let step = self.gaussian_step(noise.sigma, noise.sensitivity())?;
        self.compose(&step)
    }

    /// `(ε′, α*)` with `ε′ = min_α [ε(α) + ln(1/δ)/(α−1)]`; ties go to the
    /// smaller order.
    pub fn to_dp(&self, delta: f64) -> Result<(f64, f64)> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Domain(format!("δ must lie in (0, 1), got {delta}")));
        }
        let log_term = (1.0 / delta).ln();
        let mut best = (f64::INFINITY, self.alphas[0]);
        for (&a, &e) in self.alphas.iter().zip(&self.eps) {
            let cand = e + log_term / (a - 1.0);
            if cand < best.0 || (cand == best.0 && a < best.1) {
                best = (cand, a);
            }
        }
        Ok(best)
    }

    pub fn report(&self, noise: &NoiseSpec, delta: f64) -> Result<PrivacyReport> {
        let (eps_prime, best_alpha) = self.to_dp(delta)?;
        Ok(PrivacyReport {
            steps: self.steps,
            sigma: noise.sigma,
            c: noise.c,
            tau: noise.tau,
            per_alpha: self.alphas.iter().zip(&self.eps).map(|(&alpha, &eps)| AlphaEps { alpha, eps }).collect(),
            eps_prime,
            delta,
            best_alpha,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaEps {
    pub alpha: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub steps: usize,
    pub sigma: f64,
    pub c: f64,
    pub tau: usize,
    pub per_alpha: Vec<AlphaEps>,
    pub eps_prime: f64,
    pub delta: f64,
    pub best_alpha: f64,
}

fn eps_prime_at(sigma: f64, delta: f64, steps: usize, sensitivity: f64, alphas: &[f64]) -> Result<f64> {
    let mut ledger = RdpLedger::new(alphas)?;
    let step = ledger.gaussian_step(sigma, sensitivity)?;
    // composition of identical steps is a per-order multiplication
    for (acc, (_, e)) in ledger.eps.iter_mut().zip(&step) {
        *acc = e * steps as f64;
    }
    ledger.steps = steps;
    Ok(ledger.to_dp(delta)?.0)
}

/// Smallest σ (to relative 1e-4) such that `steps` Gaussian releases with
/// the given sensitivity satisfy `(target_eps, target_delta)`-DP.
pub fn calibrate_sigma(
    target_eps: f64,
    target_delta: f64,
    steps: usize,
    sensitivity: f64,
    alphas: &[f64],
) -> Result<f64> {
    if !(target_eps > 0.0) {
        return Err(Error::Domain(format!("target ε must be positive, got {target_eps}")));
    }
    if steps == 0 {
        return Err(Error::Domain("calibration needs at least one step".into()));
    }
    let ok = |s: f64| eps_prime_at(s, target_delta, steps, sensitivity, alphas).map(|e| e <= target_eps);
    if ok(SIGMA_MIN)? {
        return Ok(SIGMA_MIN);
    }
    if !ok(SIGMA_MAX)? {
        return Err(Error::Calibration(format!(
            "ε′ ≤ {target_eps} at δ={target_delta} is unreachable with σ ≤ {SIGMA_MAX}"
        )));
    }
    let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
    while hi / lo > 1.0 + 1e-5 {
        let mid = (lo * hi).sqrt();
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Adds i.i.d. `N(0, σ²)` noise to every coordinate, deterministically
/// for a given seed. `sigma = 0` leaves the tensors untouched.
pub fn add_noise(grads: &mut [Tensor], sigma: f64, seed: u64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("noise std must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in grads {
        for v in g.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    #[test]
    fn gaussian_examples() {
        assert_eq!(gaussian_rdp_eps(1.0, 1.0, 2.0).unwrap(), 1.0);
        assert_eq!(gaussian_rdp_eps(2.0, 1.0, 2.0).unwrap(), 0.25);
        let a = gaussian_rdp_eps(0.7, 0.3, 4.0).unwrap();
        let b = gaussian_rdp_eps(0.7, 0.6, 4.0).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-15);
        assert!(matches!(gaussian_rdp_eps(1.0, 1.0, 1.0), Err(Error::Domain(_))));
        assert_eq!(gaussian_rdp_eps(0.0, 1.0, 2.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn composition_examples() {
        let mut l = RdpLedger::new(&[2.0]).unwrap();
        l.compose(&[(2.0, 0.3)]).unwrap();
        l.compose(&[(2.0, 0.2)]).unwrap();
        assert!((l.eps()[0] - 0.5).abs() < 1e-15);
        let before = l.clone();
        l.compose(&[(2.0, 0.0)]).unwrap();
        assert_eq!(l.eps(), before.eps());
        assert_eq!(l.steps(), 3);
        assert!(matches!(l.compose(&[(3.0, 0.1)]), Err(Error::Contract(_))));
        assert!(matches!(l.compose(&[(2.0, -0.1)]), Err(Error::Contract(_))));
    }

    #[test]
    fn t_steps_multiply() {
        let noise = NoiseSpec { sigma: 0.8, c: 1.0, tau: 4 };
        let mut l = RdpLedger::default();
        let step = l.gaussian_step(noise.sigma, noise.sensitivity()).unwrap();
        for _ in 0..37 {
            l.compose_gaussian(&noise).unwrap();
        }
        for (acc, (_, e)) in l.eps().iter().zip(&step) {
            assert!((acc - 37.0 * e).abs() <= 1e-12 * acc.max(1.0));
        }
    }

    #[test]
    fn conversion_examples() {
        let mut l = RdpLedger::new(&[2.0]).unwrap();
        l.compose(&[(2.0, 1.0)]).unwrap();
        assert_eq!(l.to_dp(1.0 / E).unwrap(), (2.0, 2.0));
        let mut l = RdpLedger::new(&[2.0, 4.0]).unwrap();
        l.compose(&[(2.0, 1.0), (4.0, 1.0)]).unwrap();
        let (e, a) = l.to_dp(E.powi(-3)).unwrap();
        assert!((e - 2.0).abs() < 1e-12);
        assert_eq!(a, 4.0);
        assert!(l.to_dp(0.0).is_err() && l.to_dp(1.0).is_err());
    }

    #[test]
    fn ties_prefer_smaller_order() {
        // ε(2) + 1 = ε(3) + 0.5 with ln(1/δ) = 1
        let mut l = RdpLedger::new(&[3.0, 2.0]).unwrap();
        l.compose(&[(3.0, 1.5), (2.0, 1.0)]).unwrap();
        assert_eq!(l.to_dp(1.0 / E).unwrap(), (2.0, 2.0));
    }

    #[test]
    fn calibration_examples() {
        let s = calibrate_sigma(2.0, 1.0 / E, 1, 1.0, &[2.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-4);
        assert_eq!(calibrate_sigma(1e9, 1e-5, 10, 1e-3, &DEFAULT_ALPHAS).unwrap(), SIGMA_MIN);
        assert!(matches!(calibrate_sigma(1e-9, 1e-5, 10, 1.0, &[1.25]), Err(Error::Calibration(_))));
    }

    #[test]
    fn doubling_steps_scales_sigma_by_sqrt2() {
        let s1 = calibrate_sigma(3.0, 1e-5, 50, 0.1, &[8.0]).unwrap();
        let s2 = calibrate_sigma(3.0, 1e-5, 100, 0.1, &[8.0]).unwrap();
        assert!((s2 / s1 - 2f64.sqrt()).abs() < 3e-4);
    }

    #[test]
    fn noise_is_deterministic_and_zero_is_identity() {
        let base = vec![Tensor::from_vec(vec![0.1, -0.2, 0.3]).unwrap()];
        let mut g = base.clone();
        add_noise(&mut g, 0.0, 7).unwrap();
        assert_eq!(g, base);
        let (mut a, mut b) = (base.clone(), base.clone());
        add_noise(&mut a, 0.5, 9).unwrap();
        add_noise(&mut b, 0.5, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, base);
    }

    #[test]
    fn noise_has_requested_variance() {
        let mut g = vec![Tensor::zeros(&[1_000_000])];
        add_noise(&mut g, 1.0, 3).unwrap();
        let d = g[0].data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }

    /// `D_α(N(0,1) ‖ N(Δ,1))` by trapezoidal integration of
    /// `p^α q^{1−α}`.
    fn renyi_numeric(alpha: f64, delta: f64) -> f64 {
        let (lo, hi, n) = (-40.0, 40.0, 400_000);
        let h = (hi - lo) / n as f64;
        let log_pdf = |x: f64, m: f64| -(x - m) * (x - m) / 2.0 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let integrand = |x: f64| (alpha * log_pdf(x, 0.0) + (1.0 - alpha) * log_pdf(x, delta)).exp();
        let mut s = 0.5 * (integrand(lo) + integrand(hi));
        for i in 1..n {
            s += integrand(lo + i as f64 * h);
        }
        (s * h).ln() / (alpha - 1.0)
    }

    #[test]
    fn closed_form_matches_renyi_integral() {
        for &(alpha, delta) in &[(1.5, 0.5), (2.0, 1.0), (4.0, 0.7), (8.0, 0.3)] {
            let closed = gaussian_rdp_eps(1.0, delta, alpha).unwrap();
            assert!((renyi_numeric(alpha, delta) - closed).abs() < 1e-8 * closed.max(1.0));
            let scaled = gaussian_rdp_eps(2.0, 2.0 * delta, alpha).unwrap();
            assert!((scaled - closed).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn eps_monotonicity(s in 0.05f64..10.0, d in 0.01f64..5.0, a in 1.01f64..64.0, k in 1.01f64..3.0) {
            let e = gaussian_rdp_eps(s, d, a).unwrap();
            prop_assert!(gaussian_rdp_eps(s * k, d, a).unwrap() < e);
            prop_assert!(gaussian_rdp_eps(s, d * k, a).unwrap() > e);
            prop_assert!(gaussian_rdp_eps(s, d, a * k).unwrap() > e);
        }

        #[test]
        fn eps_prime_non_increasing_in_delta(sigma in 0.3f64..5.0, steps in 1usize..200, d1 in 1e-9f64..0.5, f in 1.0f64..1.9) {
            let mut l = RdpLedger::default();
            let noise = NoiseSpec { sigma, c: 1.0, tau: 1 };
            for _ in 0..steps.min(20) {
                l.compose_gaussian(&noise).unwrap();
            }
            prop_assert!(l.to_dp(d1 * f).unwrap().0 <= l.to_dp(d1).unwrap().0);
        }

        #[test]
        fn removing_an_order_never_helps(eps in prop::collection::vec(0.0f64..10.0, 8), drop in 0usize..8, delta in 1e-8f64..0.5) {
            let mut full = RdpLedger::default();
            let step: Vec<(f64, f64)> = DEFAULT_ALPHAS.iter().copied().zip(eps.iter().copied()).collect();
            full.compose(&step).unwrap();
            let keep: Vec<(f64, f64)> = step.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, p)| *p).collect();
            let alphas: Vec<f64> = keep.iter().map(|p| p.0).collect();
            let mut part = RdpLedger::new(&alphas).unwrap();
            part.compose(&keep).unwrap();
            prop_assert!(part.to_dp(delta).unwrap().0 >= full.to_dp(delta).unwrap().0);
        }

        #[test]
        fn composition_commutes_and_associates(a in prop::collection::vec(0.0f64..5.0, 3), b in prop::collection::vec(0.0f64..5.0, 3)) {
            let grid = [2.0, 4.0, 8.0];
            let step = |v: &[f64]| grid.iter().copied().zip(v.iter().copied()).collect::<Vec<_>>();
            let mut ab = RdpLedger::new(&grid).unwrap();
            ab.compose(&step(&a)).unwrap();
            ab.compose(&step(&b)).unwrap();
            let mut ba = RdpLedger::new(&grid).unwrap();
            ba.compose(&step(&b)).unwrap();
            ba.compose(&step(&a)).unwrap();
            prop_assert_eq!(ab.eps(), ba.eps());
            let summed: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let mut one = RdpLedger::new(&grid).unwrap();
            one.compose(&step(&summed)).unwrap();
            prop_assert_eq!(one.eps(), ab.eps());
        }
    }
}
