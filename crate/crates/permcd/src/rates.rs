//! Theoretical per-epoch rate formulas for the three variants, the
//! spectral CCD rate with a dual-method cross-check, first-iteration
//! decrease bounds, and the observed-rate estimator used in the tables.

use serde::Serialize;

use crate::cd_engine::{cd_step, CdState, EpochTrace};
use crate::error::{Error, Result};
use crate::matrices::{epoch_matrix, Permutation, StructuredHessian, DENSE_LIMIT};

/// Per-epoch rate bound for uniform random coordinate selection implied
/// by the sharper complexity estimate: `(1 - 2d/(n(1+e+d)))^n`.
pub fn rcd_predicted_rate(n: usize, delta: f64, eps: f64) -> f64 {
    (1.0 - 2.0 * delta / (n as f64 * (1.0 + eps + delta))).powi(n as i32)
}

/// Per-epoch rate from the basic strong-convexity analysis:
/// `(1 - d/(n(1+e)))^n`.
pub fn rcd_naive_rate(n: usize, delta: f64, eps: f64) -> f64 {
    (1.0 - delta / (n as f64 * (1.0 + eps))).powi(n as i32)
}

/// Per-epoch rate when coordinates are sampled proportionally to the
/// diagonal: `(1 - d/(n(1 + d_av*e)))^n`.
pub fn rcd_nonuniform_rate(n: usize, delta: f64, eps: f64, d_av: f64) -> f64 {
    (1.0 - delta / (n as f64 * (1.0 + d_av * eps))).powi(n as i32)
}

/// Worst-case per-epoch bound for cyclic order. `log` is the natural
/// logarithm.
pub fn ccd_bound_suny(n: usize, delta: f64, eps: f64) -> f64 {
    let nn = n as f64;
    let lam = nn * (1.0 - delta) + delta + eps;
    let b1 = delta / (nn * lam);
    let b2 = delta / (lam * lam * (2.0 + nn.ln() / std::f64::consts::PI).powi(2));
    let b3 = delta / (nn * nn);
    1.0 - b1.max(b2).max(b3)
}

/// Outcome of the spectral-rate computation.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralRate {
    /// `rho(C)^2`, the asymptotic per-epoch factor for cyclic order.
    pub rho_sq: f64,
    /// Whether the independent winding-count cross-check converged.
    pub cross_check_converged: bool,
    /// Relative gap between the dense eigensolve and the cross-check
    /// (NaN when the latter did not converge).
    pub relative_gap: f64,
}

/// Counts eigenvalues of the cyclic epoch matrix strictly inside the
/// circle `|lambda| = r`, via the argument principle applied to the
/// characteristic function of the pencil `lambda*(L+Delta) + L'`.
///
/// Writing the pencil as a lower-triangular part plus a rank-one
/// update, `det = prod_i t_i(lambda) * w(lambda)` with
/// `t_i = lambda*(1+eps*d_i) - (1-delta)` affine (roots counted in
/// closed form) and `w = 1 + (1-delta)*ones'T^{-1}ones` an O(n)-evaluable
/// rational function whose winding is tracked by adaptive sampling.
pub fn count_eigenvalues_inside(h: &StructuredHessian, r: f64) -> Option<i64> {
    use nalgebra::Complex;
    let n = h.n();
    let delta = h.delta();
    let eps = h.eps();
    let c_up = 1.0 - delta;

    // Phase and log-magnitude of w on the circle at angle theta.
    let w_eval = |theta: f64| -> Option<(f64, f64)> {
        let lam = Complex::new(r * theta.cos(), r * theta.sin());
        let bmc = (lam - 1.0) * c_up;
        let mut sigma = Complex::new(0.0, 0.0);
        for i in 0..n {
            let t = lam * (1.0 + eps * h.d()[i]) - c_up;
            if t.norm() < 1e-140 {
                return None;
            }
            let y = (Complex::new(1.0, 0.0) - bmc * sigma) / t;
            sigma += y;
        }
        let w = Complex::new(1.0, 0.0) + c_up * sigma;
        let norm = w.norm();
        if norm < 1e-140 || !norm.is_finite() {
            return None;
        }
        Some((w.arg(), norm.ln()))
    };

    // Affine factors contribute one root each at (1-delta)/(1+eps*d_i).
    let base = h
        .d()
        .iter()
        .filter(|&&di| c_up / (1.0 + eps * di) < r)
        .count() as i64;

    // Adaptive phase tracking of w around the circle, starting from a
    // half-offset grid so no sample sits on the real axis (where the
    // poles of w live). An arc is accepted only when the phase steps to
    // its midpoint are small, consistent, and the magnitude varies
    // slowly; a zero or pole near the contour carves a sharp dip or
    // spike in |w| that keeps forcing refinement until the phase swing
    // around it is resolved.
    const INIT_SAMPLES: usize = 1024;
    const MAX_DEPTH: usize = 52;
    const MAX_EVALS: usize = 4_000_000;
    const PHASE_CAP: f64 = std::f64::consts::FRAC_PI_6;
    const LOG_MAG_CAP: f64 = 0.4;

    struct Tracker<'a> {
        w_eval: &'a dyn Fn(f64) -> Option<(f64, f64)>,
        evals: usize,
    }

    fn principal(mut d: f64) -> f64 {
        while d > std::f64::consts::PI {
            d -= std::f64::consts::TAU;
        }
        while d < -std::f64::consts::PI {
            d += std::f64::consts::TAU;
        }
        d
    }

    impl Tracker<'_> {
        fn arc(
            &mut self,
            a: f64,
            va: (f64, f64),
            b: f64,
            vb: (f64, f64),
            depth: usize,
        ) -> Option<f64> {
            self.evals += 1;
            if self.evals > MAX_EVALS {
                return None;
            }
            let m = 0.5 * (a + b);
            let vm = (self.w_eval)(m)?;
            let d1 = principal(vm.0 - va.0);
            let d2 = principal(vb.0 - vm.0);
            let diff = principal(vb.0 - va.0);
            if d1.abs() <= PHASE_CAP
                && d2.abs() <= PHASE_CAP
                && (d1 + d2 - diff).abs() < 1e-9
                && (vm.1 - va.1).abs() <= LOG_MAG_CAP
                && (vb.1 - vm.1).abs() <= LOG_MAG_CAP
            {
                return Some(d1 + d2);
            }
            if depth == 0 {
                return None;
            }
            Some(self.arc(a, va, m, vm, depth - 1)? + self.arc(m, vm, b, vb, depth - 1)?)
        }
    }

    let step = std::f64::consts::TAU / INIT_SAMPLES as f64;
    let mut tracker = Tracker {
        w_eval: &w_eval,
        evals: 0,
    };
    let mut total = 0.0f64;
    let first_theta = 0.5 * step;
    let first_val = w_eval(first_theta)?;
    let mut prev_theta = first_theta;
    let mut prev_val = first_val;
    for j in 1..=INIT_SAMPLES {
        let (theta, val) = if j == INIT_SAMPLES {
            (first_theta + std::f64::consts::TAU, first_val)
        } else {
            let t = (j as f64 + 0.5) * step;
            (t, w_eval(t)?)
        };
        total += tracker.arc(prev_theta, prev_val, theta, val, MAX_DEPTH)?;
        prev_theta = theta;
        prev_val = val;
    }
    let winding = total / std::f64::consts::TAU;
    let rounded = winding.round();
    if (winding - rounded).abs() > 0.25 {
        return None;
    }
    Some(base + rounded as i64)
}

/// Spectral radius of the cyclic epoch matrix by bisection on the
/// eigenvalue count inside circles: independent of the dense QR
/// eigensolve.
fn winding_radius(h: &StructuredHessian) -> Option<f64> {
    let n_total = h.n() as i64;
    let mut hi = 1.01;
    // Gauss-Seidel on a positive definite matrix contracts, so all
    // eigenvalues lie strictly inside the unit circle.
    if count_eigenvalues_inside(h, hi)? != n_total {
        hi = 2.0;
        if count_eigenvalues_inside(h, hi)? != n_total {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        if hi - lo <= 1e-11 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if count_eigenvalues_inside(h, mid)? == n_total {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Spectral radius squared of the cyclic epoch matrix, from a dense
/// eigensolve cross-checked by an independent winding-count bisection.
/// Non-convergence of the cross-check falls back to the dense value
/// with a warning flag.
pub fn ccd_spectral_rate(h: &StructuredHessian) -> Result<SpectralRate> {
    if h.n() > DENSE_LIMIT {
        return Err(Error::invalid(format!(
            "spectral rate requires n <= {DENSE_LIMIT}"
        )));
    }
    let c = epoch_matrix(h, &Permutation::identity(h.n()))?;
    let rho_dense = c
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    match winding_radius(h) {
        Some(rho_winding) => {
            let gap = (rho_winding - rho_dense).abs() / rho_dense.max(1e-300);
            if gap > 1e-8 {
                return Err(Error::degenerate(format!(
                    "eigen methods disagree: dense {rho_dense}, winding {rho_winding}"
                )));
            }
            Ok(SpectralRate {
                rho_sq: rho_dense * rho_dense,
                cross_check_converged: true,
                relative_gap: gap,
            })
        }
        None => Ok(SpectralRate {
            rho_sq: rho_dense * rho_dense,
            cross_check_converged: false,
            relative_gap: f64::NAN,
        }),
    }
}

/// Geometric-mean per-epoch rate over the final `window` epochs:
/// `(f_T / f_{T-window})^(1/window)`.
pub fn observed_rate_fvals(fvals: &[f64], window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::invalid("window must be >= 1"));
    }
    if fvals.len() < window + 1 {
        return Err(Error::Estimation(format!(
            "need at least {} epochs, trace has {}",
            window + 1,
            fvals.len().saturating_sub(1)
        )));
    }
    let last = fvals[fvals.len() - 1];
    let prev = fvals[fvals.len() - 1 - window];
    if !(last.is_finite() && prev.is_finite()) || last <= 0.0 || prev <= 0.0 {
        return Err(Error::Estimation(
            "observed rate needs positive finite objective values".to_string(),
        ));
    }
    Ok((last / prev).powf(1.0 / window as f64))
}

/// As `observed_rate_fvals`, reading the trace recorded by the engine.
/// For truncated traces the window ends just before the underflow
/// value.
pub fn observed_rate(trace: &EpochTrace, window: usize) -> Result<f64> {
    let fvals = if trace.truncated {
        &trace.fvals[..trace.fvals.len().saturating_sub(1)]
    } else {
        &trace.fvals[..]
    };
    observed_rate_fvals(fvals, window)
}

/// Observed versus predicted per-epoch deficits for one variant.
#[derive(Debug, Clone, Serialize)]
pub struct RateReport {
    pub variant: String,
    pub one_minus_rho_observed: f64,
    pub one_minus_rho_predicted: f64,
    pub n: usize,
    pub delta: f64,
    pub eps: f64,
}

/// First-iteration decrease: the realized value, the per-coordinate
/// bound, and the bound on the expectation over a uniformly random
/// first coordinate.
#[derive(Debug, Clone, Serialize)]
pub struct FirstIterBounds {
    pub f1_actual: f64,
    pub f1_bound: f64,
    pub expected_bound: f64,
}

pub fn first_iter_bounds(h: &StructuredHessian, x0: &[f64], i: usize) -> Result<FirstIterBounds> {
    let n = h.n();
    if x0.len() != n {
        return Err(Error::invalid("x0 length does not match n"));
    }
    if i >= n {
        return Err(Error::invalid(format!("coordinate {i} out of range")));
    }
    if h.eps() >= 1.0 {
        return Err(Error::invalid("first-iteration bound requires eps < 1"));
    }
    let delta = h.delta();
    let eps = h.eps();

    let mut state = CdState::new(h, x0.to_vec());
    cd_step(h, &mut state, i);
    let f1_actual = state.fval();

    let mut off_mass = 0.0;
    let mut off_sum = 0.0;
    for (j, (&xj, &dj)) in x0.iter().zip(h.d()).enumerate() {
        if j != i {
            off_mass += xj * xj * (delta + eps * dj);
            off_sum += xj;
        }
    }
    let f1_bound =
        0.5 * off_mass + (1.0 - delta) * (delta + eps) / (2.0 * (1.0 + eps)) * off_sum * off_sum;

    let nn = n as f64;
    let norm_sq: f64 = x0.iter().map(|x| x * x).sum();
    let sum: f64 = x0.iter().sum();
    let expected_bound = (delta + eps) / (2.0 * nn) * (nn - (delta + eps) / (1.0 + eps)) * norm_sq
        + (nn - 2.0) / nn * (1.0 - delta) * (delta + eps) / (1.0 + eps) * sum * sum;

    Ok(FirstIterBounds {
        f1_actual,
        f1_bound,
        expected_bound,
    })
}

/// Exact average of the first-iteration value over a uniformly random
/// first coordinate (n single-step evaluations, not sampled).
pub fn first_iter_exact_average(h: &StructuredHessian, x0: &[f64]) -> Result<f64> {
    let n = h.n();
    if x0.len() != n {
        return Err(Error::invalid("x0 length does not match n"));
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut state = CdState::new(h, x0.to_vec());
        cd_step(h, &mut state, i);
        total += state.fval();
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cd_engine::{run_epochs, OrderingStrategy};
    use crate::matrices::{build_perturbed_identity, spike, DiagonalSpec};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_sig4(got: f64, want: f64) {
        assert!(
            ((got - want) / want).abs() <= 5e-4,
            "got {got:.6e}, want {want:.4e}"
        );
    }

    #[test]
    fn predicted_rate_reproduces_equal_eps_table() {
        let rows = [
            (1e-3, 1.9940e-3),
            (3e-3, 5.9466e-3),
            (1e-2, 1.9419e-2),
            (3e-2, 5.5047e-2),
            (1e-1, 1.5364e-1),
        ];
        for (delta, want) in rows {
            assert_sig4(1.0 - rcd_predicted_rate(100, delta, delta), want);
        }
    }

    #[test]
    fn predicted_rate_reproduces_sqrt_eps_table() {
        let rows: [(f64, f64); 5] = [
            (1e-3, 1.9763e-3),
            (3e-3, 5.8634e-3),
            (1e-2, 1.9019e-2),
            (3e-2, 5.3824e-2),
            (1e-1, 1.5364e-1),
        ];
        for (delta, want) in rows {
            let eps = (delta / 10.0).sqrt();
            assert_sig4(1.0 - rcd_predicted_rate(100, delta, eps), want);
        }
    }

    #[test]
    fn naive_rate_is_never_faster_than_predicted() {
        for delta in [1e-4, 1e-3, 1e-2, 0.1] {
            for eps in [0.0, delta, 0.5] {
                assert!(rcd_naive_rate(100, delta, eps) >= rcd_predicted_rate(100, delta, eps));
            }
        }
        assert_sig4(1.0 - rcd_naive_rate(100, 0.01, 0.0), 0.0099501);
        // Without strong convexity there is no guaranteed progress.
        assert!((rcd_naive_rate(100, 1e-15, 0.0) - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn nonuniform_rate_limits() {
        let (n, delta, eps) = (100, 0.01, 0.3);
        let r1 = rcd_nonuniform_rate(n, delta, eps, 1.0 - 1e-15);
        assert!((r1 - rcd_naive_rate(n, delta, eps)).abs() <= 1e-12);
        let r0 = rcd_nonuniform_rate(n, delta, eps, 1e-15);
        assert!((r0 - rcd_naive_rate(n, delta, 0.0)).abs() <= 1e-12);
        let mid = rcd_nonuniform_rate(n, delta, eps, 0.5);
        assert!(mid <= r1 && mid >= r0);
        // Still slower than the sharper uniform bound for small delta.
        assert!(mid > rcd_predicted_rate(n, delta, eps));
    }

    #[test]
    fn suny_bound_branches() {
        // At (100, 1e-3, 1e-3) the first branch is active and the
        // deficit is about 1.0e-7.
        let (n, delta, eps) = (100, 1e-3, 1e-3);
        let deficit = 1.0 - ccd_bound_suny(n, delta, eps);
        let nn = n as f64;
        let lam = nn * (1.0 - delta) + delta + eps;
        let b1 = delta / (nn * lam);
        assert!((deficit - b1).abs() <= 1e-16);
        assert!((deficit - 1.0e-7).abs() <= 2e-9);
        // The max always dominates the delta/n^2 branch.
        for d in [1e-4, 1e-3, 1e-2, 0.1] {
            assert!(1.0 - ccd_bound_suny(n, d, d) >= d / (nn * nn));
        }
        // Deficit grows with delta at fixed n, eps.
        let mut prev = 0.0;
        for d in [1e-4, 1e-3, 1e-2, 0.1] {
            let def = 1.0 - ccd_bound_suny(n, d, 0.01);
            assert!(def > prev);
            prev = def;
        }
    }

    #[test]
    fn ordering_of_bounds_at_regime_parameters() {
        // The cyclic worst-case deficit is far below the randomized
        // predicted deficit in the small-delta regime.
        for delta in [1e-3, 1e-2] {
            let ccd = 1.0 - ccd_bound_suny(100, delta, delta);
            let rcd = 1.0 - rcd_predicted_rate(100, delta, delta);
            assert!(rcd / ccd >= 100.0, "ratio {}", rcd / ccd);
        }
    }

    #[test]
    fn spectral_rate_frozen_2x2() {
        let h = spike(2, 0.5).unwrap();
        let r = ccd_spectral_rate(&h).unwrap();
        assert!((r.rho_sq - 0.0625).abs() <= 1e-12);
        assert!(r.cross_check_converged);
    }

    #[test]
    fn spectral_rate_methods_agree_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n = 5 + (trial % 4) * 7;
            let delta = 10f64.powf(-1.0 - 2.0 * rng.random::<f64>());
            let eps = delta * (0.5 + rng.random::<f64>());
            let h = build_perturbed_identity(
                n,
                delta,
                eps,
                &DiagonalSpec::SeededUniformRescaled(trial as u64),
            )
            .unwrap();
            let r = ccd_spectral_rate(&h).unwrap();
            assert!(r.rho_sq < 1.0);
            assert!(r.cross_check_converged, "trial {trial} did not converge");
            assert!(r.relative_gap <= 1e-8);
        }
    }

    #[test]
    fn observed_rate_recovers_geometric_traces() {
        let r = 0.93f64;
        let fvals: Vec<f64> = (0..40).map(|t| 7.5 * r.powi(t)).collect();
        let got = observed_rate_fvals(&fvals, 10).unwrap();
        assert!((got - r).abs() <= 1e-12);
        // Scale invariance is exact.
        let scaled: Vec<f64> = fvals.iter().map(|f| f * 3.25e8).collect();
        assert_eq!(observed_rate_fvals(&scaled, 10).unwrap(), got);
    }

    #[test]
    fn observed_rate_input_validation() {
        let fvals = vec![1.0; 5];
        assert!(observed_rate_fvals(&fvals, 10).is_err());
        assert!(observed_rate_fvals(&[1.0, 0.0, -1.0], 2).is_err());
        assert!(observed_rate_fvals(&[1.0, 0.5], 0).is_err());
    }

    #[test]
    fn observed_rpcd_rate_near_benchmark() {
        // At n=100, delta=eps=0.01 the observed deficit sits in the
        // [1.5*delta, 3.5*delta] band.
        let h = build_perturbed_identity(
            100,
            0.01,
            0.01,
            &DiagonalSpec::SeededUniformRescaled(1),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0: Vec<f64> = (0..100)
            .map(|_| {
                let u1: f64 = rng.random::<f64>().max(1e-300);
                let u2: f64 = rng.random::<f64>();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        let trace = run_epochs(&h, &x0, OrderingStrategy::RandomPermutation, 2000, 3).unwrap();
        let deficit = 1.0 - observed_rate(&trace, 10).unwrap();
        assert!(
            (0.015..=0.035).contains(&deficit),
            "deficit {deficit}"
        );
    }

    #[test]
    fn first_iter_zero_off_support() {
        let h = build_perturbed_identity(
            6,
            0.2,
            0.3,
            &DiagonalSpec::SeededUniformRescaled(4),
        )
        .unwrap();
        let mut x0 = vec![0.0; 6];
        x0[2] = 5.0;
        let b = first_iter_bounds(&h, &x0, 2).unwrap();
        assert_eq!(b.f1_actual, 0.0);
        assert_eq!(b.f1_bound, 0.0);
    }

    #[test]
    fn first_iter_all_ones_small_eps() {
        // As eps -> 0 the bound approaches
        // delta*(n-1)/2 + delta*(1-delta)*(n-1)^2/2.
        let n = 10;
        let delta = 0.05;
        let eps = 1e-13;
        let h = build_perturbed_identity(
            n,
            delta,
            eps,
            &DiagonalSpec::Linspace,
        )
        .unwrap();
        let b = first_iter_bounds(&h, &vec![1.0; n], 0).unwrap();
        let nn = (n - 1) as f64;
        let want = 0.5 * delta * nn + 0.5 * delta * (1.0 - delta) * nn * nn;
        assert!((b.f1_bound - want).abs() <= 1e-9);
        assert!(b.f1_actual <= b.f1_bound * (1.0 + 1e-12));
    }

    #[test]
    fn first_iter_bound_holds_over_draws() {
        let h = build_perturbed_identity(
            100,
            0.01,
            0.01,
            &DiagonalSpec::SeededUniformRescaled(9),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let x0: Vec<f64> = (0..100)
                .map(|_| {
                    let u1: f64 = rng.random::<f64>().max(1e-300);
                    let u2: f64 = rng.random::<f64>();
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect();
            let i = rng.random_range(0..100);
            let b = first_iter_bounds(&h, &x0, i).unwrap();
            assert!(b.f1_actual <= b.f1_bound * (1.0 + 1e-12));
            // The expectation bound dominates the exact i-average.
            let avg = first_iter_exact_average(&h, &x0).unwrap();
            assert!(avg <= b.expected_bound * (1.0 + 1e-9));
        }
    }
}
