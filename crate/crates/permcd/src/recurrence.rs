//! The four-coefficient recurrence that dominates the expected-Hessian
//! sequence, the parameter-regime checks, the explicit bound sequences,
//! and the resulting convergence envelope.
//!
//! The dominating matrices have the form
//! `eta*I + nu*ones*ones' + eps*D + tau*(ones*r1' + r1*ones')` with
//! `||r1|| <= 1`; one epoch maps the coefficient quadruplet through
//! `q <- max((1-delta)^2 * Mhat * q, 0)` componentwise. The remainder
//! constants in `Mhat` are unknown but of modest size; they are modeled
//! by a single magnitude `rho_bar` (or ten explicit slots).

use nalgebra::{DMatrix, Matrix4, Vector4};
use serde::Serialize;

use crate::matrices::sym_eigenvalues;

/// Coefficients `(eta, nu, eps, tau)` of the dominating matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quadruplet {
    pub eta: f64,
    pub nu: f64,
    pub epsv: f64,
    pub tau: f64,
}

impl Quadruplet {
    /// Epoch-zero coefficients: the Hessian itself.
    pub fn init(delta: f64, eps: f64) -> Self {
        Quadruplet {
            eta: delta,
            nu: 1.0 - delta,
            epsv: eps,
            tau: 0.0,
        }
    }

    pub fn max_component(&self) -> f64 {
        self.eta.max(self.nu).max(self.epsv).max(self.tau)
    }

    fn to_vector(self) -> Vector4<f64> {
        Vector4::new(self.eta, self.nu, self.epsv, self.tau)
    }

    fn from_vector(v: Vector4<f64>) -> Self {
        Quadruplet {
            eta: v[0].max(0.0),
            nu: v[1].max(0.0),
            epsv: v[2].max(0.0),
            tau: v[3].max(0.0),
        }
    }
}

/// Problem parameters plus the assumed remainder-constant magnitude.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegimeParams {
    pub n: usize,
    pub delta: f64,
    pub eps: f64,
    pub rho_bar: f64,
}

/// `3.05 + 2.1*rho + 0.6*rho^2 + 0.01*rho^3`.
pub fn rhohat(rho_bar: f64) -> f64 {
    3.05 + 2.1 * rho_bar + 0.6 * rho_bar.powi(2) + 0.01 * rho_bar.powi(3)
}

/// Outcome of the regime test, listing each violated condition.
#[derive(Debug, Clone, Serialize)]
pub struct RegimeReport {
    pub ok: bool,
    pub violations: Vec<String>,
}

/// The analysis regime: `0 < delta <= eps`, `rhohat*eps^2 <= delta/2`,
/// `n*eps <= 1`, and `n >= 5`.
pub fn regime_check(p: &RegimeParams) -> RegimeReport {
    let mut violations = Vec::new();
    if !(p.delta > 0.0 && p.delta <= p.eps) {
        violations.push(format!(
            "requires 0 < delta <= eps (delta = {}, eps = {})",
            p.delta, p.eps
        ));
    }
    let rh = rhohat(p.rho_bar);
    if rh * p.eps * p.eps > 0.5 * p.delta {
        violations.push(format!(
            "requires rhohat*eps^2 <= delta/2 ({:.6e} > {:.6e})",
            rh * p.eps * p.eps,
            0.5 * p.delta
        ));
    }
    if p.n as f64 * p.eps > 1.0 {
        violations.push(format!("requires n*eps <= 1 (n*eps = {})", p.n as f64 * p.eps));
    }
    if p.n < 5 {
        violations.push(format!("requires n >= 5 (n = {})", p.n));
    }
    RegimeReport {
        ok: violations.is_empty(),
        violations,
    }
}

/// The ten remainder-constant slots of the recurrence matrix, in
/// row-major order of appearance.
#[derive(Debug, Clone, Copy)]
pub enum RhoAssign {
    AllEqual(f64),
    Explicit([f64; 10]),
}

impl RhoAssign {
    fn slot(&self, k: usize) -> f64 {
        match self {
            RhoAssign::AllEqual(r) => *r,
            RhoAssign::Explicit(v) => v[k],
        }
    }
}

/// The recurrence matrix in coefficient order `(eta, nu, eps, tau)`:
///
/// ```text
/// [ 1+r0*e^2    r1*e^2   2e+r2*e^2        r3*e      ]
/// [ 1+r4*e^2    0        d_av+r5*e^2      r6*e/sqrt(n) ]
/// [ 0           0        1                0         ]
/// [ r7*e/sqrt(n) 0       r8/sqrt(n)+r9*e^2 0        ]
/// ```
pub fn mhat(p: &RegimeParams, d_av: f64, rho: &RhoAssign) -> Matrix4<f64> {
    let e = p.eps;
    let e2 = e * e;
    let rn = 1.0 / (p.n as f64).sqrt();
    Matrix4::new(
        1.0 + rho.slot(0) * e2,
        rho.slot(1) * e2,
        2.0 * e + rho.slot(2) * e2,
        rho.slot(3) * e,
        1.0 + rho.slot(4) * e2,
        0.0,
        d_av + rho.slot(5) * e2,
        rho.slot(6) * e * rn,
        0.0,
        0.0,
        1.0,
        0.0,
        rho.slot(7) * e * rn,
        0.0,
        rho.slot(8) * rn + rho.slot(9) * e2,
        0.0,
    )
}

/// Runs `q <- max((1-delta)^2 * Mhat * q, 0)` for `t_max` steps with all
/// remainder slots set to `p.rho_bar`; returns `q_0..=q_{t_max}`.
pub fn iterate_quadruplet(
    q0: Quadruplet,
    p: &RegimeParams,
    d_av: f64,
    t_max: usize,
) -> Vec<Quadruplet> {
    iterate_quadruplet_with(q0, p, d_av, &RhoAssign::AllEqual(p.rho_bar), t_max)
}

/// As `iterate_quadruplet`, with explicit remainder slots.
pub fn iterate_quadruplet_with(
    q0: Quadruplet,
    p: &RegimeParams,
    d_av: f64,
    rho: &RhoAssign,
    t_max: usize,
) -> Vec<Quadruplet> {
    let m = mhat(p, d_av, rho);
    let scale = (1.0 - p.delta) * (1.0 - p.delta);
    let mut out = Vec::with_capacity(t_max + 1);
    out.push(q0);
    let mut q = q0;
    for _ in 0..t_max {
        q = Quadruplet::from_vector(scale * (m * q.to_vector()));
        out.push(q);
    }
    out
}

/// The explicit bound sequences `eta_bar(t) = 1.5*rhohat*(1-1.4d)^t*t*d`
/// and `eps_bar(t) = (1-1.8d)^t*e`, for `t = 0..=t_max`.
#[derive(Debug, Clone, Serialize)]
pub struct BoundSeq {
    pub eta_bar: Vec<f64>,
    pub eps_bar: Vec<f64>,
}

pub fn bound_sequences(p: &RegimeParams, t_max: usize) -> BoundSeq {
    let rh = rhohat(p.rho_bar);
    let mut eta_bar = Vec::with_capacity(t_max + 1);
    let mut eps_bar = Vec::with_capacity(t_max + 1);
    let mut pow14 = 1.0;
    let mut pow18 = 1.0;
    for t in 0..=t_max {
        eta_bar.push(1.5 * rh * pow14 * t as f64 * p.delta);
        eps_bar.push(pow18 * p.eps);
        pow14 *= 1.0 - 1.4 * p.delta;
        pow18 *= 1.0 - 1.8 * p.delta;
    }
    BoundSeq { eta_bar, eps_bar }
}

/// One violated inequality in the bound suite.
#[derive(Debug, Clone, Serialize)]
pub struct HatBarViolation {
    pub t: usize,
    pub bound: String,
    pub got: f64,
    pub limit: f64,
}

/// Result of checking the quadruplet sequence against the explicit
/// bounds, for `t = 1..` as far as both sequences reach.
#[derive(Debug, Clone, Serialize)]
pub struct HatBarReport {
    pub ok: bool,
    pub checked_through: usize,
    pub violations: Vec<HatBarViolation>,
}

/// Verifies, for every `t >= 1`:
/// `eta <= eta_bar`, `eps <= eps_bar`,
/// `tau <= 0.5*eps*rho*eta_bar + 0.54*rho*eps_bar`,
/// `tau <= 0.1*rho*eta_bar + 0.54*rho*eps_bar`, and
/// `nu <= (1.1+0.01*rho^2)*eta_bar + (1.1+0.1*rho^2)*eps_bar`.
pub fn check_hatbar_bounds(
    quadruplets: &[Quadruplet],
    bounds: &BoundSeq,
    p: &RegimeParams,
) -> HatBarReport {
    let rho = p.rho_bar;
    let t_end = quadruplets
        .len()
        .min(bounds.eta_bar.len())
        .min(bounds.eps_bar.len())
        .saturating_sub(1);
    let mut violations = Vec::new();
    let slack = |limit: f64| limit * (1.0 + 1e-12);
    for t in 1..=t_end {
        let q = &quadruplets[t];
        let eta_bar = bounds.eta_bar[t];
        let eps_bar = bounds.eps_bar[t];
        let mut check = |name: &str, got: f64, limit: f64| {
            if got > slack(limit) {
                violations.push(HatBarViolation {
                    t,
                    bound: name.to_string(),
                    got,
                    limit,
                });
            }
        };
        check("eta", q.eta, eta_bar);
        check("eps", q.epsv, eps_bar);
        check(
            "tau-eps-form",
            q.tau,
            0.5 * p.eps * rho * eta_bar + 0.54 * rho * eps_bar,
        );
        check("tau", q.tau, 0.1 * rho * eta_bar + 0.54 * rho * eps_bar);
        check(
            "nu",
            q.nu,
            (1.1 + 0.01 * rho * rho) * eta_bar + (1.1 + 0.1 * rho * rho) * eps_bar,
        );
    }
    HatBarReport {
        ok: violations.is_empty(),
        checked_through: t_end,
        violations,
    }
}

/// The convergence envelope `C*(1-1.4*delta)^t * t * eps * |x0|^2` for
/// `t = 1..=t_max`.
pub fn conv_envelope(p: &RegimeParams, x0_norm: f64, t_max: usize, c: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(t_max);
    let mut pow = 1.0 - 1.4 * p.delta;
    for t in 1..=t_max {
        out.push(c * pow * t as f64 * p.eps * x0_norm * x0_norm);
        pow *= 1.0 - 1.4 * p.delta;
    }
    out
}

/// Smallest constant making the envelope dominate an observed trace:
/// `max_t f(t) / ((1-1.4d)^t * t * eps * |x0|^2)` over `t >= 1`.
pub fn fit_envelope_constant(p: &RegimeParams, fvals: &[f64], x0_norm: f64) -> f64 {
    let mut c: f64 = 0.0;
    let mut pow = 1.0;
    for (t, &f) in fvals.iter().enumerate() {
        if t == 0 {
            pow *= 1.0 - 1.4 * p.delta;
            continue;
        }
        let denom = pow * t as f64 * p.eps * x0_norm * x0_norm;
        if denom > 0.0 {
            c = c.max(f / denom);
        }
        pow *= 1.0 - 1.4 * p.delta;
    }
    c
}

/// Scalar consequence of domination usable without knowing the rank-one
/// direction: `lambda_max(Abar) <= eta + n*nu + eps + 2*sqrt(n)*tau`.
pub fn abar_norm_bound(abar_t: &DMatrix<f64>, q: &Quadruplet, n: usize) -> bool {
    let lam = *sym_eigenvalues(abar_t).last().unwrap();
    let bound = q.eta + n as f64 * q.nu + q.epsv + 2.0 * (n as f64).sqrt() * q.tau;
    lam <= bound * (1.0 + 1e-12)
}

/// Modulus of the dominant eigenvalue of `(1-delta)^2 * Mhat`.
pub fn recurrence_dominant_eigenvalue(p: &RegimeParams, d_av: f64, rho: &RhoAssign) -> f64 {
    let m = mhat(p, d_av, rho) * (1.0 - p.delta) * (1.0 - p.delta);
    let dm = DMatrix::from_fn(4, 4, |i, j| m[(i, j)]);
    dm.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_params(delta: f64, rho_bar: f64) -> RegimeParams {
        RegimeParams {
            n: 100,
            delta,
            eps: delta,
            rho_bar,
        }
    }

    #[test]
    fn rhohat_frozen_values() {
        assert_eq!(rhohat(0.0), 3.05);
        assert!((rhohat(1.0) - 5.76).abs() <= 1e-12);
        assert!((rhohat(2.0) - 9.73).abs() <= 1e-12);
    }

    #[test]
    fn regime_check_examples() {
        assert!(regime_check(&table_params(0.01, 1.0)).ok);
        let r = regime_check(&table_params(0.03, 1.0));
        assert!(!r.ok);
        assert!(r.violations.iter().any(|v| v.contains("n*eps")));
        let r = regime_check(&RegimeParams {
            n: 4,
            delta: 0.01,
            eps: 0.01,
            rho_bar: 0.0,
        });
        assert!(!r.ok);
        assert!(r.violations.iter().any(|v| v.contains("n >= 5")));
        // delta > eps violates the ordering condition.
        assert!(!regime_check(&RegimeParams {
            n: 100,
            delta: 0.02,
            eps: 0.01,
            rho_bar: 0.0,
        })
        .ok);
    }

    #[test]
    fn mhat_rho_zero_form() {
        let p = table_params(0.01, 0.0);
        let m = mhat(&p, 0.5, &RhoAssign::AllEqual(0.0));
        let e = 0.01;
        let want = Matrix4::new(
            1.0, 0.0, 2.0 * e, 0.0, //
            1.0, 0.0, 0.5, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        );
        assert_eq!(m, want);
    }

    #[test]
    fn mhat_selected_entries() {
        let p = table_params(0.01, 1.0);
        let m = mhat(&p, 0.5, &RhoAssign::AllEqual(1.0));
        // (3,3) entry is 1 regardless of the remainder constants.
        assert_eq!(m[(2, 2)], 1.0);
        // (1,3) entry is 2*eps + rho*eps^2 = 0.0201 at eps = 0.01.
        assert!((m[(0, 2)] - 0.0201).abs() <= 1e-15);
        // Explicit slots land where AllEqual puts them.
        let mut slots = [0.0; 10];
        slots[2] = 1.0;
        let m2 = mhat(&p, 0.5, &RhoAssign::Explicit(slots));
        assert!((m2[(0, 2)] - 0.0201).abs() <= 1e-15);
        assert_eq!(m2[(0, 0)], 1.0);
    }

    #[test]
    fn eps_component_is_pure_scaling() {
        let p = table_params(0.005, 1.0);
        let quads = iterate_quadruplet(Quadruplet::init(p.delta, p.eps), &p, 0.5, 200);
        let mut want = p.eps;
        for (t, q) in quads.iter().enumerate() {
            assert!(
                (q.epsv - want).abs() <= 1e-13 * want,
                "t = {t}: {} vs {want}",
                q.epsv
            );
            want *= (1.0 - p.delta) * (1.0 - p.delta);
        }
    }

    #[test]
    fn rho_zero_eps_zero_closed_form() {
        let p = RegimeParams {
            n: 100,
            delta: 0.02,
            eps: 0.0,
            rho_bar: 0.0,
        };
        let quads = iterate_quadruplet(Quadruplet::init(p.delta, p.eps), &p, 0.5, 10);
        let s = (1.0 - p.delta) * (1.0 - p.delta);
        // nu_1 = (1-delta)^2 * delta, then both components scale by s.
        assert!((quads[1].nu - s * p.delta).abs() <= 1e-15);
        for (t, q) in quads.iter().enumerate().skip(1) {
            let want_eta = s.powi(t as i32) * p.delta;
            assert!((q.eta - want_eta).abs() <= 1e-12 * want_eta);
            assert!((q.nu - want_eta).abs() <= 1e-12 * want_eta);
            assert_eq!(q.epsv, 0.0);
            assert_eq!(q.tau, 0.0);
        }
    }

    #[test]
    fn components_stay_nonnegative() {
        let p = table_params(0.01, 2.0);
        for q in iterate_quadruplet(Quadruplet::init(p.delta, p.eps), &p, 1.0, 500) {
            assert!(q.eta >= 0.0 && q.nu >= 0.0 && q.epsv >= 0.0 && q.tau >= 0.0);
        }
    }

    #[test]
    fn tail_ratio_in_rate_window() {
        // Worst-case diagonal mean; the per-epoch decay of the
        // coefficient vector settles near the proved rate.
        let p = table_params(0.01, 1.0);
        let quads = iterate_quadruplet(Quadruplet::init(p.delta, p.eps), &p, 1.0, 600);
        for t in 55..600 {
            let r = quads[t + 1].max_component() / quads[t].max_component();
            assert!(
                r >= 1.0 - 2.0 * p.delta && r <= 1.0 - 1.3 * p.delta,
                "t = {t}: ratio {r}"
            );
        }
    }

    #[test]
    fn bound_sequences_frozen_values() {
        let p = table_params(0.01, 1.0);
        let b = bound_sequences(&p, 5);
        assert_eq!(b.eta_bar[0], 0.0);
        // eta_bar(1) = 1.5 * 5.76 * (1 - 0.014) * 1 * 0.01.
        assert!((b.eta_bar[1] - 0.0851904).abs() <= 1e-12);
        // eps_bar is geometric with ratio (1 - 1.8*delta).
        for t in 0..5 {
            let ratio = b.eps_bar[t + 1] / b.eps_bar[t];
            assert!((ratio - (1.0 - 1.8 * p.delta)).abs() <= 1e-12);
        }
    }

    #[test]
    fn hatbar_bounds_hold_on_regime_grid() {
        for delta in [1e-3, 3e-3, 5e-3, 1e-2] {
            for rho_bar in [0.0, 0.5, 1.0] {
                let p = table_params(delta, rho_bar);
                assert!(regime_check(&p).ok);
                let quads = iterate_quadruplet(Quadruplet::init(delta, delta), &p, 1.0, 500);
                let bounds = bound_sequences(&p, 500);
                let report = check_hatbar_bounds(&quads, &bounds, &p);
                assert!(
                    report.ok,
                    "delta={delta} rho={rho_bar}: {:?}",
                    report.violations.first()
                );
                assert_eq!(report.checked_through, 500);
            }
        }
    }

    #[test]
    fn hatbar_base_case_chain() {
        // The t=1 coefficients satisfy the tighter base-case inequality
        // eta_1 <= 3*(1-delta)^2*delta used to start the induction.
        let p = table_params(0.005, 1.0);
        let quads = iterate_quadruplet(Quadruplet::init(p.delta, p.eps), &p, 1.0, 1);
        let cap = 3.0 * (1.0 - p.delta) * (1.0 - p.delta) * p.delta;
        assert!(quads[1].eta <= cap);
        let bounds = bound_sequences(&p, 1);
        assert!(cap <= bounds.eta_bar[1]);
    }

    #[test]
    fn rho_zero_kills_tau() {
        let p = table_params(0.005, 0.0);
        let quads = iterate_quadruplet(Quadruplet::init(p.delta, p.eps), &p, 0.5, 100);
        let bounds = bound_sequences(&p, 100);
        for q in &quads {
            assert_eq!(q.tau, 0.0);
        }
        assert!(check_hatbar_bounds(&quads, &bounds, &p).ok);
    }

    #[test]
    fn envelope_ratio_approaches_rate() {
        let p = table_params(0.01, 1.0);
        let env = conv_envelope(&p, 3.0, 2000, 1.0);
        let r = env[1999] / env[1998];
        // The ratio is (1 - 1.4*delta)*(t+1)/t, decreasing to the rate.
        assert!(r > 1.0 - 1.4 * p.delta);
        assert!(r - (1.0 - 1.4 * p.delta) <= 6e-4);
    }

    #[test]
    fn fitted_envelope_dominates_trace() {
        // Geometric pseudo-trace decaying faster than the envelope rate.
        let p = table_params(0.01, 1.0);
        let fvals: Vec<f64> = (0..200).map(|t| 50.0 * 0.978f64.powi(t)).collect();
        let c = fit_envelope_constant(&p, &fvals, 10.0);
        let env = conv_envelope(&p, 10.0, 199, c);
        for t in 1..200 {
            assert!(fvals[t] <= env[t - 1] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn dominant_eigenvalue_within_rate_window() {
        for delta in [1e-3, 3e-3, 5e-3, 1e-2] {
            for rho_bar in [0.0, 0.5, 1.0, 2.0] {
                let p = table_params(delta, rho_bar);
                if !regime_check(&p).ok {
                    continue;
                }
                for d_av in [0.3, 0.5, 1.0] {
                    let lam = recurrence_dominant_eigenvalue(
                        &p,
                        d_av,
                        &RhoAssign::AllEqual(rho_bar),
                    );
                    assert!(
                        lam >= 1.0 - 2.2 * delta && lam <= 1.0 - 1.3 * delta,
                        "delta={delta} rho={rho_bar} d_av={d_av}: lambda={lam}"
                    );
                }
            }
        }
    }

    #[test]
    fn abar_norm_bound_at_epoch_zero() {
        let h = crate::matrices::build_perturbed_identity(
            6,
            0.05,
            0.05,
            &crate::matrices::DiagonalSpec::Linspace,
        )
        .unwrap();
        let q0 = Quadruplet::init(0.05, 0.05);
        assert!(abar_norm_bound(&h.dense().unwrap(), &q0, 6));
    }
}
