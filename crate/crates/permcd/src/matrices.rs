//! The structured matrix families the solver operates on, their
//! lower/diagonal splittings, and the per-epoch iteration matrix.
//!
//! The central object is the perturbed one-spike matrix
//! `A = delta*I + (1-delta)*ones*ones' + eps*D` with `D = diag(d)`
//! normalized so `min(d) = 0` and `max(d) = 1`. All hot-path operations
//! work on the `(n, delta, eps, d)` representation in O(n); dense copies
//! are materialized only on demand for eigenvalue work.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Largest dimension for which dense materialization is allowed.
pub const DENSE_LIMIT: usize = 2000;

/// Tolerance for the min-0/max-1 normalization checks on `d` and `u`.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// How the diagonal weight vector `d` is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum DiagonalSpec {
    /// `d_i = i/(n-1)` (0-based), deterministic.
    Linspace,
    /// I.i.d. uniforms, affinely rescaled so `min(d) = 0`, `max(d) = 1`.
    SeededUniformRescaled(u64),
    /// Caller-supplied vector; must already satisfy the normalization.
    Explicit(Vec<f64>),
}

impl DiagonalSpec {
    /// Short provenance label recorded in experiment output.
    pub fn label(&self) -> String {
        match self {
            DiagonalSpec::Linspace => "linspace".to_string(),
            DiagonalSpec::SeededUniformRescaled(s) => format!("seeded-uniform:{s}"),
            DiagonalSpec::Explicit(_) => "explicit".to_string(),
        }
    }
}

/// How the spike eigenvector `u` is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum EigvecSpec {
    /// `u_i = sqrt(delta/(delta + eps*d_i))` with `d` drawn as
    /// `SeededUniformRescaled(seed)`; both band extremes are attained.
    SeededUniformInBand(u64),
    /// Caller-supplied vector; band extremes must be attained.
    Explicit(Vec<f64>),
}

/// The triple `(n, delta, eps)` plus diagonal weights `d`, representing
/// `A = delta*I + (1-delta)*ones*ones' + eps*diag(d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredHessian {
    n: usize,
    delta: f64,
    eps: f64,
    d: Vec<f64>,
}

impl StructuredHessian {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// `mean(d)`.
    pub fn d_av(&self) -> f64 {
        self.d.iter().sum::<f64>() / self.n as f64
    }

    /// `mean(d_i^2)`.
    pub fn d_av2(&self) -> f64 {
        self.d.iter().map(|v| v * v).sum::<f64>() / self.n as f64
    }

    /// Diagonal entry `A_ii = 1 + eps*d_i`.
    pub fn diag(&self, i: usize) -> f64 {
        1.0 + self.eps * self.d[i]
    }

    /// Dense copy, guarded to `n <= DENSE_LIMIT`.
    pub fn dense(&self) -> Result<DMatrix<f64>> {
        if self.n > DENSE_LIMIT {
            return Err(Error::invalid(format!(
                "dense materialization requires n <= {DENSE_LIMIT}, got {}",
                self.n
            )));
        }
        let off = 1.0 - self.delta;
        Ok(DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j {
                1.0 + self.eps * self.d[i]
            } else {
                off
            }
        }))
    }

    /// `0.5 * x' A x` evaluated in O(n) as
    /// `0.5*(delta*|x|^2 + (1-delta)*(sum x)^2 + eps*sum d_i x_i^2)`.
    pub fn quad_value(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n, "dimension mismatch");
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut wsq = 0.0;
        for (xi, di) in x.iter().zip(&self.d) {
            sum += xi;
            sq += xi * xi;
            wsq += di * (xi * xi);
        }
        0.5 * (self.delta * sq + (1.0 - self.delta) * sum * sum + self.eps * wsq)
    }

    /// Gradient component `(A x)_i` given the cached coordinate sum.
    pub fn grad_component(&self, x: &[f64], coord_sum: f64, i: usize) -> f64 {
        (self.delta + self.eps * self.d[i]) * x[i] + (1.0 - self.delta) * coord_sum
    }
}

/// The un-scaled spike form `B = delta*I + (1-delta)*u*u'`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikedEigvecMatrix {
    n: usize,
    delta: f64,
    u: Vec<f64>,
}

impl SpikedEigvecMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let c = 1.0 - self.delta;
        DMatrix::from_fn(self.n, self.n, |i, j| {
            let v = c * self.u[i] * self.u[j];
            if i == j {
                self.delta + v
            } else {
                v
            }
        })
    }
}

/// A permutation of `{0..n-1}` with its inverse cached.
///
/// Convention: the matrix `P` has `P e_i = e_{pi[i]}`, so `(P' x)_i =
/// x[pi[i]]` and `P' D P = diag(d[pi[0]], ..., d[pi[n-1]])`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    pi: Vec<usize>,
    inv: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        let pi: Vec<usize> = (0..n).collect();
        Permutation {
            inv: pi.clone(),
            pi,
        }
    }

    /// Validates that `pi` is a bijection of `{0..n-1}`.
    pub fn from_indices(pi: Vec<usize>) -> Result<Self> {
        let n = pi.len();
        let mut inv = vec![usize::MAX; n];
        for (i, &p) in pi.iter().enumerate() {
            if p >= n {
                return Err(Error::invalid(format!("index {p} out of range 0..{n}")));
            }
            if inv[p] != usize::MAX {
                return Err(Error::invalid(format!("index {p} appears twice")));
            }
            inv[p] = i;
        }
        Ok(Permutation { pi, inv })
    }

    /// Uniformly random permutation via Fisher-Yates.
    pub fn uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut pi: Vec<usize> = (0..n).collect();
        fisher_yates(&mut pi, rng);
        let mut inv = vec![0usize; n];
        for (i, &p) in pi.iter().enumerate() {
            inv[p] = i;
        }
        Permutation { pi, inv }
    }

    pub fn n(&self) -> usize {
        self.pi.len()
    }

    pub fn pi(&self) -> &[usize] {
        &self.pi
    }

    pub fn inv(&self) -> &[usize] {
        &self.inv
    }

    /// Dense matrix with `P e_i = e_{pi[i]}`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for (i, &p) in self.pi.iter().enumerate() {
            m[(p, i)] = 1.0;
        }
        m
    }

    /// `y = P' x`, i.e. `y_i = x[pi[i]]`.
    pub fn apply_pt(&self, x: &[f64]) -> Vec<f64> {
        self.pi.iter().map(|&p| x[p]).collect()
    }

    /// `x = P y`, i.e. `x[pi[i]] = y_i`.
    pub fn apply_p(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; y.len()];
        for (i, &p) in self.pi.iter().enumerate() {
            x[p] = y[i];
        }
        x
    }

    /// `P M P'`, computed by index relabeling.
    pub fn conjugate(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| m[(self.inv[i], self.inv[j])])
    }

    /// `P' M P`.
    pub fn conjugate_t(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| m[(self.pi[i], self.pi[j])])
    }
}

/// In-place Fisher-Yates shuffle driven by the supplied RNG.
pub fn fisher_yates<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for j in (1..items.len()).rev() {
        let k = rng.random_range(0..=j);
        items.swap(j, k);
    }
}

/// The splitting `P'AP = lower + diag + lower'` of the permuted Hessian.
#[derive(Debug, Clone)]
pub struct SplitRec {
    /// `(1-delta)*E`, strictly lower triangular.
    pub lower: DMatrix<f64>,
    /// `1 + eps*d[pi[i]]` on position `i`.
    pub diag: Vec<f64>,
}

fn check_unit_interval(value: f64, what: &str) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::invalid(format!("{what} must be finite")));
    }
    Ok(())
}

/// Builds the perturbed one-spike matrix. With `eps = 0` the weight
/// vector collapses to zero and the matrix is the pure spike form.
pub fn build_perturbed_identity(
    n: usize,
    delta: f64,
    eps: f64,
    d_spec: &DiagonalSpec,
) -> Result<StructuredHessian> {
    if n == 0 {
        return Err(Error::invalid("dimension n must be >= 1"));
    }
    check_unit_interval(delta, "delta")?;
    check_unit_interval(eps, "eps")?;
    let delta_max = if n == 1 {
        f64::INFINITY
    } else {
        n as f64 / (n as f64 - 1.0)
    };
    if delta <= 0.0 || delta >= delta_max {
        return Err(Error::invalid(format!(
            "delta must lie in (0, {delta_max}), got {delta}"
        )));
    }
    if eps < 0.0 {
        return Err(Error::invalid(format!("eps must be >= 0, got {eps}")));
    }

    let d = if eps == 0.0 {
        if let DiagonalSpec::Explicit(v) = d_spec {
            if v.len() != n {
                return Err(Error::invalid("explicit d has wrong length"));
            }
            if v.iter().any(|&x| x.abs() > NORMALIZATION_TOL) {
                return Err(Error::invalid("eps = 0 requires an all-zero d"));
            }
        }
        vec![0.0; n]
    } else {
        if n < 2 {
            return Err(Error::invalid(
                "eps > 0 requires n >= 2 so that d can attain both 0 and 1",
            ));
        }
        match d_spec {
            DiagonalSpec::Linspace => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
            DiagonalSpec::SeededUniformRescaled(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if hi - lo < 1e-300 {
                    return Err(Error::degenerate("degenerate uniform draw for d"));
                }
                raw.iter().map(|&x| (x - lo) / (hi - lo)).collect()
            }
            DiagonalSpec::Explicit(v) => {
                if v.len() != n {
                    return Err(Error::invalid(format!(
                        "explicit d has length {}, expected {n}",
                        v.len()
                    )));
                }
                let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if lo.abs() > NORMALIZATION_TOL || (hi - 1.0).abs() > NORMALIZATION_TOL {
                    return Err(Error::invalid(format!(
                        "explicit d must satisfy min(d)=0, max(d)=1; got min={lo}, max={hi}"
                    )));
                }
                v.clone()
            }
        }
    };

    Ok(StructuredHessian { n, delta, eps, d })
}

/// Convenience constructor for the pure spike matrix (`eps = 0`).
pub fn spike(n: usize, delta: f64) -> Result<StructuredHessian> {
    build_perturbed_identity(n, delta, 0.0, &DiagonalSpec::Linspace)
}

/// Builds the spike-eigenvector form together with its diagonally scaled
/// companion: with `U = diag(u)`, `U^{-1} B U^{-1}` is again a perturbed
/// one-spike matrix whose weights are `d_i = delta*(u_i^{-2} - 1)/eps`.
pub fn build_spiked_eigvec(
    n: usize,
    delta: f64,
    eps: f64,
    u_spec: &EigvecSpec,
) -> Result<(SpikedEigvecMatrix, StructuredHessian)> {
    if n == 0 {
        return Err(Error::invalid("dimension n must be >= 1"));
    }
    check_unit_interval(delta, "delta")?;
    check_unit_interval(eps, "eps")?;
    if delta <= 0.0 || delta >= 1.0 {
        return Err(Error::invalid(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if eps <= 0.0 {
        return Err(Error::invalid(format!("eps must be > 0, got {eps}")));
    }
    if delta + eps <= 0.0 {
        return Err(Error::invalid("invalid band: delta + eps <= 0"));
    }

    let band_lo = (delta / (delta + eps)).sqrt();
    let u: Vec<f64> = match u_spec {
        EigvecSpec::SeededUniformInBand(seed) => {
            let h = build_perturbed_identity(
                n,
                delta,
                eps,
                &DiagonalSpec::SeededUniformRescaled(*seed),
            )?;
            h.d()
                .iter()
                .map(|&di| (delta / (delta + eps * di)).sqrt())
                .collect()
        }
        EigvecSpec::Explicit(v) => {
            if v.len() != n {
                return Err(Error::invalid(format!(
                    "explicit u has length {}, expected {n}",
                    v.len()
                )));
            }
            let lo = v.iter().map(|x| x.abs()).fold(f64::INFINITY, f64::min);
            let hi = v.iter().map(|x| x.abs()).fold(f64::NEG_INFINITY, f64::max);
            if (lo - band_lo).abs() > NORMALIZATION_TOL || (hi - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::invalid(format!(
                    "explicit |u| must attain extremes [{band_lo}, 1]; got [{lo}, {hi}]"
                )));
            }
            v.clone()
        }
    };

    // Companion weights d_i = delta*(u_i^{-2} - 1)/eps. Deriving them
    // from u amplifies the u tolerance by about 2*(delta+eps)/eps, so
    // snap the result back onto the exact min-0/max-1 normalization.
    let d_raw: Vec<f64> = u
        .iter()
        .map(|&ui| delta * (1.0 / (ui * ui) - 1.0) / eps)
        .collect();
    let lo = d_raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d_raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let companion = if hi - lo >= 0.5 {
        let d: Vec<f64> = d_raw.iter().map(|&v| (v - lo) / (hi - lo)).collect();
        build_perturbed_identity(n, delta, eps, &DiagonalSpec::Explicit(d))?
    } else {
        // Degenerate band (u essentially constant): the scaled matrix
        // collapses to the pure spike form.
        spike(n, delta)?
    };
    Ok((SpikedEigvecMatrix { n, delta, u }, companion))
}

/// Splits `P'AP` into its strictly lower part and diagonal.
pub fn split_permuted(h: &StructuredHessian, p: &Permutation) -> Result<SplitRec> {
    let n = h.n();
    if p.n() != n {
        return Err(Error::invalid("permutation length does not match n"));
    }
    let off = 1.0 - h.delta();
    let lower = DMatrix::from_fn(n, n, |i, j| if i > j { off } else { 0.0 });
    let diag = (0..n).map(|i| 1.0 + h.eps() * h.d()[p.pi()[i]]).collect();
    Ok(SplitRec { lower, diag })
}

/// The epoch matrix `C_P = -(L_P + Delta_P)^{-1} L_P'`, computed column
/// by column with forward substitution.
pub fn epoch_matrix(h: &StructuredHessian, p: &Permutation) -> Result<DMatrix<f64>> {
    let n = h.n();
    if p.n() != n {
        return Err(Error::invalid("permutation length does not match n"));
    }
    if n > DENSE_LIMIT {
        return Err(Error::invalid(format!(
            "epoch matrix requires n <= {DENSE_LIMIT}"
        )));
    }
    let off = 1.0 - h.delta();
    let diag: Vec<f64> = (0..n).map(|i| 1.0 + h.eps() * h.d()[p.pi()[i]]).collect();
    if diag.iter().any(|&v| v.abs() < 1e-300) {
        return Err(Error::degenerate("singular triangular factor"));
    }
    // Solve (L + Delta) C = -L' columnwise. The RHS column j has entries
    // -(1-delta) above the diagonal and zeros elsewhere, and L has the
    // constant value (1-delta) strictly below the diagonal, so the inner
    // sums reduce to running column sums.
    let mut c = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut colsum = 0.0;
        for i in 0..n {
            let rhs = if i < j { -off } else { 0.0 };
            let v = (rhs - off * colsum) / diag[i];
            c[(i, j)] = v;
            colsum += v;
        }
    }
    Ok(c)
}

/// The same epoch matrix via the algebraically equivalent form
/// `-(1-delta) * [(1-delta)E + I + eps*D_P]^{-1} E'`, solved with a
/// generic LU factorization. Used to cross-check `epoch_matrix`.
pub fn epoch_matrix_alt(h: &StructuredHessian, p: &Permutation) -> Result<DMatrix<f64>> {
    let n = h.n();
    if p.n() != n {
        return Err(Error::invalid("permutation length does not match n"));
    }
    let off = 1.0 - h.delta();
    let m = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0 + h.eps() * h.d()[p.pi()[i]]
        } else if i > j {
            off
        } else {
            0.0
        }
    });
    let et = DMatrix::from_fn(n, n, |i, j| if i < j { -off } else { 0.0 });
    m.lu()
        .solve(&et)
        .ok_or_else(|| Error::degenerate("LU solve failed for epoch matrix"))
}

/// Closed-form `Lbar = -(I + (1-delta)E)^{-1}`: `-1` on the diagonal and
/// `(1-delta)*delta^{i-j-1}` strictly below it.
pub fn lbar(n: usize, delta: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            -1.0
        } else if i > j {
            (1.0 - delta) * delta.powi((i - j - 1) as i32)
        } else {
            0.0
        }
    })
}

/// Elementwise sandwich test: `spike(delta) <= A <= (1+eps)*spike(delta')`
/// with `delta' = (delta+eps)/(1+eps)`.
pub fn sandwich_check(h: &StructuredHessian) -> Result<bool> {
    if h.eps() <= 0.0 {
        return Err(Error::invalid("sandwich check requires eps > 0"));
    }
    let n = h.n();
    let delta = h.delta();
    let eps = h.eps();
    let dp = (delta + eps) / (1.0 + eps);
    let tol = 1e-12;
    for i in 0..n {
        for j in 0..n {
            let (lo, a, hi) = if i == j {
                (1.0, 1.0 + eps * h.d()[i], (1.0 + eps) * 1.0)
            } else {
                (1.0 - delta, 1.0 - delta, (1.0 + eps) * (1.0 - dp))
            };
            if a < lo - tol * (1.0 + lo.abs()) || a > hi + tol * (1.0 + hi.abs()) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Spectral 2-norm via singular values.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}
