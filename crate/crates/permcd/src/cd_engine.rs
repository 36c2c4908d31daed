//! Exact-line-search coordinate descent on the structured quadratics,
//! under the four coordinate orderings, plus a generic dense runner used
//! for diagonal-scaling twin checks.
//!
//! A coordinate update on `A = delta*I + (1-delta)*ones*ones' + eps*D`
//! has the closed form `x_i <- -(1-delta)*(sum(x) - x_i)/(1 + eps*d_i)`,
//! so each step is O(1) given the cached coordinate sum. Cached scalars
//! are recomputed from scratch at every epoch boundary to stop drift.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrices::{epoch_matrix, fisher_yates, Permutation, StructuredHessian};

/// Objective floor below which a trace is truncated and flagged, keeping
/// denormals out of rate estimates.
pub const UNDERFLOW_FLOOR: f64 = 1e-280;

/// Coordinate selection rule for one epoch of `n` updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingStrategy {
    /// `i(l, j) = j+1`: fixed order each epoch (CCD).
    Cyclic,
    /// I.i.d. uniform draws (RCD).
    UniformRandom,
    /// A fresh Fisher-Yates permutation per epoch (RPCD).
    RandomPermutation,
    /// I.i.d. draws with probability proportional to the diagonal `A_ii`.
    DiagonalWeighted,
}

impl OrderingStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            OrderingStrategy::Cyclic => "ccd",
            OrderingStrategy::UniformRandom => "rcd",
            OrderingStrategy::RandomPermutation => "rpcd",
            OrderingStrategy::DiagonalWeighted => "rcd-weighted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ccd" | "cyclic" => Ok(OrderingStrategy::Cyclic),
            "rcd" | "uniform" | "uniform-random" => Ok(OrderingStrategy::UniformRandom),
            "rpcd" | "random-permutation" => Ok(OrderingStrategy::RandomPermutation),
            "rcd-weighted" | "diagonal-weighted" => Ok(OrderingStrategy::DiagonalWeighted),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for OrderingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Iterate vector plus the cached scalars that make updates O(1).
#[derive(Debug, Clone)]
pub struct CdState {
    x: Vec<f64>,
    coord_sum: f64,
    sum_sq: f64,
    weighted_sq: f64,
    fval: f64,
}

impl CdState {
    pub fn new(h: &StructuredHessian, x: Vec<f64>) -> Self {
        assert_eq!(x.len(), h.n(), "dimension mismatch");
        let mut state = CdState {
            x,
            coord_sum: 0.0,
            sum_sq: 0.0,
            weighted_sq: 0.0,
            fval: 0.0,
        };
        state.refresh(h);
        state
    }

    /// Recomputes every cached scalar from the iterate.
    pub fn refresh(&mut self, h: &StructuredHessian) {
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut wsq = 0.0;
        for (xi, di) in self.x.iter().zip(h.d()) {
            sum += xi;
            sq += xi * xi;
            // Associate as d*(x*x) to match the incremental step update,
            // so exact cancellations survive.
            wsq += di * (xi * xi);
        }
        self.coord_sum = sum;
        self.sum_sq = sq;
        self.weighted_sq = wsq;
        self.fval = 0.5
            * (h.delta() * sq + (1.0 - h.delta()) * sum * sum + h.eps() * wsq);
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn coord_sum(&self) -> f64 {
        self.coord_sum
    }

    pub fn fval(&self) -> f64 {
        self.fval
    }
}

/// One exact-line-search update of coordinate `i`.
pub fn cd_step(h: &StructuredHessian, state: &mut CdState, i: usize) {
    let delta = h.delta();
    let xi = state.x[i];
    let rest = state.coord_sum - xi;
    let new_xi = -(1.0 - delta) * rest / (1.0 + h.eps() * h.d()[i]);
    state.coord_sum += new_xi - xi;
    state.sum_sq += new_xi * new_xi - xi * xi;
    state.weighted_sq += h.d()[i] * (new_xi * new_xi - xi * xi);
    state.x[i] = new_xi;
    state.fval = 0.5
        * (delta * state.sum_sq
            + (1.0 - delta) * state.coord_sum * state.coord_sum
            + h.eps() * state.weighted_sq);
}

/// Produces the index sequence for each epoch, deterministically from a
/// seed. Engines that must share orderings consume the same sampler
/// construction.
#[derive(Debug, Clone)]
pub struct OrderingSampler {
    strategy: OrderingStrategy,
    n: usize,
    rng: ChaCha8Rng,
    /// Cumulative diagonal weights for `DiagonalWeighted`.
    cum_weights: Vec<f64>,
}

impl OrderingSampler {
    pub fn new(strategy: OrderingStrategy, h: &StructuredHessian, seed: u64) -> Self {
        let cum_weights = if strategy == OrderingStrategy::DiagonalWeighted {
            let mut acc = 0.0;
            h.d()
                .iter()
                .map(|&di| {
                    acc += 1.0 + h.eps() * di;
                    acc
                })
                .collect()
        } else {
            Vec::new()
        };
        OrderingSampler {
            strategy,
            n: h.n(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            cum_weights,
        }
    }

    /// Fills `order` with the next epoch's coordinate indices.
    pub fn next_epoch(&mut self, order: &mut Vec<usize>) {
        let n = self.n;
        order.clear();
        match self.strategy {
            OrderingStrategy::Cyclic => order.extend(0..n),
            OrderingStrategy::UniformRandom => {
                order.extend((0..n).map(|_| self.rng.random_range(0..n)));
            }
            OrderingStrategy::RandomPermutation => {
                order.extend(0..n);
                fisher_yates(order, &mut self.rng);
            }
            OrderingStrategy::DiagonalWeighted => {
                let total = *self.cum_weights.last().expect("weights");
                for _ in 0..n {
                    let r = self.rng.random::<f64>() * total;
                    let idx = self.cum_weights.partition_point(|&c| c <= r);
                    order.push(idx.min(n - 1));
                }
            }
        }
    }
}

/// Run parameters echoed into every trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceParams {
    pub n: usize,
    pub delta: f64,
    pub eps: f64,
    pub strategy: OrderingStrategy,
    pub d_spec: String,
    pub x0_spec: String,
}

/// Objective values at epoch boundaries, `fvals[0] = f(x0)`.
#[derive(Debug, Clone, Serialize)]
pub struct EpochTrace {
    pub fvals: Vec<f64>,
    pub seed: u64,
    /// True when the run stopped early because `f` fell below the floor.
    pub truncated: bool,
    pub params: TraceParams,
}

/// Runs `epochs * n` coordinate steps, recording `f` at each epoch
/// boundary. Deterministic for a given seed.
pub fn run_epochs(
    h: &StructuredHessian,
    x0: &[f64],
    strategy: OrderingStrategy,
    epochs: usize,
    seed: u64,
) -> Result<EpochTrace> {
    run_epochs_until(h, x0, strategy, epochs, seed, UNDERFLOW_FLOOR)
}

/// As `run_epochs`, with an explicit objective floor for early stopping.
pub fn run_epochs_until(
    h: &StructuredHessian,
    x0: &[f64],
    strategy: OrderingStrategy,
    epochs: usize,
    seed: u64,
    f_floor: f64,
) -> Result<EpochTrace> {
    if x0.len() != h.n() {
        return Err(Error::invalid("x0 length does not match n"));
    }
    let mut state = CdState::new(h, x0.to_vec());
    let mut sampler = OrderingSampler::new(strategy, h, seed);
    let mut order = Vec::with_capacity(h.n());
    let mut fvals = Vec::with_capacity(epochs + 1);
    fvals.push(state.fval());
    let mut truncated = false;
    for _ in 0..epochs {
        sampler.next_epoch(&mut order);
        for &i in &order {
            cd_step(h, &mut state, i);
        }
        state.refresh(h);
        fvals.push(state.fval());
        if state.fval() < f_floor {
            truncated = true;
            break;
        }
    }
    Ok(EpochTrace {
        fvals,
        seed,
        truncated,
        params: TraceParams {
            n: h.n(),
            delta: h.delta(),
            eps: h.eps(),
            strategy,
            d_spec: String::new(),
            x0_spec: String::new(),
        },
    })
}

/// Applies one epoch as the dense map `P C_P P' x`; oracle counterpart
/// of the step-by-step loop.
pub fn epoch_via_matrix(
    h: &StructuredHessian,
    p: &Permutation,
    x: &[f64],
) -> Result<Vec<f64>> {
    if x.len() != h.n() {
        return Err(Error::invalid("x length does not match n"));
    }
    let c = epoch_matrix(h, p)?;
    let z = p.apply_pt(x);
    let zv = nalgebra::DVector::from_column_slice(&z);
    let w = c * zv;
    Ok(p.apply_p(w.as_slice()))
}

/// Generic dense coordinate descent with exact line search; keeps the
/// gradient cached so a step is O(n).
#[derive(Debug, Clone)]
pub struct DenseCd {
    a: DMatrix<f64>,
    x: Vec<f64>,
    grad: Vec<f64>,
}

impl DenseCd {
    pub fn new(a: DMatrix<f64>, x0: Vec<f64>) -> Self {
        let xv = nalgebra::DVector::from_column_slice(&x0);
        let grad = (&a * xv).as_slice().to_vec();
        DenseCd { a, x: x0, grad }
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn fval(&self) -> f64 {
        0.5 * self
            .x
            .iter()
            .zip(&self.grad)
            .map(|(xi, gi)| xi * gi)
            .sum::<f64>()
    }

    pub fn step(&mut self, i: usize) {
        let delta = -self.grad[i] / self.a[(i, i)];
        self.x[i] += delta;
        let n = self.x.len();
        for r in 0..n {
            self.grad[r] += delta * self.a[(r, i)];
        }
    }
}

/// Runs the dense engine for `epochs` epochs with the same ordering
/// stream a structured run would use.
pub fn run_epochs_dense(
    a: &DMatrix<f64>,
    x0: &[f64],
    sampler: &mut OrderingSampler,
    epochs: usize,
    seed: u64,
    strategy: OrderingStrategy,
    f_floor: f64,
) -> Result<EpochTrace> {
    let n = a.nrows();
    if x0.len() != n {
        return Err(Error::invalid("x0 length does not match n"));
    }
    let mut cd = DenseCd::new(a.clone(), x0.to_vec());
    let mut order = Vec::with_capacity(n);
    let mut fvals = vec![cd.fval()];
    let mut truncated = false;
    for _ in 0..epochs {
        sampler.next_epoch(&mut order);
        for &i in &order {
            cd.step(i);
        }
        let f = cd.fval();
        fvals.push(f);
        if f < f_floor {
            truncated = true;
            break;
        }
    }
    Ok(EpochTrace {
        fvals,
        seed,
        truncated,
        params: TraceParams {
            n,
            delta: f64::NAN,
            eps: f64::NAN,
            strategy,
            d_spec: "dense".to_string(),
            x0_spec: String::new(),
        },
    })
}

/// Result of running the same index sequence on `A` from `x0` and on
/// `F^{-1} A F^{-1}` from `F x0`.
#[derive(Debug, Clone, Serialize)]
pub struct TwinRunReport {
    /// Per-iteration objective values of the base run, starting at `f(x0)`.
    pub f_base: Vec<f64>,
    /// Per-iteration objective values of the scaled run.
    pub f_scaled: Vec<f64>,
    /// `max_k |f_k - f~_k|`.
    pub max_f_gap: f64,
    /// `max_k max_i |x~_i - F_ii x_i|`.
    pub max_state_gap: f64,
}

/// Twin execution check for invariance of exact-line-search CD under
/// symmetric diagonal scaling.
pub fn scaled_twin_run(
    a: &DMatrix<f64>,
    f_diag: &[f64],
    x0: &[f64],
    index_seq: &[usize],
) -> Result<TwinRunReport> {
    let n = a.nrows();
    if f_diag.len() != n || x0.len() != n {
        return Err(Error::invalid("dimension mismatch"));
    }
    if f_diag.iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::invalid("scaling diagonal must be nonzero and finite"));
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] / (f_diag[i] * f_diag[j]));
    let x0_scaled: Vec<f64> = x0.iter().zip(f_diag).map(|(x, f)| x * f).collect();

    let mut base = DenseCd::new(a.clone(), x0.to_vec());
    let mut twin = DenseCd::new(scaled, x0_scaled);
    let mut f_base = vec![base.fval()];
    let mut f_scaled = vec![twin.fval()];
    let mut max_f_gap: f64 = (f_base[0] - f_scaled[0]).abs();
    let mut max_state_gap: f64 = 0.0;
    for &i in index_seq {
        if i >= n {
            return Err(Error::invalid(format!("index {i} out of range")));
        }
        base.step(i);
        twin.step(i);
        let fb = base.fval();
        let ft = twin.fval();
        f_base.push(fb);
        f_scaled.push(ft);
        max_f_gap = max_f_gap.max((fb - ft).abs());
        for k in 0..n {
            max_state_gap = max_state_gap.max((twin.x()[k] - f_diag[k] * base.x()[k]).abs());
        }
    }
    Ok(TwinRunReport {
        f_base,
        f_scaled,
        max_f_gap,
        max_state_gap,
    })
}
