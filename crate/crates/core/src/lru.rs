//! Linear recurrent unit with diagonal complex recurrence.
//!
//! ```text
//! h_t = lambda ⊙ h_{t-1} + gamma ⊙ (B x_t)
//! y_t = Re[C h_t] + D x_t
//! lambda = exp(-exp(nu_log) + i exp(theta_log)),  gamma = exp(gamma_log)
//! ```
//!
//! Every state coordinate is an independent recurrent module, so the
//! sensitivity of `h_t` to the recurrent parameters is diagonal and can be
//! carried forward in time exactly (see [`SensitivityState`]).
//!
//! Derivatives with respect to complex quantities follow the Wirtinger
//! convention: `dL/dz = (dL/dRe z - i dL/dIm z) / 2`. Since `h_t` is a
//! holomorphic function of `lambda`, `gamma` (read as complex) and `B`, the
//! forward sensitivities need only one complex number per parameter.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{cmatvec_into, re_cmatvec_into, Complex, ComplexMatrix, ComplexVector, Matrix, ZERO};

/// Trainable quantities of one LRU layer with `N` states and `H` features.
#[derive(Clone, Debug, PartialEq)]
pub struct LruParams {
    pub nu_log: Vec<f64>,
    pub theta_log: Vec<f64>,
    pub gamma_log: Vec<f64>,
    /// `N x H`
    pub b: ComplexMatrix,
    /// `H x N`
    pub c: ComplexMatrix,
    /// `H x H`
    pub d: Matrix,
}

impl LruParams {
    /// All-zero parameters (`|lambda| = e^-1`, `gamma = 1`).
    pub fn zeros(state_size: usize, model_size: usize) -> Result<Self> {
        if state_size == 0 || model_size == 0 {
            return Err(Error::InvalidModel(format!(
                "LRU needs N >= 1 and H >= 1 (got N={state_size}, H={model_size})"
            )));
        }
        Ok(Self {
            nu_log: vec![0.0; state_size],
            theta_log: vec![0.0; state_size],
            gamma_log: vec![0.0; state_size],
            b: ComplexMatrix::zeros(state_size, model_size),
            c: ComplexMatrix::zeros(model_size, state_size),
            d: Matrix::zeros(model_size, model_size),
        })
    }

    pub fn state_size(&self) -> usize {
        self.nu_log.len()
    }

    pub fn model_size(&self) -> usize {
        self.d.rows()
    }

    pub fn lambda(&self) -> ComplexVector {
        lambda_of(self)
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.gamma_log.iter().map(|g| g.exp()).collect()
    }

    /// Sets `nu_log`/`theta_log` so that `lambda_i` equals the given value.
    ///
    /// A zero modulus maps to a large `nu_log` (`exp(-exp(50))` underflows to 0).
    pub fn set_lambda(&mut self, lambda: &[Complex]) {
        for (i, l) in lambda.iter().enumerate() {
            let (r, phase) = l.to_polar();
            let phase = if phase < 0.0 { phase + TAU } else { phase };
            self.nu_log[i] = if r > 0.0 { (-r.ln()).ln() } else { 50.0 };
            self.theta_log[i] = phase.max(f64::MIN_POSITIVE).ln();
        }
    }

    /// Number of recurrent parameters `|{lambda, gamma, B}|` counted as complex entries.
    pub fn recurrent_param_count(&self) -> usize {
        let n = self.state_size();
        2 * n + n * self.model_size()
    }

    pub(crate) fn coeffs(&self) -> LruCoeffs {
        LruCoeffs {
            lambda: self.lambda(),
            gamma: self.gamma(),
        }
    }
}

/// `lambda` and `gamma` evaluated from their log parametrization.
#[derive(Clone, Debug)]
pub(crate) struct LruCoeffs {
    pub lambda: ComplexVector,
    pub gamma: Vec<f64>,
}

pub fn lambda_of(params: &LruParams) -> ComplexVector {
    params
        .nu_log
        .iter()
        .zip(&params.theta_log)
        .map(|(nu, th)| Complex::new(-nu.exp(), th.exp()).exp())
        .collect()
}

/// Samples a layer with `|lambda|` uniform over the ring area `r_min <= |lambda| <= r_max`.
///
/// The phase is uniform in `[0, 2pi)`, `gamma = sqrt(1 - |lambda|^2)`, each real
/// component of `B` is `N(0, 1/(2H))`, of `C` is `N(0, 1/(2N))`, and `D = 0`.
pub fn init_lru<R: Rng + ?Sized>(
    rng: &mut R,
    state_size: usize,
    model_size: usize,
    r_min: f64,
    r_max: f64,
) -> Result<LruParams> {
    if !(0.0..1.0).contains(&r_min) || r_max <= r_min || r_max > 1.0 || !r_max.is_finite() {
        return Err(Error::InvalidRadius { r_min, r_max });
    }
    let mut p = LruParams::zeros(state_size, model_size)?;
    let (lo, hi) = (r_min * r_min, r_max * r_max);
    for i in 0..state_size {
        let u: f64 = rng.random_range(lo..hi);
        // keep nu_log finite; 1e-8 stays inside any admissible ring
        let r = u.sqrt().max(1e-8).max(r_min);
        let phase: f64 = rng.random_range(0.0..TAU);
        p.nu_log[i] = (-r.ln()).ln();
        p.theta_log[i] = phase.max(f64::MIN_POSITIVE).ln();
        let modulus = (-p.nu_log[i].exp()).exp();
        p.gamma_log[i] = 0.5 * (1.0 - modulus * modulus).ln();
    }
    let nb = Normal::new(0.0, (1.0 / (2.0 * model_size as f64)).sqrt()).expect("positive std");
    for v in p.b.as_mut_slice() {
        *v = Complex::new(nb.sample(rng), nb.sample(rng));
    }
    let nc = Normal::new(0.0, (1.0 / (2.0 * state_size as f64)).sqrt()).expect("positive std");
    for v in p.c.as_mut_slice() {
        *v = Complex::new(nc.sample(rng), nc.sample(rng));
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LruState {
    pub h: ComplexVector,
}

impl LruState {
    pub fn zeros(state_size: usize) -> Self {
        Self {
            h: vec![ZERO; state_size],
        }
    }
}

/// One step: consume `x_t`, advance `h_{t-1} -> h_t`, emit `y_t` from `h_t`.
pub fn lru_step(params: &LruParams, state: &LruState, x: &[f64]) -> Result<(LruState, Vec<f64>)> {
    let n = params.state_size();
    let hsz = params.model_size();
    if x.len() != hsz {
        return Err(Error::Dimension {
            context: "lru_step input",
            expected: hsz,
            actual: x.len(),
        });
    }
    if state.h.len() != n {
        return Err(Error::Dimension {
            context: "lru_step state",
            expected: n,
            actual: state.h.len(),
        });
    }
    let coeffs = params.coeffs();
    let mut next = state.clone();
    let mut bx = vec![ZERO; n];
    let mut y = vec![0.0; hsz];
    step_in_place(params, &coeffs, &mut next.h, x, &mut bx, &mut y);
    Ok((next, y))
}

/// In-place kernel behind [`lru_step`]; also leaves the raw `B x` in `bx`.
#[inline]
pub(crate) fn step_in_place(
    params: &LruParams,
    coeffs: &LruCoeffs,
    h: &mut [Complex],
    x: &[f64],
    bx: &mut [Complex],
    y: &mut [f64],
) {
    cmatvec_into(&params.b, x, bx);
    for ((hi, (&l, &g)), &b) in h
        .iter_mut()
        .zip(coeffs.lambda.iter().zip(&coeffs.gamma))
        .zip(bx.iter())
    {
        *hi = l * *hi + b * g;
    }
    re_cmatvec_into(&params.c, h, y);
    let hsz = params.model_size();
    for (yi, row) in y.iter_mut().zip(params.d.as_slice().chunks_exact(hsz)) {
        *yi += crate::numerics::dot(row, x);
    }
}

/// Forward sensitivities of the state to the recurrent parameters.
///
/// `e_lambda[i] = dh_i/dlambda_i`, `e_gamma[i] = dh_i/dgamma_i` (gamma read as
/// complex), `e_b[(i, j)] = dh_i/dB_ij`. All other entries of the full
/// Jacobian are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityState {
    pub e_lambda: ComplexVector,
    pub e_gamma: ComplexVector,
    pub e_b: ComplexMatrix,
}

impl SensitivityState {
    pub fn zeros(state_size: usize, model_size: usize) -> Self {
        Self {
            e_lambda: vec![ZERO; state_size],
            e_gamma: vec![ZERO; state_size],
            e_b: ComplexMatrix::zeros(state_size, model_size),
        }
    }

    /// Complex entries held: `N + N + N*H`.
    pub fn entry_count(&self) -> usize {
        self.e_lambda.len() + self.e_gamma.len() + self.e_b.as_slice().len()
    }

    pub fn reset(&mut self) {
        self.e_lambda.fill(ZERO);
        self.e_gamma.fill(ZERO);
        self.e_b.fill_zero();
    }
}

/// Propagates the traces across the step `h_prev -> h_next` driven by `x_next`.
///
/// ```text
/// e_lambda' = lambda ⊙ e_lambda + h_prev
/// e_gamma'  = lambda ⊙ e_gamma  + B x_next
/// e_B'      = diag(lambda) e_B  + gamma x_next^T
/// ```
pub fn trace_step(
    params: &LruParams,
    h_prev: &[Complex],
    x_next: &[f64],
    traces: &SensitivityState,
) -> Result<SensitivityState> {
    let n = params.state_size();
    if h_prev.len() != n || traces.e_lambda.len() != n || traces.e_b.shape() != params.b.shape() {
        return Err(Error::Dimension {
            context: "trace_step",
            expected: n,
            actual: h_prev.len(),
        });
    }
    if x_next.len() != params.model_size() {
        return Err(Error::Dimension {
            context: "trace_step input",
            expected: params.model_size(),
            actual: x_next.len(),
        });
    }
    let coeffs = params.coeffs();
    let mut bx = vec![ZERO; n];
    cmatvec_into(&params.b, x_next, &mut bx);
    let mut next = traces.clone();
    propagate_traces(&coeffs, h_prev, &bx, x_next, &mut next);
    Ok(next)
}

/// In-place full trace law.
#[inline]
pub(crate) fn propagate_traces(
    coeffs: &LruCoeffs,
    h_prev: &[Complex],
    bx: &[Complex],
    x: &[f64],
    traces: &mut SensitivityState,
) {
    for i in 0..coeffs.lambda.len() {
        let l = coeffs.lambda[i];
        let g = coeffs.gamma[i];
        traces.e_lambda[i] = l * traces.e_lambda[i] + h_prev[i];
        traces.e_gamma[i] = l * traces.e_gamma[i] + bx[i];
        for (e, &xj) in traces.e_b.row_mut(i).iter_mut().zip(x) {
            *e = Complex::new(l.re * e.re - l.im * e.im + g * xj, l.re * e.im + l.im * e.re);
        }
    }
}

/// Wirtinger derivatives of the loss with respect to the recurrent parameters,
/// summed over time.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentGrad {
    /// `dL/dlambda`
    pub d_lambda: ComplexVector,
    /// `Re[dL/dgamma^C]` (the factor 2 is applied by [`chain_to_real_params`])
    pub d_gamma: Vec<f64>,
    /// `dL/dB`
    pub d_b: ComplexMatrix,
}

impl RecurrentGrad {
    pub fn zeros(state_size: usize, model_size: usize) -> Self {
        Self {
            d_lambda: vec![ZERO; state_size],
            d_gamma: vec![0.0; state_size],
            d_b: ComplexMatrix::zeros(state_size, model_size),
        }
    }

    /// `acc += (delta ⊙ e_lambda, Re[delta ⊙ e_gamma], diag(delta) e_B)`
    #[inline]
    pub fn accumulate(&mut self, delta: &[Complex], traces: &SensitivityState) {
        for (i, &d) in delta.iter().enumerate() {
            if d == ZERO {
                continue;
            }
            self.d_lambda[i] += d * traces.e_lambda[i];
            self.d_gamma[i] += (d * traces.e_gamma[i]).re;
            for (acc, e) in self.d_b.row_mut(i).iter_mut().zip(traces.e_b.row(i)) {
                acc.re += d.re * e.re - d.im * e.im;
                acc.im += d.re * e.im + d.im * e.re;
            }
        }
    }

    pub fn add(&mut self, other: &RecurrentGrad) {
        for (a, b) in self.d_lambda.iter_mut().zip(&other.d_lambda) {
            *a += b;
        }
        for (a, b) in self.d_gamma.iter_mut().zip(&other.d_gamma) {
            *a += b;
        }
        for (a, b) in self.d_b.as_mut_slice().iter_mut().zip(other.d_b.as_slice()) {
            *a += b;
        }
    }

    pub fn reset(&mut self) {
        self.d_lambda.fill(ZERO);
        self.d_gamma.fill(0.0);
        self.d_b.fill_zero();
    }
}

pub fn accumulate_recurrent_grad(
    delta: &[Complex],
    traces: &SensitivityState,
    acc: &RecurrentGrad,
) -> RecurrentGrad {
    let mut out = acc.clone();
    out.accumulate(delta, traces);
    out
}

/// Real gradient of the recurrent parameters.
///
/// `b` holds `(dL/dRe B_ij, dL/dIm B_ij)` packed as a complex number.
#[derive(Clone, Debug, PartialEq)]
pub struct RealRecurrentGrad {
    pub nu_log: Vec<f64>,
    pub theta_log: Vec<f64>,
    pub gamma_log: Vec<f64>,
    pub b: ComplexMatrix,
}

/// Maps accumulated Wirtinger derivatives onto the real trainable parameters.
///
/// For a real loss, `dL/dRe z = 2 Re[dL/dz]` and `dL/dIm z = -2 Im[dL/dz]`.
pub fn chain_to_real_params(acc: &RecurrentGrad, params: &LruParams) -> RealRecurrentGrad {
    let lambda = params.lambda();
    let n = params.state_size();
    let mut nu_log = vec![0.0; n];
    let mut theta_log = vec![0.0; n];
    let mut gamma_log = vec![0.0; n];
    for i in 0..n {
        let dl_lambda = acc.d_lambda[i] * lambda[i];
        nu_log[i] = 2.0 * (dl_lambda * -params.nu_log[i].exp()).re;
        theta_log[i] = 2.0 * (dl_lambda * Complex::new(0.0, params.theta_log[i].exp())).re;
        gamma_log[i] = 2.0 * acc.d_gamma[i] * params.gamma_log[i].exp();
    }
    let mut b = acc.d_b.clone();
    for v in b.as_mut_slice() {
        *v = Complex::new(2.0 * v.re, -2.0 * v.im);
    }
    RealRecurrentGrad {
        nu_log,
        theta_log,
        gamma_log,
        b,
    }
}
