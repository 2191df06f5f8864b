//! Explicit Runge–Kutta solvers over pseudo-time.
//!
//! Every stage is built from tape operations, so gradients of the outputs
//! with respect to the initial state and any parameters captured by the
//! dynamics come from replaying the tape. Step-size decisions are plain
//! `f64` values and carry no gradient.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("non-finite state at step {step} (s = {s})")]
    Divergence { step: usize, s: f64 },
    #[error("no convergence within {max_steps} steps; smallest step reached {min_dt:e}")]
    NonConvergence { max_steps: usize, min_dt: f64 },
    #[error("invalid output times: {0}")]
    InvalidTimes(String),
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SolveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "euler" => Some(Method::Euler),
            "rk4" => Some(Method::Rk4),
            "dopri5" => Some(Method::Dopri5),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    /// First trial step for the adaptive method; chosen automatically if unset.
    pub initial_step: Option<f64>,
    pub max_steps: usize,
    /// Step for the fixed-step methods.
    pub dt: f64,
    /// Adaptive method only: read outputs from the dense interpolant instead
    /// of shortening steps to land on each requested time.
    pub dense_output: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri5,
            rtol: 1e-5,
            atol: 1e-7,
            initial_step: None,
            max_steps: 10_000,
            dt: 0.25,
            dense_output: true,
        }
    }
}

impl SolverConfig {
    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn fixed(method: Method, dt: f64) -> Self {
        Self {
            method,
            dt,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SolveError::InvalidConfig(m.into()));
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return bad("rtol and atol must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.method != Method::Dopri5 && !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("fixed-step methods need dt > 0");
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0 && h.is_finite()) {
                return bad("initial_step must be positive");
            }
        }
        Ok(())
    }
}

/// One attempted step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub s: f64,
    pub accepted: bool,
    pub err_norm: f64,
    pub dt: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult<'t> {
    /// State at each requested time, in order.
    pub outputs: Vec<Var<'t>>,
    pub trace: Vec<TraceRow>,
    /// Step size the controller would try next; useful to warm-start a
    /// follow-on solve.
    pub next_dt: f64,
    pub evaluations: usize,
}

impl SolveResult<'_> {
    pub fn accepted_steps(&self) -> usize {
        self.trace.iter().filter(|r| r.accepted).count()
    }
}

pub fn write_trace_csv(trace: &[TraceRow], w: impl Write) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in trace {
        wtr.serialize(row).map_err(std::io::Error::other)?;
    }
    wtr.flush()
}

fn check_times(s0: f64, times: &[f64]) -> Result<()> {
    if !s0.is_finite() || times.iter().any(|t| !t.is_finite()) {
        return Err(SolveError::InvalidTimes("non-finite time".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(SolveError::InvalidTimes("times must be sorted".into()));
    }
    if times.first().is_some_and(|&t| t < s0) {
        return Err(SolveError::InvalidTimes(format!(
            "first time {} precedes start {s0}",
            times[0]
        )));
    }
    Ok(())
}

/// Solves `dh/ds = f(s, h)` from `(s0, h0)` and returns the state at each of
/// `times` (sorted, all `>= s0`).
pub fn solve<'t, F>(
    f: F,
    h0: Var<'t>,
    s0: f64,
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<SolveResult<'t>>
where
    F: FnMut(f64, Var<'t>) -> std::result::Result<Var<'t>, TensorError>,
{
    cfg.validate()?;
    check_times(s0, times)?;
    match cfg.method {
        Method::Euler => fixed_step(f, h0, s0, times, cfg, euler_step),
        Method::Rk4 => fixed_step(f, h0, s0, times, cfg, rk4_step),
        Method::Dopri5 => dopri5(f, h0, s0, times, cfg),
    }
}

/// Forward Euler from `s0` to `s1`.
pub fn euler_solve<'t, F>(f: F, h0: Var<'t>, s0: f64, s1: f64, dt: f64) -> Result<Var<'t>>
where
    F: FnMut(f64, Var<'t>) -> std::result::Result<Var<'t>, TensorError>,
{
    let cfg = SolverConfig::fixed(Method::Euler, dt);
    Ok(solve(f, h0, s0, &[s1], &cfg)?.outputs[0])
}

/// Classical 4-stage Runge–Kutta from `s0` to `s1`.
pub fn rk4_solve<'t, F>(f: F, h0: Var<'t>, s0: f64, s1: f64, dt: f64) -> Result<Var<'t>>
where
    F: FnMut(f64, Var<'t>) -> std::result::Result<Var<'t>, TensorError>,
{
    let cfg = SolverConfig::fixed(Method::Rk4, dt);
    Ok(solve(f, h0, s0, &[s1], &cfg)?.outputs[0])
}

/// Dormand–Prince 5(4) with outputs at `times`.
pub fn dopri5_solve<'t, F>(
    f: F,
    h0: Var<'t>,
    s0: f64,
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<SolveResult<'t>>
where
    F: FnMut(f64, Var<'t>) -> std::result::Result<Var<'t>, TensorError>,
{
    let cfg = SolverConfig {
        method: Method::Dopri5,
        ..*cfg
    };
    solve(f, h0, s0, times, &cfg)
}

/// Given the state `h1` at `t1`, recovers the state at `t0 <= t1` by solving
/// `dh/ds = -f(-s, h)` from `-t1` to `-t0`.
pub fn solve_backwards<'t, F>(
    mut f: F,
    h1: Var<'t>,
    t1: f64,
    t0: f64,
    cfg: &SolverConfig,
) -> Result<SolveResult<'t>>
where
    F: FnMut(f64, Var<'t>) -> std::result::Result<Var<'t>, TensorError>,
{
    if t1 < t0 {
        return Err(SolveError::InvalidTimes(format!(
            "backward solve needs t1 >= t0, got {t1} < {t0}"
        )));
    }
    solve(move |s, h| Ok(f(-s, h)?.neg()), h1, -t1, &[-t0], cfg)
}

type StepFn<'t, F> = fn(&mut F, f64, Var<'t>, f64) -> std::result::Result<Var<'t>, TensorError>;

fn euler_step<'t, F>(f: &mut F, s: f64, h: Var<'t>, dt: f64) -> std::result::Result<Var<'t>, TensorError>
where
    F: FnMut(f64, Var<'t>) -> std::result::Result<Var<'t>, TensorError>,
{
    let k = f(s, h)?;
    Var::lincomb(&[(h, 1.0), (k, dt)])
}

fn rk4_step<'t, F>(f: &mut F, s: f64, h: Var<'t>, dt: f64) -> std::result::Result<Var<'t>, TensorError>
where
    F: FnMut(f64, Var<'t>) -> std::result::Result<Var<'t>, TensorError>,
{
    let k1 = f(s, h)?;
    let k2 = f(s + 0.5 * dt, Var::lincomb(&[(h, 1.0), (k1, 0.5 * dt)])?)?;
    let k3 = f(s + 0.5 * dt, Var::lincomb(&[(h, 1.0), (k2, 0.5 * dt)])?)?;
    let k4 = f(s + dt, Var::lincomb(&[(h, 1.0), (k3, dt)])?)?;
    Var::lincomb(&[
        (h, 1.0),
        (k1, dt / 6.0),
        (k2, dt / 3.0),
        (k3, dt / 3.0),
        (k4, dt / 6.0),
    ])
}

fn fixed_step<'t, F>(
    mut f: F,
    h0: Var<'t>,
    s0: f64,
    times: &[f64],
    cfg: &SolverConfig,
    step: StepFn<'t, F>,
) -> Result<SolveResult<'t>>
where
    F: FnMut(f64, Var<'t>) -> std::result::Result<Var<'t>, TensorError>,
{
    let evals_per_step = if cfg.method == Method::Euler { 1 } else { 4 };
    let mut h = h0;
    let mut s = s0;
    let mut outputs = Vec::with_capacity(times.len());
    let mut trace = Vec::new();
    for &target in times {
        let span = target - s;
        // tolerate round-off so that e.g. 2.0 / 0.5 is exactly four steps
        let n = if span > 0.0 {
            ((span / cfg.dt) - 1e-9).ceil().max(1.0) as usize
        } else {
            0
        };
        for i in 0..n {
            let next = if i + 1 == n { target } else { s + cfg.dt };
            let dt = next - s;
            h = step(&mut f, s, h, dt)?;
            trace.push(TraceRow {
                step: trace.len(),
                s: next,
                accepted: true,
                err_norm: 0.0,
                dt,
            });
            if !h.with_value(Tensor::is_finite) {
                return Err(SolveError::Divergence {
                    step: trace.len() - 1,
                    s: next,
                });
            }
            s = next;
        }
        outputs.push(h);
    }
    let evaluations = trace.len() * evals_per_step;
    Ok(SolveResult {
        outputs,
        trace,
        next_dt: cfg.dt,
        evaluations,
    })
}

mod tableau {
    pub const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    pub const A2: [f64; 1] = [0.2];
    pub const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
    pub const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
    pub const A5: [f64; 4] = [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
    ];
    pub const A6: [f64; 5] = [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ];
    /// Fifth-order weights (also the last row of the stage matrix).
    pub const B: [f64; 6] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ];
    /// Fifth minus fourth order weights.
    pub const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    /// Dense-output weights for the fourth-order continuous extension.
    pub const D: [f64; 7] = [
        -12715105075.0 / 11282082432.0,
        0.0,
        87487479700.0 / 32700410799.0,
        -10690763975.0 / 1880347072.0,
        701980252875.0 / 199316789632.0,
        -1453857185.0 / 822651844.0,
        69997945.0 / 29380423.0,
    ];
}

/// Mixed-tolerance RMS norm, maximised over leading-axis rows.
fn error_norm(e: &[f64], y0: &Tensor, y1: &Tensor, rtol: f64, atol: f64) -> f64 {
    let w = if y0.shape().len() >= 2 {
        y0.len() / y0.shape()[0].max(1)
    } else {
        y0.len()
    }
    .max(1);
    let mut worst: f64 = 0.0;
    for (r, chunk) in e.chunks(w).enumerate() {
        let mut acc = 0.0;
        for (j, &ej) in chunk.iter().enumerate() {
            let k = r * w + j;
            let sc = atol + rtol * y0.data()[k].abs().max(y1.data()[k].abs());
            acc += (ej / sc).powi(2);
        }
        let rms = (acc / chunk.len() as f64).sqrt();
        if rms.is_nan() {
            return f64::NAN;
        }
        worst = worst.max(rms);
    }
    worst
}

fn rms_scaled(v: &Tensor, y0: &Tensor, rtol: f64, atol: f64) -> f64 {
    error_norm(v.data(), y0, y0, rtol, atol)
}

/// Classical automatic choice of the first step for a 5th-order method.
fn initial_step<'t, F>(
    f: &mut F,
    s0: f64,
    y0: Var<'t>,
    f0: Var<'t>,
    span: f64,
    cfg: &SolverConfig,
) -> Result<f64>
where
    F: FnMut(f64, Var<'t>) -> std::result::Result<Var<'t>, TensorError>,
{
    let y = y0.value();
    let fv = f0.value();
    let d0 = rms_scaled(&y, &y, cfg.rtol, cfg.atol);
    let d1 = rms_scaled(&fv, &y, cfg.rtol, cfg.atol);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    h0 = h0.min(span);
    let tape = y0.tape();
    let probe = tape.constant(y.arith(&fv.map(|v| v * h0), crate::tensor::ArithKind::Add)?);
    let f1 = f(s0 + h0, probe)?.value();
    let diff = f1.arith(&fv, crate::tensor::ArithKind::Sub)?;
    let d2 = rms_scaled(&diff, &y, cfg.rtol, cfg.atol) / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 || !dmax.is_finite() {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const MAX_NONFINITE_RETRIES: usize = 10;

fn dopri5<'t, F>(
    mut f: F,
    h0: Var<'t>,
    s0: f64,
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<SolveResult<'t>>
where
    F: FnMut(f64, Var<'t>) -> std::result::Result<Var<'t>, TensorError>,
{
    use tableau::*;

    let mut outputs = Vec::with_capacity(times.len());
    let mut trace = Vec::new();
    let mut j = 0;
    while j < times.len() && times[j] == s0 {
        outputs.push(h0);
        j += 1;
    }
    let t_end = times.last().copied().unwrap_or(s0);
    if j == times.len() {
        return Ok(SolveResult {
            outputs,
            trace,
            next_dt: cfg.initial_step.unwrap_or(0.0),
            evaluations: 0,
        });
    }

    let mut evaluations = 1;
    let mut y = h0;
    let mut s = s0;
    let mut k1 = f(s, y)?;
    let mut dt = match cfg.initial_step {
        Some(h) => h,
        None => {
            evaluations += 1;
            initial_step(&mut f, s0, y, k1, t_end - s0, cfg)?
        }
    };
    let mut min_dt = f64::INFINITY;
    let mut nonfinite = 0;

    while j < times.len() {
        if trace.len() >= cfg.max_steps {
            return Err(SolveError::NonConvergence {
                max_steps: cfg.max_steps,
                min_dt,
            });
        }
        let limit = if cfg.dense_output { t_end } else { times[j] };
        let clamped = s + dt >= limit;
        let step = if clamped { limit - s } else { dt };
        if step <= 0.0 || s + step == s {
            return Err(SolveError::NonConvergence {
                max_steps: cfg.max_steps,
                min_dt: min_dt.min(step.max(0.0)),
            });
        }
        min_dt = min_dt.min(step);

        let stage = |base: Var<'t>, ks: &[Var<'t>], a: &[f64]| {
            let mut terms = Vec::with_capacity(ks.len() + 1);
            terms.push((base, 1.0));
            for (k, &c) in ks.iter().zip(a) {
                if c != 0.0 {
                    terms.push((*k, step * c));
                }
            }
            Var::lincomb(&terms)
        };
        let k2 = f(s + C[1] * step, stage(y, &[k1], &A2)?)?;
        let k3 = f(s + C[2] * step, stage(y, &[k1, k2], &A3)?)?;
        let k4 = f(s + C[3] * step, stage(y, &[k1, k2, k3], &A4)?)?;
        let k5 = f(s + C[4] * step, stage(y, &[k1, k2, k3, k4], &A5)?)?;
        let k6 = f(s + C[5] * step, stage(y, &[k1, k2, k3, k4, k5], &A6)?)?;
        let y1 = stage(y, &[k1, k2, k3, k4, k5, k6], &B)?;
        let s1 = if clamped { limit } else { s + step };
        let k7 = f(s1, y1)?;
        evaluations += 6;

        let ks = [k1, k2, k3, k4, k5, k6, k7];
        let y0v = y.value();
        let y1v = y1.value();
        let mut e = vec![0.0; y0v.len()];
        for (k, &ec) in ks.iter().zip(&E) {
            if ec != 0.0 {
                k.with_value(|kv| {
                    for (acc, v) in e.iter_mut().zip(kv.data()) {
                        *acc += step * ec * v;
                    }
                });
            }
        }
        let err = error_norm(&e, &y0v, &y1v, cfg.rtol, cfg.atol);
        let row = trace.len();

        if !err.is_finite() || !y1v.is_finite() {
            nonfinite += 1;
            trace.push(TraceRow {
                step: row,
                s,
                accepted: false,
                err_norm: err,
                dt: step,
            });
            if nonfinite >= MAX_NONFINITE_RETRIES {
                return Err(SolveError::Divergence { step: row, s });
            }
            dt = step * MIN_FACTOR;
            continue;
        }
        nonfinite = 0;

        let fac = if err == 0.0 {
            MAX_FACTOR
        } else {
            (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
        };
        if err <= 1.0 {
            trace.push(TraceRow {
                step: row,
                s: s1,
                accepted: true,
                err_norm: err,
                dt: step,
            });
            while j < times.len() && times[j] <= s1 {
                let t = times[j];
                let out = if t == s1 {
                    y1
                } else {
                    dense_point(y, y1, &ks, (t - s) / step, step)?
                };
                outputs.push(out);
                j += 1;
            }
            s = s1;
            y = y1;
            k1 = k7;
            let proposed = step * fac;
            dt = if clamped { proposed.max(dt) } else { proposed };
        } else {
            trace.push(TraceRow {
                step: row,
                s,
                accepted: false,
                err_norm: err,
                dt: step,
            });
            dt = step * fac.min(1.0);
        }
    }
    Ok(SolveResult {
        outputs,
        trace,
        next_dt: dt,
        evaluations,
    })
}

/// Fourth-order continuous extension at fraction `theta` of an accepted step.
fn dense_point<'t>(
    y0: Var<'t>,
    y1: Var<'t>,
    ks: &[Var<'t>; 7],
    theta: f64,
    step: f64,
) -> std::result::Result<Var<'t>, TensorError> {
    use tableau::D;
    let t1 = 1.0 - theta;
    let a = theta;
    let b = theta * t1;
    let c = theta * theta * t1;
    let d = c * t1;
    let mut terms = vec![
        (y0, 1.0 - a + b - 2.0 * c),
        (y1, a - b + 2.0 * c),
        (ks[0], step * (b - c + d * D[0])),
        (ks[6], step * (-c + d * D[6])),
    ];
    for i in 2..6 {
        terms.push((ks[i], step * d * D[i]));
    }
    Var::lincomb(&terms)
}
