use crate::odesolve::{solve, solve_backwards, Method, TraceRow};
use crate::preprocess::Batch;
use crate::tensor::{BoundParams, Mlp, Tape, Tensor, TensorError, Var};

use super::{Arch, GruWeights, Model, ModelError, Result};

type TResult<T> = std::result::Result<T, TensorError>;

/// Result of one forward pass.
pub struct Output<'t> {
    /// `[seq_len * B, width]`, step-major.
    pub predictions: Var<'t>,
    /// Hidden state after each step, `[B, latent]`.
    pub hidden: Vec<Var<'t>>,
}

/// Control-signal lookups for a batch.
struct Signals<'b, 'a> {
    batch: &'b Batch<'a>,
    channels: usize,
}

impl<'b, 'a> Signals<'b, 'a> {
    fn new(batch: &'b Batch<'a>) -> Self {
        Self {
            batch,
            channels: batch.n_channels(),
        }
    }

    fn time_index(&self) -> usize {
        self.channels - 1
    }

    fn gather(&self, width: usize, f: impl Fn(&crate::interp::ControlSignal) -> Vec<f64>) -> Tensor {
        let data: Vec<f64> = self.batch.subjects.iter().flat_map(|s| f(&s.signal)).collect();
        Tensor::new(vec![self.batch.len(), width], data).expect("uniform channel count")
    }

    /// `X` at knot `i`.
    fn at_knot(&self, i: usize) -> Tensor {
        self.gather(self.channels, |sig| sig.evaluate(i as f64))
    }

    fn values(&self, k: usize, s: f64) -> Tensor {
        self.gather(self.channels, |sig| sig.evaluate_piece(k, s))
    }

    fn derivs(&self, k: usize, s: f64) -> Tensor {
        self.gather(self.channels, |sig| sig.derivative_piece(k, s))
    }

    fn time(&self, k: usize, s: f64) -> Tensor {
        let j = self.time_index();
        self.gather(1, |sig| vec![sig.channels()[j].eval_piece(k, s)])
    }

    fn time_deriv(&self, k: usize, s: f64) -> Tensor {
        let j = self.time_index();
        self.gather(1, |sig| vec![sig.channels()[j].deriv_piece(k, s)])
    }

    /// Whether piece `k` is constant for every subject, on the time channel
    /// only or on all channels. A flat piece makes the vector field vanish
    /// identically, so the interval can be skipped exactly.
    fn flat(&self, k: usize, time_only: bool) -> bool {
        let j = self.time_index();
        self.batch.subjects.iter().all(|s| {
            let chans = s.signal.channels();
            let chans = if time_only { &chans[j..=j] } else { chans };
            chans.iter().all(|c| {
                let p = &c.pieces()[k];
                p.a == 0.0 && p.b == 0.0 && p.c == 0.0
            })
        })
    }
}

fn cat<'t>(parts: &[Var<'t>], ctx: Option<Var<'t>>) -> TResult<Var<'t>> {
    let mut v = parts.to_vec();
    v.extend(ctx);
    if v.len() == 1 {
        Ok(v[0])
    } else {
        Var::concat(&v, 1)
    }
}

/// `u * new + (1 - u) * old` with a `[B, 1]` mask; exact when `u` is 0 or 1.
fn masked<'t>(new: Var<'t>, old: Var<'t>, u: &Tensor) -> TResult<Var<'t>> {
    let tape = new.tape();
    let keep = tape.constant(u.map(|v| 1.0 - v));
    new.mul(tape.constant(u.clone()))?.add(old.mul(keep)?)
}

impl Model {
    pub fn forward<'t>(&self, bp: &BoundParams<'t>, batch: &Batch) -> Result<Output<'t>> {
        self.check_batch(batch)?;
        let tape = bp.vars()[0].tape();
        let ctx = (self.dims.n_context > 0).then(|| tape.constant(batch.context()));
        let sig = Signals::new(batch);
        let hidden = match &self.arch {
            Arch::Ncde { embed, dynamics } => self.run_ncde(bp, &sig, ctx, embed, dynamics)?,
            Arch::OdeRnn { dynamics, update } => self.run_odernn(bp, &sig, ctx, dynamics, update)?,
            Arch::LatentOde {
                enc_dynamics,
                enc_update,
                dec_dynamics,
            } => self.run_latent(bp, &sig, ctx, enc_dynamics, enc_update, dec_dynamics)?,
            Arch::GruOde { embed, gru } => self.run_gru(bp, &sig, ctx, embed, gru)?,
            Arch::Rnn { cell } => self.run_rnn(bp, batch, ctx, cell)?,
        };
        let stacked = if hidden.len() == 1 {
            hidden[0]
        } else {
            Var::concat(&hidden, 0)?
        };
        let predictions = self.head.forward(bp, stacked)?;
        Ok(Output { predictions, hidden })
    }

    /// Integrates one unit interval `[k, k + 1]` (backwards when asked),
    /// warm-starting the adaptive step from the previous interval.
    fn evolve<'t, F>(&self, f: F, h: Var<'t>, k: usize, backward: bool, carried: &mut Option<f64>) -> Result<Var<'t>>
    where
        F: FnMut(f64, Var<'t>) -> TResult<Var<'t>>,
    {
        let mut cfg = self.config.solver;
        if let Some(dt) = *carried {
            cfg.initial_step = Some(dt);
        }
        let (s0, s1) = (k as f64, k as f64 + 1.0);
        let r = if backward {
            solve_backwards(f, h, s1, s0, &cfg)?
        } else {
            solve(f, h, s0, &[s1], &cfg)?
        };
        if cfg.method == Method::Dopri5 {
            *carried = Some(r.next_dt);
        }
        if let Some(rows) = self.trace.borrow_mut().as_mut() {
            let base = rows.len();
            rows.extend(r.trace.iter().map(|t| TraceRow { step: base + t.step, ..*t }));
        }
        Ok(r.outputs[0])
    }

    /// `f(h, psi(s), c) dX/ds` on piece `k`.
    fn ncde_field<'t>(&self, bp: &BoundParams<'t>, sig: &Signals, ctx: Option<Var<'t>>, dynamics: &Mlp, k: usize, s: f64, h: Var<'t>) -> TResult<Var<'t>> {
        let tape = h.tape();
        let (b, l, c) = (sig.batch.len(), self.config.latent, sig.channels);
        let psi = tape.constant(sig.time(k, s));
        let m = dynamics.forward(bp, cat(&[h, psi], ctx)?)?.reshape(&[b, l, c])?;
        let dx = tape.constant(sig.derivs(k, s).reshape(&[b, 1, c])?);
        Ok(m.mul(dx)?.sum_last())
    }

    /// `f(h, psi(s), c) dpsi/ds` on piece `k`.
    fn time_field<'t>(&self, bp: &BoundParams<'t>, sig: &Signals, ctx: Option<Var<'t>>, dynamics: &Mlp, k: usize, s: f64, h: Var<'t>) -> TResult<Var<'t>> {
        let tape = h.tape();
        let psi = tape.constant(sig.time(k, s));
        let out = dynamics.forward(bp, cat(&[h, psi], ctx)?)?;
        out.mul(tape.constant(sig.time_deriv(k, s)))
    }

    /// `(1 - z) (g - h) dpsi/ds` with gates read from `X(s)` on piece `k`.
    /// `ctx_terms` holds the precomputed `c W_{.c}` products.
    fn gru_field<'t>(&self, bp: &BoundParams<'t>, sig: &Signals, ctx_terms: &Option<[Var<'t>; 3]>, w: &GruWeights, k: usize, s: f64, h: Var<'t>) -> TResult<Var<'t>> {
        let tape = h.tape();
        let x = tape.constant(sig.values(k, s));
        let pre = |gate: usize, hin: Var<'t>| -> TResult<Var<'t>> {
            let mut v = x.matmul(bp.get(w.x[gate]))?.add(hin.matmul(bp.get(w.h[gate]))?)?;
            if let Some(ct) = ctx_terms {
                v = v.add(ct[gate])?;
            }
            v.add(bp.get(w.b[gate]))
        };
        let r = pre(0, h)?.sigmoid();
        let z = pre(1, h)?.sigmoid();
        let g = pre(2, r.mul(h)?)?.tanh();
        let one_minus_z = z.neg().add_scalar(1.0);
        one_minus_z
            .mul(g.sub(h)?)?
            .mul(tape.constant(sig.time_deriv(k, s)))
    }

    fn run_ncde<'t>(&self, bp: &BoundParams<'t>, sig: &Signals, ctx: Option<Var<'t>>, embed: &Mlp, dynamics: &Mlp) -> Result<Vec<Var<'t>>> {
        let tape = bp.vars()[0].tape();
        let x0 = tape.constant(sig.at_knot(0));
        let mut h = embed.forward(bp, cat(&[x0], ctx)?)?;
        let mut hidden = vec![h];
        let mut carried = None;
        for k in 0..sig.batch.seq_len - 1 {
            if !sig.flat(k, false) {
                h = self.evolve(|s, h| self.ncde_field(bp, sig, ctx, dynamics, k, s, h), h, k, false, &mut carried)?;
            }
            hidden.push(h);
        }
        Ok(hidden)
    }

    fn jump<'t>(&self, bp: &BoundParams<'t>, sig: &Signals, ctx: Option<Var<'t>>, update: &Mlp, i: usize, h_tilde: Var<'t>, h_prev: Var<'t>) -> Result<Var<'t>> {
        let u = sig.batch.mask_column(i);
        if u.data().iter().all(|&v| v == 0.0) {
            return Ok(h_prev);
        }
        let tape = h_tilde.tape();
        let x = tape.constant(sig.at_knot(i));
        let g = update.forward(bp, cat(&[h_tilde, x], ctx)?)?;
        Ok(masked(g, h_prev, &u)?)
    }

    fn zeros<'t>(&self, tape: &'t Tape, b: usize) -> Var<'t> {
        tape.constant(Tensor::zeros(&[b, self.config.latent]))
    }

    fn run_odernn<'t>(&self, bp: &BoundParams<'t>, sig: &Signals, ctx: Option<Var<'t>>, dynamics: &Mlp, update: &Mlp) -> Result<Vec<Var<'t>>> {
        let tape = bp.vars()[0].tape();
        let zero = self.zeros(tape, sig.batch.len());
        // the first transition is a pure jump from h = 0
        let mut h = self.jump(bp, sig, ctx, update, 0, zero, zero)?;
        let mut hidden = vec![h];
        let mut carried = None;
        for i in 1..sig.batch.seq_len {
            let k = i - 1;
            let h_tilde = if sig.flat(k, true) {
                h
            } else {
                self.evolve(|s, h| self.time_field(bp, sig, ctx, dynamics, k, s, h), h, k, false, &mut carried)?
            };
            h = self.jump(bp, sig, ctx, update, i, h_tilde, h)?;
            hidden.push(h);
        }
        Ok(hidden)
    }

    fn run_latent<'t>(&self, bp: &BoundParams<'t>, sig: &Signals, ctx: Option<Var<'t>>, enc_dynamics: &Mlp, enc_update: &Mlp, dec_dynamics: &Mlp) -> Result<Vec<Var<'t>>> {
        let tape = bp.vars()[0].tape();
        let n = sig.batch.seq_len;
        let zero = self.zeros(tape, sig.batch.len());
        // encode from the last step back to the first
        let mut h = self.jump(bp, sig, ctx, enc_update, n - 1, zero, zero)?;
        let mut carried = None;
        for i in (0..n - 1).rev() {
            let h_tilde = if sig.flat(i, true) {
                h
            } else {
                self.evolve(|s, h| self.time_field(bp, sig, ctx, enc_dynamics, i, s, h), h, i, true, &mut carried)?
            };
            h = self.jump(bp, sig, ctx, enc_update, i, h_tilde, h)?;
        }
        let mut hidden = vec![h];
        let mut carried = None;
        for k in 0..n - 1 {
            if !sig.flat(k, true) {
                h = self.evolve(|s, h| self.time_field(bp, sig, ctx, dec_dynamics, k, s, h), h, k, false, &mut carried)?;
            }
            hidden.push(h);
        }
        Ok(hidden)
    }

    fn run_gru<'t>(&self, bp: &BoundParams<'t>, sig: &Signals, ctx: Option<Var<'t>>, embed: &Mlp, w: &GruWeights) -> Result<Vec<Var<'t>>> {
        let tape = bp.vars()[0].tape();
        let x0 = tape.constant(sig.at_knot(0));
        let mut h = embed.forward(bp, cat(&[x0], ctx)?)?;
        let ctx_terms = match (ctx, &w.c) {
            (Some(c), Some(ids)) => Some([
                c.matmul(bp.get(ids[0]))?,
                c.matmul(bp.get(ids[1]))?,
                c.matmul(bp.get(ids[2]))?,
            ]),
            _ => None,
        };
        let mut hidden = vec![h];
        let mut carried = None;
        for k in 0..sig.batch.seq_len - 1 {
            if !sig.flat(k, true) {
                h = self.evolve(|s, h| self.gru_field(bp, sig, &ctx_terms, w, k, s, h), h, k, false, &mut carried)?;
            }
            hidden.push(h);
        }
        Ok(hidden)
    }

    fn run_rnn<'t>(&self, bp: &BoundParams<'t>, batch: &Batch, ctx: Option<Var<'t>>, cell: &Mlp) -> Result<Vec<Var<'t>>> {
        let tape = bp.vars()[0].tape();
        let width = batch.n_features + 1;
        let mut h = self.zeros(tape, batch.len());
        let mut hidden = Vec::with_capacity(batch.seq_len);
        for i in 0..batch.seq_len {
            let data = batch.subjects.iter().flat_map(|s| s.discrete[i].iter().copied()).collect();
            let x = tape.constant(Tensor::new(vec![batch.len(), width], data)?);
            let u = batch.mask_column(i);
            if u.data().iter().any(|&v| v != 0.0) {
                let next = cell.forward(bp, cat(&[h, x], ctx)?)?;
                h = masked(next, h, &u)?;
            }
            hidden.push(h);
        }
        Ok(hidden)
    }

    /// The vector field `dh/ds` of the forward-time solve at `(piece k, s,
    /// h)`: the CDE field for ncde, the decoder field for latentode, the
    /// time-driven field for odernn and gruode. `h` is `[B, latent]`.
    pub fn dynamics(&self, batch: &Batch, k: usize, s: f64, h: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        if k + 1 >= batch.seq_len.max(2) {
            return Err(ModelError::Batch(format!("piece {k} out of range")));
        }
        let tape = Tape::no_grad();
        let bp = self.params.bind(&tape);
        let ctx = (self.dims.n_context > 0).then(|| tape.constant(batch.context()));
        let sig = Signals::new(batch);
        let h = tape.constant(h.clone());
        let out = match &self.arch {
            Arch::Ncde { dynamics, .. } => self.ncde_field(&bp, &sig, ctx, dynamics, k, s, h)?,
            Arch::OdeRnn { dynamics, .. } => self.time_field(&bp, &sig, ctx, dynamics, k, s, h)?,
            Arch::LatentOde { dec_dynamics, .. } => self.time_field(&bp, &sig, ctx, dec_dynamics, k, s, h)?,
            Arch::GruOde { gru, .. } => {
                let ctx_terms = match (ctx, &gru.c) {
                    (Some(c), Some(ids)) => Some([
                        c.matmul(bp.get(ids[0]))?,
                        c.matmul(bp.get(ids[1]))?,
                        c.matmul(bp.get(ids[2]))?,
                    ]),
                    _ => None,
                };
                self.gru_field(&bp, &sig, &ctx_terms, gru, k, s, h)?
            }
            Arch::Rnn { .. } => {
                return Err(ModelError::Config("rnn has no continuous dynamics".into()));
            }
        };
        Ok(out.value())
    }
}
