//! Piecewise-cubic control signals over integer pseudo-time.
//!
//! A channel with `n` knots at `s = 0, 1, …, n-1` is stored as `n - 1`
//! pieces in local-offset form `a·u³ + b·u² + c·u + d` with `u = s - i`.
//! Outside `[0, n-1]` the signal is the first or last value held constant,
//! with zero derivative.

mod cache;
mod fit;

pub use cache::{read_cache, write_cache, CACHE_MAGIC, CACHE_VERSION};
pub use fit::{
    fit_hermite, fit_linear, fit_monotonic, fit_natural, natural_second_derivatives,
    tridiagonal_solve,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpError {
    #[error("empty series")]
    Empty,
    #[error("channel {0} has no observed values")]
    AllMissing(usize),
    #[error("knot times must be strictly increasing")]
    UnsortedKnots,
    #[error("time channel decreases at knot {0}")]
    InvalidTime(usize),
    #[error("{times} knots but {values} values")]
    Length { times: usize, values: usize },
    #[error("zero pivot in tridiagonal solve at row {0}")]
    Singular(usize),
    #[error("cache: {0}")]
    Cache(String),
}

pub type Result<T> = std::result::Result<T, InterpError>;

/// `a·u³ + b·u² + c·u + d` for a local offset `u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicPiece {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl CubicPiece {
    pub const fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { a, b, c, d }
    }

    pub const fn constant(d: f64) -> Self {
        Self::new(0.0, 0.0, 0.0, d)
    }

    pub fn eval(&self, u: f64) -> f64 {
        ((self.a * u + self.b) * u + self.c) * u + self.d
    }

    pub fn deriv(&self, u: f64) -> f64 {
        (3.0 * self.a * u + 2.0 * self.b) * u + self.c
    }

    pub fn second_deriv(&self, u: f64) -> f64 {
        6.0 * self.a * u + 2.0 * self.b
    }

    pub fn coeffs(&self) -> [f64; 4] {
        [self.a, self.b, self.c, self.d]
    }

    /// The same cubic re-expressed on the next unit interval.
    ///
    /// Applies the fixed 4×4 map
    /// `[[1,0,0,0],[3,1,0,0],[3,2,1,0],[1,1,1,1]]` to `(a, b, c, d)`.
    pub fn continue_next(&self) -> Self {
        let Self { a, b, c, d } = *self;
        Self {
            a,
            b: 3.0 * a + b,
            c: 3.0 * a + 2.0 * b + c,
            d: a + b + c + d,
        }
    }
}

/// Per-knot values of one channel; `None` marks a missing observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSeries {
    pub values: Vec<Option<f64>>,
}

impl ChannelSeries {
    pub fn new(values: Vec<Option<f64>>) -> Self {
        Self { values }
    }

    pub fn observed(values: &[f64]) -> Self {
        Self {
            values: values.iter().copied().map(Some).collect(),
        }
    }
}

/// Interpolation rule applied to one channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitScheme {
    Linear,
    Hermite,
    Monotonic,
    Natural,
}

impl FitScheme {
    pub fn fit(self, ts: &[f64], xs: &[f64]) -> Result<Vec<CubicPiece>> {
        match self {
            FitScheme::Linear => fit_linear(ts, xs),
            FitScheme::Hermite => fit_hermite(ts, xs),
            FitScheme::Monotonic => fit_monotonic(ts, xs),
            FitScheme::Natural => fit_natural(ts, xs),
        }
    }

    /// Whether piece `i` depends only on knots up to `i + 1`.
    pub fn is_local(self) -> bool {
        !matches!(self, FitScheme::Natural)
    }
}

/// The six named control-signal schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Linear,
    Hermite,
    Monotonic,
    Natural,
    Rectilinear,
    Recticubic,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Linear,
        Scheme::Hermite,
        Scheme::Monotonic,
        Scheme::Natural,
        Scheme::Rectilinear,
        Scheme::Recticubic,
    ];

    pub fn feature_fit(self) -> FitScheme {
        match self {
            Scheme::Linear | Scheme::Rectilinear => FitScheme::Linear,
            Scheme::Hermite | Scheme::Recticubic => FitScheme::Hermite,
            Scheme::Monotonic => FitScheme::Monotonic,
            Scheme::Natural => FitScheme::Natural,
        }
    }

    /// Fit used for observation-count and time channels.
    pub fn auxiliary_fit(self) -> FitScheme {
        match self {
            Scheme::Linear | Scheme::Rectilinear => FitScheme::Linear,
            _ => FitScheme::Monotonic,
        }
    }

    pub fn is_recti(self) -> bool {
        matches!(self, Scheme::Rectilinear | Scheme::Recticubic)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Linear => "linear",
            Scheme::Hermite => "hermite",
            Scheme::Monotonic => "monotonic",
            Scheme::Natural => "natural",
            Scheme::Rectilinear => "rectilinear",
            Scheme::Recticubic => "recticubic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One fitted channel on knots `0..n_knots`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpline {
    /// `max(n_knots - 1, 1)` pieces; a single-knot channel holds one constant piece.
    pieces: Vec<CubicPiece>,
    n_knots: usize,
}

impl ChannelSpline {
    pub fn from_pieces(pieces: Vec<CubicPiece>, n_knots: usize) -> Result<Self> {
        if n_knots == 0 || pieces.len() != (n_knots - 1).max(1) {
            return Err(InterpError::Length {
                times: n_knots,
                values: pieces.len(),
            });
        }
        Ok(Self { pieces, n_knots })
    }

    pub fn pieces(&self) -> &[CubicPiece] {
        &self.pieces
    }

    pub fn n_knots(&self) -> usize {
        self.n_knots
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let last = self.n_knots.saturating_sub(2);
        let i = (s.floor().max(0.0) as usize).min(last);
        (i, s - i as f64)
    }

    pub fn eval(&self, s: f64) -> f64 {
        if self.n_knots == 1 || s <= 0.0 {
            return self.pieces[0].d;
        }
        let end = (self.n_knots - 1) as f64;
        if s >= end {
            return self.pieces[self.pieces.len() - 1].eval(1.0);
        }
        let (i, u) = self.locate(s);
        self.pieces[i].eval(u)
    }

    pub fn deriv(&self, s: f64) -> f64 {
        let end = (self.n_knots - 1) as f64;
        if self.n_knots == 1 || s < 0.0 || s > end {
            return 0.0;
        }
        let (i, u) = self.locate(s);
        self.pieces[i].deriv(u)
    }

    pub fn second_deriv(&self, s: f64) -> f64 {
        let end = (self.n_knots - 1) as f64;
        if self.n_knots == 1 || s < 0.0 || s > end {
            return 0.0;
        }
        let (i, u) = self.locate(s);
        self.pieces[i].second_deriv(u)
    }

    /// Value of piece `k` at `s`, without clamping `s` to the piece.
    pub fn eval_piece(&self, k: usize, s: f64) -> f64 {
        self.pieces[k].eval(s - k as f64)
    }

    pub fn deriv_piece(&self, k: usize, s: f64) -> f64 {
        self.pieces[k].deriv(s - k as f64)
    }
}

/// Fits one channel with missing values.
///
/// Missing knots are dropped, the scheme is fitted on the observed knots
/// (with their integer spacing), and every unit interval inside a gap gets
/// the continuation of the piece that spans it. Before the first and after
/// the last observation the channel is held at that observation's value.
pub fn fit_channel(series: &ChannelSeries, scheme: FitScheme) -> Result<ChannelSpline> {
    let n = series.values.len();
    if n == 0 {
        return Err(InterpError::Empty);
    }
    let (ts, xs): (Vec<f64>, Vec<f64>) = series
        .values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|x| (i as f64, x)))
        .unzip();
    if ts.is_empty() {
        return Err(InterpError::AllMissing(0));
    }
    if n == 1 {
        return ChannelSpline::from_pieces(vec![CubicPiece::constant(xs[0])], 1);
    }
    let spans = scheme.fit(&ts, &xs)?;
    let first = ts[0] as usize;
    let last = ts[ts.len() - 1] as usize;
    let mut pieces = Vec::with_capacity(n - 1);
    let mut span = 0;
    let mut current = CubicPiece::constant(xs[0]);
    for k in 0..n - 1 {
        if k < first {
            pieces.push(CubicPiece::constant(xs[0]));
        } else if k >= last {
            pieces.push(CubicPiece::constant(xs[xs.len() - 1]));
        } else {
            if k == ts[span] as usize {
                current = spans[span];
            } else {
                current = current.continue_next();
            }
            pieces.push(current);
            if k + 1 == ts[span + 1] as usize {
                span += 1;
            }
        }
    }
    ChannelSpline::from_pieces(pieces, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRole {
    Feature,
    Count,
    Time,
}

impl ChannelRole {
    fn code(self) -> u8 {
        match self {
            ChannelRole::Feature => 0,
            ChannelRole::Count => 1,
            ChannelRole::Time => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ChannelRole::Feature),
            1 => Some(ChannelRole::Count),
            2 => Some(ChannelRole::Time),
            _ => None,
        }
    }
}

/// All channels of one subject: features, observation counts, and the time
/// map ψ (always the last channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    channels: Vec<ChannelSpline>,
    roles: Vec<ChannelRole>,
}

impl ControlSignal {
    pub fn new(channels: Vec<ChannelSpline>, roles: Vec<ChannelRole>) -> Result<Self> {
        if channels.is_empty() || channels.len() != roles.len() {
            return Err(InterpError::Length {
                times: roles.len(),
                values: channels.len(),
            });
        }
        let n = channels[0].n_knots();
        if channels.iter().any(|c| c.n_knots() != n) {
            return Err(InterpError::Length {
                times: n,
                values: channels.len(),
            });
        }
        Ok(Self { channels, roles })
    }

    pub fn n_knots(&self) -> usize {
        self.channels[0].n_knots()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[ChannelSpline] {
        &self.channels
    }

    pub fn roles(&self) -> &[ChannelRole] {
        &self.roles
    }

    /// Index of the time channel ψ.
    pub fn time_channel(&self) -> Option<usize> {
        self.roles.iter().rposition(|r| *r == ChannelRole::Time)
    }

    pub fn evaluate(&self, s: f64) -> Vec<f64> {
        self.channels.iter().map(|c| c.eval(s)).collect()
    }

    pub fn derivative(&self, s: f64) -> Vec<f64> {
        self.channels.iter().map(|c| c.deriv(s)).collect()
    }

    /// Values of piece `k` (the interval `[k, k+1]`) at `s`.
    pub fn evaluate_piece(&self, k: usize, s: f64) -> Vec<f64> {
        self.channels.iter().map(|c| c.eval_piece(k, s)).collect()
    }

    pub fn derivative_piece(&self, k: usize, s: f64) -> Vec<f64> {
        self.channels.iter().map(|c| c.deriv_piece(k, s)).collect()
    }
}

/// Fits every channel of a subject with the routing implied by `scheme`:
/// features use the scheme's own fit; counts and time use linear for the
/// linear schemes and monotonic cubics otherwise.
///
/// `channels[j][i]` is channel `j` at knot `i`. A feature channel with no
/// observations at all is held at 0 (the standardised mean).
pub fn build_control_signal(
    channels: &[Vec<Option<f64>>],
    roles: &[ChannelRole],
    scheme: Scheme,
) -> Result<ControlSignal> {
    if channels.len() != roles.len() {
        return Err(InterpError::Length {
            times: roles.len(),
            values: channels.len(),
        });
    }
    let mut fitted = Vec::with_capacity(channels.len());
    for (j, (values, role)) in channels.iter().zip(roles).enumerate() {
        if *role == ChannelRole::Time {
            let mut prev = f64::NEG_INFINITY;
            for (i, v) in values.iter().enumerate() {
                let v = v.ok_or(InterpError::AllMissing(j))?;
                if v < prev {
                    return Err(InterpError::InvalidTime(i));
                }
                prev = v;
            }
        }
        let fit = match role {
            ChannelRole::Feature => scheme.feature_fit(),
            ChannelRole::Count | ChannelRole::Time => scheme.auxiliary_fit(),
        };
        let series = if values.iter().all(Option::is_none) && *role == ChannelRole::Feature {
            let mut v = values.clone();
            v[0] = Some(0.0);
            ChannelSeries::new(v)
        } else {
            ChannelSeries::new(values.clone())
        };
        let spline = fit_channel(&series, fit).map_err(|e| match e {
            InterpError::AllMissing(_) => InterpError::AllMissing(j),
            other => other,
        })?;
        fitted.push(spline);
    }
    ControlSignal::new(fitted, roles.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn continuation_first_column() {
        let p = CubicPiece::new(1.0, 0.0, 0.0, 0.0).continue_next();
        assert_eq!(p.coeffs(), [1.0, 3.0, 3.0, 1.0]);
        let c = CubicPiece::constant(4.5).continue_next();
        assert_eq!(c.coeffs(), [0.0, 0.0, 0.0, 4.5]);
    }

    #[test]
    fn continuation_of_line() {
        let p = CubicPiece::new(0.0, 0.0, 1.0, 0.0);
        let q = p.continue_next();
        assert_eq!(q.coeffs(), [0.0, 0.0, 1.0, 1.0]);
        let max = (0..20)
            .map(|j| {
                let u = j as f64 / 19.0;
                (p.eval(1.0 + u) - q.eval(u)).abs()
            })
            .fold(0.0, f64::max);
        assert!(max < 1e-12);
    }

    #[test]
    fn gap_filled_linearly() {
        let s = fit_channel(
            &ChannelSeries::new(vec![Some(1.0), None, Some(5.0)]),
            FitScheme::Linear,
        )
        .unwrap();
        assert_eq!(s.eval(1.0), 3.0);
        assert_eq!(s.eval(2.0), 5.0);
    }

    #[test]
    fn single_value_is_constant() {
        for n in 1..4 {
            let mut v = vec![None; n];
            v[n / 2] = Some(2.5);
            let s = fit_channel(&ChannelSeries::new(v), FitScheme::Natural).unwrap();
            for j in -10..40 {
                let x = j as f64 * 0.1;
                assert_eq!(s.eval(x), 2.5);
                assert_eq!(s.deriv(x), 0.0);
            }
        }
    }

    #[test]
    fn leading_and_trailing_missing_held_constant() {
        let s = fit_channel(
            &ChannelSeries::new(vec![None, None, Some(2.0), Some(4.0), None]),
            FitScheme::Hermite,
        )
        .unwrap();
        assert_eq!(s.eval(0.0), 2.0);
        assert_eq!(s.eval(1.5), 2.0);
        assert_eq!(s.deriv(1.5), 0.0);
        assert_eq!(s.eval(3.5), 4.0);
        assert_eq!(s.eval(9.0), 4.0);
    }

    #[test]
    fn all_missing_is_error() {
        assert!(matches!(
            fit_channel(&ChannelSeries::new(vec![None, None]), FitScheme::Linear),
            Err(InterpError::AllMissing(_))
        ));
    }

    #[test]
    fn evaluate_at_knots_and_outside() {
        let s = fit_channel(&ChannelSeries::observed(&[0.0, 2.0, 1.0]), FitScheme::Natural)
            .unwrap();
        assert!((s.eval(1.0) - 2.0).abs() < 1e-12);
        assert_eq!(s.deriv(2.5), 0.0);
        assert_eq!(s.deriv(-0.5), 0.0);
        assert_eq!(s.eval(5.0), s.eval(2.0));
        // s = 1.5 is read from piece 1
        assert_eq!(s.eval(1.5), s.pieces()[1].eval(0.5));
    }

    #[test]
    fn routing_by_scheme() {
        let roles = [ChannelRole::Feature, ChannelRole::Count, ChannelRole::Time];
        assert_eq!(Scheme::Natural.feature_fit(), FitScheme::Natural);
        assert_eq!(Scheme::Natural.auxiliary_fit(), FitScheme::Monotonic);
        assert_eq!(Scheme::Rectilinear.feature_fit(), FitScheme::Linear);
        assert_eq!(Scheme::Rectilinear.auxiliary_fit(), FitScheme::Linear);
        assert_eq!(Scheme::Recticubic.feature_fit(), FitScheme::Hermite);
        assert_eq!(Scheme::Recticubic.auxiliary_fit(), FitScheme::Monotonic);
        let ch = vec![
            vec![Some(0.0), Some(1.0), Some(0.0), Some(1.0)],
            vec![Some(1.0), Some(2.0), Some(3.0), Some(4.0)],
            vec![Some(0.0), Some(3.0), Some(3.0), Some(7.0)],
        ];
        let sig = build_control_signal(&ch, &roles, Scheme::Natural).unwrap();
        let t = sig.time_channel().unwrap();
        for j in 0..=3000 {
            let s = j as f64 * 1e-3;
            let d = sig.derivative(s)[t];
            assert!(d >= 0.0);
            if s > 1.0 && s < 2.0 {
                assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn decreasing_time_rejected() {
        let ch = vec![vec![Some(1.0), Some(0.5)]];
        assert_eq!(
            build_control_signal(&ch, &[ChannelRole::Time], Scheme::Linear),
            Err(InterpError::InvalidTime(1))
        );
    }
}
