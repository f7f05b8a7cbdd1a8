//! ODE systems as evaluable vector fields, plus fixed-step Runge-Kutta integration.
//!
//! An [`OdeSystem`] bundles a vector field `f(x, t; theta)` with its state and
//! parameter dimensions and a per-parameter box. Built-in systems:
//! FitzHugh-Nagumo, SIR, and Lorenz-96. Integration is classic fixed-step RK4
//! with a user-chosen number of substeps per observation gap.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Vector field callback: writes `f(x, t; theta)` into `out`.
///
/// Implementations must be deterministic and must fill all of `out`.
pub type FieldFn = Arc<dyn Fn(&[f64], f64, &[f64], &mut [f64]) + Send + Sync>;

/// Slack used when testing the open parameter box: a value is admissible when
/// it lies strictly inside by more than this margin.
pub const BOUNDS_TOL: f64 = 1e-12;

/// Default number of RK4 substeps per observation gap.
pub const DEFAULT_REFINE: usize = 10;

/// A closed interval `[lower, upper]` with `lower < upper`; either side may be
/// infinite. Parameter admissibility is checked strictly (see [`Interval::contains`]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if lower.is_nan() || upper.is_nan() || lower >= upper {
            return Err(Error::InvalidInput(format!(
                "interval requires lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded() -> Self {
        Self {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    /// Strict interior test with slack [`BOUNDS_TOL`]. Boundary values are
    /// rejected rather than clamped so optimizers see infeasibility directly.
    pub fn contains(&self, value: f64) -> bool {
        if !value.is_finite() {
            return false;
        }
        let above = !self.lower.is_finite() || value > self.lower + BOUNDS_TOL;
        let below = !self.upper.is_finite() || value < self.upper - BOUNDS_TOL;
        above && below
    }

    pub fn is_finite(&self) -> bool {
        self.lower.is_finite() && self.upper.is_finite()
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn midpoint(&self) -> f64 {
        if self.is_finite() {
            0.5 * (self.lower + self.upper)
        } else if self.lower.is_finite() {
            self.lower + 1.0
        } else if self.upper.is_finite() {
            self.upper - 1.0
        } else {
            0.0
        }
    }

    /// Nearest admissible point to `value`, kept `margin_frac` of the width
    /// away from either finite edge.
    pub fn project(&self, value: f64, margin_frac: f64) -> f64 {
        let lo = if self.lower.is_finite() {
            self.lower + margin_frac * self.finite_width_or(1.0)
        } else {
            f64::NEG_INFINITY
        };
        let hi = if self.upper.is_finite() {
            self.upper - margin_frac * self.finite_width_or(1.0)
        } else {
            f64::INFINITY
        };
        value.clamp(lo, hi)
    }

    fn finite_width_or(&self, fallback: f64) -> f64 {
        if self.is_finite() {
            self.width()
        } else {
            fallback
        }
    }
}

/// A named ODE system `dx/dt = f(x, t; theta)` with state dimension `p`,
/// parameter dimension `q`, and a per-parameter admissible box.
#[derive(Clone)]
pub struct OdeSystem {
    name: String,
    state_dim: usize,
    param_dim: usize,
    bounds: Vec<Interval>,
    field: FieldFn,
}

impl std::fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OdeSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("param_dim", &self.param_dim)
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl OdeSystem {
    /// Wraps a user-supplied vector field. `bounds` must have one interval per
    /// parameter; the field must write exactly `state_dim` values.
    pub fn new<F>(
        name: impl Into<String>,
        state_dim: usize,
        param_dim: usize,
        bounds: Vec<Interval>,
        field: F,
    ) -> Result<Self>
    where
        F: Fn(&[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if state_dim == 0 {
            return Err(Error::InvalidInput("state_dim must be positive".into()));
        }
        if bounds.len() != param_dim {
            return Err(Error::DimensionMismatch {
                what: "parameter bounds",
                expected: param_dim,
                got: bounds.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            state_dim,
            param_dim,
            bounds,
            field: Arc::new(field),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn bounds(&self) -> &[Interval] {
        &self.bounds
    }

    pub fn params_in_bounds(&self, theta: &[f64]) -> bool {
        theta.len() == self.param_dim
            && theta
                .iter()
                .zip(&self.bounds)
                .all(|(&v, b)| b.contains(v))
    }

    /// Errors with the first offending coordinate when `theta` leaves the box.
    pub fn check_params(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_dim {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.param_dim,
                got: theta.len(),
            });
        }
        for (i, (&v, b)) in theta.iter().zip(&self.bounds).enumerate() {
            if !b.contains(v) {
                return Err(Error::OutOfBounds {
                    index: i,
                    value: v,
                    lower: b.lower,
                    upper: b.upper,
                });
            }
        }
        Ok(())
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                what: "state vector",
                expected: self.state_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Evaluates `f(x, t; theta)` after validating dimensions and bounds.
    pub fn eval_field(&self, x: &[f64], t: f64, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_state(x)?;
        self.check_params(theta)?;
        let mut out = vec![0.0; self.state_dim];
        (self.field)(x, t, theta, &mut out);
        Ok(out)
    }

    /// Unchecked field evaluation into a caller buffer. Callers validate once
    /// up front and then stay on this path inside integration loops.
    #[inline]
    pub(crate) fn eval_into(&self, x: &[f64], t: f64, theta: &[f64], out: &mut [f64]) {
        (self.field)(x, t, theta, out);
    }

    /// FitzHugh-Nagumo spike-potential model: two states (membrane voltage and
    /// recovery current), three parameters with box (-0.8, 0.8)^2 x (0, 8).
    pub fn fitzhugh_nagumo() -> Self {
        Self::new(
            "fitzhugh_nagumo",
            2,
            3,
            vec![
                Interval { lower: -0.8, upper: 0.8 },
                Interval { lower: -0.8, upper: 0.8 },
                Interval { lower: 0.0, upper: 8.0 },
            ],
            |x, _t, th, out| {
                out[0] = th[2] * (x[0] - x[0] * x[0] * x[0] / 3.0 + x[1]);
                out[1] = -(x[0] - th[0] + th[1] * x[1]) / th[2];
            },
        )
        .expect("static definition")
    }

    /// SIR compartment model for a closed population of size `n`; parameters
    /// are the transmission rate beta and recovery rate gamma.
    pub fn sir(n: f64) -> Result<Self> {
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidInput(format!(
                "sir population must be positive, got {n}"
            )));
        }
        Self::new(
            "sir",
            3,
            2,
            vec![
                Interval { lower: -0.5, upper: 5.0 },
                Interval { lower: -0.5, upper: 5.0 },
            ],
            move |x, _t, th, out| {
                let infections = th[0] * x[1] * x[0] / n;
                let recoveries = th[1] * x[1];
                out[0] = -infections;
                out[1] = infections - recoveries;
                out[2] = recoveries;
            },
        )
    }

    /// Lorenz-96 chain with `p >= 4` circularly coupled coordinates; the
    /// forcing F is the single estimable parameter and `f` is its reference
    /// value (sets the admissible box (0, 2.5 f)).
    pub fn lorenz96(p: usize, f: f64) -> Result<Self> {
        if p < 4 {
            return Err(Error::InvalidInput(format!(
                "lorenz96 needs p >= 4 so the index offsets are distinct, got {p}"
            )));
        }
        if !(f > 0.0) || !f.is_finite() {
            return Err(Error::InvalidInput(format!(
                "lorenz96 forcing must be positive, got {f}"
            )));
        }
        Self::new(
            "lorenz96",
            p,
            1,
            vec![Interval { lower: 0.0, upper: 2.5 * f }],
            move |x, _t, th, out| {
                for j in 0..p {
                    let jp1 = (j + 1) % p;
                    let jm1 = (j + p - 1) % p;
                    let jm2 = (j + p - 2) % p;
                    out[j] = (x[jp1] - x[jm2]) * x[jm1] - x[j] + th[0];
                }
            },
        )
    }
}

/// Looks up a built-in system by name with default sizing
/// (`sir` uses N = 1000, `lorenz96` uses p = 10, F = 8).
pub fn builtin(name: &str) -> Result<OdeSystem> {
    match name {
        "fitzhugh_nagumo" | "fhn" => Ok(OdeSystem::fitzhugh_nagumo()),
        "sir" => OdeSystem::sir(1000.0),
        "lorenz96" => OdeSystem::lorenz96(10, 8.0),
        other => Err(Error::UnknownSystem(other.to_string())),
    }
}

/// Strictly increasing observation times; at least two points, all finite.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "time grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("time grid contains non-finite value".into()));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("non-increasing grid".into()));
        }
        Ok(Self { points })
    }

    /// `n` equally spaced points from `t0` to `t1` inclusive.
    pub fn linspace(t0: f64, t1: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "linspace needs at least 2 points, got {n}"
            )));
        }
        let h = (t1 - t0) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| t0 + h * i as f64).collect();
        points[n - 1] = t1;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        *self.points.last().unwrap()
    }
}

/// State values on a time grid; one state vector per grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, states: Vec<Vec<f64>>) -> Result<Self> {
        if states.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                what: "trajectory states",
                expected: grid.len(),
                got: states.len(),
            });
        }
        if let Some(first) = states.first() {
            let p = first.len();
            if states.iter().any(|s| s.len() != p) {
                return Err(Error::InvalidInput("ragged trajectory states".into()));
            }
        }
        Ok(Self { grid, states })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Plain-text table `t,x1,...,xp` with 17 significant digits per value.
    pub fn to_delimited(&self) -> String {
        let p = self.state_dim();
        let mut out = String::from("t");
        for c in 1..=p {
            out.push_str(&format!(",x{c}"));
        }
        out.push('\n');
        for (t, x) in self.grid.points().iter().zip(&self.states) {
            out.push_str(&format_f64(*t));
            for v in x {
                out.push(',');
                out.push_str(&format_f64(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Formats with 17 significant digits, enough to round-trip any f64 exactly.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage_x: Vec<f64>,
}

impl Rk4Workspace {
    fn new(p: usize) -> Self {
        Self {
            k1: vec![0.0; p],
            k2: vec![0.0; p],
            k3: vec![0.0; p],
            k4: vec![0.0; p],
            stage_x: vec![0.0; p],
        }
    }

    /// One classic RK4 step in place; returns the failing stage on non-finite
    /// field output.
    fn step(
        &mut self,
        sys: &OdeSystem,
        x: &mut [f64],
        t: f64,
        h: f64,
        theta: &[f64],
    ) -> std::result::Result<(), usize> {
        let half = 0.5 * h;
        sys.eval_into(x, t, theta, &mut self.k1);
        check_finite(&self.k1, 1)?;
        for i in 0..x.len() {
            self.stage_x[i] = x[i] + half * self.k1[i];
        }
        sys.eval_into(&self.stage_x, t + half, theta, &mut self.k2);
        check_finite(&self.k2, 2)?;
        for i in 0..x.len() {
            self.stage_x[i] = x[i] + half * self.k2[i];
        }
        sys.eval_into(&self.stage_x, t + half, theta, &mut self.k3);
        check_finite(&self.k3, 3)?;
        for i in 0..x.len() {
            self.stage_x[i] = x[i] + h * self.k3[i];
        }
        sys.eval_into(&self.stage_x, t + h, theta, &mut self.k4);
        check_finite(&self.k4, 4)?;
        let w = h / 6.0;
        for i in 0..x.len() {
            x[i] += w * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        Ok(())
    }
}

fn check_finite(k: &[f64], stage: usize) -> std::result::Result<(), usize> {
    if k.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(stage)
    }
}

/// One 4th-order Runge-Kutta step of size `h > 0` from `(x, t)`.
pub fn rk4_step(sys: &OdeSystem, x: &[f64], t: f64, h: f64, theta: &[f64]) -> Result<Vec<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidInput(format!("step size must be positive, got {h}")));
    }
    sys.check_state(x)?;
    sys.check_params(theta)?;
    let mut state = x.to_vec();
    let mut ws = Rk4Workspace::new(sys.state_dim());
    ws.step(sys, &mut state, t, h, theta)
        .map_err(|stage| Error::NumericalBlowup { time: t, stage })?;
    Ok(state)
}

/// Integrates from `x0` at the first grid point across the whole grid, splitting
/// each inter-observation gap into `refine` equal RK4 substeps.
pub fn integrate(
    sys: &OdeSystem,
    x0: &[f64],
    grid: &TimeGrid,
    theta: &[f64],
    refine: usize,
) -> Result<Trajectory> {
    if refine < 1 {
        return Err(Error::InvalidInput("refine must be >= 1".into()));
    }
    sys.check_state(x0)?;
    sys.check_params(theta)?;

    let mut states = Vec::with_capacity(grid.len());
    let mut state = x0.to_vec();
    states.push(state.clone());
    let mut ws = Rk4Workspace::new(sys.state_dim());

    for gap in grid.points().windows(2) {
        let (t0, t1) = (gap[0], gap[1]);
        let h = (t1 - t0) / refine as f64;
        for s in 0..refine {
            let t = t0 + h * s as f64;
            ws.step(sys, &mut state, t, h, theta)
                .map_err(|stage| Error::NumericalBlowup { time: t, stage })?;
        }
        states.push(state.clone());
    }
    Trajectory::new(grid.clone(), states)
}
