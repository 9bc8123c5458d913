//! Model descriptions: semiflows, jump families, switching kernels and the
//! parameter space of the jump index, bundled into an immutable [`PdmpModel`].
//!
//! Models are closed-form families selected from a registry
//! ([`builtin_model`]) rather than user-supplied code, so every evaluation —
//! flows, jump maps, densities, derivatives — is exact and portable. Adding a
//! family means adding a variant to the enums in this module.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Semiflow/mode index, 1-based as reported to users.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mode(pub usize);

impl Mode {
    /// Zero-based index into per-mode arrays.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A point of the product state space `Y x I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub y: Vec<f64>,
    pub mode: Mode,
}

impl State {
    pub fn new(y: Vec<f64>, mode: Mode) -> Self {
        State { y, mode }
    }
}

/// The index space of the jump family, together with its base measure.
///
/// Either a finite label set with strictly positive weights (counting-type
/// base measure) or a real interval carrying Lebesgue measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ThetaSpace {
    Finite { labels: Vec<f64>, weights: Vec<f64> },
    Interval { lo: f64, hi: f64 },
}

impl ThetaSpace {
    pub fn finite_uniform(labels: Vec<f64>) -> Self {
        let weights = vec![1.0; labels.len()];
        ThetaSpace::Finite { labels, weights }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ThetaSpace::Finite { labels, weights } => {
                if labels.is_empty() {
                    return Err(Error::InvalidModel("theta labels must be non-empty".into()));
                }
                if labels.len() != weights.len() {
                    return Err(Error::InvalidModel(
                        "theta labels and weights must have equal length".into(),
                    ));
                }
                if weights.iter().any(|w| !(*w > 0.0)) {
                    return Err(Error::InvalidModel(
                        "theta base weights must be strictly positive".into(),
                    ));
                }
                Ok(())
            }
            ThetaSpace::Interval { lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::InvalidModel("theta interval needs lo < hi".into()));
                }
                Ok(())
            }
        }
    }

    /// True when `theta` lies in the space (finite: exact label match).
    pub fn contains(&self, theta: f64) -> bool {
        match self {
            ThetaSpace::Finite { labels, .. } => labels.iter().any(|l| *l == theta),
            ThetaSpace::Interval { lo, hi } => *lo <= theta && theta <= *hi,
        }
    }
}

/// One mode's flow: `S(t, y) = a + e^{rate t} R(omega t) (y - a)`, where `R`
/// is a rotation in the plane (`omega` must be zero unless `dim == 2`). With
/// `rate < 0` the flow contracts toward the fixed point `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFlow {
    pub rate: f64,
    pub omega: f64,
    pub anchor: Vec<f64>,
}

/// A finite family of semiflows on `R^d`, indexed by mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Semiflow {
    pub dim: usize,
    pub modes: Vec<ModeFlow>,
}

impl Semiflow {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidModel("dimension must be >= 1".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::InvalidModel("at least one mode is required".into()));
        }
        for (k, m) in self.modes.iter().enumerate() {
            if m.anchor.len() != self.dim {
                return Err(Error::InvalidModel(format!(
                    "mode {} anchor has dimension {}, expected {}",
                    k + 1,
                    m.anchor.len(),
                    self.dim
                )));
            }
            if m.omega != 0.0 && self.dim != 2 {
                return Err(Error::InvalidModel(
                    "rotation requires dimension 2".into(),
                ));
            }
            if !m.rate.is_finite() || !m.omega.is_finite() {
                return Err(Error::InvalidModel("flow parameters must be finite".into()));
            }
        }
        Ok(())
    }

    /// `S_i(t, y)`. Identity at `t == 0` is exact by construction.
    pub fn eval(&self, mode: Mode, t: f64, y: &[f64]) -> Vec<f64> {
        if t == 0.0 {
            return y.to_vec();
        }
        let m = &self.modes[mode.index()];
        let s = (m.rate * t).exp();
        if m.omega == 0.0 {
            y.iter()
                .zip(&m.anchor)
                .map(|(yi, ai)| ai + s * (yi - ai))
                .collect()
        } else {
            let (sin, cos) = (m.omega * t).sin_cos();
            let dx = y[0] - m.anchor[0];
            let dy = y[1] - m.anchor[1];
            vec![
                m.anchor[0] + s * (cos * dx - sin * dy),
                m.anchor[1] + s * (sin * dx + cos * dy),
            ]
        }
    }

    /// Analytic `d/dt S_i(t, y)`.
    pub fn dt(&self, mode: Mode, t: f64, y: &[f64]) -> Vec<f64> {
        let m = &self.modes[mode.index()];
        let s = (m.rate * t).exp();
        if m.omega == 0.0 {
            y.iter()
                .zip(&m.anchor)
                .map(|(yi, ai)| m.rate * s * (yi - ai))
                .collect()
        } else {
            let (sin, cos) = (m.omega * t).sin_cos();
            let dx = y[0] - m.anchor[0];
            let dy = y[1] - m.anchor[1];
            // d/dt [e^{rt} R(wt) v] = e^{rt} (r R + w R') v with R' = J R.
            let rx = cos * dx - sin * dy;
            let ry = sin * dx + cos * dy;
            vec![
                s * (m.rate * rx - m.omega * ry),
                s * (m.rate * ry + m.omega * rx),
            ]
        }
    }

    /// Analytic space Jacobian `d/dy S_i(t, y)` (constant in `y` for these
    /// affine families).
    pub fn dy(&self, mode: Mode, t: f64) -> DMatrix<f64> {
        let m = &self.modes[mode.index()];
        let s = (m.rate * t).exp();
        if m.omega == 0.0 {
            DMatrix::identity(self.dim, self.dim) * s
        } else {
            let (sin, cos) = (m.omega * t).sin_cos();
            DMatrix::from_row_slice(2, 2, &[s * cos, -s * sin, s * sin, s * cos])
        }
    }
}

/// Probability density family of the jump index over the theta space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DensityKind {
    /// Constant density: `1 / vartheta(Theta)`.
    Uniform,
    /// Exponential tilt `p_theta(y) ∝ exp(g(y) theta)` with the bounded
    /// statistic `g(y) = kappa * y_1 / sqrt(1 + y_1^2)`; normalized in closed
    /// form, continuous in `(theta, y)`, strictly positive.
    ExpTilt { kappa: f64 },
}

/// The random jump transformations `w_theta(y) = scale * y + theta * dir +
/// offset`, together with the density selecting `theta` and the rejection
/// envelope used when the theta space is an interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpFamily {
    pub scale: f64,
    pub dir: Vec<f64>,
    pub offset: Vec<f64>,
    pub density: DensityKind,
    /// Multiplier on the analytic envelope `sup_theta p_theta(y)`; must be
    /// >= 1. Larger values waste rejection attempts.
    pub envelope_margin: f64,
}

impl JumpFamily {
    pub fn identity(dim: usize) -> Self {
        JumpFamily {
            scale: 1.0,
            dir: vec![0.0; dim],
            offset: vec![0.0; dim],
            density: DensityKind::Uniform,
            envelope_margin: 1.0,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.dir.len() != dim || self.offset.len() != dim {
            return Err(Error::InvalidModel("jump family dimension mismatch".into()));
        }
        if !self.scale.is_finite() {
            return Err(Error::InvalidModel("jump scale must be finite".into()));
        }
        if !(self.envelope_margin >= 1.0) {
            return Err(Error::InvalidModel("envelope margin must be >= 1".into()));
        }
        Ok(())
    }

    /// `w_theta(y)`.
    pub fn map(&self, theta: f64, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.dir.iter().zip(&self.offset))
            .map(|(yi, (di, oi))| self.scale * yi + theta * di + oi)
            .collect()
    }

    /// Analytic `d w_theta / d y` (independent of `theta` and `y`).
    pub fn dy(&self, dim: usize) -> DMatrix<f64> {
        DMatrix::identity(dim, dim) * self.scale
    }

    /// Analytic `d w_theta / d theta`.
    pub fn dtheta(&self) -> Vec<f64> {
        self.dir.clone()
    }

    fn tilt(&self, y: &[f64]) -> f64 {
        match self.density {
            DensityKind::Uniform => 0.0,
            DensityKind::ExpTilt { kappa } => kappa * y[0] / (1.0 + y[0] * y[0]).sqrt(),
        }
    }

    /// Density `p_theta(y)` with respect to the base measure of `theta`.
    pub fn density(&self, space: &ThetaSpace, theta: f64, y: &[f64]) -> f64 {
        let g = self.tilt(y);
        match space {
            ThetaSpace::Finite { labels, weights } => {
                let z: f64 = labels
                    .iter()
                    .zip(weights)
                    .map(|(l, w)| w * (g * l).exp())
                    .sum();
                (g * theta).exp() / z
            }
            ThetaSpace::Interval { lo, hi } => {
                if g.abs() < 1e-12 {
                    1.0 / (hi - lo)
                } else {
                    g * (g * theta).exp() / ((g * hi).exp() - (g * lo).exp())
                }
            }
        }
    }

    /// Envelope `M(y) >= sup_theta p_theta(y)` for rejection sampling
    /// (interval theta spaces only). Exact for these families: the tilted
    /// density is monotone in `theta`.
    pub fn envelope(&self, space: &ThetaSpace, y: &[f64]) -> f64 {
        match space {
            ThetaSpace::Finite { .. } => f64::NAN,
            ThetaSpace::Interval { lo, hi } => {
                let sup = self
                    .density(space, *lo, y)
                    .max(self.density(space, *hi, y));
                sup * self.envelope_margin
            }
        }
    }
}

/// Place-dependent mode switching probabilities `pi_{ij}(y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SwitchKernel {
    /// Switching independent of position.
    Constant { matrix: Vec<Vec<f64>> },
}

impl SwitchKernel {
    pub fn uniform(n_modes: usize) -> Self {
        let row = vec![1.0 / n_modes as f64; n_modes];
        SwitchKernel::Constant {
            matrix: vec![row; n_modes],
        }
    }

    pub fn validate(&self, n_modes: usize) -> Result<()> {
        match self {
            SwitchKernel::Constant { matrix } => {
                if matrix.len() != n_modes || matrix.iter().any(|r| r.len() != n_modes) {
                    return Err(Error::InvalidModel("switch matrix must be N x N".into()));
                }
                for (i, row) in matrix.iter().enumerate() {
                    if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                        return Err(Error::InvalidModel(format!(
                            "switch row {} has entries outside [0,1]",
                            i + 1
                        )));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > 1e-12 {
                        return Err(Error::InvalidModel(format!(
                            "switch row {} sums to {}, expected 1",
                            i + 1,
                            sum
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// `pi_{ij}(y)`.
    pub fn prob(&self, from: Mode, to: Mode, _y: &[f64]) -> f64 {
        match self {
            SwitchKernel::Constant { matrix } => matrix[from.index()][to.index()],
        }
    }
}

/// The state space `Y`: all of `R^d` or an axis-aligned closed box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StateSpace {
    Full,
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl StateSpace {
    pub fn contains(&self, y: &[f64]) -> bool {
        match self {
            StateSpace::Full => y.iter().all(|v| v.is_finite()),
            StateSpace::Box { lo, hi } => y
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (l, h))| v.is_finite() && *l <= *v && *v <= *h),
        }
    }
}

/// Full immutable description of one switched-jump system.
///
/// Values are cheap to clone and safe to share across worker threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdmpModel {
    /// Jump rate of the driving Poisson clock (1/time).
    pub lambda: f64,
    pub n_modes: usize,
    pub dim: usize,
    pub semiflow: Semiflow,
    pub jumps: JumpFamily,
    pub switch: SwitchKernel,
    pub theta: ThetaSpace,
    pub space: StateSpace,
    /// Registry name this model was built from, if any.
    pub family: String,
}

impl PdmpModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidModel(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if self.n_modes == 0 {
            return Err(Error::InvalidModel("need at least one mode".into()));
        }
        if self.semiflow.modes.len() != self.n_modes {
            return Err(Error::InvalidModel("semiflow count != n_modes".into()));
        }
        self.semiflow.validate()?;
        if self.semiflow.dim != self.dim {
            return Err(Error::InvalidModel("semiflow dimension mismatch".into()));
        }
        self.jumps.validate(self.dim)?;
        self.switch.validate(self.n_modes)?;
        self.theta.validate()?;
        Ok(())
    }

    pub fn check_mode(&self, mode: Mode) -> Result<()> {
        if mode.0 == 0 || mode.0 > self.n_modes {
            return Err(Error::InvalidMode {
                mode: mode.0,
                n_modes: self.n_modes,
            });
        }
        Ok(())
    }

    pub fn check_state(&self, state: &State) -> Result<()> {
        self.check_mode(state.mode)?;
        if state.y.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: state.y.len(),
            });
        }
        if !self.space.contains(&state.y) {
            return Err(Error::OutOfSpace);
        }
        Ok(())
    }

    /// Evaluate the semiflow `S_i(t, y)`.
    pub fn flow(&self, mode: Mode, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        self.check_mode(mode)?;
        if !(t >= 0.0) {
            return Err(Error::NegativeTime(t));
        }
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: y.len(),
            });
        }
        Ok(self.semiflow.eval(mode, t, y))
    }

    /// All modes, 1-based.
    pub fn modes(&self) -> impl Iterator<Item = Mode> {
        (1..=self.n_modes).map(Mode)
    }
}

/// A loosely typed parameter value from a config or the API surface.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Number(f64),
    Text(String),
    Numbers(Vec<f64>),
}

pub type ModelParams = BTreeMap<String, ParamValue>;

/// Names accepted by [`builtin_model`].
pub fn builtin_names() -> &'static [&'static str] {
    &["contracting-lines", "dirac-trap", "planar-rotor"]
}

struct Params<'a> {
    map: &'a ModelParams,
    used: std::cell::RefCell<Vec<String>>,
}

impl<'a> Params<'a> {
    fn new(map: &'a ModelParams) -> Self {
        Params {
            map,
            used: std::cell::RefCell::new(Vec::new()),
        }
    }

    fn number(&self, key: &str, default: f64) -> Result<f64> {
        self.used.borrow_mut().push(key.to_string());
        match self.map.get(key) {
            None => Ok(default),
            Some(ParamValue::Number(v)) => Ok(*v),
            Some(_) => Err(Error::InvalidParam {
                name: key.into(),
                reason: "expected a number".into(),
            }),
        }
    }

    fn text(&self, key: &str, default: &str) -> Result<String> {
        self.used.borrow_mut().push(key.to_string());
        match self.map.get(key) {
            None => Ok(default.to_string()),
            Some(ParamValue::Text(v)) => Ok(v.clone()),
            Some(_) => Err(Error::InvalidParam {
                name: key.into(),
                reason: "expected a string".into(),
            }),
        }
    }

    fn numbers(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        self.used.borrow_mut().push(key.to_string());
        match self.map.get(key) {
            None => Ok(default.to_vec()),
            Some(ParamValue::Numbers(v)) => Ok(v.clone()),
            Some(ParamValue::Number(v)) => Ok(vec![*v]),
            Some(_) => Err(Error::InvalidParam {
                name: key.into(),
                reason: "expected a number list".into(),
            }),
        }
    }

    fn finish(&self) -> Result<()> {
        for key in self.map.keys() {
            if !self.used.borrow().iter().any(|u| u == key) {
                return Err(Error::InvalidParam {
                    name: key.clone(),
                    reason: "unknown parameter for this model family".into(),
                });
            }
        }
        Ok(())
    }
}

fn require(cond: bool, name: &str, reason: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParam {
            name: name.into(),
            reason: reason.into(),
        })
    }
}

fn theta_space_from(p: &Params<'_>) -> Result<ThetaSpace> {
    let kind = p.text("theta", "finite")?;
    match kind.as_str() {
        "finite" => {
            let labels = p.numbers("theta_values", &[-1.0, 1.0])?;
            let weights = p.numbers("theta_weights", &vec![1.0; labels.len()])?;
            let space = ThetaSpace::Finite { labels, weights };
            space.validate()?;
            Ok(space)
        }
        "interval" => {
            let lo = p.number("theta_lo", -1.0)?;
            let hi = p.number("theta_hi", 1.0)?;
            let space = ThetaSpace::Interval { lo, hi };
            space.validate()?;
            Ok(space)
        }
        other => Err(Error::InvalidParam {
            name: "theta".into(),
            reason: format!("unknown theta space '{other}' (finite | interval)"),
        }),
    }
}

fn density_from(p: &Params<'_>) -> Result<DensityKind> {
    let kind = p.text("density", "uniform")?;
    let kappa = p.number("density_kappa", 0.8)?;
    match kind.as_str() {
        "uniform" => Ok(DensityKind::Uniform),
        "exp-tilt" => {
            require(kappa.is_finite(), "density_kappa", "must be finite")?;
            Ok(DensityKind::ExpTilt { kappa })
        }
        other => Err(Error::InvalidParam {
            name: "density".into(),
            reason: format!("unknown density '{other}' (uniform | exp-tilt)"),
        }),
    }
}

fn constant_switch(p: &Params<'_>, n_modes: usize) -> Result<SwitchKernel> {
    let stay = p.number("pi_stay", 1.0 / n_modes as f64)?;
    require(
        (0.0..=1.0).contains(&stay),
        "pi_stay",
        "must lie in [0, 1]",
    )?;
    if n_modes == 1 {
        return Ok(SwitchKernel::Constant {
            matrix: vec![vec![1.0]],
        });
    }
    let off = (1.0 - stay) / (n_modes - 1) as f64;
    let matrix = (0..n_modes)
        .map(|i| {
            (0..n_modes)
                .map(|j| if i == j { stay } else { off })
                .collect()
        })
        .collect();
    Ok(SwitchKernel::Constant { matrix })
}

/// Build a model from the registry of closed-form families.
///
/// Families:
///
/// - `"contracting-lines"`: `Y = R`, two modes with flows
///   `S_1(t,y) = e^{alpha t} y` and `S_2(t,y) = e^{alpha t}(y - a) + a`
///   (`alpha < 0`), jump maps `w_theta(y) = jump_scale * (y + theta)`,
///   constant switching. Defaults: `alpha = -1`, `a = 2`, `lambda = 1`,
///   finite `theta in {-1, +1}` with uniform density, `jump_scale = 0.5`,
///   `pi_stay = 0.5`. These defaults are one admissible instantiation of the
///   family — the jump maps and probabilities are our choice, not canonical.
/// - `"dirac-trap"`: `Y = R`, single mode `S(t,y) = e^{-t} y`, identity jump.
///   Its unique invariant law is the Dirac mass at 0, which is singular: the
///   built-in counterexample for the continuity diagnostics.
/// - `"planar-rotor"`: `Y = R^2`, two contracting spiral flows with distinct
///   fixed points and translation jumps; exercises rank-2 time-Jacobians at
///   `n = d = 2`.
pub fn builtin_model(name: &str, params: &ModelParams) -> Result<PdmpModel> {
    let p = Params::new(params);
    let model = match name {
        "contracting-lines" => {
            let lambda = p.number("lambda", 1.0)?;
            let alpha = p.number("alpha", -1.0)?;
            let a = p.number("a", 2.0)?;
            let jump_scale = p.number("jump_scale", 0.5)?;
            let envelope_margin = p.number("envelope_margin", 1.0)?;
            require(alpha < 0.0, "alpha", "must be < 0 for contracting-lines")?;
            require(a != 0.0, "a", "must be nonzero (distinct fixed points)")?;
            let theta = theta_space_from(&p)?;
            let density = density_from(&p)?;
            let switch = constant_switch(&p, 2)?;
            PdmpModel {
                lambda,
                n_modes: 2,
                dim: 1,
                semiflow: Semiflow {
                    dim: 1,
                    modes: vec![
                        ModeFlow {
                            rate: alpha,
                            omega: 0.0,
                            anchor: vec![0.0],
                        },
                        ModeFlow {
                            rate: alpha,
                            omega: 0.0,
                            anchor: vec![a],
                        },
                    ],
                },
                jumps: JumpFamily {
                    scale: jump_scale,
                    dir: vec![jump_scale],
                    offset: vec![0.0],
                    density,
                    envelope_margin,
                },
                switch,
                theta,
                space: StateSpace::Full,
                family: name.to_string(),
            }
        }
        "dirac-trap" => {
            let lambda = p.number("lambda", 1.0)?;
            PdmpModel {
                lambda,
                n_modes: 1,
                dim: 1,
                semiflow: Semiflow {
                    dim: 1,
                    modes: vec![ModeFlow {
                        rate: -1.0,
                        omega: 0.0,
                        anchor: vec![0.0],
                    }],
                },
                jumps: JumpFamily::identity(1),
                switch: SwitchKernel::Constant {
                    matrix: vec![vec![1.0]],
                },
                theta: ThetaSpace::finite_uniform(vec![1.0]),
                space: StateSpace::Full,
                family: name.to_string(),
            }
        }
        "planar-rotor" => {
            let lambda = p.number("lambda", 1.0)?;
            let alpha = p.number("alpha", -0.5)?;
            let omega1 = p.number("omega1", 0.9)?;
            let omega2 = p.number("omega2", -0.6)?;
            let a = p.number("a", 3.0)?;
            let dir = p.numbers("jump_dir", &[0.4, 0.15])?;
            require(alpha < 0.0, "alpha", "must be < 0 for planar-rotor")?;
            require(dir.len() == 2, "jump_dir", "must have two components")?;
            let theta = theta_space_from(&p)?;
            let density = density_from(&p)?;
            let switch = constant_switch(&p, 2)?;
            PdmpModel {
                lambda,
                n_modes: 2,
                dim: 2,
                semiflow: Semiflow {
                    dim: 2,
                    modes: vec![
                        ModeFlow {
                            rate: alpha,
                            omega: omega1,
                            anchor: vec![0.0, 0.0],
                        },
                        ModeFlow {
                            rate: alpha,
                            omega: omega2,
                            anchor: vec![a, 0.0],
                        },
                    ],
                },
                jumps: JumpFamily {
                    scale: 1.0,
                    dir,
                    offset: vec![0.0, 0.0],
                    density,
                    envelope_margin: p.number("envelope_margin", 1.0)?,
                },
                switch,
                theta,
                space: StateSpace::Full,
                family: name.to_string(),
            }
        }
        other => return Err(Error::UnknownModel(other.to_string())),
    };
    p.finish()?;
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::RngStream;

    fn lines() -> PdmpModel {
        builtin_model("contracting-lines", &ModelParams::new()).unwrap()
    }

    fn trap() -> PdmpModel {
        builtin_model("dirac-trap", &ModelParams::new()).unwrap()
    }

    #[test]
    fn flow_dirac_trap_halves_at_ln2() {
        let m = trap();
        let y = m.flow(Mode(1), std::f64::consts::LN_2, &[1.0]).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn flow_identity_at_zero_time() {
        let m = lines();
        let y = m.flow(Mode(2), 0.0, &[5.0]).unwrap();
        assert_eq!(y, vec![5.0]);
    }

    #[test]
    fn flow_lines_converges_to_anchor() {
        let m = lines();
        let y = m.flow(Mode(2), 20.0, &[5.0]).unwrap();
        // e^{-20}(5-2)+2
        assert!((y[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn flow_rejects_negative_time_and_bad_mode() {
        let m = lines();
        assert!(matches!(
            m.flow(Mode(1), -0.5, &[0.0]),
            Err(Error::NegativeTime(_))
        ));
        assert!(matches!(
            m.flow(Mode(3), 0.5, &[0.0]),
            Err(Error::InvalidMode { .. })
        ));
    }

    #[test]
    fn builtin_lines_has_two_modes() {
        let mut params = ModelParams::new();
        params.insert("alpha".into(), ParamValue::Number(-1.0));
        params.insert("a".into(), ParamValue::Number(2.0));
        params.insert("lambda".into(), ParamValue::Number(1.0));
        let m = builtin_model("contracting-lines", &params).unwrap();
        assert_eq!(m.n_modes, 2);
        assert_eq!(m.dim, 1);
    }

    #[test]
    fn builtin_trap_shape() {
        let mut params = ModelParams::new();
        params.insert("lambda".into(), ParamValue::Number(1.0));
        let m = builtin_model("dirac-trap", &params).unwrap();
        assert_eq!(m.n_modes, 1);
        assert_eq!(m.dim, 1);
    }

    #[test]
    fn builtin_unknown_name_errors() {
        assert!(matches!(
            builtin_model("nope", &ModelParams::new()),
            Err(Error::UnknownModel(_))
        ));
    }

    #[test]
    fn builtin_unknown_param_errors() {
        let mut params = ModelParams::new();
        params.insert("bogus".into(), ParamValue::Number(1.0));
        assert!(matches!(
            builtin_model("dirac-trap", &params),
            Err(Error::InvalidParam { .. })
        ));
    }

    #[test]
    fn semiflow_semigroup_law_on_random_samples() {
        let mut rng = RngStream::new(7, 0);
        for m in [lines(), trap(), builtin_model("planar-rotor", &ModelParams::new()).unwrap()] {
            for _ in 0..500 {
                let mode = Mode(1 + (rng.next_u64() as usize) % m.n_modes);
                let s = 3.0 * rng.uniform();
                let t = 3.0 * rng.uniform();
                let y: Vec<f64> = (0..m.dim).map(|_| 8.0 * rng.uniform() - 4.0).collect();
                let one = m.flow(mode, s + t, &y).unwrap();
                let two = m
                    .flow(mode, t, &m.flow(mode, s, &y).unwrap())
                    .unwrap();
                for (a, b) in one.iter().zip(&two) {
                    assert!((a - b).abs() < 1e-9, "semigroup violated: {a} vs {b}");
                }
                let ident = m.flow(mode, 0.0, &y).unwrap();
                for (a, b) in ident.iter().zip(&y) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lines_distance_scales_exactly() {
        let m = lines();
        let mut rng = RngStream::new(11, 0);
        for _ in 0..500 {
            let u = 10.0 * rng.uniform() - 5.0;
            let v = 10.0 * rng.uniform() - 5.0;
            let t = 5.0 * rng.uniform();
            for mode in m.modes() {
                let su = m.flow(mode, t, &[u]).unwrap()[0];
                let sv = m.flow(mode, t, &[v]).unwrap()[0];
                let lhs = (su - sv).abs();
                let rhs = (-t).exp() * (u - v).abs();
                assert!(
                    (lhs - rhs).abs() <= 1e-14 * (1.0 + rhs),
                    "contraction factor off: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn density_normalizes_finite_and_interval() {
        let mut rng = RngStream::new(3, 0);
        // finite
        let m = lines();
        if let ThetaSpace::Finite { labels, weights } = &m.theta {
            for _ in 0..200 {
                let y = [6.0 * rng.uniform() - 3.0];
                let total: f64 = labels
                    .iter()
                    .zip(weights)
                    .map(|(l, w)| w * m.jumps.density(&m.theta, *l, &y))
                    .sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        } else {
            panic!("expected finite theta");
        }
        // interval with tilted density, Simpson quadrature
        let mut params = ModelParams::new();
        params.insert("theta".into(), ParamValue::Text("interval".into()));
        params.insert("density".into(), ParamValue::Text("exp-tilt".into()));
        let m = builtin_model("contracting-lines", &params).unwrap();
        let (lo, hi) = match m.theta {
            ThetaSpace::Interval { lo, hi } => (lo, hi),
            _ => unreachable!(),
        };
        for _ in 0..50 {
            let y = [6.0 * rng.uniform() - 3.0];
            let n = 400;
            let h = (hi - lo) / n as f64;
            let mut total = 0.0;
            for k in 0..=n {
                let theta = lo + k as f64 * h;
                let w = if k == 0 || k == n {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                total += w * m.jumps.density(&m.theta, theta, &y);
            }
            total *= h / 3.0;
            assert!((total - 1.0).abs() < 1e-6, "quadrature total {total}");
        }
    }

    #[test]
    fn switch_rows_sum_to_one() {
        let m = lines();
        let mut rng = RngStream::new(5, 0);
        for _ in 0..200 {
            let y = [10.0 * rng.uniform() - 5.0];
            for i in m.modes() {
                let sum: f64 = m.modes().map(|j| m.switch.prob(i, j, &y)).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jump_maps_send_space_into_space() {
        let m = lines();
        let mut rng = RngStream::new(13, 0);
        for _ in 0..500 {
            let y = [20.0 * rng.uniform() - 10.0];
            let theta = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let image = m.jumps.map(theta, &y);
            assert!(m.space.contains(&image));
        }
    }
}
