//! Numerical certificates for absolute continuity and geometric ergodicity:
//! time-Jacobian rank probes, path-weight positivity, anchor suggestion,
//! accessibility search, small-set estimation, hypothesis falsification and
//! an empirical atomic-vs-diffuse classifier.
//!
//! These checks produce evidence, not proofs. A `Pass` verdict means "not
//! falsified at the stated tolerances on the sampled inputs"; universally
//! quantified conditions can only come back `Pass` or `Inconclusive`, never
//! verified.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::EmpiricalMeasure;
use crate::model::{DensityKind, Mode, PdmpModel, State, SwitchKernel, ThetaSpace};
use crate::operators::{compose_wn, sample_p, weight_p_n, weight_pi_n, PathSpec};
use crate::simulate::RngStream;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Shared report plumbing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// One named check with its numeric evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub verdict: Verdict,
    pub evidence: BTreeMap<String, f64>,
    pub notes: String,
}

impl CheckResult {
    fn new(name: &str, verdict: Verdict, evidence: BTreeMap<String, f64>, notes: String) -> Self {
        CheckResult {
            name: name.to_string(),
            verdict,
            evidence,
            notes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub checks: Vec<CheckResult>,
}

impl DiagnosticsReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.verdict != Verdict::Fail)
    }

    pub fn find(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

// ---------------------------------------------------------------------------
// Rank and positivity probes

/// A probe point for the time-Jacobian rank condition: the composition map
/// along `path` from `y_hat` must have full rank `d` in the dwell times.
/// Requires at least `d` stages, strictly positive dwell times and interior
/// jump indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankProbe {
    pub y_hat: Vec<f64>,
    pub path: PathSpec,
    /// Relative step for central finite differences.
    pub fd_step: f64,
    /// Relative singular-value cutoff for the rank decision.
    pub svd_rtol: f64,
}

impl RankProbe {
    pub fn new(y_hat: Vec<f64>, path: PathSpec) -> Self {
        RankProbe {
            y_hat,
            path,
            fd_step: 1e-6,
            svd_rtol: 1e-8,
        }
    }

    /// Starting mode of the probe.
    pub fn mode(&self) -> Mode {
        self.path.modes[0]
    }

    pub fn validate(&self, model: &PdmpModel) -> Result<()> {
        self.path.validate(model)?;
        if self.y_hat.len() != model.dim {
            return Err(Error::DimensionMismatch {
                expected: model.dim,
                got: self.y_hat.len(),
            });
        }
        if self.path.len() < model.dim {
            return Err(Error::InvalidProbe(format!(
                "rank probe needs at least d = {} stages, got {}",
                model.dim,
                self.path.len()
            )));
        }
        if self.path.times.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidProbe(
                "rank probe dwell times must be strictly positive".into(),
            ));
        }
        if let ThetaSpace::Interval { lo, hi } = &model.theta {
            if self
                .path
                .thetas
                .iter()
                .any(|th| !(*lo < *th && *th < *hi))
            {
                return Err(Error::InvalidProbe(
                    "rank probe thetas must be interior to the theta interval".into(),
                ));
            }
        }
        if !(self.fd_step > 0.0) || !(self.svd_rtol > 0.0) {
            return Err(Error::InvalidProbe(
                "fd_step and svd_rtol must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Jacobian of the composition map with respect to the dwell times, by chain
/// rule through the model's analytic derivatives. Columns index stages.
pub fn jacobian_t_wn(model: &PdmpModel, probe: &RankProbe) -> Result<DMatrix<f64>> {
    probe.validate(model)?;
    let d = model.dim;
    let n = probe.path.len();
    // Forward pass: pre-jump points f_k and post-jump points z_k.
    let mut pre = Vec::with_capacity(n);
    let mut post = Vec::with_capacity(n + 1);
    post.push(probe.y_hat.clone());
    for k in 0..n {
        let flowed = model
            .semiflow
            .eval(probe.path.modes[k], probe.path.times[k], &post[k]);
        post.push(model.jumps.map(probe.path.thetas[k], &flowed));
        pre.push(flowed);
    }
    // Backward pass: columns are (prod of later stage maps) * dw * d_t S.
    let jump_dy = model.jumps.dy(d);
    let mut running = DMatrix::identity(d, d);
    let mut jac = DMatrix::zeros(d, n);
    for k in (0..n).rev() {
        let dt = DVector::from_vec(model.semiflow.dt(
            probe.path.modes[k],
            probe.path.times[k],
            &post[k],
        ));
        let col = &running * &jump_dy * dt;
        jac.set_column(k, &col);
        let stage = &jump_dy * model.semiflow.dy(probe.path.modes[k], probe.path.times[k]);
        running *= stage;
    }
    Ok(jac)
}

/// Same Jacobian by central finite differences of the composition map; the
/// independent cross-check for the analytic path. Steps shrink to stay in
/// `t >= 0` and error out below 1e-12.
pub fn jacobian_t_wn_fd(model: &PdmpModel, probe: &RankProbe) -> Result<DMatrix<f64>> {
    probe.validate(model)?;
    let d = model.dim;
    let n = probe.path.len();
    let mut jac = DMatrix::zeros(d, n);
    for k in 0..n {
        let t = probe.path.times[k];
        let mut h = probe.fd_step * t.abs().max(1.0);
        if t - h < 0.0 {
            h = t / 2.0;
        }
        if h < 1e-12 {
            return Err(Error::FdStepTooSmall { index: k, t });
        }
        let mut plus = probe.path.clone();
        plus.times[k] = t + h;
        let mut minus = probe.path.clone();
        minus.times[k] = t - h;
        let fp = compose_wn(model, &probe.y_hat, &plus)?;
        let fm = compose_wn(model, &probe.y_hat, &minus)?;
        for r in 0..d {
            jac[(r, k)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    Ok(jac)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankReport {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub pass: bool,
    pub dim: usize,
}

/// Decide the rank condition at the probe: SVD of the time-Jacobian, rank =
/// number of singular values above `svd_rtol * sigma_max`, pass iff rank
/// equals the state dimension.
pub fn check_rank(model: &PdmpModel, probe: &RankProbe) -> Result<RankReport> {
    let jac = jacobian_t_wn(model, probe)?;
    rank_from_jacobian(model, probe, &jac)
}

/// Rank decision from a caller-supplied Jacobian (used to cross-check the
/// finite-difference route against the analytic one).
pub fn rank_from_jacobian(
    model: &PdmpModel,
    probe: &RankProbe,
    jac: &DMatrix<f64>,
) -> Result<RankReport> {
    for r in 0..jac.nrows() {
        for c in 0..jac.ncols() {
            if !jac[(r, c)].is_finite() {
                return Err(Error::NonFiniteJacobian { row: r, col: c });
            }
        }
    }
    let mut sv: Vec<f64> = jac.clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = if smax > 0.0 {
        sv.iter().filter(|s| **s > probe.svd_rtol * smax).count()
    } else {
        0
    };
    Ok(RankReport {
        rank,
        singular_values: sv,
        pass: rank == model.dim,
        dim: model.dim,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositivityReport {
    /// `(terminal mode, density product * switch product)` per mode.
    pub per_mode: Vec<(usize, f64)>,
    pub min_over_modes: f64,
    pub pass: bool,
}

/// Evaluate the path-weight positivity condition at the probe: the density
/// product times the switching product must be strictly positive for every
/// terminal mode.
pub fn check_positivity(model: &PdmpModel, probe: &RankProbe) -> Result<PositivityReport> {
    probe.validate(model)?;
    let p_n = weight_p_n(model, &probe.y_hat, &probe.path)?;
    let mut per_mode = Vec::with_capacity(model.n_modes);
    for j in model.modes() {
        let pi_n = weight_pi_n(model, &probe.y_hat, &probe.path, j)?;
        per_mode.push((j.0, p_n * pi_n));
    }
    let min_over_modes = per_mode
        .iter()
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    Ok(PositivityReport {
        per_mode,
        min_over_modes,
        pass: min_over_modes > 0.0,
    })
}

// ---------------------------------------------------------------------------
// Anchor suggestion

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnchorProvenance {
    /// Fixed point of a contracting jump map: the anchor is the fixed point
    /// itself.
    JumpFixedPoint { theta: f64, contraction: f64 },
    /// Flow equilibrium `z` of some mode, pushed through one jump: the
    /// anchor is `w_theta(z)`.
    FlowEquilibrium { flow_mode: usize, theta: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorCandidate {
    pub y_hat: Vec<f64>,
    /// Suggested terminal mode; any mode reachable through positive
    /// switching works, we propose mode 1 by convention.
    pub mode: Mode,
    pub provenance: AnchorProvenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnchorSearchCfg {
    /// Interior grid size used to enumerate interval theta spaces.
    pub theta_grid: usize,
    pub fp_max_iter: usize,
    pub tol: f64,
    /// Flow time used to settle onto candidate equilibria.
    pub flow_horizon: f64,
}

impl Default for AnchorSearchCfg {
    fn default() -> Self {
        AnchorSearchCfg {
            theta_grid: 17,
            fp_max_iter: 300,
            tol: 1e-10,
            flow_horizon: 60.0,
        }
    }
}

fn theta_candidates(model: &PdmpModel, cfg: &AnchorSearchCfg) -> Vec<f64> {
    match &model.theta {
        ThetaSpace::Finite { labels, .. } => labels.clone(),
        ThetaSpace::Interval { lo, hi } => (0..cfg.theta_grid)
            .map(|k| lo + (hi - lo) * (k as f64 + 0.5) / cfg.theta_grid as f64)
            .collect(),
    }
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, z)| (x - z) * (x - z))
        .sum::<f64>()
        .sqrt()
}

/// Numeric estimate of the local Lipschitz factor of `w_theta` at `z`.
fn jump_contraction_factor(model: &PdmpModel, theta: f64, z: &[f64]) -> f64 {
    let h = 1e-6;
    let base = model.jumps.map(theta, z);
    let mut factor: f64 = 0.0;
    for j in 0..z.len() {
        let mut probe = z.to_vec();
        probe[j] += h;
        let moved = model.jumps.map(theta, &probe);
        factor = factor.max(norm_diff(&moved, &base) / h);
    }
    factor
}

/// Propose anchor points for the rank and accessibility probes.
///
/// Two constructions: (a) fixed points of contracting jump maps, found by
/// fixed-point iteration over a theta grid; (b) flow equilibria of each
/// mode, settled by long flowing and verified over a time grid, pushed
/// through one jump map. Candidates record which construction produced them.
pub fn suggest_anchors(model: &PdmpModel, cfg: &AnchorSearchCfg) -> Vec<AnchorCandidate> {
    let mut out: Vec<AnchorCandidate> = Vec::new();
    let thetas = theta_candidates(model, cfg);
    let t_check = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

    // Jump fixed points.
    for &theta in &thetas {
        let mut z = vec![0.0; model.dim];
        let mut converged = false;
        for _ in 0..cfg.fp_max_iter {
            let next = model.jumps.map(theta, &z);
            let step = norm_diff(&next, &z);
            z = next;
            if step < 0.1 * cfg.tol {
                converged = true;
                break;
            }
        }
        if !converged || norm_diff(&model.jumps.map(theta, &z), &z) >= cfg.tol {
            continue;
        }
        let contraction = jump_contraction_factor(model, theta, &z);
        if contraction < 1.0 {
            out.push(AnchorCandidate {
                y_hat: z,
                mode: Mode(1),
                provenance: AnchorProvenance::JumpFixedPoint { theta, contraction },
            });
        }
    }

    // Flow equilibria pushed through one jump.
    for mode in model.modes() {
        let z = model.semiflow.eval(mode, cfg.flow_horizon, &vec![0.0; model.dim]);
        if z.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let settled = t_check
            .iter()
            .all(|t| norm_diff(&model.semiflow.eval(mode, *t, &z), &z) < cfg.tol);
        if !settled {
            continue;
        }
        for &theta in &thetas {
            if model.jumps.density(&model.theta, theta, &z) <= 0.0 {
                continue;
            }
            out.push(AnchorCandidate {
                y_hat: model.jumps.map(theta, &z),
                mode: Mode(1),
                provenance: AnchorProvenance::FlowEquilibrium {
                    flow_mode: mode.0,
                    theta,
                },
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Accessibility probing

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccessCfg {
    pub n_max: usize,
    /// Random path attempts per stage count.
    pub attempts: usize,
    pub t_max: f64,
    /// Probability of proposing an exactly-zero dwell time.
    pub zero_prob: f64,
    pub refine_iters: usize,
}

impl Default for AccessCfg {
    fn default() -> Self {
        AccessCfg {
            n_max: 8,
            attempts: 200,
            t_max: 8.0,
            zero_prob: 0.3,
            refine_iters: 40,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccessAttempt {
    pub start: State,
    pub reached: bool,
    pub n: usize,
    pub path: PathSpec,
    pub weight: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccessibilityReport {
    pub target: Vec<f64>,
    pub target_mode: usize,
    pub radius: f64,
    pub attempts: Vec<AccessAttempt>,
    /// True when every start reached the target ball with positive weight.
    pub all_reached: bool,
}

fn random_path(
    model: &PdmpModel,
    start_mode: Mode,
    n: usize,
    cfg: &AccessCfg,
    rng: &mut RngStream,
) -> PathSpec {
    let mut modes = Vec::with_capacity(n);
    modes.push(start_mode);
    for _ in 1..n {
        modes.push(Mode(1 + (rng.next_u64() as usize) % model.n_modes));
    }
    let times = (0..n)
        .map(|_| {
            if rng.uniform() < cfg.zero_prob {
                0.0
            } else {
                rng.uniform_in(0.0, cfg.t_max)
            }
        })
        .collect();
    let thetas = (0..n)
        .map(|_| match &model.theta {
            ThetaSpace::Finite { labels, .. } => labels[(rng.next_u64() as usize) % labels.len()],
            ThetaSpace::Interval { lo, hi } => {
                let pad = 1e-9 * (hi - lo);
                rng.uniform_in(*lo + pad, *hi - pad)
            }
        })
        .collect();
    PathSpec::new(modes, times, thetas)
}

fn path_quality(
    model: &PdmpModel,
    start: &State,
    target: &[f64],
    target_mode: Mode,
    path: &PathSpec,
) -> Result<(f64, f64)> {
    let end = compose_wn(model, &start.y, path)?;
    let dist = norm_diff(&end, target);
    let weight =
        weight_p_n(model, &start.y, path)? * weight_pi_n(model, &start.y, path, target_mode)?;
    Ok((dist, weight))
}

/// Randomized search for steering paths into a ball around the anchor with
/// strictly positive path weight, one report per start. Failure to find a
/// path is inconclusive, never a disproof.
pub fn probe_accessibility(
    model: &PdmpModel,
    y_hat: &[f64],
    target_mode: Mode,
    radius: f64,
    starts: &[State],
    cfg: &AccessCfg,
    rng: &RngStream,
) -> Result<AccessibilityReport> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("radius must be > 0".into()));
    }
    if starts.is_empty() {
        return Err(Error::InvalidArgument("starts must be non-empty".into()));
    }
    model.check_mode(target_mode)?;
    for s in starts {
        model.check_state(s)?;
    }

    let attempts: Vec<Result<AccessAttempt>> = starts
        .par_iter()
        .enumerate()
        .map(|(s_idx, start)| {
            let mut best: Option<AccessAttempt> = None;
            'stages: for n in 1..=cfg.n_max {
                let mut stream = rng.derive(s_idx as u64).derive(n as u64);
                let mut best_n: Option<(PathSpec, f64, f64)> = None;
                for _ in 0..cfg.attempts {
                    let path = random_path(model, start.mode, n, cfg, &mut stream);
                    let (dist, weight) =
                        path_quality(model, start, y_hat, target_mode, &path)?;
                    if weight > 0.0
                        && best_n
                            .as_ref()
                            .map(|(_, d, _)| dist < *d)
                            .unwrap_or(true)
                    {
                        best_n = Some((path, dist, weight));
                    }
                }
                // Coordinate descent on the dwell times of the stage-n best.
                if let Some((mut path, mut dist, mut weight)) = best_n {
                    let mut step = cfg.t_max / 2.0;
                    for _ in 0..cfg.refine_iters {
                        let mut improved = false;
                        for k in 0..n {
                            for delta in [step, -step] {
                                let t_new = path.times[k] + delta;
                                if t_new < 0.0 {
                                    continue;
                                }
                                let mut trial = path.clone();
                                trial.times[k] = t_new;
                                let (d2, w2) =
                                    path_quality(model, start, y_hat, target_mode, &trial)?;
                                if w2 > 0.0 && d2 < dist {
                                    path = trial;
                                    dist = d2;
                                    weight = w2;
                                    improved = true;
                                }
                            }
                        }
                        if !improved {
                            step /= 2.0;
                            if step < 1e-9 {
                                break;
                            }
                        }
                    }
                    let reached = dist < radius && weight > 0.0;
                    let candidate = AccessAttempt {
                        start: start.clone(),
                        reached,
                        n,
                        path,
                        weight,
                        distance: dist,
                    };
                    let replace = best
                        .as_ref()
                        .map(|b| !b.reached && candidate.distance < b.distance)
                        .unwrap_or(true);
                    if candidate.reached {
                        best = Some(candidate);
                        break 'stages;
                    } else if replace {
                        best = Some(candidate);
                    }
                }
            }
            best.ok_or_else(|| {
                Error::InvalidArgument("no admissible path with positive weight found".into())
            })
        })
        .collect();

    let attempts = attempts.into_iter().collect::<Result<Vec<_>>>()?;
    let all_reached = attempts.iter().all(|a| a.reached);
    Ok(AccessibilityReport {
        target: y_hat.to_vec(),
        target_mode: target_mode.0,
        radius,
        attempts,
        all_reached,
    })
}

// ---------------------------------------------------------------------------
// Small-set estimation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmallSetCfg {
    /// Half-width of the start box around the anchor.
    pub u_halfwidth: f64,
    pub starts_per_dim: usize,
    pub coarse_bins: usize,
    pub refine_bins: usize,
}

impl Default for SmallSetCfg {
    fn default() -> Self {
        SmallSetCfg {
            u_halfwidth: 0.05,
            starts_per_dim: 3,
            coarse_bins: 32,
            refine_bins: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmallSetReport {
    pub v_lo: Vec<f64>,
    pub v_hi: Vec<f64>,
    /// Empirical lower bound on the n-step density over the box, taken as a
    /// minimum over starts, terminal modes and sub-bins; zero means
    /// inconclusive.
    pub c_bar: f64,
    pub pass: bool,
    pub n: usize,
    pub n_mc: usize,
    pub n_starts: usize,
}

fn cartesian_grid(center: &[f64], half: f64, per_dim: usize) -> Vec<Vec<f64>> {
    let d = center.len();
    let axis: Vec<Vec<f64>> = center
        .iter()
        .map(|c| {
            (0..per_dim)
                .map(|k| {
                    if per_dim == 1 {
                        *c
                    } else {
                        c - half + 2.0 * half * k as f64 / (per_dim - 1) as f64
                    }
                })
                .collect()
        })
        .collect();
    let mut points = vec![Vec::new()];
    for dim_vals in axis.iter().take(d) {
        let mut next = Vec::with_capacity(points.len() * dim_vals.len());
        for p in &points {
            for v in dim_vals {
                let mut q = p.clone();
                q.push(*v);
                next.push(q);
            }
        }
        points = next;
    }
    points
}

/// Monte-Carlo estimate of a small-set certificate: from a grid of starts in
/// a box around the anchor, draw n-step transitions, auto-size a candidate
/// box around the pooled density mode, and report the histogram minimum of
/// the per-start per-terminal-mode density over that box.
pub fn estimate_small_set(
    model: &PdmpModel,
    y_hat: &[f64],
    mode: Mode,
    n: usize,
    n_mc: usize,
    cfg: &SmallSetCfg,
    rng: &RngStream,
) -> Result<SmallSetReport> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if n_mc < 1000 {
        return Err(Error::InvalidArgument(format!(
            "n_mc must be >= 1000, got {n_mc}"
        )));
    }
    model.check_mode(mode)?;
    let d = model.dim;
    if y_hat.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: y_hat.len(),
        });
    }

    let starts = cartesian_grid(y_hat, cfg.u_halfwidth, cfg.starts_per_dim);
    let clouds: Vec<Result<Vec<(Vec<f64>, usize)>>> = starts
        .par_iter()
        .enumerate()
        .map(|(s_idx, y0)| {
            let mut stream = rng.derive(s_idx as u64);
            let mut endpoints = Vec::with_capacity(n_mc);
            for _ in 0..n_mc {
                let mut state = State::new(y0.clone(), mode);
                for _ in 0..n {
                    state = sample_p(model, &state, &mut stream)?;
                }
                endpoints.push((state.y, state.mode.index()));
            }
            Ok(endpoints)
        })
        .collect();
    let clouds = clouds.into_iter().collect::<Result<Vec<_>>>()?;

    // Pooled bounding box and coarse histogram to locate the density mode.
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for cloud in &clouds {
        for (y, _) in cloud {
            for j in 0..d {
                lo[j] = lo[j].min(y[j]);
                hi[j] = hi[j].max(y[j]);
            }
        }
    }
    for j in 0..d {
        if !(hi[j] > lo[j]) {
            hi[j] = lo[j] + 1e-12;
        }
    }
    let cb = cfg.coarse_bins;
    let cell_of = |y: &[f64]| -> usize {
        let mut idx = 0usize;
        for j in 0..d {
            let frac = (y[j] - lo[j]) / (hi[j] - lo[j]);
            let k = ((frac * cb as f64) as usize).min(cb - 1);
            idx = idx * cb + k;
        }
        idx
    };
    let mut pooled = vec![0u64; cb.pow(d as u32)];
    for cloud in &clouds {
        for (y, _) in cloud {
            pooled[cell_of(y)] += 1;
        }
    }
    let modal = pooled
        .iter()
        .enumerate()
        .max_by_key(|(_, c)| **c)
        .map(|(k, _)| k)
        .unwrap_or(0);
    let mut modal_idx = vec![0usize; d];
    {
        let mut rem = modal;
        for j in (0..d).rev() {
            modal_idx[j] = rem % cb;
            rem /= cb;
        }
    }
    let widths: Vec<f64> = (0..d).map(|j| (hi[j] - lo[j]) / cb as f64).collect();

    // Expand the box around the modal cell, largest first, until the refined
    // histogram minimum over all starts and terminal modes is positive.
    let rb = cfg.refine_bins;
    let mut chosen_lo = Vec::new();
    let mut chosen_hi = Vec::new();
    let mut c_bar = 0.0;
    for expand in [8usize, 4, 2, 1, 0] {
        let mut box_lo = vec![0.0; d];
        let mut box_hi = vec![0.0; d];
        for j in 0..d {
            let k_lo = modal_idx[j].saturating_sub(expand);
            let k_hi = (modal_idx[j] + expand + 1).min(cb);
            box_lo[j] = lo[j] + k_lo as f64 * widths[j];
            box_hi[j] = lo[j] + k_hi as f64 * widths[j];
        }
        let sub_vol: f64 = (0..d).map(|j| (box_hi[j] - box_lo[j]) / rb as f64).product();
        let sub_cell = |y: &[f64]| -> Option<usize> {
            let mut idx = 0usize;
            for j in 0..d {
                if y[j] < box_lo[j] || y[j] >= box_hi[j] {
                    return None;
                }
                let frac = (y[j] - box_lo[j]) / (box_hi[j] - box_lo[j]);
                let k = ((frac * rb as f64) as usize).min(rb - 1);
                idx = idx * rb + k;
            }
            Some(idx)
        };
        let n_cells = rb.pow(d as u32);
        let mut minimum = f64::INFINITY;
        for cloud in &clouds {
            let mut counts = vec![0u64; n_cells * model.n_modes];
            for (y, m_idx) in cloud {
                if let Some(cell) = sub_cell(y) {
                    counts[m_idx * n_cells + cell] += 1;
                }
            }
            let cloud_min = counts.iter().copied().min().unwrap_or(0);
            minimum = minimum.min(cloud_min as f64 / (n_mc as f64 * sub_vol));
        }
        if minimum > 0.0 {
            chosen_lo = box_lo;
            chosen_hi = box_hi;
            c_bar = minimum;
            break;
        }
        chosen_lo = box_lo;
        chosen_hi = box_hi;
    }

    Ok(SmallSetReport {
        v_lo: chosen_lo,
        v_hi: chosen_hi,
        c_bar,
        pass: c_bar > 0.0,
        n,
        n_mc,
        n_starts: starts.len(),
    })
}

// ---------------------------------------------------------------------------
// Ergodicity hypothesis checking

/// Declared bound `phi(t)` for the pairwise flow distance condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PhiBound {
    Constant(f64),
    /// `scale * (1 - e^{rate t})` with `rate < 0`.
    Saturating { scale: f64, rate: f64 },
}

impl PhiBound {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            PhiBound::Constant(c) => *c,
            PhiBound::Saturating { scale, rate } => scale * (1.0 - (rate * t).exp()),
        }
    }

    /// Closed form of `∫_0^∞ phi(t) e^{-lambda t} dt`.
    pub fn integral_against_exp(&self, lambda: f64) -> f64 {
        match self {
            PhiBound::Constant(c) => c / lambda,
            PhiBound::Saturating { scale, rate } => scale * (1.0 / lambda - 1.0 / (lambda - rate)),
        }
    }
}

/// Declared bound function multiplying `phi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LBound {
    Constant(f64),
    /// `coef * (1 + |y|)`.
    OnePlusNorm { coef: f64 },
}

impl LBound {
    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            LBound::Constant(c) => *c,
            LBound::OnePlusNorm { coef } => {
                coef * (1.0 + y.iter().map(|v| v * v).sum::<f64>().sqrt())
            }
        }
    }
}

/// Constants declared by the model author for the geometric-ergodicity
/// hypothesis suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisConstants {
    pub alpha: f64,
    pub l_flow: f64,
    pub l_jump: f64,
    pub l_density: f64,
    pub c_switch: f64,
    pub c_density: f64,
    pub y_star: Vec<f64>,
    pub phi: PhiBound,
    pub l_func: LBound,
}

impl HypothesisConstants {
    pub fn validate(&self, model: &PdmpModel) -> Result<()> {
        for (name, v) in [
            ("l_flow", self.l_flow),
            ("l_jump", self.l_jump),
            ("l_density", self.l_density),
            ("c_switch", self.c_switch),
            ("c_density", self.c_density),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam {
                    name: name.into(),
                    reason: format!("must be a positive constant, got {v}"),
                });
            }
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidParam {
                name: "alpha".into(),
                reason: "must be finite".into(),
            });
        }
        if self.y_star.len() != model.dim {
            return Err(Error::DimensionMismatch {
                expected: model.dim,
                got: self.y_star.len(),
            });
        }
        if let PhiBound::Saturating { rate, .. } = self.phi {
            if !(rate < 0.0) {
                return Err(Error::InvalidParam {
                    name: "phi".into(),
                    reason: "saturating bound needs rate < 0".into(),
                });
            }
        }
        Ok(())
    }

    /// Documented constants for the built-in families; errors for models
    /// without a declared set.
    pub fn for_builtin(model: &PdmpModel) -> Result<Self> {
        let theta_range = match &model.theta {
            ThetaSpace::Finite { labels, .. } => {
                let max = labels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let min = labels.iter().cloned().fold(f64::INFINITY, f64::min);
                max - min
            }
            ThetaSpace::Interval { lo, hi } => hi - lo,
        };
        let l_density = match model.jumps.density {
            DensityKind::Uniform => 1.0,
            DensityKind::ExpTilt { kappa } => (kappa.abs() * theta_range).max(1.0),
        };
        let c_density = declared_density_overlap(model);
        let c_switch = {
            let computed = declared_switch_overlap(model);
            if computed > 0.0 {
                computed
            } else {
                0.5
            }
        };
        let alpha = model.semiflow.modes[0].rate;
        match model.family.as_str() {
            "contracting-lines" => {
                let a = model.semiflow.modes[1].anchor[0];
                Ok(HypothesisConstants {
                    alpha,
                    l_flow: 1.0,
                    l_jump: model.jumps.scale.abs().max(1.0),
                    l_density,
                    c_switch,
                    c_density,
                    y_star: vec![0.0],
                    phi: PhiBound::Saturating {
                        scale: a.abs(),
                        rate: alpha,
                    },
                    l_func: LBound::Constant(1.0),
                })
            }
            "dirac-trap" => Ok(HypothesisConstants {
                alpha,
                l_flow: 1.0,
                l_jump: 1.0,
                l_density: 1.0,
                c_switch,
                c_density,
                y_star: vec![0.0],
                phi: PhiBound::Constant(0.0),
                l_func: LBound::Constant(1.0),
            }),
            "planar-rotor" => {
                let a1 = &model.semiflow.modes[0].anchor;
                let a2 = &model.semiflow.modes[1].anchor;
                let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let spread = norm_diff(a1, a2) + norm(a1) + norm(a2);
                Ok(HypothesisConstants {
                    alpha,
                    l_flow: 1.0,
                    l_jump: model.jumps.scale.abs().max(1.0),
                    l_density,
                    c_switch,
                    c_density,
                    y_star: vec![0.0, 0.0],
                    phi: PhiBound::Constant(spread.max(2.0)),
                    l_func: LBound::OnePlusNorm { coef: 1.0 },
                })
            }
            other => Err(Error::InvalidArgument(format!(
                "no declared hypothesis constants for model family '{other}'"
            ))),
        }
    }
}

/// Exact `min_{i,j} sum_k min(pi_ik, pi_jk)` for constant switch kernels.
fn declared_switch_overlap(model: &PdmpModel) -> f64 {
    let SwitchKernel::Constant { matrix } = &model.switch;
    let n = model.n_modes;
    let mut worst = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            let overlap: f64 = (0..n).map(|k| matrix[i][k].min(matrix[j][k])).sum();
            worst = worst.min(overlap);
        }
    }
    worst
}

/// Provable lower bound on the density overlap integral for the built-in
/// densities: a pointwise floor of the density times the base-measure total.
fn declared_density_overlap(model: &PdmpModel) -> f64 {
    match (&model.jumps.density, &model.theta) {
        (DensityKind::Uniform, _) => 1.0,
        (DensityKind::ExpTilt { kappa }, ThetaSpace::Finite { labels, weights }) => {
            let m = labels.iter().fold(0.0f64, |acc, l| acc.max(l.abs()));
            let total: f64 = weights.iter().sum();
            let floor = (-2.0 * kappa.abs() * m).exp() / total;
            floor * total
        }
        (DensityKind::ExpTilt { kappa }, ThetaSpace::Interval { lo, hi }) => {
            let k = kappa.abs();
            if k < 1e-12 {
                return 1.0;
            }
            // Tilted density is monotone in theta; its minimum over theta and
            // the tilt parameter sits at the interval ends with extreme tilt.
            let p = |g: f64, th: f64| g * (g * th).exp() / ((g * hi).exp() - (g * lo).exp());
            let floor = p(k, *lo).min(p(-k, *hi)).min(p(k, *hi)).min(p(-k, *lo));
            floor * (hi - lo)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisCheckCfg {
    pub n_pairs: usize,
    /// Grid resolution for interval-theta overlap integrals.
    pub overlap_grid: usize,
    /// Half-width of the uniform sampling box for state pairs.
    pub sample_halfwidth: f64,
    pub t_max: f64,
}

impl Default for HypothesisCheckCfg {
    fn default() -> Self {
        HypothesisCheckCfg {
            n_pairs: 100_000,
            overlap_grid: 129,
            sample_halfwidth: 8.0,
            t_max: 20.0,
        }
    }
}

const FALSIFY_TOL: f64 = 1e-9;

fn theta_quadrature(
    model: &PdmpModel,
    grid: usize,
    mut f: impl FnMut(f64) -> f64,
) -> f64 {
    match &model.theta {
        ThetaSpace::Finite { labels, weights } => labels
            .iter()
            .zip(weights)
            .map(|(l, w)| w * f(*l))
            .sum(),
        ThetaSpace::Interval { lo, hi } => {
            // Midpoint rule on a fine grid; resolution is a config knob.
            let h = (hi - lo) / grid as f64;
            (0..grid)
                .map(|k| f(lo + (k as f64 + 0.5) * h) * h)
                .sum()
        }
    }
}

struct Falsifier {
    name: &'static str,
    max_violation: f64,
    witness: BTreeMap<String, f64>,
}

impl Falsifier {
    fn new(name: &'static str) -> Self {
        Falsifier {
            name,
            max_violation: f64::NEG_INFINITY,
            witness: BTreeMap::new(),
        }
    }

    fn observe(&mut self, violation: f64, witness: impl FnOnce() -> BTreeMap<String, f64>) {
        if violation > self.max_violation {
            self.max_violation = violation;
            if violation > FALSIFY_TOL {
                self.witness = witness();
            }
        }
    }

    fn into_result(mut self, notes: &str) -> CheckResult {
        let failed = self.max_violation > FALSIFY_TOL;
        self.witness
            .insert("max_violation".into(), self.max_violation);
        CheckResult::new(
            self.name,
            if failed { Verdict::Fail } else { Verdict::Pass },
            self.witness,
            notes.to_string(),
        )
    }
}

/// Falsification-test the geometric-ergodicity hypotheses against declared
/// constants on randomized inputs. `Pass` means "not falsified"; it is never
/// a proof. Any sampled witness violating an inequality by more than 1e-9
/// fails the corresponding check.
pub fn check_hypotheses(
    model: &PdmpModel,
    constants: &HypothesisConstants,
    cfg: &HypothesisCheckCfg,
    rng: &RngStream,
) -> Result<DiagnosticsReport> {
    constants.validate(model)?;
    let mut checks = Vec::new();
    let d = model.dim;
    let hw = cfg.sample_halfwidth;

    // Arithmetic margin: L * L_w + alpha / lambda < 1.
    let margin = constants.l_flow * constants.l_jump + constants.alpha / model.lambda;
    checks.push(CheckResult::new(
        "contraction-margin",
        if margin < 1.0 {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
        BTreeMap::from([
            ("value".into(), margin),
            ("l_flow".into(), constants.l_flow),
            ("l_jump".into(), constants.l_jump),
            ("alpha".into(), constants.alpha),
            ("lambda".into(), model.lambda),
        ]),
        "requires l_flow * l_jump + alpha / lambda < 1".into(),
    ));

    let mut stream = rng.derive(1);
    let mut flow_lip = Falsifier::new("flow-lipschitz");
    let mut flow_pair = Falsifier::new("flow-pair-bound");
    let mut jump_mean = Falsifier::new("jump-mean-lipschitz");
    let mut dens_lip = Falsifier::new("density-lipschitz");
    let mut switch_overlap = Falsifier::new("switch-overlap");
    let mut dens_overlap = Falsifier::new("density-overlap");

    for _ in 0..cfg.n_pairs {
        let u: Vec<f64> = (0..d).map(|_| stream.uniform_in(-hw, hw)).collect();
        let v: Vec<f64> = (0..d).map(|_| stream.uniform_in(-hw, hw)).collect();
        let t = if stream.uniform() < 0.1 {
            0.0
        } else {
            stream.uniform_in(0.0, cfg.t_max)
        };
        let mode_i = Mode(1 + (stream.next_u64() as usize) % model.n_modes);
        let mode_j = Mode(1 + (stream.next_u64() as usize) % model.n_modes);
        let dist_uv = norm_diff(&u, &v);

        // Per-mode flow contraction.
        let su = model.semiflow.eval(mode_i, t, &u);
        let sv = model.semiflow.eval(mode_i, t, &v);
        let bound = constants.l_flow * (constants.alpha * t).exp() * dist_uv;
        flow_lip.observe(norm_diff(&su, &sv) - bound, || {
            witness_pair(&u, &v, t, mode_i)
        });

        // Cross-mode flow distance.
        let sju = model.semiflow.eval(mode_j, t, &u);
        let pair_bound = constants.phi.eval(t) * constants.l_func.eval(&u);
        flow_pair.observe(norm_diff(&su, &sju) - pair_bound, || {
            witness_pair(&u, &v, t, mode_j)
        });

        // Averaged jump-map contraction.
        let jump_int = theta_quadrature(model, cfg.overlap_grid, |th| {
            let wu = model.jumps.map(th, &u);
            let wv = model.jumps.map(th, &v);
            norm_diff(&wu, &wv) * model.jumps.density(&model.theta, th, &u)
        });
        jump_mean.observe(jump_int - constants.l_jump * dist_uv, || {
            witness_pair(&u, &v, t, mode_i)
        });

        // Density total-variation Lipschitz bound.
        let dens_int = theta_quadrature(model, cfg.overlap_grid, |th| {
            (model.jumps.density(&model.theta, th, &u)
                - model.jumps.density(&model.theta, th, &v))
            .abs()
        });
        dens_lip.observe(dens_int - constants.l_density * dist_uv, || {
            witness_pair(&u, &v, t, mode_i)
        });

        // Switch-row overlap floor.
        let overlap: f64 = model
            .modes()
            .map(|k| {
                model
                    .switch
                    .prob(mode_i, k, &u)
                    .min(model.switch.prob(mode_j, k, &u))
            })
            .sum();
        switch_overlap.observe(constants.c_switch - overlap, || {
            witness_pair(&u, &v, t, mode_i)
        });

        // Density overlap over the set of jump indices that contract the
        // pair; for interval theta this is a grid approximation.
        let l_jump = constants.l_jump;
        let over_int = theta_quadrature(model, cfg.overlap_grid, |th| {
            let wu = model.jumps.map(th, &u);
            let wv = model.jumps.map(th, &v);
            if norm_diff(&wu, &wv) <= l_jump * dist_uv + 1e-15 {
                model
                    .jumps
                    .density(&model.theta, th, &u)
                    .min(model.jumps.density(&model.theta, th, &v))
            } else {
                0.0
            }
        });
        dens_overlap.observe(constants.c_density - over_int, || {
            witness_pair(&u, &v, t, mode_i)
        });
    }

    checks.push(flow_lip.into_result("per-mode flow contraction bound"));
    let mut pair_check = flow_pair.into_result("cross-mode flow distance bound");
    pair_check.evidence.insert(
        "phi_integral".into(),
        constants.phi.integral_against_exp(model.lambda),
    );
    checks.push(pair_check);
    checks.push(moment_bound_check(model, constants, &mut stream));
    checks.push(jump_mean.into_result("averaged jump-map contraction"));
    checks.push(dens_lip.into_result("density total-variation bound"));
    checks.push(switch_overlap.into_result("switch-row overlap floor"));
    checks.push(dens_overlap.into_result(
        "density overlap floor over contracting jump indices (grid approximation for interval theta)",
    ));

    Ok(DiagnosticsReport { checks })
}

fn witness_pair(u: &[f64], v: &[f64], t: f64, mode: Mode) -> BTreeMap<String, f64> {
    let mut w = BTreeMap::new();
    for (k, x) in u.iter().enumerate() {
        w.insert(format!("u_{k}"), *x);
    }
    for (k, x) in v.iter().enumerate() {
        w.insert(format!("v_{k}"), *x);
    }
    w.insert("t".into(), t);
    w.insert("mode".into(), mode.0 as f64);
    w
}

/// The jump moment bound: verified through its sufficient conditions for the
/// built-in families (compact theta space with either constant densities or
/// a uniform jump Lipschitz constant) and reported with a quadrature value
/// of the integral at sampled states.
fn moment_bound_check(
    model: &PdmpModel,
    constants: &HypothesisConstants,
    stream: &mut RngStream,
) -> CheckResult {
    let route = match model.jumps.density {
        DensityKind::Uniform => "constant densities",
        DensityKind::ExpTilt { .. } => "uniform jump Lipschitz constant",
    };
    // Numeric evidence: the integral itself at a few sampled states, using
    // the substitution u = e^{-lambda t}.
    let mut max_integral: f64 = 0.0;
    let quad_t = 200;
    for _ in 0..16 {
        let y: Vec<f64> = (0..model.dim).map(|_| stream.uniform_in(-8.0, 8.0)).collect();
        for i in model.modes() {
            let mut total = 0.0;
            for q in 0..quad_t {
                let u = (q as f64 + 0.5) / quad_t as f64;
                let t = -u.ln() / model.lambda;
                let flow_star = model.semiflow.eval(i, t, &constants.y_star);
                let flow_y = model.semiflow.eval(i, t, &y);
                let inner = theta_quadrature(model, 65, |th| {
                    let moved = model.jumps.map(th, &flow_star);
                    norm_diff(&moved, &constants.y_star)
                        * model.jumps.density(&model.theta, th, &flow_y)
                });
                total += inner / (model.lambda * quad_t as f64);
            }
            max_integral = max_integral.max(total);
        }
    }
    let finite = max_integral.is_finite();
    CheckResult::new(
        "jump-moment-bound",
        if finite { Verdict::Pass } else { Verdict::Fail },
        BTreeMap::from([("max_integral".into(), max_integral)]),
        format!("sufficient-condition route: compact theta space with {route}"),
    )
}

// ---------------------------------------------------------------------------
// Empirical continuity classification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinuityVerdict {
    AtomicSingular,
    Diffuse,
    Mixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeHistogram {
    pub mode: usize,
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
    pub masses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub atom_fraction: f64,
    pub verdict: ContinuityVerdict,
    /// Absolute clustering radius actually used.
    pub atom_eps: f64,
    pub n_clusters: usize,
    pub top_cluster_mass: f64,
    pub histograms: Vec<ModeHistogram>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramCfg {
    pub bins: usize,
}

impl Default for HistogramCfg {
    fn default() -> Self {
        HistogramCfg { bins: 64 }
    }
}

/// Classify an empirical measure as atomic-singular, diffuse or mixed.
///
/// Atoms are detected by quantizing coordinates at `atom_eps_rel` times the
/// cloud scale and weighing cells that hold more than 1% of the mass; the
/// verdict thresholds (0.5 atomic, 0.01 diffuse) are engineering choices
/// reported alongside the evidence. This is a diagnostic, not a theorem.
pub fn classify_continuity(
    mu: &EmpiricalMeasure,
    atom_eps_rel: f64,
    grid: &HistogramCfg,
) -> Result<ContinuityReport> {
    mu.check_normalized()?;
    if !(atom_eps_rel > 0.0) {
        return Err(Error::InvalidArgument("atom_eps must be > 0".into()));
    }
    if grid.bins == 0 {
        return Err(Error::InvalidArgument("bins must be >= 1".into()));
    }
    let scale = mu
        .atoms()
        .iter()
        .flat_map(|(s, _)| s.y.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let eps = atom_eps_rel * scale;

    let mut clusters: BTreeMap<(usize, Vec<i64>), f64> = BTreeMap::new();
    for (state, w) in mu.atoms() {
        let key: Vec<i64> = if eps > 0.0 {
            state.y.iter().map(|v| (v / eps).floor() as i64).collect()
        } else {
            state.y.iter().map(|v| v.to_bits() as i64).collect()
        };
        *clusters.entry((state.mode.0, key)).or_insert(0.0) += w;
    }
    let total: f64 = mu.total_weight();
    let atom_fraction: f64 = clusters
        .values()
        .filter(|m| **m > 0.01 * total)
        .sum::<f64>()
        / total;
    let top_cluster_mass = clusters.values().cloned().fold(0.0f64, f64::max) / total;
    let verdict = if atom_fraction > 0.5 {
        ContinuityVerdict::AtomicSingular
    } else if atom_fraction < 0.01 {
        ContinuityVerdict::Diffuse
    } else {
        ContinuityVerdict::Mixed
    };

    let dim = mu.dim();
    let mut modes: Vec<usize> = mu.atoms().iter().map(|(s, _)| s.mode.0).collect();
    modes.sort_unstable();
    modes.dedup();
    let mut histograms = Vec::new();
    for mode in modes {
        for j in 0..dim {
            let values: Vec<(f64, f64)> = mu
                .atoms()
                .iter()
                .filter(|(s, _)| s.mode.0 == mode)
                .map(|(s, w)| (s.y[j], *w))
                .collect();
            let mut lo = values.iter().map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
            let mut hi = values
                .iter()
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if !(hi > lo) {
                lo -= 0.5;
                hi += 0.5;
            }
            let mut masses = vec![0.0; grid.bins];
            for (v, w) in &values {
                let frac = (v - lo) / (hi - lo);
                let k = ((frac * grid.bins as f64) as usize).min(grid.bins - 1);
                masses[k] += w;
            }
            histograms.push(ModeHistogram {
                mode,
                dim: j,
                lo,
                hi,
                masses,
            });
        }
    }

    Ok(ContinuityReport {
        atom_fraction,
        verdict,
        atom_eps: eps,
        n_clusters: clusters.len(),
        top_cluster_mass,
        histograms,
    })
}
