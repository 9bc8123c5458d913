//! The one-step Markov operators as samplers and measure push-forwards, and
//! the deterministic n-step composition maps with their path weights.
//!
//! `G` flows the current mode for an exponential time without switching; `W`
//! applies one random jump and mode switch without flowing; the post-jump
//! transition operator factorizes as `P = W ∘ G`. The composition map
//! evaluates `n` flow-jump stages along a prescribed path of modes, dwell
//! times and jump indices, and the weight products price that path under the
//! switching probabilities and jump densities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{fm_distance, EmpiricalMeasure, MetricConfig};
use crate::model::{Mode, PdmpModel, State};
use crate::simulate::{draw_theta, step_chain, RngStream};
use crate::{Error, Result};

/// A deterministic n-stage path: starting mode `modes[0]`, flow modes for
/// each stage, dwell times and jump indices. Stage `k` flows mode
/// `modes[k]` for `times[k]` and then jumps with index `thetas[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub modes: Vec<Mode>,
    pub times: Vec<f64>,
    pub thetas: Vec<f64>,
}

impl PathSpec {
    pub fn new(modes: Vec<Mode>, times: Vec<f64>, thetas: Vec<f64>) -> Self {
        PathSpec {
            modes,
            times,
            thetas,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self, model: &PdmpModel) -> Result<()> {
        let n = self.times.len();
        if n == 0 {
            return Err(Error::InvalidPath("path needs at least one stage".into()));
        }
        if self.modes.len() != n || self.thetas.len() != n {
            return Err(Error::InvalidPath(format!(
                "inconsistent lengths: {} modes, {} times, {} thetas",
                self.modes.len(),
                n,
                self.thetas.len()
            )));
        }
        for m in &self.modes {
            model.check_mode(*m)?;
        }
        if let Some(t) = self.times.iter().find(|t| !(**t >= 0.0)) {
            return Err(Error::InvalidPath(format!("negative dwell time {t}")));
        }
        if let Some(th) = self.thetas.iter().find(|th| !model.theta.contains(**th)) {
            return Err(Error::InvalidPath(format!("theta {th} outside theta space")));
        }
        Ok(())
    }
}

/// One draw from the post-jump kernel `P(x, .)`.
pub fn sample_p(model: &PdmpModel, x: &State, rng: &mut RngStream) -> Result<State> {
    let (state, _, _) = step_chain(model, x, rng)?;
    Ok(state)
}

/// One draw from `G(x, .)`: flow the current mode for an exponential time;
/// the mode never changes.
pub fn sample_g(model: &PdmpModel, x: &State, rng: &mut RngStream) -> Result<State> {
    model.check_state(x)?;
    let t = rng.exp(model.lambda);
    Ok(State::new(model.semiflow.eval(x.mode, t, &x.y), x.mode))
}

/// One draw from `W(x, .)`: jump with a density-drawn index and re-draw the
/// mode at the post-jump location; no flow, no time draw.
pub fn sample_w(model: &PdmpModel, x: &State, rng: &mut RngStream) -> Result<State> {
    model.check_state(x)?;
    let theta = draw_theta(model, &x.y, rng)?;
    let jumped = model.jumps.map(theta, &x.y);
    let probs: Vec<f64> = model
        .modes()
        .map(|j| model.switch.prob(x.mode, j, &jumped))
        .collect();
    let mode = Mode(1 + rng.categorical(&probs));
    Ok(State::new(jumped, mode))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    P,
    G,
    W,
}

/// Empirical push-forward: apply the chosen sampler once to every atom,
/// preserving weights. Atom `k` draws from the child stream `rng.derive(k)`,
/// so the result is independent of the worker count.
pub fn pushforward(
    op: OperatorKind,
    model: &PdmpModel,
    mu: &EmpiricalMeasure,
    rng: &RngStream,
) -> Result<EmpiricalMeasure> {
    mu.check_normalized()?;
    let moved: Vec<Result<(State, f64)>> = mu
        .atoms()
        .par_iter()
        .enumerate()
        .map(|(k, (state, w))| {
            let mut stream = rng.derive(k as u64);
            let next = match op {
                OperatorKind::P => sample_p(model, state, &mut stream)?,
                OperatorKind::G => sample_g(model, state, &mut stream)?,
                OperatorKind::W => sample_w(model, state, &mut stream)?,
            };
            Ok((next, *w))
        })
        .collect();
    EmpiricalMeasure::new(moved.into_iter().collect::<Result<Vec<_>>>()?)
}

/// Outcome of the fixed-point correspondence check: the distance moved by
/// one `W ∘ G` round trip against a bootstrap resampling scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrespondenceReport {
    /// `d_FM(W G mu_hat, mu_hat)`.
    pub d_wg: f64,
    /// Mean distance between bootstrap halves of `mu_hat`.
    pub d_null: f64,
    pub n_atoms: usize,
    pub c: f64,
}

/// Check how far `mu_hat` moves under one `W ∘ G` round trip. For a measure
/// that is invariant for the post-jump operator the distance is zero in
/// expectation; finite-sample deviation must be judged against the reported
/// bootstrap null, which is the caller's job.
pub fn check_correspondence(
    model: &PdmpModel,
    mu_hat: &EmpiricalMeasure,
    rng: &RngStream,
    cfg: &MetricConfig,
    n_boot: usize,
) -> Result<CorrespondenceReport> {
    if mu_hat.len() < 10 {
        return Err(Error::TooFewAtoms {
            need: 10,
            got: mu_hat.len(),
        });
    }
    if n_boot == 0 {
        return Err(Error::InvalidArgument("n_boot must be >= 1".into()));
    }
    let flowed = pushforward(OperatorKind::G, model, mu_hat, &rng.derive(1))?;
    let jumped = pushforward(OperatorKind::W, model, &flowed, &rng.derive(2))?;
    let d_wg = fm_distance(cfg, &jumped, mu_hat)?;

    let mut total = 0.0;
    for b in 0..n_boot {
        let mut split_rng = rng.derive(100 + b as u64);
        let (half_a, half_b) = mu_hat.split_half(&mut split_rng)?;
        total += fm_distance(cfg, &half_a, &half_b)?;
    }
    Ok(CorrespondenceReport {
        d_wg,
        d_null: total / n_boot as f64,
        n_atoms: mu_hat.len(),
        c: cfg.c,
    })
}

/// Evaluate the n-stage composition of flows and jumps along `path`,
/// starting at `y`.
pub fn compose_wn(model: &PdmpModel, y: &[f64], path: &PathSpec) -> Result<Vec<f64>> {
    path.validate(model)?;
    if y.len() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            got: y.len(),
        });
    }
    let mut z = y.to_vec();
    for k in 0..path.len() {
        let flowed = model.semiflow.eval(path.modes[k], path.times[k], &z);
        z = model.jumps.map(path.thetas[k], &flowed);
    }
    Ok(z)
}

/// Product of switching probabilities along `path`, ending in `j_final`:
/// stage `k` contributes `pi_{m_k, m_{k+1}}` evaluated at the stage-`k`
/// post-jump point, with `m_{n} = j_final`.
pub fn weight_pi_n(
    model: &PdmpModel,
    y: &[f64],
    path: &PathSpec,
    j_final: Mode,
) -> Result<f64> {
    path.validate(model)?;
    model.check_mode(j_final)?;
    let mut z = y.to_vec();
    let mut product = 1.0;
    for k in 0..path.len() {
        let flowed = model.semiflow.eval(path.modes[k], path.times[k], &z);
        z = model.jumps.map(path.thetas[k], &flowed);
        let next = if k + 1 < path.len() {
            path.modes[k + 1]
        } else {
            j_final
        };
        product *= model.switch.prob(path.modes[k], next, &z);
    }
    Ok(product)
}

/// Product of jump densities along `path`: stage `k` contributes
/// `p_{theta_k}` evaluated at the flowed (pre-jump) point.
pub fn weight_p_n(model: &PdmpModel, y: &[f64], path: &PathSpec) -> Result<f64> {
    path.validate(model)?;
    let mut z = y.to_vec();
    let mut product = 1.0;
    for k in 0..path.len() {
        let flowed = model.semiflow.eval(path.modes[k], path.times[k], &z);
        product *= model.jumps.density(&model.theta, path.thetas[k], &flowed);
        z = model.jumps.map(path.thetas[k], &flowed);
    }
    Ok(product)
}

/// Full n-step path weight
/// `lambda^n e^{-lambda sum t} * (density product) * (switch product)`.
pub fn weight_t_n(
    model: &PdmpModel,
    y: &[f64],
    path: &PathSpec,
    j_final: Mode,
) -> Result<f64> {
    let n = path.len() as i32;
    let total_time: f64 = path.times.iter().sum();
    let time_factor = model.lambda.powi(n) * (-model.lambda * total_time).exp();
    Ok(time_factor * weight_p_n(model, y, path)? * weight_pi_n(model, y, path, j_final)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, ModelParams};

    fn trap() -> PdmpModel {
        builtin_model("dirac-trap", &ModelParams::new()).unwrap()
    }

    fn lines() -> PdmpModel {
        builtin_model("contracting-lines", &ModelParams::new()).unwrap()
    }

    fn path(modes: &[usize], times: &[f64], thetas: &[f64]) -> PathSpec {
        PathSpec::new(
            modes.iter().map(|m| Mode(*m)).collect(),
            times.to_vec(),
            thetas.to_vec(),
        )
    }

    #[test]
    fn sample_g_keeps_mode_and_contracts_trap() {
        let m = trap();
        let mut rng = RngStream::new(1, 0);
        let mut total = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let s = sample_g(&m, &State::new(vec![1.0], Mode(1)), &mut rng).unwrap();
            assert_eq!(s.mode, Mode(1));
            total += s.y[0];
        }
        // E[e^{-T}] = lambda / (lambda + 1) = 1/2 at lambda = 1.
        assert!((total / n as f64 - 0.5).abs() < 0.005);
    }

    #[test]
    fn sample_w_on_identity_jump_is_identity() {
        let m = trap();
        let mut rng = RngStream::new(2, 0);
        let x = State::new(vec![0.7], Mode(1));
        assert_eq!(sample_w(&m, &x, &mut rng).unwrap(), x);
    }

    #[test]
    fn sample_w_lines_from_origin_is_symmetric() {
        let m = lines();
        let mut rng = RngStream::new(3, 0);
        let x = State::new(vec![0.0], Mode(1));
        let n = 100_000;
        let mut plus = 0usize;
        for _ in 0..n {
            let s = sample_w(&m, &x, &mut rng).unwrap();
            let v = s.y[0];
            assert!(v == 0.5 || v == -0.5, "unexpected jump image {v}");
            if v == 0.5 {
                plus += 1;
            }
        }
        assert!((plus as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn sample_p_trap_mean_is_half() {
        let m = trap();
        let mut rng = RngStream::new(4, 0);
        let x = State::new(vec![1.0], Mode(1));
        let n = 100_000;
        let mut total = 0.0;
        for _ in 0..n {
            total += sample_p(&m, &x, &mut rng).unwrap().y[0];
        }
        assert!((total / n as f64 - 0.5).abs() < 0.005);
    }

    #[test]
    fn sampling_is_deterministic_under_fixed_stream() {
        let m = lines();
        let x = State::new(vec![0.4], Mode(2));
        let a = sample_p(&m, &x, &mut RngStream::new(9, 5)).unwrap();
        let b = sample_p(&m, &x, &mut RngStream::new(9, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pushforward_preserves_weights_and_counts() {
        let m = trap();
        let mu = EmpiricalMeasure::new(vec![
            (State::new(vec![1.0], Mode(1)), 0.25),
            (State::new(vec![2.0], Mode(1)), 0.75),
        ])
        .unwrap();
        let rng = RngStream::new(5, 0);
        let out = pushforward(OperatorKind::P, &m, &mu, &rng).unwrap();
        assert_eq!(out.len(), 2);
        assert!((out.total_weight() - 1.0).abs() < 1e-12);
        assert_eq!(out.atoms()[0].1, 0.25);
    }

    #[test]
    fn pushforward_trap_halves_the_mean() {
        let m = trap();
        let states: Vec<State> = (0..20_000)
            .map(|k| State::new(vec![1.0 + (k % 7) as f64 * 0.1], Mode(1)))
            .collect();
        let mu = EmpiricalMeasure::from_states(states).unwrap();
        let rng = RngStream::new(6, 0);
        let out = pushforward(OperatorKind::P, &m, &mu, &rng).unwrap();
        let mean_in: f64 = mu.atoms().iter().map(|(s, w)| w * s.y[0]).sum();
        let mean_out: f64 = out.atoms().iter().map(|(s, w)| w * s.y[0]).sum();
        assert!((mean_out / mean_in - 0.5).abs() < 0.02);
    }

    #[test]
    fn compose_single_stage_at_zero_time() {
        let m = lines();
        let z = compose_wn(&m, &[0.0], &path(&[1], &[0.0], &[1.0])).unwrap();
        assert_eq!(z, vec![0.5]);
    }

    #[test]
    fn compose_trap_is_flow_product() {
        let m = trap();
        let y = 0.8;
        let z = compose_wn(&m, &[y], &path(&[1, 1, 1], &[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]))
            .unwrap();
        assert!((z[0] - (-3.0f64).exp() * y).abs() < 1e-15);
    }

    #[test]
    fn compose_matches_manual_nesting() {
        let m = lines();
        let mut rng = RngStream::new(7, 0);
        for _ in 0..200 {
            let y = 4.0 * rng.uniform() - 2.0;
            let t1 = 2.0 * rng.uniform();
            let t2 = 2.0 * rng.uniform();
            let th1 = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let th2 = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let j0 = Mode(1 + (rng.next_u64() % 2) as usize);
            let j1 = Mode(1 + (rng.next_u64() % 2) as usize);
            let two = compose_wn(
                &m,
                &[y],
                &path(&[j0.0, j1.0], &[t1, t2], &[th1, th2]),
            )
            .unwrap();
            let one = compose_wn(&m, &[y], &path(&[j0.0], &[t1], &[th1])).unwrap();
            let manual = m
                .jumps
                .map(th2, &m.semiflow.eval(j1, t2, &one));
            assert!((two[0] - manual[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_weights_multiply() {
        let m = lines();
        let p3 = path(&[1, 2, 1], &[0.3, 0.1, 0.2], &[1.0, -1.0, 1.0]);
        let pi = weight_pi_n(&m, &[0.0], &p3, Mode(2)).unwrap();
        assert!((pi - 0.125).abs() < 1e-15);
        let p2 = path(&[1, 2], &[0.3, 0.1], &[1.0, -1.0]);
        let pd = weight_p_n(&m, &[0.0], &p2).unwrap();
        assert!((pd - 0.25).abs() < 1e-15);
        // single stage equals a single factor
        let p1 = path(&[1], &[0.4], &[1.0]);
        assert!((weight_pi_n(&m, &[0.0], &p1, Mode(2)).unwrap() - 0.5).abs() < 1e-15);
        assert!((weight_p_n(&m, &[0.0], &p1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn total_weight_factorizes() {
        let m = lines();
        let p2 = path(&[1, 2], &[0.0, 0.0], &[1.0, 1.0]);
        let t = weight_t_n(&m, &[0.0], &p2, Mode(1)).unwrap();
        assert!((t - 1.0 / 16.0).abs() < 1e-15);
        // decreasing in each dwell time for constant densities
        let longer = path(&[1, 2], &[0.5, 0.0], &[1.0, 1.0]);
        assert!(weight_t_n(&m, &[0.0], &longer, Mode(1)).unwrap() < t);
        // product identity
        let p = path(&[2, 1], &[0.7, 0.2], &[-1.0, 1.0]);
        let lhs = weight_t_n(&m, &[0.3], &p, Mode(2)).unwrap();
        let rhs = m.lambda.powi(2)
            * (-m.lambda * 0.9f64).exp()
            * weight_p_n(&m, &[0.3], &p).unwrap()
            * weight_pi_n(&m, &[0.3], &p, Mode(2)).unwrap();
        assert!((lhs - rhs).abs() <= 1e-15);
    }

    #[test]
    fn correspondence_rejects_tiny_clouds() {
        let m = trap();
        let mu = EmpiricalMeasure::from_states(
            (0..5).map(|_| State::new(vec![0.0], Mode(1))).collect(),
        )
        .unwrap();
        let rng = RngStream::new(8, 0);
        assert!(matches!(
            check_correspondence(&m, &mu, &rng, &MetricConfig::default(), 3),
            Err(Error::TooFewAtoms { .. })
        ));
    }

    #[test]
    fn correspondence_fixes_the_trap_invariant() {
        let m = trap();
        let mu = EmpiricalMeasure::from_states(
            (0..200).map(|_| State::new(vec![0.0], Mode(1))).collect(),
        )
        .unwrap();
        let rng = RngStream::new(9, 0);
        let report = check_correspondence(&m, &mu, &rng, &MetricConfig::default(), 3).unwrap();
        assert!(report.d_wg < 1e-12, "d_wg = {}", report.d_wg);
    }
}
