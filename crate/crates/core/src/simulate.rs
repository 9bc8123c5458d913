//! Event-driven simulation of the post-jump chain and its continuous-time
//! interpolation.
//!
//! One chain step draws an exponential waiting time, flows the current mode's
//! semiflow for that long, applies a randomly indexed jump map to the flowed
//! point, and re-draws the mode from the switching matrix at the post-jump
//! location. The discrete chain of post-jump states is the primary sampled
//! object; continuous-time marginals are recovered on demand through
//! [`interpolate`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::EmpiricalMeasure;
use crate::model::{Mode, PdmpModel, State, ThetaSpace};
use crate::{Error, Result};

/// Maximum attempts of the interval-theta rejection sampler before giving up.
pub const MAX_REJECTION_ATTEMPTS: usize = 1_000_000;

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A counter-based random stream: a ChaCha generator keyed by a global seed
/// and positioned on one of 2^64 independent stream ids. Streams with
/// distinct ids are statistically independent, and identical `(seed, id)`
/// pairs reproduce identical draws regardless of thread scheduling.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A child stream addressed by `salt`. Derivation depends only on
    /// `(seed, stream, salt)`, never on draw history, so workers can derive
    /// their streams without coordination.
    pub fn derive(&self, salt: u64) -> RngStream {
        let child = mix64(self.stream ^ mix64(salt.wrapping_add(0x5851_f42d_4c95_7f2d)));
        RngStream::new(self.seed, child)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Strictly positive exponential draw with rate `lambda`.
    pub fn exp(&mut self, lambda: f64) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return -u.ln() / lambda;
            }
        }
    }

    /// Index draw from unnormalized nonnegative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (k, w) in weights.iter().enumerate() {
            u -= w;
            if u < 0.0 {
                return k;
            }
        }
        weights.len() - 1
    }
}

/// Draw a jump index with density `p(., y)` over the model's theta space.
pub fn draw_theta(model: &PdmpModel, y: &[f64], rng: &mut RngStream) -> Result<f64> {
    match &model.theta {
        ThetaSpace::Finite { labels, weights } => {
            let probs: Vec<f64> = labels
                .iter()
                .zip(weights)
                .map(|(l, w)| w * model.jumps.density(&model.theta, *l, y))
                .collect();
            Ok(labels[rng.categorical(&probs)])
        }
        ThetaSpace::Interval { lo, hi } => {
            let envelope = model.jumps.envelope(&model.theta, y);
            for _ in 0..MAX_REJECTION_ATTEMPTS {
                let theta = rng.uniform_in(*lo, *hi);
                if rng.uniform() * envelope <= model.jumps.density(&model.theta, theta, y) {
                    return Ok(theta);
                }
            }
            Err(Error::EnvelopeTooLoose {
                attempts: MAX_REJECTION_ATTEMPTS,
                y: y.to_vec(),
            })
        }
    }
}

fn draw_mode(model: &PdmpModel, from: Mode, y: &[f64], rng: &mut RngStream) -> Mode {
    let probs: Vec<f64> = model.modes().map(|j| model.switch.prob(from, j, y)).collect();
    Mode(1 + rng.categorical(&probs))
}

/// One draw from the post-jump transition kernel, returning the new state
/// together with the waiting time and the jump index that produced it.
pub fn step_chain(
    model: &PdmpModel,
    state: &State,
    rng: &mut RngStream,
) -> Result<(State, f64, f64)> {
    model.check_state(state)?;
    let dtau = rng.exp(model.lambda);
    let flowed = model.semiflow.eval(state.mode, dtau, &state.y);
    let theta = draw_theta(model, &flowed, rng)?;
    let jumped = model.jumps.map(theta, &flowed);
    let mode = draw_mode(model, state.mode, &jumped, rng);
    Ok((State::new(jumped, mode), dtau, theta))
}

/// A realized chain path: jump times, gaps, post-jump states and drawn jump
/// indices, plus the stream identity that produced it.
///
/// `tau` is the running sum of `dtau` in stored order, so the two
/// representations agree exactly, and `states[n]` reproduces the defining
/// recursion when re-evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tau: Vec<f64>,
    pub dtau: Vec<f64>,
    pub states: Vec<State>,
    pub thetas: Vec<f64>,
    pub seed: u64,
    pub stream: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.dtau.len()
    }

    /// Last simulated jump time.
    pub fn horizon(&self) -> f64 {
        *self.tau.last().unwrap()
    }
}

/// Simulate `n_steps` post-jump transitions from `init`.
pub fn simulate_chain(
    model: &PdmpModel,
    init: &State,
    n_steps: usize,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    model.check_state(init)?;
    let mut traj = Trajectory {
        tau: Vec::with_capacity(n_steps + 1),
        dtau: Vec::with_capacity(n_steps),
        states: Vec::with_capacity(n_steps + 1),
        thetas: Vec::with_capacity(n_steps),
        seed: rng.seed(),
        stream: rng.stream(),
    };
    traj.tau.push(0.0);
    traj.states.push(init.clone());
    for step in 1..=n_steps {
        let current = traj.states.last().unwrap();
        let (next, dtau, theta) = step_chain(model, current, rng).map_err(|e| Error::AtStep {
            step,
            source: Box::new(e),
        })?;
        traj.tau.push(traj.tau.last().unwrap() + dtau);
        traj.dtau.push(dtau);
        traj.thetas.push(theta);
        traj.states.push(next);
    }
    Ok(traj)
}

/// State of the continuous-time interpolation at time `t <= horizon`:
/// locates the bracketing jump interval and flows the post-jump state for
/// the residual time.
pub fn interpolate(model: &PdmpModel, traj: &Trajectory, t: f64) -> Result<State> {
    if !(t >= 0.0) {
        return Err(Error::NegativeTime(t));
    }
    let horizon = traj.horizon();
    if t > horizon {
        return Err(Error::BeyondHorizon { t, horizon });
    }
    let idx = traj.tau.partition_point(|&tn| tn <= t) - 1;
    let state = &traj.states[idx];
    let y = model.flow(state.mode, t - traj.tau[idx], &state.y)?;
    Ok(State::new(y, state.mode))
}

/// Estimate the invariant law of the post-jump chain by pooling
/// `n_traj` independent chains: each discards `burn_in` steps and then keeps
/// `n_keep` states spaced `thin` steps apart, all with equal weight.
///
/// Trajectory `k` uses the child stream `rng.derive(k)`, so the pooled
/// measure is identical for any worker count.
pub fn sample_invariant(
    model: &PdmpModel,
    init: &State,
    n_traj: usize,
    burn_in: usize,
    n_keep: usize,
    thin: usize,
    rng: &RngStream,
) -> Result<EmpiricalMeasure> {
    if n_traj == 0 {
        return Err(Error::InvalidArgument("n_traj must be >= 1".into()));
    }
    if n_keep == 0 {
        return Err(Error::InvalidArgument("n_keep must be >= 1".into()));
    }
    if thin == 0 {
        return Err(Error::InvalidArgument("thin must be >= 1".into()));
    }
    model.check_state(init)?;
    let n_steps = burn_in + n_keep * thin;
    let per_traj: Vec<Result<Vec<State>>> = (0..n_traj)
        .into_par_iter()
        .map(|tid| {
            let mut stream = rng.derive(tid as u64);
            let traj = simulate_chain(model, init, n_steps, &mut stream)?;
            Ok((1..=n_keep)
                .map(|k| traj.states[burn_in + k * thin].clone())
                .collect())
        })
        .collect();
    let mut atoms = Vec::with_capacity(n_traj * n_keep);
    let weight = 1.0 / (n_traj * n_keep) as f64;
    for kept in per_traj {
        for state in kept? {
            atoms.push((state, weight));
        }
    }
    EmpiricalMeasure::new(atoms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, ModelParams, ParamValue};

    fn trap() -> PdmpModel {
        builtin_model("dirac-trap", &ModelParams::new()).unwrap()
    }

    fn lines() -> PdmpModel {
        builtin_model("contracting-lines", &ModelParams::new()).unwrap()
    }

    #[test]
    fn step_trap_flows_then_keeps_mode() {
        let m = trap();
        let mut rng = RngStream::new(1, 0);
        let (next, dtau, theta) = step_chain(&m, &State::new(vec![1.0], Mode(1)), &mut rng).unwrap();
        assert_eq!(next.mode, Mode(1));
        assert_eq!(theta, 1.0);
        assert!((next.y[0] - (-dtau).exp()).abs() < 1e-15);
    }

    #[test]
    fn gaps_have_unit_mean_at_unit_rate() {
        let m = lines();
        let mut rng = RngStream::new(2, 0);
        let mut state = State::new(vec![0.0], Mode(1));
        let mut total = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let (next, dtau, _) = step_chain(&m, &state, &mut rng).unwrap();
            total += dtau;
            state = next;
        }
        assert!((total / n as f64 - 1.0).abs() < 0.02);
    }

    #[test]
    fn mode_switch_frequency_is_half() {
        let m = lines();
        let mut rng = RngStream::new(3, 0);
        let mut state = State::new(vec![0.0], Mode(1));
        let mut switched = 0usize;
        let n = 100_000;
        for _ in 0..n {
            let (next, _, _) = step_chain(&m, &state, &mut rng).unwrap();
            if next.mode != state.mode {
                switched += 1;
            }
            state = next;
        }
        assert!((switched as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn zero_steps_returns_initial_state_only() {
        let m = trap();
        let mut rng = RngStream::new(4, 0);
        let traj = simulate_chain(&m, &State::new(vec![1.0], Mode(1)), 0, &mut rng).unwrap();
        assert_eq!(traj.states.len(), 1);
        assert_eq!(traj.tau, vec![0.0]);
        assert!(traj.dtau.is_empty());
    }

    #[test]
    fn fixed_stream_reproduces_bitwise() {
        let m = lines();
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        let init = State::new(vec![0.3], Mode(2));
        let ta = simulate_chain(&m, &init, 200, &mut a).unwrap();
        let tb = simulate_chain(&m, &init, 200, &mut b).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn distinct_streams_differ() {
        let m = lines();
        let init = State::new(vec![0.3], Mode(1));
        let ta = simulate_chain(&m, &init, 50, &mut RngStream::new(42, 0)).unwrap();
        let tb = simulate_chain(&m, &init, 50, &mut RngStream::new(42, 1)).unwrap();
        assert_ne!(ta.states, tb.states);
    }

    #[test]
    fn trap_chain_mean_matches_analytic_geometric_decay() {
        // E[Y_n] = (lambda/(lambda+1))^n from y0 = 1.
        let m = trap();
        let rng = RngStream::new(5, 0);
        let n = 10usize;
        let reps = 20_000usize;
        let mut total = 0.0;
        for k in 0..reps {
            let mut stream = rng.derive(k as u64);
            let traj = simulate_chain(&m, &State::new(vec![1.0], Mode(1)), n, &mut stream).unwrap();
            total += traj.states[n].y[0];
        }
        let mean = total / reps as f64;
        assert!((mean - 0.5f64.powi(10)).abs() < 3e-4, "mean {mean}");
    }

    #[test]
    fn interpolate_at_jump_times_returns_post_jump_states() {
        let m = lines();
        let mut rng = RngStream::new(6, 0);
        let traj = simulate_chain(&m, &State::new(vec![0.5], Mode(1)), 40, &mut rng).unwrap();
        for n in 0..=traj.steps() {
            let s = interpolate(&m, &traj, traj.tau[n]).unwrap();
            assert_eq!(s, traj.states[n]);
        }
    }

    #[test]
    fn interpolate_between_jumps_flows_the_trap() {
        let m = trap();
        let mut rng = RngStream::new(7, 0);
        let traj = simulate_chain(&m, &State::new(vec![1.0], Mode(1)), 10, &mut rng).unwrap();
        let t = 0.5 * (traj.tau[3] + traj.tau[4]);
        let s = interpolate(&m, &traj, t).unwrap();
        let expect = (-(t - traj.tau[3])).exp() * traj.states[3].y[0];
        assert!((s.y[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn interpolate_rejects_time_beyond_horizon() {
        let m = trap();
        let mut rng = RngStream::new(8, 0);
        let traj = simulate_chain(&m, &State::new(vec![1.0], Mode(1)), 5, &mut rng).unwrap();
        assert!(matches!(
            interpolate(&m, &traj, traj.horizon() + 1.0),
            Err(Error::BeyondHorizon { .. })
        ));
        let s0 = interpolate(&m, &traj, 0.0).unwrap();
        assert_eq!(s0, traj.states[0]);
    }

    #[test]
    fn trap_invariant_samples_collapse_to_zero() {
        let m = trap();
        let rng = RngStream::new(9, 0);
        let mu = sample_invariant(&m, &State::new(vec![1.0], Mode(1)), 20, 200, 50, 1, &rng).unwrap();
        assert!(mu.atoms().iter().all(|(s, _)| s.y[0].abs() < 1e-40));
    }

    #[test]
    fn lines_invariant_samples_stay_bounded() {
        // Post-jump states satisfy |y'| <= (|y| + drift)/2 under the default
        // maps, so the invariant cloud lives in a bounded interval containing
        // the jump fixed points and the flow anchors.
        let m = lines();
        let rng = RngStream::new(10, 0);
        let mu = sample_invariant(&m, &State::new(vec![0.0], Mode(1)), 20, 200, 50, 1, &rng).unwrap();
        assert!(mu.atoms().iter().all(|(s, _)| s.y[0] > -2.0 && s.y[0] < 3.0));
    }

    #[test]
    fn distinct_trajectories_use_distinct_streams() {
        let m = lines();
        let rng = RngStream::new(11, 0);
        let mu = sample_invariant(&m, &State::new(vec![0.0], Mode(1)), 2, 10, 20, 1, &rng).unwrap();
        let (first, second) = mu.atoms().split_at(20);
        assert_ne!(
            first.iter().map(|(s, _)| s.y[0]).collect::<Vec<_>>(),
            second.iter().map(|(s, _)| s.y[0]).collect::<Vec<_>>()
        );
    }

    #[test]
    fn loose_envelope_fails_rejection_sampling() {
        let mut params = ModelParams::new();
        params.insert("theta".into(), ParamValue::Text("interval".into()));
        params.insert("envelope_margin".into(), ParamValue::Number(1e9));
        let m = builtin_model("contracting-lines", &params).unwrap();
        let mut rng = RngStream::new(12, 0);
        let err = step_chain(&m, &State::new(vec![0.0], Mode(1)), &mut rng).unwrap_err();
        assert!(matches!(err, Error::EnvelopeTooLoose { .. }));
    }
}
