//! The mode-penalised product metric, the Fortet–Mourier distance between
//! empirical measures, and geometric-rate fitting.
//!
//! The Fortet–Mourier distance is the supremum of `∫ f d(mu - nu)` over
//! functions `f: X -> [0, 1]` that are 1-Lipschitz for the product metric
//! `rho_c`. For probability measures that supremum coincides with optimal
//! transport under the truncated ground cost `min(rho_c, 1)` (the function
//! class matches, up to an additive shift, the 1-Lipschitz functions of the
//! truncated metric, and Kantorovich duality converts the supremum into a
//! min-cost flow). We compute that transport exactly; `testutil` carries the
//! independent dual-LP oracle that certifies the identity on small instances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Mode, PdmpModel, State};
use crate::simulate::{simulate_chain, RngStream};
use crate::transport::{min_cost_flow, ArcOracle, ExplicitGraph};
use crate::{Error, Result};

/// Format a float with 17 significant digits (exact f64 round-trip) for
/// bit-stable text outputs.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Configuration of the product metric: `rho_c((u,i),(v,j)) = |u-v| + c`
/// when the modes differ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Mode-mismatch penalty, strictly positive.
    pub c: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { c: 1.0 }
    }
}

impl MetricConfig {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "metric penalty c must be > 0, got {c}"
            )));
        }
        Ok(MetricConfig { c })
    }
}

/// Euclidean distance of the position parts plus `c` on mode mismatch.
pub fn rho_c(cfg: &MetricConfig, a: &State, b: &State) -> Result<f64> {
    if a.y.len() != b.y.len() {
        return Err(Error::DimensionMismatch {
            expected: a.y.len(),
            got: b.y.len(),
        });
    }
    let sq: f64 = a
        .y
        .iter()
        .zip(&b.y)
        .map(|(x, z)| (x - z) * (x - z))
        .sum();
    let penalty = if a.mode == b.mode { 0.0 } else { cfg.c };
    Ok(sq.sqrt() + penalty)
}

/// A weighted sample cloud on `Y x I`, the finite-sample stand-in for a
/// probability measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    atoms: Vec<(State, f64)>,
    normalized: bool,
}

impl EmpiricalMeasure {
    /// Build a measure from weighted states and normalize it. Rejects empty
    /// input, non-finite coordinates, negative weights and zero total mass.
    pub fn new(mut atoms: Vec<(State, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        let dim = atoms[0].0.y.len();
        let mut total = 0.0;
        for (state, w) in &atoms {
            if state.y.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: state.y.len(),
                });
            }
            if state.y.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(
                    "atom coordinates must be finite".into(),
                ));
            }
            if !(*w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidArgument(format!("invalid weight {w}")));
            }
            total += w;
        }
        if total <= 0.0 {
            return Err(Error::NotNormalized(total));
        }
        for (_, w) in &mut atoms {
            *w /= total;
        }
        Ok(EmpiricalMeasure {
            atoms,
            normalized: true,
        })
    }

    /// Equal-weight cloud.
    pub fn from_states(states: Vec<State>) -> Result<Self> {
        let n = states.len();
        if n == 0 {
            return Err(Error::EmptyMeasure);
        }
        let w = 1.0 / n as f64;
        EmpiricalMeasure::new(states.into_iter().map(|s| (s, w)).collect())
    }

    pub fn atoms(&self) -> &[(State, f64)] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].0.y.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|(_, w)| w).sum()
    }

    pub(crate) fn check_normalized(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(Error::EmptyMeasure);
        }
        let total = self.total_weight();
        if !self.normalized || (total - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized(total));
        }
        Ok(())
    }

    /// Split the atoms into two disjoint halves (shuffled by `rng`), each
    /// renormalized; the bootstrap null for distance comparisons.
    pub fn split_half(&self, rng: &mut RngStream) -> Result<(Self, Self)> {
        if self.atoms.len() < 2 {
            return Err(Error::TooFewAtoms {
                need: 2,
                got: self.atoms.len(),
            });
        }
        let mut idx: Vec<usize> = (0..self.atoms.len()).collect();
        for i in (1..idx.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            idx.swap(i, j);
        }
        let mid = idx.len() / 2;
        let take = |slice: &[usize]| -> Result<EmpiricalMeasure> {
            EmpiricalMeasure::new(
                slice
                    .iter()
                    .map(|&k| self.atoms[k].clone())
                    .collect::<Vec<_>>(),
            )
        };
        Ok((take(&idx[..mid])?, take(&idx[mid..])?))
    }

    /// CSV with header `y_1,..,y_d,mode,weight`; floats carry 17 significant
    /// digits so the text round-trips bit-exactly.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        for k in 1..=d {
            out.push_str(&format!("y_{k},"));
        }
        out.push_str("mode,weight\n");
        for (state, w) in &self.atoms {
            for v in &state.y {
                out.push_str(&fmt_f64(*v));
                out.push(',');
            }
            out.push_str(&format!("{},{}\n", state.mode, fmt_f64(*w)));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::EmptyMeasure)?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[cols.len() - 2] != "mode" || cols[cols.len() - 1] != "weight" {
            return Err(Error::InvalidArgument(
                "measure CSV header must be y_1,..,y_d,mode,weight".into(),
            ));
        }
        let d = cols.len() - 2;
        let mut atoms = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 2 {
                return Err(Error::InvalidArgument(format!(
                    "measure CSV row {} has {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    d + 2
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::InvalidArgument(format!("bad number '{}' in CSV row {}", s, lineno + 2))
                })
            };
            let y: Vec<f64> = fields[..d].iter().map(|s| parse(s)).collect::<Result<_>>()?;
            let mode: usize = fields[d].trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("bad mode '{}' in CSV row {}", fields[d], lineno + 2))
            })?;
            let w = parse(fields[d + 1])?;
            atoms.push((State::new(y, Mode(mode)), w));
        }
        EmpiricalMeasure::new(atoms)
    }
}

fn cmp_states(a: &State, b: &State) -> std::cmp::Ordering {
    a.mode
        .0
        .cmp(&b.mode.0)
        .then_with(|| a.y.len().cmp(&b.y.len()))
        .then_with(|| {
            for (x, z) in a.y.iter().zip(&b.y) {
                let o = x.total_cmp(z);
                if o != std::cmp::Ordering::Equal {
                    return o;
                }
            }
            std::cmp::Ordering::Equal
        })
}

fn cmp_measures(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> std::cmp::Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        for ((sa, wa), (sb, wb)) in a.atoms.iter().zip(&b.atoms) {
            let o = cmp_states(sa, sb).then(wa.total_cmp(wb));
            if o != std::cmp::Ordering::Equal {
                return o;
            }
        }
        std::cmp::Ordering::Equal
    })
}

/// Exact Fortet–Mourier distance between two normalized empirical measures,
/// computed as min-cost transport under the ground cost `min(rho_c, 1)`.
///
/// Dimension 1 is solved on a sparse line graph (pooled support chain per
/// mode, mode-switch hubs, and a disposal hub realising the truncation), so
/// clouds of a few times 10^4 atoms stay cheap. Higher dimensions price the
/// dense bipartite arc set on the fly after cancelling shared atoms.
pub fn fm_distance(
    cfg: &MetricConfig,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<f64> {
    mu.check_normalized()?;
    nu.check_normalized()?;
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch {
            expected: mu.dim(),
            got: nu.dim(),
        });
    }
    // Canonical argument order makes the distance symmetric bit-for-bit.
    let (mu, nu) = match cmp_measures(mu, nu) {
        std::cmp::Ordering::Greater => (nu, mu),
        _ => (mu, nu),
    };
    let value = if mu.dim() == 1 {
        fm_distance_line(cfg, mu, nu)?
    } else {
        fm_distance_bipartite(cfg, mu, nu)?
    };
    Ok(value.clamp(0.0, 1.0))
}

/// Sparse reduction for `d == 1`: shortest paths in this graph equal
/// `min(rho_c, 1)` exactly. Chain arcs cover transport along each mode line,
/// a hub above every grid point prices a mode switch at `c`, and the
/// disposal hub prices any move at the truncation level 1. Costs above 1
/// are clamped per arc, which preserves all shortest paths at or below 1.
fn fm_distance_line(
    cfg: &MetricConfig,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<f64> {
    let n_modes = mu
        .atoms
        .iter()
        .chain(&nu.atoms)
        .map(|(s, _)| s.mode.0)
        .max()
        .unwrap();
    let mut grid: Vec<f64> = mu
        .atoms
        .iter()
        .chain(&nu.atoms)
        .map(|(s, _)| s.y[0])
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let k_grid = grid.len();

    let line = |mode_idx: usize, k: usize| mode_idx * k_grid + k;
    let hub = |k: usize| n_modes * k_grid + k;
    let with_hubs = n_modes > 1;
    let trash = if with_hubs {
        n_modes * k_grid + k_grid
    } else {
        n_modes * k_grid
    };
    let n_nodes = trash + 1;

    let mut graph = ExplicitGraph::new(n_nodes);
    for m in 0..n_modes {
        for k in 0..k_grid.saturating_sub(1) {
            let gap = grid[k + 1] - grid[k];
            graph.add_edge(line(m, k), line(m, k + 1), gap.min(1.0));
        }
    }
    if with_hubs {
        let half = (cfg.c / 2.0).min(1.0);
        for m in 0..n_modes {
            for k in 0..k_grid {
                graph.add_edge(line(m, k), hub(k), half);
            }
        }
    }
    for m in 0..n_modes {
        for k in 0..k_grid {
            graph.add_edge(line(m, k), trash, 0.5);
        }
    }

    let mut supplies = vec![0.0; n_nodes];
    for (sign, measure) in [(1.0, mu), (-1.0, nu)] {
        for (state, w) in &measure.atoms {
            let k = grid.partition_point(|g| g.total_cmp(&state.y[0]).is_lt());
            supplies[line(state.mode.index(), k)] += sign * w;
        }
    }
    min_cost_flow(&graph, &supplies)
}

struct BipartiteOracle<'a> {
    cfg: &'a MetricConfig,
    sources: Vec<&'a State>,
    sinks: Vec<&'a State>,
}

impl ArcOracle for BipartiteOracle<'_> {
    fn n_nodes(&self) -> usize {
        self.sources.len() + self.sinks.len()
    }
    fn n_arcs(&self) -> usize {
        self.sources.len() * self.sinks.len()
    }
    fn endpoints(&self, a: usize) -> (usize, usize) {
        let (i, j) = (a / self.sinks.len(), a % self.sinks.len());
        (i, self.sources.len() + j)
    }
    fn cost(&self, a: usize) -> f64 {
        let (i, j) = (a / self.sinks.len(), a % self.sinks.len());
        rho_c(self.cfg, self.sources[i], self.sinks[j])
            .expect("dimensions checked")
            .min(1.0)
    }
}

fn fm_distance_bipartite(
    cfg: &MetricConfig,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<f64> {
    // Cancel mass shared at identical atoms; the ground cost is a metric, so
    // shared mass may always stay in place in an optimal plan.
    let mut mu_sorted: Vec<(usize, f64)> = (0..mu.len()).map(|k| (k, mu.atoms[k].1)).collect();
    let mut nu_sorted: Vec<(usize, f64)> = (0..nu.len()).map(|k| (k, nu.atoms[k].1)).collect();
    mu_sorted.sort_by(|a, b| cmp_states(&mu.atoms[a.0].0, &mu.atoms[b.0].0));
    nu_sorted.sort_by(|a, b| cmp_states(&nu.atoms[a.0].0, &nu.atoms[b.0].0));
    let (mut i, mut j) = (0, 0);
    while i < mu_sorted.len() && j < nu_sorted.len() {
        let sa = &mu.atoms[mu_sorted[i].0].0;
        let sb = &nu.atoms[nu_sorted[j].0].0;
        match cmp_states(sa, sb) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let cancel = mu_sorted[i].1.min(nu_sorted[j].1);
                mu_sorted[i].1 -= cancel;
                nu_sorted[j].1 -= cancel;
                if mu_sorted[i].1 <= 0.0 {
                    i += 1;
                } else {
                    j += 1;
                }
            }
        }
    }

    let mut sources = Vec::new();
    let mut sinks = Vec::new();
    let mut supplies = Vec::new();
    for (k, w) in &mu_sorted {
        if *w > 0.0 {
            sources.push(&mu.atoms[*k].0);
            supplies.push(*w);
        }
    }
    for (k, w) in &nu_sorted {
        if *w > 0.0 {
            sinks.push(&nu.atoms[*k].0);
        }
    }
    for (_, w) in &nu_sorted {
        if *w > 0.0 {
            supplies.push(-*w);
        }
    }
    if sources.is_empty() && sinks.is_empty() {
        return Ok(0.0);
    }
    if sources.is_empty() || sinks.is_empty() {
        // Equal totals make this impossible up to float dust.
        return Ok(0.0);
    }
    let oracle = BipartiteOracle {
        cfg,
        sources,
        sinks,
    };
    min_cost_flow(&oracle, &supplies)
}

/// Result of a geometric-rate fit `d_n ~ C beta^n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateFit {
    pub beta: f64,
    pub c_mu: f64,
    /// Root mean squared residual of the log-linear fit.
    pub residual: f64,
    /// Inclusive step range actually used by the fit.
    pub n_lo: usize,
    pub n_hi: usize,
    pub noise_floor: f64,
    /// The fitted curve: `(n, d_n)` for every probed step count.
    pub curve: Vec<(usize, f64)>,
}

/// Estimate the geometric convergence rate of the chain toward
/// `mu_star_hat`: simulate the n-step law from `init` for `n = 1..=n_max`
/// (each over `n_rep` independent trajectories), measure its distance to
/// `mu_star_hat`, and fit `log d_n` linearly over the steps that sit above
/// the bootstrap noise floor.
pub fn fit_rate(
    cfg: &MetricConfig,
    model: &PdmpModel,
    init: &State,
    mu_star_hat: &EmpiricalMeasure,
    n_max: usize,
    n_rep: usize,
    rng: &RngStream,
) -> Result<RateFit> {
    if n_max < 4 {
        return Err(Error::InvalidArgument(format!(
            "n_max must be >= 4, got {n_max}"
        )));
    }
    if n_rep < 8 {
        return Err(Error::InvalidArgument(format!(
            "n_rep must be >= 8, got {n_rep}"
        )));
    }
    mu_star_hat.check_normalized()?;
    model.check_state(init)?;

    let mut floor_rng = rng.derive(u64::MAX);
    let (half_a, half_b) = mu_star_hat.split_half(&mut floor_rng)?;
    let noise_floor = fm_distance(cfg, &half_a, &half_b)?;

    let distances: Vec<Result<f64>> = (1..=n_max)
        .into_par_iter()
        .map(|n| {
            let level = rng.derive(n as u64);
            let mut states = Vec::with_capacity(n_rep);
            for rep in 0..n_rep {
                let mut stream = level.derive(rep as u64);
                let traj = simulate_chain(model, init, n, &mut stream)?;
                states.push(traj.states[n].clone());
            }
            let law = EmpiricalMeasure::from_states(states)?;
            fm_distance(cfg, &law, mu_star_hat)
        })
        .collect();

    let mut curve = Vec::with_capacity(n_max);
    for (k, d) in distances.into_iter().enumerate() {
        curve.push((k + 1, d?));
    }

    let used: Vec<(usize, f64)> = curve
        .iter()
        .copied()
        .filter(|(_, d)| *d > noise_floor && *d > 0.0)
        .collect();
    if used.len() < 2 {
        return Err(Error::AlreadyConverged);
    }

    let m = used.len() as f64;
    let sx: f64 = used.iter().map(|(n, _)| *n as f64).sum();
    let sy: f64 = used.iter().map(|(_, d)| d.ln()).sum();
    let sxx: f64 = used.iter().map(|(n, _)| (*n as f64) * (*n as f64)).sum();
    let sxy: f64 = used.iter().map(|(n, d)| (*n as f64) * d.ln()).sum();
    let denom = m * sxx - sx * sx;
    let slope = (m * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / m;
    let beta = slope.exp();
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "no geometric decay over the probed range (estimated rate {beta:.4})"
        )));
    }
    let residual = (used
        .iter()
        .map(|(n, d)| {
            let r = d.ln() - (intercept + slope * *n as f64);
            r * r
        })
        .sum::<f64>()
        / m)
        .sqrt();

    Ok(RateFit {
        beta,
        c_mu: intercept.exp(),
        residual,
        n_lo: used.first().unwrap().0,
        n_hi: used.last().unwrap().0,
        noise_floor,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(y: f64, mode: usize) -> State {
        State::new(vec![y], Mode(mode))
    }

    #[test]
    fn rho_examples() {
        let cfg = MetricConfig { c: 2.0 };
        let d = rho_c(&cfg, &st(1.0, 1), &st(1.0, 1)).unwrap();
        assert_eq!(d, 0.0);
        let d = rho_c(&cfg, &st(0.0, 1), &st(0.0, 2)).unwrap();
        assert_eq!(d, 2.0);
        let d = rho_c(&cfg, &st(3.0, 1), &st(0.0, 2)).unwrap();
        assert_eq!(d, 5.0);
    }

    #[test]
    fn rho_rejects_dimension_mismatch() {
        let cfg = MetricConfig::default();
        let a = State::new(vec![0.0, 1.0], Mode(1));
        assert!(matches!(
            rho_c(&cfg, &a, &st(0.0, 1)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn distance_to_self_is_zero() {
        let cfg = MetricConfig::default();
        let mu = EmpiricalMeasure::from_states(vec![st(0.1, 1), st(0.7, 2), st(-3.0, 1)]).unwrap();
        assert_eq!(fm_distance(&cfg, &mu, &mu).unwrap(), 0.0);
    }

    #[test]
    fn dirac_pairs_match_truncated_metric() {
        let cfg = MetricConfig::default();
        let a = EmpiricalMeasure::from_states(vec![st(0.0, 1)]).unwrap();
        let b = EmpiricalMeasure::from_states(vec![st(0.3, 1)]).unwrap();
        let c = EmpiricalMeasure::from_states(vec![st(5.0, 1)]).unwrap();
        assert!((fm_distance(&cfg, &a, &b).unwrap() - 0.3).abs() < 1e-12);
        assert!((fm_distance(&cfg, &a, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distance_is_bitwise_symmetric() {
        let cfg = MetricConfig::default();
        let mu = EmpiricalMeasure::from_states(vec![st(0.0, 1), st(1.0, 2)]).unwrap();
        let nu = EmpiricalMeasure::from_states(vec![st(0.4, 1), st(0.9, 1), st(2.0, 2)]).unwrap();
        assert_eq!(
            fm_distance(&cfg, &mu, &nu).unwrap(),
            fm_distance(&cfg, &nu, &mu).unwrap()
        );
    }

    #[test]
    fn unnormalized_and_empty_inputs_error() {
        let cfg = MetricConfig::default();
        let mu = EmpiricalMeasure::from_states(vec![st(0.0, 1)]).unwrap();
        let mut bad = mu.clone();
        bad.atoms[0].1 = 0.5;
        assert!(matches!(
            fm_distance(&cfg, &mu, &bad),
            Err(Error::NotNormalized(_))
        ));
        assert!(EmpiricalMeasure::new(vec![]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mu = EmpiricalMeasure::new(vec![
            (st(0.1234567890123456, 1), 0.25),
            (st(-7.5e-12, 2), 0.75),
        ])
        .unwrap();
        let text = mu.to_csv();
        let back = EmpiricalMeasure::from_csv(&text).unwrap();
        assert_eq!(mu, back);
    }

    #[test]
    fn split_half_partitions_atoms() {
        let mu =
            EmpiricalMeasure::from_states((0..10).map(|k| st(k as f64, 1)).collect()).unwrap();
        let mut rng = RngStream::new(1, 0);
        let (a, b) = mu.split_half(&mut rng).unwrap();
        assert_eq!(a.len() + b.len(), 10);
        assert!((a.total_weight() - 1.0).abs() < 1e-12);
        assert!((b.total_weight() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_rate_rejects_small_n_max() {
        let cfg = MetricConfig::default();
        let model =
            crate::model::builtin_model("dirac-trap", &crate::model::ModelParams::new()).unwrap();
        let mu = EmpiricalMeasure::from_states(vec![st(0.0, 1), st(0.0, 1)]).unwrap();
        let rng = RngStream::new(1, 0);
        let err = fit_rate(&cfg, &model, &st(1.0, 1), &mu, 2, 100, &rng).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
