//! Independent oracles for the test suites. Nothing here shares code with
//! the production paths it is used to check: the distance oracle solves the
//! dual linear program over the Lipschitz function class directly with a
//! dense tableau simplex.

use crate::metrics::MetricConfig;
use crate::model::State;

/// Maximize `c x` subject to `A x <= b`, `x >= 0`, with `b >= 0` (the origin
/// is feasible). Dense tableau simplex with Bland's rule; meant for tiny
/// instances only.
pub fn simplex_maximize(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> f64 {
    let n = c.len();
    let m = b.len();
    let cols = n + m + 1;
    let mut tab: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    for i in 0..m {
        let mut row = vec![0.0; cols];
        row[..n].copy_from_slice(&a[i]);
        row[n + i] = 1.0;
        row[cols - 1] = b[i];
        tab.push(row);
    }
    let mut obj = vec![0.0; cols];
    for j in 0..n {
        obj[j] = -c[j];
    }
    tab.push(obj);

    let eps = 1e-11;
    let mut basis: Vec<usize> = (n..n + m).collect();
    loop {
        // Bland: first improving column.
        let Some(pivot_col) = (0..cols - 1).find(|&j| tab[m][j] < -eps) else {
            break;
        };
        let mut pivot_row = None;
        let mut best_ratio = f64::INFINITY;
        for (i, row) in tab.iter().enumerate().take(m) {
            if row[pivot_col] > eps {
                let ratio = row[cols - 1] / row[pivot_col];
                if ratio < best_ratio - 1e-15
                    || (ratio < best_ratio + 1e-15
                        && pivot_row.is_some_and(|r: usize| basis[i] < basis[r]))
                {
                    best_ratio = ratio;
                    pivot_row = Some(i);
                }
            }
        }
        let Some(pr) = pivot_row else {
            panic!("unbounded LP in test oracle");
        };
        let pivot = tab[pr][pivot_col];
        for v in tab[pr].iter_mut() {
            *v /= pivot;
        }
        for i in 0..=m {
            if i != pr {
                let factor = tab[i][pivot_col];
                if factor != 0.0 {
                    for j in 0..cols {
                        tab[i][j] -= factor * tab[pr][j];
                    }
                }
            }
        }
        basis[pr] = pivot_col;
    }
    tab[m][cols - 1]
}

fn states_equal(a: &State, b: &State) -> bool {
    a.mode == b.mode && a.y.len() == b.y.len() && a.y.iter().zip(&b.y).all(|(x, z)| x == z)
}

fn rho(cfg: &MetricConfig, a: &State, b: &State) -> f64 {
    let sq: f64 = a.y.iter().zip(&b.y).map(|(x, z)| (x - z) * (x - z)).sum();
    sq.sqrt() + if a.mode == b.mode { 0.0 } else { cfg.c }
}

/// Brute-force Fortet–Mourier distance: maximize `sum_k f_k (mu_k - nu_k)`
/// over `0 <= f <= 1` with `|f_k - f_l| <= rho_c(x_k, x_l)`, solved as a
/// dense LP over the pooled support. Exponentially clearer, polynomially
/// slower: keep the atom counts tiny.
pub fn dual_lp_fm_distance(
    cfg: &MetricConfig,
    mu: &[(State, f64)],
    nu: &[(State, f64)],
) -> f64 {
    let mut support: Vec<State> = Vec::new();
    let mut delta: Vec<f64> = Vec::new();
    let mut add = |state: &State, weight: f64| {
        if let Some(k) = support.iter().position(|s| states_equal(s, state)) {
            delta[k] += weight;
        } else {
            support.push(state.clone());
            delta.push(weight);
        }
    };
    for (s, w) in mu {
        add(s, *w);
    }
    for (s, w) in nu {
        add(s, -*w);
    }

    let k = support.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if i != j {
                let mut row = vec![0.0; k];
                row[i] = 1.0;
                row[j] = -1.0;
                rows.push(row);
                rhs.push(rho(cfg, &support[i], &support[j]));
            }
        }
    }
    for i in 0..k {
        let mut row = vec![0.0; k];
        row[i] = 1.0;
        rows.push(row);
        rhs.push(1.0);
    }
    simplex_maximize(&delta, &rows, &rhs)
}

/// Two-sided Kolmogorov–Smirnov statistic of sorted samples against a CDF.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        let f = cdf(*x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    d
}

/// Asymptotic 1% critical value for the two-sided KS statistic.
pub fn ks_crit_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

/// Composite Simpson quadrature with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    assert!(n >= 2 && n % 2 == 0);
    let h = (hi - lo) / n as f64;
    let mut total = f(lo) + f(hi);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        total += w * f(lo + k as f64 * h);
    }
    total * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    #[test]
    fn simplex_solves_a_known_lp() {
        // max x + y st x <= 2, y <= 3, x + y <= 4.
        let value = simplex_maximize(
            &[1.0, 1.0],
            &[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![1.0, 1.0],
            ],
            &[2.0, 3.0, 4.0],
        );
        assert!((value - 4.0).abs() < 1e-9);
    }

    #[test]
    fn lp_distance_between_diracs_is_truncated_metric() {
        let cfg = MetricConfig::default();
        let a = (State::new(vec![0.0], Mode(1)), 1.0);
        let near = (State::new(vec![0.3], Mode(1)), 1.0);
        let far = (State::new(vec![5.0], Mode(1)), 1.0);
        let d = dual_lp_fm_distance(&cfg, &[a.clone()], &[near]);
        assert!((d - 0.3).abs() < 1e-9);
        let d = dual_lp_fm_distance(&cfg, &[a], &[far]);
        assert!((d - 1.0).abs() < 1e-9);
    }
}
