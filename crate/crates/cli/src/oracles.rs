//! Exhaustive and numerical reference answers used by `reproduce` and the
//! acceptance tests. Nothing here shares code with the algorithms it checks.

use chipletsim_core::implant::fwhm_to_sigma;
use chipletsim_core::tuning::{StrainPrior, Tunable};
use chipletsim_core::{ActuatorConfig, SpeciesParams};
use statrs::distribution::{ContinuousCDF, Normal};

/// Reachable interval straight from the strain law, no shared helpers.
pub fn interval(t: &Tunable, act: &ActuatorConfig) -> (f64, f64) {
    let shift = (t.k_ghz_per_v2.abs() * act.v_max * act.v_max).min(act.cap_ghz);
    if t.k_ghz_per_v2 > 0.0 {
        (t.f0_ghz, t.f0_ghz + shift)
    } else if t.k_ghz_per_v2 < 0.0 {
        (t.f0_ghz - shift, t.f0_ghz)
    } else {
        (t.f0_ghz, t.f0_ghz)
    }
}

/// Largest number of intervals sharing a point and the lowest such point.
/// Some optimum always sits on a left endpoint, so only those are tried.
pub fn brute_force_stabbing(intervals: &[(f64, f64)]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for &(x, _) in intervals {
        let n = intervals.iter().filter(|&&(lo, hi)| lo <= x && x <= hi).count();
        if n > best.1 || (n == best.1 && x < best.0) {
            best = (x, n);
        }
    }
    best
}

/// Maximum matching size by trying every way to pair the first free vertex.
pub fn brute_force_matching(adjacent: &[Vec<bool>]) -> usize {
    fn go(adj: &[Vec<bool>], used: &mut [bool]) -> usize {
        let Some(i) = (0..adj.len()).find(|&i| !used[i]) else {
            return 0;
        };
        used[i] = true;
        let mut best = go(adj, used);
        for j in i + 1..adj.len() {
            if !used[j] && adj[i][j] {
                used[j] = true;
                best = best.max(1 + go(adj, used));
                used[j] = false;
            }
        }
        used[i] = false;
        best
    }
    go(adjacent, &mut vec![false; adjacent.len()])
}

/// Probability that two emitters can meet, by midpoint quadrature over the
/// two log-uniform strain magnitudes. The rest-frequency difference is
/// N(0, √2 σ); for fixed reach widths and signs the intervals intersect iff
/// it falls in a fixed window.
pub fn pair_coverage_quadrature(species: &SpeciesParams, prior: &StrainPrior, act: &ActuatorConfig, n: usize) -> f64 {
    let sigma = fwhm_to_sigma(species.inhom_spread_ghz).expect("positive spread");
    let diff = Normal::new(0.0, std::f64::consts::SQRT_2 * sigma).expect("positive sigma");
    let prob = |lo: f64, hi: f64| diff.cdf(hi) - diff.cdf(lo);
    let reach: Vec<f64> = (0..n)
        .map(|a| {
            let u = (a as f64 + 0.5) / n as f64;
            let k = prior.center_ghz_per_v2 * 10f64.powf(prior.decades * (u - 0.5));
            (k * act.v_max * act.v_max).min(act.cap_ghz.max(0.0))
        })
        .collect();
    let p = prior.positive_fraction;
    let mut total = 0.0;
    for &ri in &reach {
        for &rj in &reach {
            total += p * p * prob(-rj, ri)
                + p * (1.0 - p) * prob(0.0, ri + rj)
                + (1.0 - p) * p * prob(-(ri + rj), 0.0)
                + (1.0 - p) * (1.0 - p) * prob(-ri, rj);
        }
    }
    total / (n * n) as f64
}
