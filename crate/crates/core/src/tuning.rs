//! Electrostatic strain tuning of emitter lines.
//!
//! Each emitter shifts by `sign(k)·min(|k|·V², cap)` at actuator voltage `V`:
//! the shift is one-sided and saturates at the stiction-limited cap. Over
//! `0 ≤ V ≤ v_max` every emitter can therefore reach a closed frequency
//! interval, and planning reduces to interval problems: the largest set of
//! emitters that can share one frequency is a maximum stabbing point, and
//! the largest set of disjoint resonant pairs is a maximum matching in the
//! interval-intersection graph.

use std::fmt;
use std::io::Write;

use petgraph::algo::maximum_matching;
use petgraph::graph::UnGraph;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emitters::{Emitter, SpeciesParams};
use crate::implant::fwhm_to_sigma;
use crate::io;
use crate::rng::Streams;
use crate::{Error, Result};

/// Plan members must sit this close to the target frequency.
pub const PLAN_TOLERANCE_GHZ: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorConfig {
    pub v_max: f64,
    pub cap_ghz: f64,
    /// Reporting only.
    pub electrode_gap_um: f64,
}

impl Default for ActuatorConfig {
    fn default() -> Self {
        ActuatorConfig {
            v_max: 100.0,
            cap_ghz: 100.0,
            electrode_gap_um: 1.5,
        }
    }
}

impl ActuatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(Error::domain("actuator", "v_max must be > 0"));
        }
        // zero is allowed: the lines cannot move at all
        if !(self.cap_ghz >= 0.0) {
            return Err(Error::domain("actuator", "cap_ghz must be >= 0"));
        }
        Ok(())
    }
}

/// Distribution of per-emitter strain coefficients: a random sign and a
/// log-uniform magnitude spanning `decades` around `center_ghz_per_v2`.
///
/// By default every line shifts upward. With mixed signs, a pair whose
/// lines move apart can never meet however large the cap is.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrainPrior {
    pub center_ghz_per_v2: f64,
    pub decades: f64,
    pub positive_fraction: f64,
}

impl Default for StrainPrior {
    fn default() -> Self {
        StrainPrior {
            center_ghz_per_v2: 0.0167,
            decades: 1.0,
            positive_fraction: 1.0,
        }
    }
}

impl StrainPrior {
    pub fn validate(&self) -> Result<()> {
        if !(self.center_ghz_per_v2 > 0.0 && self.decades >= 0.0) {
            return Err(Error::domain("strain", "need center > 0 and decades >= 0"));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::domain("strain", "positive_fraction must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let sign = if rng.gen::<f64>() < self.positive_fraction {
            1.0
        } else {
            -1.0
        };
        let u: f64 = rng.gen();
        sign * self.center_ghz_per_v2 * 10f64.powf(self.decades * (u - 0.5))
    }
}

/// The two numbers tuning cares about for one emitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tunable {
    pub f0_ghz: f64,
    pub k_ghz_per_v2: f64,
}

impl From<&Emitter> for Tunable {
    fn from(e: &Emitter) -> Self {
        Tunable {
            f0_ghz: e.zpl_offset_ghz,
            k_ghz_per_v2: e.strain_coeff_ghz_per_v2,
        }
    }
}

pub fn strained_frequency(f0_ghz: f64, k_ghz_per_v2: f64, v: f64, cap_ghz: f64) -> f64 {
    f0_ghz + k_ghz_per_v2.signum() * (k_ghz_per_v2.abs() * v * v).min(cap_ghz)
}

impl Tunable {
    pub fn at(&self, v: f64, actuator: &ActuatorConfig) -> f64 {
        if self.k_ghz_per_v2 == 0.0 {
            return self.f0_ghz;
        }
        strained_frequency(self.f0_ghz, self.k_ghz_per_v2, v, actuator.cap_ghz)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoCrossing {
    /// Equal strain response but different rest frequencies.
    Parallel,
    /// The lines move apart as voltage increases.
    Diverging,
    ExceedsVmax {
        voltage: f64,
    },
    /// One line saturates at the cap before the crossing voltage.
    CapClamped {
        voltage: f64,
    },
}

impl fmt::Display for NoCrossing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoCrossing::Parallel => write!(f, "parallel tuning curves"),
            NoCrossing::Diverging => write!(f, "lines diverge with voltage"),
            NoCrossing::ExceedsVmax { voltage } => write!(f, "crossing at {voltage:.3} V exceeds v_max"),
            NoCrossing::CapClamped { voltage } => write!(f, "tuning saturates before {voltage:.3} V"),
        }
    }
}

/// Shared actuation voltage at which two lines coincide.
pub fn crossing_voltage(a: &Tunable, b: &Tunable, actuator: &ActuatorConfig) -> std::result::Result<f64, NoCrossing> {
    let gap = b.f0_ghz - a.f0_ghz;
    if gap == 0.0 {
        return Ok(0.0);
    }
    let dk = a.k_ghz_per_v2 - b.k_ghz_per_v2;
    if dk == 0.0 {
        return Err(NoCrossing::Parallel);
    }
    let radicand = gap / dk;
    if radicand < 0.0 {
        return Err(NoCrossing::Diverging);
    }
    let v = radicand.sqrt();
    if v > actuator.v_max {
        return Err(NoCrossing::ExceedsVmax { voltage: v });
    }
    let v2 = v * v;
    if a.k_ghz_per_v2.abs() * v2 > actuator.cap_ghz || b.k_ghz_per_v2.abs() * v2 > actuator.cap_ghz {
        return Err(NoCrossing::CapClamped { voltage: v });
    }
    Ok(v)
}

/// Frequencies reachable over `[0, v_max]`, as `(lo, hi)`.
pub fn reachable_interval(t: &Tunable, actuator: &ActuatorConfig) -> (f64, f64) {
    let end = t.at(actuator.v_max, actuator);
    if end < t.f0_ghz {
        (end, t.f0_ghz)
    } else {
        (t.f0_ghz, end)
    }
}

/// Voltage that puts `t` at `target`, assuming `target` is reachable.
fn voltage_for(t: &Tunable, target: f64, actuator: &ActuatorConfig) -> f64 {
    let shift = target - t.f0_ghz;
    if shift == 0.0 || t.k_ghz_per_v2 == 0.0 {
        return 0.0;
    }
    (shift / t.k_ghz_per_v2).max(0.0).sqrt().min(actuator.v_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanMember {
    pub emitter_id: usize,
    pub f0_ghz: f64,
    pub k_ghz_per_v2: f64,
    pub voltage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningPlan {
    pub target_freq_ghz: f64,
    pub members: Vec<PlanMember>,
}

impl TuningPlan {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Re-checks every member against the strain law.
    pub fn verify(&self, actuator: &ActuatorConfig) -> Result<()> {
        for m in &self.members {
            if !(0.0..=actuator.v_max).contains(&m.voltage) {
                return Err(Error::InvalidData(format!(
                    "emitter {} needs {} V, outside [0, {}]",
                    m.emitter_id, m.voltage, actuator.v_max
                )));
            }
            let t = Tunable {
                f0_ghz: m.f0_ghz,
                k_ghz_per_v2: m.k_ghz_per_v2,
            };
            let f = t.at(m.voltage, actuator);
            if (f - self.target_freq_ghz).abs() > PLAN_TOLERANCE_GHZ {
                return Err(Error::InvalidData(format!(
                    "emitter {} lands at {f} GHz, target {} GHz",
                    m.emitter_id, self.target_freq_ghz
                )));
            }
        }
        Ok(())
    }
}

/// Lowest frequency covered by the largest number of reachable intervals,
/// with the covering count. Endpoint sweep, `O(n log n)`.
pub fn max_stabbing_point(intervals: &[(f64, f64)]) -> Option<(f64, usize)> {
    let mut events: Vec<(f64, u8)> = intervals.iter().flat_map(|&(lo, hi)| [(lo, 0u8), (hi, 1u8)]).collect();
    // closed intervals: at equal coordinates openings come before closings
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut depth = 0usize;
    let mut best: Option<(f64, usize)> = None;
    for (x, kind) in events {
        if kind == 0 {
            depth += 1;
            if !matches!(best, Some((_, n)) if depth <= n) {
                best = Some((x, depth));
            }
        } else {
            depth -= 1;
        }
    }
    best
}

pub fn max_mutually_resonant_set(emitters: &[Tunable], actuator: &ActuatorConfig) -> Result<TuningPlan> {
    if emitters.is_empty() {
        return Err(Error::Usage("need at least one emitter to plan".into()));
    }
    let intervals: Vec<(f64, f64)> = emitters.iter().map(|t| reachable_interval(t, actuator)).collect();
    let (target, _) = max_stabbing_point(&intervals).expect("non-empty");
    let members = emitters
        .iter()
        .zip(&intervals)
        .enumerate()
        .filter(|(_, (_, &(lo, hi)))| lo <= target && target <= hi)
        .map(|(id, (t, _))| PlanMember {
            emitter_id: id,
            f0_ghz: t.f0_ghz,
            k_ghz_per_v2: t.k_ghz_per_v2,
            voltage: voltage_for(t, target, actuator),
        })
        .collect();
    let plan = TuningPlan {
        target_freq_ghz: target,
        members,
    };
    plan.verify(actuator)?;
    Ok(plan)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResonantPair {
    pub a: usize,
    pub b: usize,
    /// Lowest frequency both can reach.
    pub target_freq_ghz: f64,
}

fn intersects(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

/// Maximum number of disjoint emitter pairs that can each be brought into
/// mutual resonance. Pairs are independent: each pair may use its own
/// target frequency.
pub fn max_resonant_pairs(emitters: &[Tunable], actuator: &ActuatorConfig) -> Result<Vec<ResonantPair>> {
    if emitters.is_empty() {
        return Err(Error::Usage("need at least one emitter to pair".into()));
    }
    let intervals: Vec<(f64, f64)> = emitters.iter().map(|t| reachable_interval(t, actuator)).collect();
    let mut graph = UnGraph::<usize, ()>::with_capacity(emitters.len(), 0);
    let nodes: Vec<_> = (0..emitters.len()).map(|i| graph.add_node(i)).collect();
    for i in 0..emitters.len() {
        for j in i + 1..emitters.len() {
            if intersects(intervals[i], intervals[j]) {
                graph.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let matching = maximum_matching(&graph);
    let mut pairs: Vec<ResonantPair> = matching
        .edges()
        .map(|(u, v)| {
            let (a, b) = (graph[u].min(graph[v]), graph[u].max(graph[v]));
            ResonantPair {
                a,
                b,
                target_freq_ghz: intervals[a].0.max(intervals[b].0),
            }
        })
        .collect();
    pairs.sort_by_key(|p| (p.a, p.b));
    Ok(pairs)
}

/// ZPL offsets drawn from a normal whose FWHM is the species' inhomogeneous
/// spread.
pub fn sample_inhomogeneous(species: &SpeciesParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Usage("sample_inhomogeneous needs n >= 1".into()));
    }
    let dist = Normal::new(0.0, fwhm_to_sigma(species.inhom_spread_ghz)?)
        .map_err(|e| Error::domain("inhomogeneous", e.to_string()))?;
    let streams = Streams::new(seed, "tuning/inhomogeneous");
    Ok((0..n as u64)
        .into_par_iter()
        .map(|i| dist.sample(&mut streams.stream(i)))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coverage {
    pub probability: f64,
    pub stderr: f64,
    pub trials: u64,
}

/// Probability that two random emitters of a species can be tuned onto a
/// common frequency with a shared actuator model.
pub fn pair_coverage(
    species: &SpeciesParams,
    prior: &StrainPrior,
    actuator: &ActuatorConfig,
    trials: u64,
    seed: u64,
) -> Result<Coverage> {
    if trials == 0 {
        return Err(Error::Usage("pair_coverage needs at least one trial".into()));
    }
    prior.validate()?;
    let dist = Normal::new(0.0, fwhm_to_sigma(species.inhom_spread_ghz)?)
        .map_err(|e| Error::domain("inhomogeneous", e.to_string()))?;
    let streams = Streams::new(seed, "tuning/coverage");
    let hits = (0..trials)
        .into_par_iter()
        .filter(|&t| {
            let mut rng = streams.stream(t);
            let a = Tunable {
                f0_ghz: dist.sample(&mut rng),
                k_ghz_per_v2: prior.sample(&mut rng),
            };
            let b = Tunable {
                f0_ghz: dist.sample(&mut rng),
                k_ghz_per_v2: prior.sample(&mut rng),
            };
            intersects(reachable_interval(&a, actuator), reachable_interval(&b, actuator))
        })
        .count() as u64;
    let p = hits as f64 / trials as f64;
    Ok(Coverage {
        probability: p,
        stderr: (p * (1.0 - p) / trials as f64).sqrt(),
        trials,
    })
}

pub const PLAN_CSV_HEADER: [&str; 5] = ["emitter_id", "f0_ghz", "k", "voltage", "f_target_ghz"];
pub const COVERAGE_CSV_HEADER: [&str; 6] = ["species", "cap_ghz", "v_max", "trials", "coverage", "stderr"];

pub fn write_plan_csv<W: Write>(w: W, plan: &TuningPlan) -> Result<()> {
    let mut out = io::writer(w, &PLAN_CSV_HEADER)?;
    for m in &plan.members {
        out.write_record([
            m.emitter_id.to_string(),
            io::fmt_f64(m.f0_ghz),
            io::fmt_f64(m.k_ghz_per_v2),
            io::fmt_f64(m.voltage),
            io::fmt_f64(plan.target_freq_ghz),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_coverage_csv<W: Write>(w: W, rows: &[(SpeciesParams, ActuatorConfig, Coverage)]) -> Result<()> {
    let mut out = io::writer(w, &COVERAGE_CSV_HEADER)?;
    for (species, act, c) in rows {
        out.write_record([
            species.name.to_string(),
            io::fmt_f64(act.cap_ghz),
            io::fmt_f64(act.v_max),
            c.trials.to_string(),
            io::fmt_f64(c.probability),
            io::fmt_f64(c.stderr),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn act(v_max: f64, cap: f64) -> ActuatorConfig {
        ActuatorConfig {
            v_max,
            cap_ghz: cap,
            electrode_gap_um: 1.5,
        }
    }

    fn t(f0: f64, k: f64) -> Tunable {
        Tunable {
            f0_ghz: f0,
            k_ghz_per_v2: k,
        }
    }

    #[test]
    fn strained_frequency_examples() {
        assert_eq!(strained_frequency(3.0, 0.02, 0.0, 100.0), 3.0);
        assert!((strained_frequency(0.0, 0.016660, 24.5, 100.0) - 10.0).abs() < 1e-3);
        assert_eq!(strained_frequency(0.0, 0.4, 25.0, 100.0), 100.0);
        assert_eq!(strained_frequency(0.0, -0.4, 25.0, 100.0), -100.0);
    }

    #[test]
    fn crossing_examples() {
        let a = act(100.0, 100.0);
        assert_eq!(crossing_voltage(&t(1.0, 0.01), &t(1.0, 0.05), &a), Ok(0.0));
        let v = crossing_voltage(&t(0.0, 0.016660), &t(10.0, 0.0), &a).unwrap();
        assert!((v - 24.5).abs() < 0.01);
        assert_eq!(
            crossing_voltage(&t(0.0, 0.0), &t(10.0, 0.01), &a),
            Err(NoCrossing::Diverging)
        );
        assert_eq!(
            crossing_voltage(&t(0.0, 0.01), &t(10.0, 0.01), &a),
            Err(NoCrossing::Parallel)
        );
        assert!(matches!(
            crossing_voltage(&t(0.0, 0.016660), &t(10.0, 0.0), &act(20.0, 100.0)),
            Err(NoCrossing::ExceedsVmax { .. })
        ));
        assert!(matches!(
            crossing_voltage(&t(0.0, 0.016660), &t(10.0, 0.0), &act(100.0, 5.0)),
            Err(NoCrossing::CapClamped { .. })
        ));
    }

    #[test]
    fn reachable_interval_examples() {
        let a = act(50.0, 100.0);
        assert_eq!(reachable_interval(&t(2.0, 0.0), &a), (2.0, 2.0));
        assert_eq!(reachable_interval(&t(2.0, 1.0), &a), (2.0, 102.0));
        assert_eq!(reachable_interval(&t(2.0, -1.0), &a), (-98.0, 2.0));
        let (lo, hi) = reachable_interval(&t(0.0, 0.0167), &a);
        assert!((hi - lo - 41.75).abs() < 1e-9);
    }

    #[test]
    fn resonant_set_examples() {
        let a = act(10.0, 100.0);
        let disjoint: Vec<Tunable> = (0..5).map(|i| t(f64::from(i) * 10.0, 0.01)).collect();
        assert_eq!(max_mutually_resonant_set(&disjoint, &a).unwrap().size(), 1);
        let shared: Vec<Tunable> = (0..5).map(|i| t(f64::from(i) * 0.1, 0.05)).collect();
        let plan = max_mutually_resonant_set(&shared, &a).unwrap();
        assert_eq!(plan.size(), 5);
        assert!((plan.target_freq_ghz - 0.4).abs() < 1e-12);
        assert!(max_mutually_resonant_set(&[], &a).is_err());
    }

    #[test]
    fn pair_examples() {
        let a = act(10.0, 100.0);
        let disjoint: Vec<Tunable> = (0..5).map(|i| t(f64::from(i) * 10.0, 0.01)).collect();
        assert!(max_resonant_pairs(&disjoint, &a).unwrap().is_empty());
        for n in 1..8 {
            let same: Vec<Tunable> = (0..n).map(|_| t(1.0, 0.02)).collect();
            assert_eq!(max_resonant_pairs(&same, &a).unwrap().len(), n / 2);
        }
    }

    #[test]
    fn inhomogeneous_fwhm() {
        for (species, target, tol) in [(SpeciesParams::gev(), 85.0, 2.0), (SpeciesParams::siv(), 30.0, 1.0)] {
            let s = sample_inhomogeneous(&species, 100_000, 12).unwrap();
            let m = s.iter().sum::<f64>() / s.len() as f64;
            let sd = (s.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64).sqrt();
            assert!((sd * crate::implant::FWHM_PER_SIGMA - target).abs() < tol);
        }
        assert_eq!(sample_inhomogeneous(&SpeciesParams::gev(), 1, 0).unwrap().len(), 1);
    }

    #[test]
    fn coverage_limits() {
        let gev = SpeciesParams::gev();
        let prior = StrainPrior::default();
        let none = pair_coverage(&gev, &prior, &act(100.0, 0.0), 5000, 1).unwrap();
        assert_eq!(none.probability, 0.0);
        let all = pair_coverage(&gev, &prior, &act(1e4, 1e9), 5000, 1).unwrap();
        assert!(all.probability > 0.99);
        // mixed signs: the two diverging sign combinations each succeed only
        // when the pair happens to be ordered the right way, so the limit is
        // 1/4 + 1/4 + 2 · 1/4 · 1/2
        let mixed = StrainPrior {
            positive_fraction: 0.5,
            ..prior
        };
        let c = pair_coverage(&gev, &mixed, &act(1e4, 1e9), 20_000, 1).unwrap();
        assert!((c.probability - 0.75).abs() < 4.0 * c.stderr, "{:?}", c);
    }

    proptest! {
        #[test]
        fn crossing_frequencies_agree(f in -50.0f64..50.0, gap in -50.0f64..50.0, ka in -0.05f64..0.05, kb in -0.05f64..0.05) {
            let a = act(200.0, 1e6);
            let (x, y) = (t(f, ka), t(f + gap, kb));
            if let Ok(v) = crossing_voltage(&x, &y, &a) {
                prop_assert!((x.at(v, &a) - y.at(v, &a)).abs() < 1e-9);
            }
        }

        #[test]
        fn strain_monotone_below_cap(k in 1e-4f64..0.1, v in 0.0f64..100.0, dv in 1e-3f64..1.0) {
            let cap = 1e9;
            prop_assert!(strained_frequency(0.0, k, v + dv, cap) > strained_frequency(0.0, k, v, cap));
            prop_assert!(strained_frequency(0.0, -k, v + dv, cap) < strained_frequency(0.0, -k, v, cap));
        }

        #[test]
        fn plan_size_monotone_in_cap_and_vmax(
            specs in prop::collection::vec((-60.0f64..60.0, -0.05f64..0.05), 1..12),
            cap in 1.0f64..100.0, dcap in 0.0f64..100.0,
            vmax in 1.0f64..100.0, dv in 0.0f64..100.0,
        ) {
            let ts: Vec<Tunable> = specs.iter().map(|&(f, k)| t(f, k)).collect();
            let base = max_mutually_resonant_set(&ts, &act(vmax, cap)).unwrap().size();
            prop_assert!(max_mutually_resonant_set(&ts, &act(vmax, cap + dcap)).unwrap().size() >= base);
            prop_assert!(max_mutually_resonant_set(&ts, &act(vmax + dv, cap)).unwrap().size() >= base);
        }
    }
}
