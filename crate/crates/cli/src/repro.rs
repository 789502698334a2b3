//! The reproduction report: every quantitative claim the simulator is meant
//! to match, recomputed from canonical inputs.
//!
//! Each claim holds a reference value, the simulated value and a tolerance,
//! and passes iff `|simulated − reference| ≤ tolerance`. One-sided or
//! structural checks are encoded as indicators (reference 1, tolerance 0).
//! Everything uses default model parameters except the actuator, which is
//! taken from the run config so that tuning limits can be explored.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use chipletsim_core::assembly::{calibrate_rolloff, coupling_efficiency, offset_penalty_db, simulate_assembly};
use chipletsim_core::chiplet::{calibrate_lambda, defect_free_yield, CalibrationOptions};
use chipletsim_core::emitters::{
    background_to_g2, correct_beta, extinction_to_coupling, lifetime_for_linewidth, lifetime_limited_linewidth,
    total_linewidth, Emitter, Species,
};
use chipletsim_core::implant::{sample_emitters, FWHM_PER_SIGMA};
use chipletsim_core::io::{fmt_bool, fmt_f64, writer};
use chipletsim_core::rng::{derive_seed, Streams};
use chipletsim_core::spectra::{
    chiplet_linewidth_report, fit_g2, fit_lorentzian, synthesize_g2, synthesize_ple, G2Synthesis,
};
use chipletsim_core::tuning::{
    crossing_voltage, max_mutually_resonant_set, max_resonant_pairs, pair_coverage, sample_inhomogeneous,
    strained_frequency, StrainPrior, Tunable,
};
use chipletsim_core::{
    ActuatorConfig, AlignmentModel, ChipletDesign, ImplantSpec, PlacementModel, ScanConfig, SpeciesParams, TaperModel,
};
use rand::Rng;

use crate::config::RunConfig;
use crate::oracles;
use crate::pipeline::{run_pipeline, PipelineError, Stage};

pub const REPORT_CSV: &str = "repro_report.csv";
pub const REPORT_CSV_HEADER: [&str; 5] = ["claim", "reference", "simulated", "tolerance", "pass"];

#[derive(Clone, Debug, PartialEq)]
pub struct Claim {
    pub id: String,
    pub reference: f64,
    pub simulated: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Claim {
    pub fn new(id: &str, reference: f64, simulated: f64, tolerance: f64) -> Self {
        Claim {
            id: id.to_string(),
            reference,
            simulated,
            tolerance,
            // NaN compares false, so failed computations fail the claim
            pass: (simulated - reference).abs() <= tolerance,
        }
    }

    pub fn indicator(id: &str, holds: bool) -> Self {
        Claim::new(id, 1.0, if holds { 1.0 } else { 0.0 }, 0.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReproReport {
    pub claims: Vec<Claim>,
}

impl ReproReport {
    pub fn all_pass(&self) -> bool {
        self.claims.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Claim> {
        self.claims.iter().filter(|c| !c.pass)
    }

    pub fn get(&self, id: &str) -> Option<&Claim> {
        self.claims.iter().find(|c| c.id == id)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), PipelineError> {
        let io = |source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        };
        let f = BufWriter::new(File::create(path).map_err(io)?);
        let core = |source| PipelineError::Core {
            context: REPORT_CSV.into(),
            source,
        };
        let mut out = writer(f, &REPORT_CSV_HEADER).map_err(core)?;
        for c in &self.claims {
            out.write_record([
                c.id.clone(),
                fmt_f64(c.reference),
                fmt_f64(c.simulated),
                fmt_f64(c.tolerance),
                fmt_bool(c.pass).to_string(),
            ])
            .map_err(|e| core(e.into()))?;
        }
        out.flush().map_err(io)
    }
}

fn or_nan<T>(r: chipletsim_core::Result<T>, f: impl FnOnce(T) -> f64) -> f64 {
    r.map(f).unwrap_or(f64::NAN)
}

/// Runs the full pipeline into `cfg.output_dir`, evaluates every claim,
/// writes the claim table and adds it to the manifest.
pub fn reproduce(cfg: &RunConfig) -> Result<ReproReport, PipelineError> {
    let mut manifest = run_pipeline(cfg, &Stage::ALL)?;
    let report = evaluate_claims(cfg.seed, &cfg.actuator);
    let dir = cfg.output_dir.as_path();
    report.write_csv(&dir.join(REPORT_CSV))?;
    manifest.record(dir, REPORT_CSV)?;
    manifest.write(dir)?;
    Ok(report)
}

pub fn evaluate_claims(seed: u64, actuator: &ActuatorConfig) -> ReproReport {
    let seed_for = |label: &str| derive_seed(seed, &format!("reproduce/{label}"));
    let mut claims = Vec::new();
    coupling_claims(&mut claims);
    yield_claims(&mut claims, &seed_for);
    assembly_claims(&mut claims, &seed_for);
    spectra_claims(&mut claims, &seed_for);
    tuning_claims(&mut claims, &seed_for, actuator);
    ReproReport { claims }
}

fn coupling_claims(claims: &mut Vec<Claim>) {
    let fig = extinction_to_coupling(0.62);
    claims.push(Claim::new(
        "extinction_to_coupling: beta",
        0.213,
        fig.as_ref().map_or(f64::NAN, |f| f.beta_observed),
        0.001,
    ));
    claims.push(Claim::new(
        "extinction_to_coupling: C",
        0.270,
        fig.as_ref().map_or(f64::NAN, |f| f.cooperativity),
        0.001,
    ));
    for gamma in [35.0, 37.0, 40.0] {
        let b = or_nan(correct_beta(0.21, gamma, 24.0, 0.6), |c| c.beta_dipole);
        // band [0.51, 0.59] around 0.55
        claims.push(Claim::new(
            &format!("correct_beta: beta_dipole at {gamma} MHz"),
            0.55,
            b,
            0.04,
        ));
    }
    claims.push(Claim::new(
        "lifetime_limited_linewidth: 6.63 ns",
        24.0,
        or_nan(lifetime_limited_linewidth(6.63), |g| g),
        0.1,
    ));
    claims.push(Claim::new(
        "total_linewidth: (24, 6.5)",
        37.0,
        or_nan(total_linewidth(24.0, 6.5), |g| g),
        1e-9,
    ));
    claims.push(Claim::new(
        "background_to_g2: 18 dB",
        0.031,
        background_to_g2(18.0),
        0.001,
    ));
}

fn yield_claims(claims: &mut Vec<Claim>, seed_for: &dyn Fn(&str) -> u64) {
    let design = ChipletDesign::default();
    let spec = ImplantSpec::new(SpeciesParams::gev());
    let alignment = AlignmentModel::default();
    let trials = 100_000;

    let cal = calibrate_lambda(
        &design,
        &spec,
        &alignment,
        0.40,
        seed_for("calibrate"),
        &CalibrationOptions::default(),
    );
    let (y8, y16) = match &cal {
        Ok(c) => {
            let calibrated = ImplantSpec {
                mean_emitters_per_spot: c.lambda,
                ..spec.clone()
            };
            let seed = seed_for("yield");
            (
                defect_free_yield(&design, &calibrated, &alignment, trials, seed).ok(),
                defect_free_yield(&design.with_channels(16), &calibrated, &alignment, trials, seed).ok(),
            )
        }
        Err(_) => (None, None),
    };
    claims.push(Claim::new(
        "yield: calibrated 8-channel",
        0.40,
        y8.map_or(f64::NAN, |y| y.yield_fraction),
        0.02,
    ));
    let lower = match (y8, y16) {
        (Some(a), Some(b)) => a.yield_fraction - b.yield_fraction >= 3.0 * a.stderr.hypot(b.stderr),
        _ => false,
    };
    claims.push(Claim::indicator("yield: 16-channel below 8-channel", lower));

    // perfectly aligned chiplets: channels fill independently, so the yield
    // is (1 − e^{−λ})^8 with the per-channel probability 0.4^{1/8}
    let p_channel = 0.4f64.powf(1.0 / 8.0);
    let lambda = -(1.0 - p_channel).ln();
    let independent = ImplantSpec {
        mean_emitters_per_spot: lambda,
        ..spec
    };
    let closed = (0..8).fold(1.0, |acc, _| acc * p_channel);
    let sim = defect_free_yield(
        &design,
        &independent,
        &AlignmentModel::perfect(),
        trials,
        seed_for("independent"),
    );
    let sigma = (closed * (1.0 - closed) / trials as f64).sqrt();
    claims.push(Claim::new(
        "yield: independent channels",
        closed,
        or_nan(sim, |y| y.yield_fraction),
        3.0 * sigma,
    ));
}

fn assembly_claims(claims: &mut Vec<Claim>, seed_for: &dyn Fn(&str) -> u64) {
    let taper = TaperModel::default();
    let eta = |offset: f64| or_nan(coupling_efficiency(offset, &taper, 602.0), |e| e);
    claims.push(Claim::new(
        "taper: rolloff width",
        117.07,
        or_nan(calibrate_rolloff(38.0, 0.10), |w| w),
        0.01,
    ));
    claims.push(Claim::new(
        "taper: efficiency ratio at 38 nm",
        0.900,
        eta(38.0) / eta(0.0),
        0.001,
    ));
    claims.push(Claim::new(
        "taper: penalty at 38 nm (dB)",
        0.458,
        offset_penalty_db(38.0, &taper),
        0.002,
    ));
    claims.push(Claim::new("taper: eta0 at 602 nm", 0.97, eta(0.0), 1e-12));

    let sockets = 100_000;
    let (placed, mean, std) = match simulate_assembly(sockets, &PlacementModel::default(), &taper, seed_for("assembly"))
    {
        Ok(out) => {
            let offsets: Vec<f64> = out.iter().filter_map(|s| s.offset_nm).collect();
            let n = offsets.len() as f64;
            let m = offsets.iter().sum::<f64>() / n;
            let v = offsets.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            (n / f64::from(sockets), m, v.sqrt())
        }
        Err(_) => (f64::NAN, f64::NAN, f64::NAN),
    };
    claims.push(Claim::new("assembly: placed fraction", 0.900, placed, 0.003));
    claims.push(Claim::new("assembly: offset mean (nm)", 38.0, mean, 0.2));
    claims.push(Claim::new("assembly: offset std (nm)", 16.0, std, 0.2));
}

fn spectra_claims(claims: &mut Vec<Claim>, seed_for: &dyn Fn(&str) -> u64) {
    // Γ = 37 MHz from Γ₀ = 24 MHz and Γ_d = 6.5 MHz
    let line = Emitter::new(Species::GeV, lifetime_for_linewidth(24.0).expect("positive"), 6.5);
    let scan = ScanConfig::default();
    let base = seed_for("fit");
    let (mut covered, mut sigma_sum, mut n) = (0u32, 0.0, 0u32);
    for t in 0..200u64 {
        if let Ok(fit) =
            synthesize_ple(&line, &scan, derive_seed(base, &t.to_string())).and_then(|s| fit_lorentzian(&s))
        {
            n += 1;
            sigma_sum += fit.gamma_mhz.sigma;
            if (fit.gamma_mhz.value - line.gamma_mhz()).abs() <= 3.0 * fit.gamma_mhz.sigma {
                covered += 1;
            }
        }
    }
    claims.push(Claim::indicator(
        "fit_lorentzian: 3-sigma coverage >= 95%",
        covered >= 190,
    ));
    claims.push(Claim::new(
        "fit_lorentzian: gamma sigma (MHz)",
        3.0,
        sigma_sum / f64::from(n.max(1)),
        1.0,
    ));

    for (g0, tol) in [(0.06, 0.02), (0.19, 0.07)] {
        let params = G2Synthesis {
            g2_zero: g0,
            ..G2Synthesis::default()
        };
        let got = synthesize_g2(&params, seed_for(&format!("g2/{g0}"))).and_then(|h| fit_g2(&h));
        claims.push(Claim::new(
            &format!("fit_g2: g2(0) = {g0}"),
            g0,
            or_nan(got, |f| f.g2_zero.value),
            tol,
        ));
    }

    let population = |species: SpeciesParams, label: &str| -> (f64, f64) {
        let scan = ScanConfig::for_species(&species);
        let spec = ImplantSpec::new(species);
        let (mut g, mut r, mut n) = (0.0, 0.0, 0.0);
        for t in 0..20u64 {
            let s = seed_for(&format!("{label}/{t}"));
            if let Ok(rep) = sample_emitters(&spec, 8, s).and_then(|e| chiplet_linewidth_report(&e, &scan, s)) {
                g += rep.mean_gamma_mhz;
                r += rep.mean_ratio;
                n += 1.0;
            }
        }
        (g / n, r / n)
    };
    let (gev_gamma, gev_ratio) = population(SpeciesParams::gev(), "chiplet/gev");
    let (siv_gamma, _) = population(SpeciesParams::siv(), "chiplet/siv");
    claims.push(Claim::new(
        "chiplet_linewidth_report: GeV mean gamma (MHz)",
        54.0,
        gev_gamma,
        10.0,
    ));
    claims.push(Claim::new(
        "chiplet_linewidth_report: GeV mean ratio",
        1.7,
        gev_ratio,
        0.3,
    ));
    claims.push(Claim::new(
        "chiplet_linewidth_report: SiV mean gamma (MHz)",
        146.0,
        siv_gamma,
        15.0,
    ));

    for (species, reference, tol) in [(SpeciesParams::gev(), 85.0, 2.0), (SpeciesParams::siv(), 30.0, 1.0)] {
        let fwhm = or_nan(
            sample_inhomogeneous(&species, 100_000, seed_for(&format!("inhom/{}", species.name))),
            |v| {
                let n = v.len() as f64;
                let m = v.iter().sum::<f64>() / n;
                FWHM_PER_SIGMA * (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            },
        );
        claims.push(Claim::new(
            &format!("sample_inhomogeneous: {} FWHM (GHz)", species.name),
            reference,
            fwhm,
            tol,
        ));
    }
}

fn tuning_claims(claims: &mut Vec<Claim>, seed_for: &dyn Fn(&str) -> u64, actuator: &ActuatorConfig) {
    // a 10 GHz gap closed by a 0.016660 GHz/V² difference in response
    let a = Tunable {
        f0_ghz: 0.0,
        k_ghz_per_v2: 0.016660,
    };
    let b = Tunable {
        f0_ghz: 10.0,
        k_ghz_per_v2: 0.0,
    };
    let v = crossing_voltage(&a, &b, actuator).unwrap_or(f64::NAN);
    claims.push(Claim::new("crossing_voltage: 10 GHz gap (V)", 24.5, v, 0.01));
    let gap = (strained_frequency(a.f0_ghz, a.k_ghz_per_v2, v, actuator.cap_ghz)
        - strained_frequency(b.f0_ghz, b.k_ghz_per_v2, v, actuator.cap_ghz))
    .abs();
    claims.push(Claim::indicator("crossing_voltage: lines coincide", gap < 1e-9));

    // |k|·V² = 250 GHz saturates at the 100 GHz stiction cap
    let k = 250.0 / (actuator.v_max * actuator.v_max);
    claims.push(Claim::new(
        "strained_frequency: saturated shift (GHz)",
        100.0,
        strained_frequency(0.0, k, actuator.v_max, actuator.cap_ghz),
        1e-9,
    ));
    claims.push(Claim::indicator(
        "tuning range exceeds GeV inhomogeneous spread",
        actuator.cap_ghz >= SpeciesParams::gev().inhom_spread_ghz,
    ));

    let prior = StrainPrior::default();
    let expected = oracles::pair_coverage_quadrature(&SpeciesParams::gev(), &prior, actuator, 400);
    let mc = pair_coverage(&SpeciesParams::gev(), &prior, actuator, 200_000, seed_for("coverage"));
    claims.push(Claim::new(
        "pair_coverage: GeV against quadrature",
        expected,
        or_nan(mc, |c| c.probability),
        0.01,
    ));

    claims.push(Claim::indicator(
        "max_mutually_resonant_set and max_resonant_pairs: exhaustive oracles",
        optimizers_match_oracles(seed_for("oracles"), 1000),
    ));
}

/// Runs both planners on `instances` random problems with at most ten
/// emitters and compares them with exhaustive search.
pub fn optimizers_match_oracles(seed: u64, instances: u64) -> bool {
    let streams = Streams::new(seed, "oracles");
    (0..instances).all(|i| {
        let mut rng = streams.stream(i);
        let n = rng.gen_range(1..=10);
        // coarse rest frequencies make shared endpoints common
        let coarse = rng.gen_bool(0.3);
        let emitters: Vec<Tunable> = (0..n)
            .map(|_| {
                let f0_ghz = if coarse {
                    f64::from(rng.gen_range(-5..=5)) * 10.0
                } else {
                    rng.gen_range(-60.0..60.0)
                };
                let k_ghz_per_v2 = if rng.gen_bool(0.1) {
                    0.0
                } else {
                    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    sign * 0.0167 * 10f64.powf(rng.gen_range(-0.5..0.5))
                };
                Tunable { f0_ghz, k_ghz_per_v2 }
            })
            .collect();
        let act = ActuatorConfig {
            v_max: [20.0, 50.0, 100.0][rng.gen_range(0..3)],
            cap_ghz: [5.0, 30.0, 100.0][rng.gen_range(0..3)],
            electrode_gap_um: 1.5,
        };
        let intervals: Vec<(f64, f64)> = emitters.iter().map(|t| oracles::interval(t, &act)).collect();
        let adjacent: Vec<Vec<bool>> = intervals
            .iter()
            .map(|a| intervals.iter().map(|b| a.0 <= b.1 && b.0 <= a.1).collect())
            .collect();
        let (x, size) = oracles::brute_force_stabbing(&intervals);
        let plan_ok = max_mutually_resonant_set(&emitters, &act)
            .is_ok_and(|p| p.size() == size && p.target_freq_ghz == x && p.verify(&act).is_ok());
        let pairs_ok = max_resonant_pairs(&emitters, &act).is_ok_and(|pairs| {
            let mut used = vec![false; n];
            pairs.len() == oracles::brute_force_matching(&adjacent)
                && pairs.iter().all(|p| {
                    let fresh = !used[p.a] && !used[p.b] && adjacent[p.a][p.b];
                    used[p.a] = true;
                    used[p.b] = true;
                    fresh
                })
        });
        plan_ok && pairs_ok
    })
}
