//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

use std::time::Instant;

use chipletsim_cli::repro::optimizers_match_oracles;
use chipletsim_cli::{reproduce, RunConfig};
use chipletsim_core::assembly::{calibrate_rolloff, coupling_efficiency, offset_penalty_db, simulate_assembly};
use chipletsim_core::chiplet::{calibrate_lambda, defect_free_yield, CalibrationOptions};
use chipletsim_core::emitters::{
    background_to_g2, correct_beta, extinction_to_coupling, lifetime_for_linewidth, lifetime_limited_linewidth,
    total_linewidth, Emitter, Species,
};
use chipletsim_core::implant::{sample_emitters, FWHM_PER_SIGMA};
use chipletsim_core::spectra::{
    chiplet_linewidth_report, fit_g2, fit_lorentzian, synthesize_g2, synthesize_ple, G2Synthesis,
};
use chipletsim_core::tuning::{crossing_voltage, sample_inhomogeneous, strained_frequency, Tunable};
use chipletsim_core::{
    ActuatorConfig, AlignmentModel, ChipletDesign, ImplantSpec, PlacementModel, ScanConfig, SpeciesParams, TaperModel,
};

type Outcome = (bool, String);
type Check = fn() -> Outcome;

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

fn extinction_inversion() -> Outcome {
    let f = extinction_to_coupling(0.62).unwrap();
    (
        within(f.beta_observed, 0.213, 0.001) && within(f.cooperativity, 0.270, 0.001),
        format!("beta {:.6}, C {:.6}", f.beta_observed, f.cooperativity),
    )
}

fn corrected_coupling() -> Outcome {
    let b: Vec<f64> = [35.0, 37.0, 40.0]
        .iter()
        .map(|&g| correct_beta(0.21, g, 24.0, 0.6).unwrap().beta_dipole)
        .collect();
    let ok =
        b.iter().all(|x| (0.51..=0.59).contains(x)) && b.iter().any(|&x| x <= 0.55) && b.iter().any(|&x| x >= 0.55);
    (ok, format!("beta_dipole {b:.4?}"))
}

fn linewidth_algebra() -> Outcome {
    let g0 = lifetime_limited_linewidth(6.63).unwrap();
    let g = total_linewidth(24.0, 6.5).unwrap();
    (
        within(g0, 24.0, 0.1) && within(g, 37.0, 1e-9),
        format!("gamma0 {g0:.4} MHz, gamma {g} MHz"),
    )
}

fn yield_calibration() -> Outcome {
    let design = ChipletDesign::default();
    let spec = ImplantSpec::new(SpeciesParams::gev());
    let alignment = AlignmentModel::default();
    let cal = calibrate_lambda(&design, &spec, &alignment, 0.40, 11, &CalibrationOptions::default()).unwrap();
    let spec = ImplantSpec {
        mean_emitters_per_spot: cal.lambda,
        ..spec
    };
    let y8 = defect_free_yield(&design, &spec, &alignment, 100_000, 12).unwrap();
    let y16 = defect_free_yield(&design.with_channels(16), &spec, &alignment, 100_000, 12).unwrap();
    let gap = (y8.yield_fraction - y16.yield_fraction) / y8.stderr.hypot(y16.stderr);
    (
        within(y8.yield_fraction, 0.40, 0.02) && gap >= 3.0,
        format!(
            "lambda {:.4}, Y8 {:.4}, Y16 {:.4}, gap {gap:.1} sigma",
            cal.lambda, y8.yield_fraction, y16.yield_fraction
        ),
    )
}

fn independent_channels() -> Outcome {
    let p = 0.4f64.powf(1.0 / 8.0);
    let closed = (0..8).fold(1.0, |acc, _| acc * p);
    let spec = ImplantSpec {
        mean_emitters_per_spot: -(1.0 - p).ln(),
        ..ImplantSpec::new(SpeciesParams::gev())
    };
    let trials = 100_000;
    let y = defect_free_yield(&ChipletDesign::default(), &spec, &AlignmentModel::perfect(), trials, 13).unwrap();
    let sigma = (closed * (1.0 - closed) / trials as f64).sqrt();
    (
        within(p, 0.8918, 5e-5) && within(y.yield_fraction, closed, 3.0 * sigma),
        format!(
            "p_channel {p:.5}, simulated {:.5} vs {closed:.5} (3 sigma {:.5})",
            y.yield_fraction,
            3.0 * sigma
        ),
    )
}

fn coupling_rolloff() -> Outcome {
    let w = calibrate_rolloff(38.0, 0.10).unwrap();
    let taper = TaperModel::default();
    let eta0 = coupling_efficiency(0.0, &taper, 602.0).unwrap();
    let ratio = coupling_efficiency(38.0, &taper, 602.0).unwrap() / eta0;
    let db = offset_penalty_db(38.0, &taper);
    (
        within(w, 117.07, 0.01) && within(ratio, 0.900, 0.001) && within(db, 0.458, 0.002) && within(eta0, 0.97, 1e-12),
        format!("w {w:.4} nm, ratio {ratio:.5}, penalty {db:.5} dB, eta0 {eta0}"),
    )
}

fn assembly_statistics() -> Outcome {
    let sockets = 100_000;
    let out = simulate_assembly(sockets, &PlacementModel::default(), &TaperModel::default(), 14).unwrap();
    let offsets: Vec<f64> = out.iter().filter_map(|s| s.offset_nm).collect();
    let n = offsets.len() as f64;
    let mean = offsets.iter().sum::<f64>() / n;
    let std = (offsets.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    let placed = n / f64::from(sockets);
    (
        within(placed, 0.900, 0.003) && within(mean, 38.0, 0.2) && within(std, 16.0, 0.2),
        format!("placed {placed:.4}, offset {mean:.3} ± {std:.3} nm"),
    )
}

fn fit_coverage() -> Outcome {
    let line = Emitter::new(Species::GeV, lifetime_for_linewidth(24.0).unwrap(), 6.5);
    let scan = ScanConfig::default();
    let (mut covered, mut sigma_sum) = (0, 0.0);
    for seed in 1000..1200 {
        let fit = fit_lorentzian(&synthesize_ple(&line, &scan, seed).unwrap()).unwrap();
        if (fit.gamma_mhz.value - 37.0).abs() <= 3.0 * fit.gamma_mhz.sigma {
            covered += 1;
        }
        sigma_sum += fit.gamma_mhz.sigma;
    }
    let mean_sigma = sigma_sum / 200.0;
    (
        covered >= 190 && within(mean_sigma, 3.0, 1.0),
        format!("covered {covered}/200, mean sigma {mean_sigma:.3} MHz"),
    )
}

fn g2_recovery() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (g0, tol, seed) in [(0.06, 0.02, 15), (0.19, 0.07, 16)] {
        let params = G2Synthesis {
            g2_zero: g0,
            ..G2Synthesis::default()
        };
        let fit = fit_g2(&synthesize_g2(&params, seed).unwrap()).unwrap();
        ok &= within(fit.g2_zero.value, g0, tol);
        detail.push(format!("{g0} -> {:.4}", fit.g2_zero.value));
    }
    (ok, detail.join(", "))
}

fn background_purity() -> Outcome {
    let g = background_to_g2(18.0);
    (within(g, 0.031, 0.001), format!("g2(0) {g:.6}"))
}

fn population(species: SpeciesParams, seeds: std::ops::Range<u64>) -> (f64, f64) {
    let scan = ScanConfig::for_species(&species);
    let spec = ImplantSpec::new(species);
    let n = (seeds.end - seeds.start) as f64;
    let (mut g, mut r) = (0.0, 0.0);
    for seed in seeds {
        let rep = chiplet_linewidth_report(&sample_emitters(&spec, 8, seed).unwrap(), &scan, seed).unwrap();
        g += rep.mean_gamma_mhz;
        r += rep.mean_ratio;
    }
    (g / n, r / n)
}

fn chiplet_statistics() -> Outcome {
    let (gev, ratio) = population(SpeciesParams::gev(), 100..120);
    let (siv, _) = population(SpeciesParams::siv(), 100..120);
    (
        (44.0..=64.0).contains(&gev) && (1.4..=2.0).contains(&ratio) && (131.0..=161.0).contains(&siv),
        format!("GeV gamma {gev:.2} MHz ratio {ratio:.3}, SiV gamma {siv:.2} MHz"),
    )
}

fn inhomogeneous_sampling() -> Outcome {
    let fwhm = |species: &SpeciesParams| {
        let v = sample_inhomogeneous(species, 100_000, 17).unwrap();
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        FWHM_PER_SIGMA * (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let (gev, siv) = (fwhm(&SpeciesParams::gev()), fwhm(&SpeciesParams::siv()));
    (
        within(gev, 85.0, 2.0) && within(siv, 30.0, 1.0),
        format!("GeV {gev:.3} GHz, SiV {siv:.3} GHz"),
    )
}

fn tuning_anchors() -> Outcome {
    let act = ActuatorConfig::default();
    let a = Tunable {
        f0_ghz: 0.0,
        k_ghz_per_v2: 0.016660,
    };
    let b = Tunable {
        f0_ghz: 10.0,
        k_ghz_per_v2: 0.0,
    };
    let v = crossing_voltage(&a, &b, &act).unwrap();
    let gap = (strained_frequency(a.f0_ghz, a.k_ghz_per_v2, v, act.cap_ghz)
        - strained_frequency(b.f0_ghz, b.k_ghz_per_v2, v, act.cap_ghz))
    .abs();
    (
        within(v, 24.5, 0.01) && gap < 1e-9,
        format!("V {v:.5}, residual gap {gap:e} GHz"),
    )
}

fn optimizer_oracles() -> Outcome {
    (optimizers_match_oracles(18, 1000), "1000 instances, n <= 10".into())
}

fn determinism() -> Outcome {
    let started = Instant::now();
    let run = |threads: usize| -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            seed: 42,
            output_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| reproduce(&cfg)).unwrap();
        std::fs::read(dir.path().join("manifest.json")).unwrap()
    };
    let n = std::thread::available_parallelism().map_or(4, |n| n.get()).max(4);
    let one = run(1);
    let many = run(n);
    let secs = started.elapsed().as_secs_f64();
    (
        one == many && secs < 300.0,
        format!(
            "1 vs {n} threads: manifests {}, {secs:.1} s",
            if one == many { "identical" } else { "differ" }
        ),
    )
}

fn main() {
    let criteria: [(&str, Check); 15] = [
        ("extinction inversion", extinction_inversion),
        ("corrected coupling", corrected_coupling),
        ("linewidth algebra", linewidth_algebra),
        ("yield calibration", yield_calibration),
        ("independent-channel oracle", independent_channels),
        ("coupling roll-off", coupling_rolloff),
        ("assembly statistics", assembly_statistics),
        ("fit recovery coverage", fit_coverage),
        ("g2 recovery", g2_recovery),
        ("background to purity", background_purity),
        ("chiplet statistics", chiplet_statistics),
        ("inhomogeneous sampling", inhomogeneous_sampling),
        ("tuning anchors", tuning_anchors),
        ("optimizer oracles", optimizer_oracles),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (ok, detail) = match std::panic::catch_unwind(check) {
            Ok(outcome) => outcome,
            Err(_) => (false, "panicked".into()),
        };
        println!("{} {:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" }, i + 1);
        failed += usize::from(!ok);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
