//! Stage orchestration: implant → chiplet → assembly → spectra → tuning.
//!
//! Stages talk to each other only through CSV files in the output
//! directory. A stage whose inputs are neither produced earlier in the same
//! run nor already on disk fails with [`PipelineError::MissingDependency`].
//! Each stage draws from its own seed, `derive_seed(seed, stage name)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chipletsim_core::assembly::{read_assembly_placed, simulate_assembly, write_assembly_csv, SocketOutcome};
use chipletsim_core::chiplet::{
    calibrate_lambda, coupled_emitters, rotation_pivot, write_yield_csv, yield_vs_channels, Calibration,
    CalibrationOptions,
};
use chipletsim_core::emitters::{extinction_to_coupling, Emitter};
use chipletsim_core::implant::{generate_spots, read_spots_csv, write_spots_csv, ImplantSpot};
use chipletsim_core::io::{field, fmt_f64, reader, writer};
use chipletsim_core::rng::{derive_seed, Streams};
use chipletsim_core::spectra::{
    chiplet_linewidth_report, fit_g2, fit_transmission_dip, read_fit_report_csv, synthesize_g2,
    synthesize_transmission_scan, write_fit_report_csv, write_histogram_csv, write_spectrum_csv, G2Synthesis,
};
use chipletsim_core::tuning::{
    max_mutually_resonant_set, max_resonant_pairs, pair_coverage, write_coverage_csv, write_plan_csv, Tunable,
};
use chipletsim_core::ImplantSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";

pub const SPOTS_CSV: &str = "spots.csv";
pub const COUPLED_CSV: &str = "coupled.csv";
pub const CALIBRATION_CSV: &str = "calibration.csv";
pub const YIELD_CSV: &str = "yield.csv";
pub const ASSEMBLY_CSV: &str = "assembly.csv";
pub const ASSEMBLY_SUMMARY_CSV: &str = "assembly_summary.csv";
pub const FIT_REPORT_CSV: &str = "fit_report.csv";
pub const TRANSMISSION_CSV: &str = "transmission.csv";
pub const G2_CSV: &str = "g2_histogram.csv";
pub const SPECTRA_SUMMARY_CSV: &str = "spectra_summary.csv";
pub const PLAN_CSV: &str = "plan.csv";
pub const PAIRS_CSV: &str = "pairs.csv";
pub const COVERAGE_CSV: &str = "coverage.csv";

pub const COUPLED_CSV_HEADER: [&str; 4] = ["channel", "spot_col", "spot_row", "emitter_idx"];
pub const CALIBRATION_CSV_HEADER: [&str; 6] = [
    "target_yield",
    "lambda",
    "achieved_yield",
    "stderr",
    "trials",
    "evaluations",
];
pub const SUMMARY_CSV_HEADER: [&str; 2] = ["metric", "value"];
pub const TRANSMISSION_CSV_HEADER: [&str; 3] = ["detuning_mhz", "counts", "transmission"];
pub const PAIRS_CSV_HEADER: [&str; 3] = ["channel_a", "channel_b", "target_freq_ghz"];

pub fn spectrum_csv(channel: u32) -> String {
    format!("spectrum_ch{channel}.csv")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Implant,
    Chiplet,
    Assembly,
    Spectra,
    Tuning,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Implant,
        Stage::Chiplet,
        Stage::Assembly,
        Stage::Spectra,
        Stage::Tuning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Implant => "implant",
            Stage::Chiplet => "chiplet",
            Stage::Assembly => "assembly",
            Stage::Spectra => "spectra",
            Stage::Tuning => "tuning",
        }
    }

    /// Files the stage reads and the stage that writes each of them.
    pub fn inputs(self) -> &'static [(&'static str, Stage)] {
        match self {
            Stage::Implant => &[],
            Stage::Chiplet => &[(SPOTS_CSV, Stage::Implant)],
            Stage::Assembly => &[(COUPLED_CSV, Stage::Chiplet)],
            Stage::Spectra => &[(SPOTS_CSV, Stage::Implant), (COUPLED_CSV, Stage::Chiplet)],
            Stage::Tuning => &[(FIT_REPORT_CSV, Stage::Spectra)],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| PipelineError::UnknownStage(s.to_string()))
    }
}

/// Parses a comma-separated stage list; `all` selects every stage.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>, PipelineError> {
    if list.trim() == "all" {
        return Ok(Stage::ALL.to_vec());
    }
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("unknown stage {0:?}; expected one of implant, chiplet, assembly, spectra, tuning")]
    UnknownStage(String),
    #[error("stage {stage} needs {file} (written by stage {producer}), which is missing from {dir}")]
    MissingDependency {
        stage: Stage,
        file: &'static str,
        producer: Stage,
        dir: PathBuf,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{context}: {source}")]
    Core {
        context: String,
        source: chipletsim_core::Error,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

trait Context<T> {
    fn context(self, what: impl fmt::Display) -> Result<T, PipelineError>;
}

impl<T> Context<T> for chipletsim_core::Result<T> {
    fn context(self, what: impl fmt::Display) -> Result<T, PipelineError> {
        self.map_err(|source| PipelineError::Core {
            context: what.to_string(),
            source,
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Content hashes of every file a run wrote. Deliberately free of
/// timestamps and absolute paths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub seed: u64,
    pub config_sha256: String,
    pub stages: Vec<String>,
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    fn new(cfg: &RunConfig, stages: &[Stage]) -> Self {
        Manifest {
            generator: format!("chipletsim {}", env!("CARGO_PKG_VERSION")),
            seed: cfg.seed,
            config_sha256: sha256_hex(cfg.canonical_json().as_bytes()),
            stages: stages.iter().map(|s| s.name().to_string()).collect(),
            files: Vec::new(),
        }
    }

    /// Hashes `dir/name` and records it, replacing any earlier entry.
    pub fn record(&mut self, dir: &Path, name: &str) -> Result<(), PipelineError> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        self.files.retain(|e| e.path != name);
        self.files.push(ManifestEntry {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        let path = dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn read(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    written: Vec<String>,
}

impl Ctx<'_> {
    fn seed(&self, stage: Stage) -> u64 {
        derive_seed(self.cfg.seed, stage.name())
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>, PipelineError> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(io_err(&path))?;
        self.written.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    fn open(&self, name: &str) -> Result<BufReader<File>, PipelineError> {
        let path = self.dir.join(name);
        File::open(&path).map(BufReader::new).map_err(io_err(&path))
    }

    fn summary(&mut self, name: &str, rows: &[(&str, f64)]) -> Result<(), PipelineError> {
        let f = self.create(name)?;
        let mut out = writer(f, &SUMMARY_CSV_HEADER).context(name)?;
        for (k, v) in rows {
            out.write_record([k.to_string(), fmt_f64(*v)])
                .map_err(chipletsim_core::Error::from)
                .context(name)?;
        }
        out.flush().map_err(io_err(&self.dir.join(name)))
    }
}

/// Runs `stages` (in dependency order, duplicates ignored) and writes the
/// manifest.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage]) -> Result<Manifest, PipelineError> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ordered: Vec<Stage> = stages.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();

    for &stage in &ordered {
        for &(file, producer) in stage.inputs() {
            if !ordered.contains(&producer) && !dir.join(file).is_file() {
                return Err(PipelineError::MissingDependency {
                    stage,
                    file,
                    producer,
                    dir: dir.to_path_buf(),
                });
            }
        }
    }

    let mut ctx = Ctx {
        cfg,
        dir,
        written: Vec::new(),
    };
    for &stage in &ordered {
        match stage {
            Stage::Implant => implant_stage(&mut ctx)?,
            Stage::Chiplet => chiplet_stage(&mut ctx)?,
            Stage::Assembly => assembly_stage(&mut ctx)?,
            Stage::Spectra => spectra_stage(&mut ctx)?,
            Stage::Tuning => tuning_stage(&mut ctx)?,
        }
    }

    let mut manifest = Manifest::new(cfg, &ordered);
    for name in &ctx.written {
        manifest.record(dir, name)?;
    }
    manifest.write(dir)?;
    Ok(manifest)
}

fn implant_stage(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let spec = ctx.cfg.implant_spec();
    let spots = generate_spots(&spec, ctx.seed(Stage::Implant)).context("implant")?;
    let f = ctx.create(SPOTS_CSV)?;
    write_spots_csv(f, &spots).context(SPOTS_CSV)
}

fn read_spots(ctx: &Ctx, spec: &ImplantSpec) -> Result<Vec<ImplantSpot>, PipelineError> {
    read_spots_csv(ctx.open(SPOTS_CSV)?, spec).context(SPOTS_CSV)
}

/// `(channel, spot_col, spot_row, emitter_idx)` rows of the coupling table.
fn read_coupled(ctx: &Ctx) -> Result<Vec<[u32; 4]>, PipelineError> {
    let mut rdr = reader(ctx.open(COUPLED_CSV)?, &COUPLED_CSV_HEADER).context(COUPLED_CSV)?;
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(chipletsim_core::Error::from).context(COUPLED_CSV)?;
            let mut row = [0u32; 4];
            for (i, name) in COUPLED_CSV_HEADER.iter().enumerate() {
                row[i] = field(&rec, i, name).context(COUPLED_CSV)?;
            }
            Ok(row)
        })
        .collect()
}

fn chiplet_stage(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let seed = ctx.seed(Stage::Chiplet);
    let spec = cfg.implant_spec();
    let design = cfg.design();
    let alignment = cfg.alignment();

    // the one chiplet cut from this implant grid
    let spots = read_spots(ctx, &spec)?;
    let mis = alignment.sample(derive_seed(seed, "misalignment")).context("chiplet")?;
    let pivot = rotation_pivot(&design, spec.grid_rows, spec.pitch_nm);
    let coupled = coupled_emitters(&design, &spots, mis, pivot);
    {
        let f = ctx.create(COUPLED_CSV)?;
        let mut out = writer(f, &COUPLED_CSV_HEADER).context(COUPLED_CSV)?;
        for c in &coupled {
            let s = &spots[c.spot];
            out.write_record([
                c.channel.to_string(),
                s.col.to_string(),
                s.row.to_string(),
                c.emitter.to_string(),
            ])
            .map_err(chipletsim_core::Error::from)
            .context(COUPLED_CSV)?;
        }
        out.flush().map_err(io_err(&ctx.dir.join(COUPLED_CSV)))?;
    }

    let mut yield_spec = spec.clone();
    if let Some(target) = cfg.chiplet.target_yield {
        let opts = CalibrationOptions {
            trials: cfg.trials,
            ..CalibrationOptions::default()
        };
        let cal = calibrate_lambda(
            &design,
            &spec,
            &alignment,
            target,
            derive_seed(seed, "calibration"),
            &opts,
        )
        .context("calibrate_lambda")?;
        let f = ctx.create(CALIBRATION_CSV)?;
        write_calibration_csv(f, target, &cal).map_err(io_err(&ctx.dir.join(CALIBRATION_CSV)))?;
        yield_spec.mean_emitters_per_spot = cal.lambda;
    }

    let rows = yield_vs_channels(
        &design,
        &yield_spec,
        &alignment,
        &cfg.chiplet.channel_counts,
        cfg.trials,
        derive_seed(seed, "yield"),
    )
    .context("yield_vs_channels")?;
    let f = ctx.create(YIELD_CSV)?;
    write_yield_csv(f, &rows).context(YIELD_CSV)
}

pub fn write_calibration_csv<W: Write>(w: W, target: f64, cal: &Calibration) -> std::io::Result<()> {
    let mut out = writer(w, &CALIBRATION_CSV_HEADER).map_err(std::io::Error::other)?;
    out.write_record([
        fmt_f64(target),
        fmt_f64(cal.lambda),
        fmt_f64(cal.achieved.yield_fraction),
        fmt_f64(cal.achieved.stderr),
        cal.achieved.trials.to_string(),
        cal.evaluations.to_string(),
    ])?;
    out.flush()
}

fn assembly_stage(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let a = &cfg.assembly;
    let populated: BTreeSet<u32> = read_coupled(ctx)?.iter().map(|r| r[0]).collect();
    let sockets =
        simulate_assembly(a.sockets, &a.placement, &a.taper, ctx.seed(Stage::Assembly)).context("assembly")?;
    {
        let f = ctx.create(ASSEMBLY_CSV)?;
        write_assembly_csv(f, &sockets, &a.budget, &a.taper).context(ASSEMBLY_CSV)?;
    }
    // re-read what was written so the summary reflects the file on disk
    let placed_flags = read_assembly_placed(ctx.open(ASSEMBLY_CSV)?).context(ASSEMBLY_CSV)?;
    let placed = placed_flags.iter().filter(|(_, p)| *p).count();
    let offsets: Vec<f64> = sockets.iter().filter_map(|s: &SocketOutcome| s.offset_nm).collect();
    let (mean, std) = mean_std(&offsets);
    let live = populated.len() as f64;
    ctx.summary(
        ASSEMBLY_SUMMARY_CSV,
        &[
            ("sockets", f64::from(a.sockets)),
            ("placed_fraction", placed as f64 / f64::from(a.sockets)),
            ("offset_mean_nm", mean),
            ("offset_std_nm", std),
            ("live_channels_per_chiplet", live),
            ("live_channels_total", live * placed as f64),
        ],
    )
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    (
        m,
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt(),
    )
}

/// First coupled emitter of every populated channel, by channel.
fn channel_emitters(ctx: &Ctx) -> Result<Vec<(u32, Emitter)>, PipelineError> {
    let spots = read_spots(ctx, &ctx.cfg.implant_spec())?;
    let by_pos: BTreeMap<(u32, u32), &ImplantSpot> = spots.iter().map(|s| ((s.col, s.row), s)).collect();
    let mut out: Vec<(u32, Emitter)> = Vec::new();
    for [channel, col, row, idx] in read_coupled(ctx)? {
        if out.last().is_some_and(|(c, _)| *c == channel) {
            continue;
        }
        let e = by_pos
            .get(&(col, row))
            .and_then(|s| s.emitters.get(idx as usize))
            .ok_or_else(|| PipelineError::Core {
                context: COUPLED_CSV.to_string(),
                source: chipletsim_core::Error::InvalidData(format!(
                    "emitter {idx} of spot ({col}, {row}) is not in {SPOTS_CSV}"
                )),
            })?;
        out.push((channel, e.clone()));
    }
    Ok(out)
}

fn spectra_stage(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let seed = ctx.seed(Stage::Spectra);
    let channels = channel_emitters(ctx)?;
    let emitters: Vec<Emitter> = channels.iter().map(|(_, e)| e.clone()).collect();

    let mut metrics: Vec<(&str, f64)> = vec![("channels_measured", channels.len() as f64)];
    if emitters.is_empty() {
        let f = ctx.create(FIT_REPORT_CSV)?;
        write_fit_report_csv(f, &[]).context(FIT_REPORT_CSV)?;
    } else {
        let mut report =
            chiplet_linewidth_report(&emitters, &cfg.scan, derive_seed(seed, "ple")).context("linewidth report")?;
        for (row, (channel, _)) in report.rows.iter_mut().zip(&channels) {
            row.channel = *channel;
        }
        for ((channel, _), spectrum) in channels.iter().zip(&report.spectra) {
            if let Some(s) = spectrum {
                let f = ctx.create(&spectrum_csv(*channel))?;
                write_spectrum_csv(f, s).context("spectrum")?;
            }
        }
        let f = ctx.create(FIT_REPORT_CSV)?;
        write_fit_report_csv(f, &report.rows).context(FIT_REPORT_CSV)?;
        metrics.extend([
            ("mean_gamma_mhz", report.mean_gamma_mhz),
            ("std_gamma_mhz", report.std_gamma_mhz),
            ("mean_ratio", report.mean_ratio),
            ("std_ratio", report.std_ratio),
            ("inhom_spread_ghz", report.inhom_spread_ghz),
        ]);

        // resonant transmission through the first populated channel
        let scan = cfg.scan.centered_on(emitters[0].zpl_offset_ghz);
        let tx = synthesize_transmission_scan(&emitters[0], &scan, derive_seed(seed, "transmission"))
            .context("transmission scan")?;
        {
            let f = ctx.create(TRANSMISSION_CSV)?;
            let mut out = writer(f, &TRANSMISSION_CSV_HEADER).context(TRANSMISSION_CSV)?;
            for ((d, c), t) in tx.detuning_mhz.iter().zip(&tx.counts).zip(&tx.transmission) {
                out.write_record([fmt_f64(*d), c.to_string(), fmt_f64(*t)])
                    .map_err(chipletsim_core::Error::from)
                    .context(TRANSMISSION_CSV)?;
            }
            out.flush().map_err(io_err(&ctx.dir.join(TRANSMISSION_CSV)))?;
        }
        let (t0, beta, coop) = match fit_transmission_dip(&tx) {
            Ok(dip) => {
                let t0 = dip.transmission_on_resonance();
                match extinction_to_coupling(t0) {
                    Ok(c) => (t0, c.beta_observed, c.cooperativity),
                    Err(_) => (t0, f64::NAN, f64::NAN),
                }
            }
            Err(_) => (f64::NAN, f64::NAN, f64::NAN),
        };
        metrics.extend([
            ("transmission_on_resonance", t0),
            ("beta_observed", beta),
            ("cooperativity", coop),
        ]);
    }

    let hist = synthesize_g2(&G2Synthesis::default(), derive_seed(seed, "g2")).context("g2 synthesis")?;
    {
        let f = ctx.create(G2_CSV)?;
        write_histogram_csv(f, &hist).context(G2_CSV)?;
    }
    let g2 = fit_g2(&hist).context("g2 fit")?;
    metrics.extend([
        ("g2_zero", g2.g2_zero.value),
        ("g2_zero_err", g2.g2_zero.sigma),
        ("g2_tau_corr_ns", g2.tau_corr_ns.value),
    ]);
    ctx.summary(SPECTRA_SUMMARY_CSV, &metrics)
}

fn tuning_stage(ctx: &mut Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let seed = ctx.seed(Stage::Tuning);
    let rows = read_fit_report_csv(ctx.open(FIT_REPORT_CSV)?).context(FIT_REPORT_CSV)?;
    // strain response is not measured upstream; each channel draws its own
    let strain = Streams::new(seed, "tuning/strain");
    let prior = &cfg.implant.strain;
    let good: Vec<_> = rows.iter().filter(|r| r.converged).collect();
    let emitters: Vec<Tunable> = good
        .iter()
        .map(|r| Tunable {
            f0_ghz: r.center_offset_ghz,
            k_ghz_per_v2: prior.sample(&mut strain.stream(u64::from(r.channel))),
        })
        .collect();

    let plan_file = ctx.create(PLAN_CSV)?;
    let pairs_file = ctx.create(PAIRS_CSV)?;
    let mut pairs_out = writer(pairs_file, &PAIRS_CSV_HEADER).context(PAIRS_CSV)?;
    if emitters.is_empty() {
        write_plan_csv(
            plan_file,
            &chipletsim_core::TuningPlan {
                target_freq_ghz: f64::NAN,
                members: Vec::new(),
            },
        )
        .context(PLAN_CSV)?;
    } else {
        let mut plan = max_mutually_resonant_set(&emitters, &cfg.actuator).context("resonant set")?;
        for m in &mut plan.members {
            m.emitter_id = good[m.emitter_id].channel as usize;
        }
        write_plan_csv(plan_file, &plan).context(PLAN_CSV)?;
        for p in max_resonant_pairs(&emitters, &cfg.actuator).context("resonant pairs")? {
            pairs_out
                .write_record([
                    good[p.a].channel.to_string(),
                    good[p.b].channel.to_string(),
                    fmt_f64(p.target_freq_ghz),
                ])
                .map_err(chipletsim_core::Error::from)
                .context(PAIRS_CSV)?;
        }
    }
    pairs_out.flush().map_err(io_err(&ctx.dir.join(PAIRS_CSV)))?;

    let coverage = pair_coverage(
        &cfg.species,
        prior,
        &cfg.actuator,
        cfg.trials,
        derive_seed(seed, "coverage"),
    )
    .context("pair coverage")?;
    let f = ctx.create(COVERAGE_CSV)?;
    write_coverage_csv(f, &[(cfg.species.clone(), cfg.actuator.clone(), coverage)]).context(COVERAGE_CSV)
}
