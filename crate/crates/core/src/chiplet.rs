//! Waveguide arrays over implant grids and defect-free yield.
//!
//! A chiplet is `n_channels` parallel waveguides at the implant pitch. The
//! FIB mask and the waveguide pattern are misaligned by one global `(dx, dy)`
//! (plus an optional small rotation) per chiplet. An emitter belongs to
//! channel `j` when it is stable and its shifted `x` lies within half a
//! waveguide width of the channel axis; `y` only moves it along the guide.
//! A chiplet is defect-free when every channel holds at least
//! `min_emitters_per_channel` emitters.

use std::io::Write;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emitters::Emitter;
use crate::implant::{EmitterSampler, ImplantSpec, ImplantSpot};
use crate::io;
use crate::rng::Streams;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChipletDesign {
    pub n_channels: u32,
    pub waveguide_width_nm: f64,
    pub waveguide_height_nm: f64,
    pub channel_pitch_nm: f64,
    pub min_emitters_per_channel: u32,
}

impl Default for ChipletDesign {
    fn default() -> Self {
        ChipletDesign {
            n_channels: 8,
            waveguide_width_nm: 340.0,
            waveguide_height_nm: 200.0,
            channel_pitch_nm: 1000.0,
            min_emitters_per_channel: 1,
        }
    }
}

impl ChipletDesign {
    pub fn with_channels(&self, n_channels: u32) -> Self {
        ChipletDesign {
            n_channels,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels == 0 {
            return Err(Error::domain("chiplet", "n_channels must be >= 1"));
        }
        if !(self.waveguide_width_nm > 0.0 && self.waveguide_height_nm > 0.0) {
            return Err(Error::domain("chiplet", "waveguide dimensions must be > 0"));
        }
        if !(self.channel_pitch_nm > 0.0) {
            return Err(Error::domain("chiplet", "channel_pitch_nm must be > 0"));
        }
        Ok(())
    }

    pub fn channel_center(&self, j: u32) -> f64 {
        f64::from(j) * self.channel_pitch_nm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentModel {
    /// Per-axis standard deviation of the global mask offset.
    pub sigma_offset_nm: f64,
    pub rotation_mrad_sigma: f64,
}

impl Default for AlignmentModel {
    fn default() -> Self {
        AlignmentModel {
            sigma_offset_nm: 100.0,
            rotation_mrad_sigma: 0.0,
        }
    }
}

impl AlignmentModel {
    pub fn perfect() -> Self {
        AlignmentModel {
            sigma_offset_nm: 0.0,
            rotation_mrad_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_offset_nm >= 0.0 && self.rotation_mrad_sigma >= 0.0) {
            return Err(Error::domain("alignment", "scales must be >= 0"));
        }
        Ok(())
    }

    /// One misalignment realisation for a single fabricated chiplet.
    pub fn sample(&self, seed: u64) -> Result<Misalignment> {
        self.validate()?;
        let normal = |sd: f64| Normal::new(0.0, sd).map_err(|e| Error::domain("alignment", e.to_string()));
        let (offset, rotation) = (normal(self.sigma_offset_nm)?, normal(self.rotation_mrad_sigma * 1e-3)?);
        let mut rng = Streams::new(seed, "chiplet/misalignment").stream(0);
        Ok(Misalignment {
            dx_nm: offset.sample(&mut rng),
            dy_nm: offset.sample(&mut rng),
            rotation_rad: rotation.sample(&mut rng),
        })
    }
}

/// One realisation of the mask-to-pattern misalignment.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Misalignment {
    pub dx_nm: f64,
    pub dy_nm: f64,
    pub rotation_rad: f64,
}

impl Misalignment {
    pub fn shift(dx_nm: f64, dy_nm: f64) -> Self {
        Misalignment {
            dx_nm,
            dy_nm,
            rotation_rad: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YieldEstimate {
    pub yield_fraction: f64,
    pub stderr: f64,
    pub successes: u64,
    pub trials: u64,
}

impl YieldEstimate {
    fn from_counts(successes: u64, trials: u64) -> Self {
        let p = successes as f64 / trials as f64;
        YieldEstimate {
            yield_fraction: p,
            stderr: (p * (1.0 - p) / trials as f64).sqrt(),
            successes,
            trials,
        }
    }
}

/// Per-channel stable-emitter counts for a pure translation.
pub fn count_coupled(design: &ChipletDesign, spots: &[ImplantSpot], offset: (f64, f64)) -> Vec<u32> {
    count_coupled_misaligned(design, spots, Misalignment::shift(offset.0, offset.1), (0.0, 0.0))
}

/// Per-channel counts with rotation about `pivot` applied before the shift.
pub fn count_coupled_misaligned(
    design: &ChipletDesign,
    spots: &[ImplantSpot],
    mis: Misalignment,
    pivot: (f64, f64),
) -> Vec<u32> {
    let mut counts = vec![0u32; design.n_channels as usize];
    for e in spots.iter().flat_map(|s| &s.emitters) {
        if let Some(j) = coupled_channel(design, e, mis, pivot) {
            counts[j as usize] += 1;
        }
    }
    counts
}

/// Channel a stable emitter lands in after misalignment, if any.
pub fn coupled_channel(design: &ChipletDesign, e: &Emitter, mis: Misalignment, pivot: (f64, f64)) -> Option<u32> {
    if !e.stable {
        return None;
    }
    let [x, y, _] = e.position_nm;
    let x = if mis.rotation_rad == 0.0 {
        x
    } else {
        let (sin, cos) = mis.rotation_rad.sin_cos();
        pivot.0 + (x - pivot.0) * cos - (y - pivot.1) * sin
    };
    let x = x + mis.dx_nm;
    let j = (x / design.channel_pitch_nm).round();
    if j < 0.0 || j >= f64::from(design.n_channels) {
        return None;
    }
    ((x - j * design.channel_pitch_nm).abs() <= design.waveguide_width_nm / 2.0).then_some(j as u32)
}

/// Where a coupled emitter came from: `spots[spot].emitters[emitter]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoupledEmitter {
    pub channel: u32,
    pub spot: usize,
    pub emitter: usize,
}

/// Every stable emitter that couples to a channel, ordered by channel and
/// then by position in `spots`.
pub fn coupled_emitters(
    design: &ChipletDesign,
    spots: &[ImplantSpot],
    mis: Misalignment,
    pivot: (f64, f64),
) -> Vec<CoupledEmitter> {
    let mut out: Vec<CoupledEmitter> = spots
        .iter()
        .enumerate()
        .flat_map(|(si, s)| s.emitters.iter().enumerate().map(move |(ei, e)| (si, ei, e)))
        .filter_map(|(spot, emitter, e)| {
            coupled_channel(design, e, mis, pivot).map(|channel| CoupledEmitter { channel, spot, emitter })
        })
        .collect();
    out.sort_by_key(|c| (c.channel, c.spot, c.emitter));
    out
}

/// Centre of the implant grid under the chiplet; rotations act about it.
pub fn rotation_pivot(design: &ChipletDesign, rows: u32, pitch_nm: f64) -> (f64, f64) {
    (
        design.channel_center(design.n_channels - 1) / 2.0,
        f64::from(rows.max(1) - 1) * pitch_nm / 2.0,
    )
}

pub fn is_defect_free(design: &ChipletDesign, counts: &[u32]) -> bool {
    counts.iter().all(|&c| c >= design.min_emitters_per_channel)
}

/// Monte Carlo simulator for one (design, implant, alignment) point.
///
/// Trial `t` draws its misalignment from substream `(t, 0)` and the spot at
/// `(col, row)` from substream `(t, 1 + col·rows + row)`, so the same seed
/// gives paired samples across λ, stable fraction and channel count.
struct YieldSim<'a> {
    design: &'a ChipletDesign,
    implant: &'a ImplantSpec,
    sampler: EmitterSampler<'a>,
    offset: Normal<f64>,
    rotation: Normal<f64>,
    streams: Streams,
}

impl<'a> YieldSim<'a> {
    fn new(design: &'a ChipletDesign, implant: &'a ImplantSpec, alignment: &AlignmentModel, seed: u64) -> Result<Self> {
        design.validate()?;
        alignment.validate()?;
        let normal = |sd: f64| Normal::new(0.0, sd).map_err(|e| Error::domain("alignment", e.to_string()));
        Ok(YieldSim {
            design,
            implant,
            sampler: EmitterSampler::new(implant)?,
            offset: normal(alignment.sigma_offset_nm)?,
            rotation: normal(alignment.rotation_mrad_sigma * 1e-3)?,
            streams: Streams::new(seed, "chiplet/yield"),
        })
    }

    fn trial(&self, t: u64) -> bool {
        let mut rng = self.streams.substream(t, 0);
        let mis = Misalignment {
            dx_nm: self.offset.sample(&mut rng),
            dy_nm: self.offset.sample(&mut rng),
            rotation_rad: self.rotation.sample(&mut rng),
        };
        let rows = self.implant.grid_rows;
        let mut spots = Vec::with_capacity((self.design.n_channels * rows) as usize);
        for col in 0..self.design.n_channels {
            for row in 0..rows {
                let sub = 1 + u64::from(col) * u64::from(rows) + u64::from(row);
                let mut rng = self.streams.substream(t, sub);
                spots.push(self.sampler.spot(col, row, &mut rng));
            }
        }
        let pivot = rotation_pivot(self.design, rows, self.implant.pitch_nm);
        let counts = count_coupled_misaligned(self.design, &spots, mis, pivot);
        is_defect_free(self.design, &counts)
    }

    fn run(&self, trials: u64) -> YieldEstimate {
        let successes = (0..trials).into_par_iter().filter(|&t| self.trial(t)).count() as u64;
        YieldEstimate::from_counts(successes, trials)
    }
}

/// Fraction of simulated chiplets that are defect-free. The implant grid
/// has `n_channels` columns and `implant.grid_rows` rows; `implant.grid_cols`
/// is ignored.
pub fn defect_free_yield(
    design: &ChipletDesign,
    implant: &ImplantSpec,
    alignment: &AlignmentModel,
    trials: u64,
    seed: u64,
) -> Result<YieldEstimate> {
    if trials == 0 {
        return Err(Error::Usage("defect_free_yield needs at least one trial".into()));
    }
    Ok(YieldSim::new(design, implant, alignment, seed)?.run(trials))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationOptions {
    pub lambda_hi: f64,
    pub trials: u64,
    pub yield_tol: f64,
    pub lambda_tol: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            lambda_hi: 20.0,
            trials: 20_000,
            yield_tol: 0.01,
            lambda_tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub lambda: f64,
    pub achieved: YieldEstimate,
    pub evaluations: u32,
}

/// Bisects the mean emitters per spot until the simulated yield is within
/// `yield_tol` of `target_yield`. Every evaluation reuses the same seed, so
/// the empirical yield is monotone in λ and bisection is well posed.
pub fn calibrate_lambda(
    design: &ChipletDesign,
    implant: &ImplantSpec,
    alignment: &AlignmentModel,
    target_yield: f64,
    seed: u64,
    opts: &CalibrationOptions,
) -> Result<Calibration> {
    if !(target_yield > 0.0 && target_yield < 1.0) {
        return Err(Error::domain(
            "calibrate_lambda",
            format!("target yield must be in (0, 1), got {target_yield}"),
        ));
    }
    if !(opts.lambda_hi > 0.0) || opts.trials == 0 {
        return Err(Error::Usage("calibration needs lambda_hi > 0 and trials >= 1".into()));
    }
    let mut evaluations = 0;
    let mut eval = |lambda: f64| -> Result<YieldEstimate> {
        evaluations += 1;
        let spec = ImplantSpec {
            mean_emitters_per_spot: lambda,
            ..implant.clone()
        };
        defect_free_yield(design, &spec, alignment, opts.trials, seed)
    };

    let (mut lo, mut hi) = (0.0, opts.lambda_hi);
    let mut y_lo = eval(lo)?;
    if (y_lo.yield_fraction - target_yield).abs() < opts.yield_tol {
        return Ok(Calibration {
            lambda: lo,
            achieved: y_lo,
            evaluations,
        });
    }
    let mut y_hi = eval(hi)?;
    if (y_hi.yield_fraction - target_yield).abs() < opts.yield_tol {
        return Ok(Calibration {
            lambda: hi,
            achieved: y_hi,
            evaluations,
        });
    }
    if y_hi.yield_fraction < target_yield || y_lo.yield_fraction > target_yield {
        return Err(Error::CalibrationFailed {
            target: target_yield,
            lo,
            hi,
            yield_lo: y_lo.yield_fraction,
            yield_hi: y_hi.yield_fraction,
        });
    }
    while hi - lo >= opts.lambda_tol {
        let mid = 0.5 * (lo + hi);
        let y = eval(mid)?;
        if (y.yield_fraction - target_yield).abs() < opts.yield_tol {
            return Ok(Calibration {
                lambda: mid,
                achieved: y,
                evaluations,
            });
        }
        if y.yield_fraction < target_yield {
            lo = mid;
            y_lo = y;
        } else {
            hi = mid;
            y_hi = y;
        }
    }
    let (lambda, achieved) = if (y_lo.yield_fraction - target_yield).abs() <= (y_hi.yield_fraction - target_yield).abs()
    {
        (lo, y_lo)
    } else {
        (hi, y_hi)
    };
    Ok(Calibration {
        lambda,
        achieved,
        evaluations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct YieldRow {
    pub n_channels: u32,
    pub lambda: f64,
    pub sigma_offset_nm: f64,
    pub threshold: u32,
    pub trials: u64,
    pub estimate: YieldEstimate,
}

/// Yield for several channel counts under shared random numbers.
pub fn yield_vs_channels(
    design: &ChipletDesign,
    implant: &ImplantSpec,
    alignment: &AlignmentModel,
    channel_counts: &[u32],
    trials: u64,
    seed: u64,
) -> Result<Vec<YieldRow>> {
    channel_counts
        .iter()
        .map(|&n| {
            let d = design.with_channels(n);
            let estimate = defect_free_yield(&d, implant, alignment, trials, seed)?;
            Ok(YieldRow {
                n_channels: n,
                lambda: implant.mean_emitters_per_spot,
                sigma_offset_nm: alignment.sigma_offset_nm,
                threshold: design.min_emitters_per_channel,
                trials,
                estimate,
            })
        })
        .collect()
}

pub const YIELD_CSV_HEADER: [&str; 7] = [
    "n_channels",
    "lambda",
    "sigma_offset_nm",
    "threshold",
    "trials",
    "yield",
    "stderr",
];

pub fn write_yield_csv<W: Write>(w: W, rows: &[YieldRow]) -> Result<()> {
    let mut out = io::writer(w, &YIELD_CSV_HEADER)?;
    for r in rows {
        out.write_record([
            r.n_channels.to_string(),
            io::fmt_f64(r.lambda),
            io::fmt_f64(r.sigma_offset_nm),
            r.threshold.to_string(),
            r.trials.to_string(),
            io::fmt_f64(r.estimate.yield_fraction),
            io::fmt_f64(r.estimate.stderr),
        ])?;
    }
    out.flush()?;
    Ok(())
}
