//! Synthetic PLE scans, transmission scans and photon-correlation
//! histograms, and the fits that read linewidths and g²(0) back out.
//!
//! Detunings are in MHz relative to the scan centre; the scan centre itself
//! is a ZPL offset in GHz relative to the species line.

use std::io::{Read, Write};

use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emitters::{g2_model, transmission_lineshape, Emitter, SpeciesParams};
use crate::io;
use crate::lm::{self, LmOptions, Model};
use crate::rng::{derive_seed, StreamRng, Streams};
use crate::{Error, Result};

/// Laser-scan settings. The rate and dwell defaults are not measured values:
/// they are chosen so a 37 MHz GeV line fits to roughly ±3 MHz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub center_offset_ghz: f64,
    pub span_mhz: f64,
    pub n_points: u32,
    pub repeats: u32,
    pub peak_rate_cps: f64,
    pub background_cps: f64,
    /// Dwell per point per repeat.
    pub dwell_s: f64,
    /// Detected rate of the transmitted probe far from resonance.
    pub probe_rate_cps: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            center_offset_ghz: 0.0,
            span_mhz: 600.0,
            n_points: 121,
            repeats: 5000,
            peak_rate_cps: 600.0,
            background_cps: 50.0,
            dwell_s: 20e-6,
            probe_rate_cps: 1e5,
        }
    }
}

impl ScanConfig {
    /// Default scan with the span scaled to the species' typical linewidth.
    pub fn for_species(species: &SpeciesParams) -> Self {
        let typical = 1.7 * species.gamma0_mean_mhz;
        ScanConfig {
            span_mhz: (typical * 11.0 / 100.0).round() * 100.0,
            ..Default::default()
        }
    }

    pub fn centered_on(&self, offset_ghz: f64) -> Self {
        ScanConfig {
            center_offset_ghz: offset_ghz,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.span_mhz > 0.0) {
            return Err(Error::domain("scan", "span_mhz must be > 0"));
        }
        if self.n_points < 5 {
            return Err(Error::domain("scan", "n_points must be >= 5"));
        }
        if self.repeats < 1 {
            return Err(Error::domain("scan", "repeats must be >= 1"));
        }
        for (k, v) in [
            ("peak_rate_cps", self.peak_rate_cps),
            ("background_cps", self.background_cps),
            ("dwell_s", self.dwell_s),
            ("probe_rate_cps", self.probe_rate_cps),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::domain("scan", format!("{k} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn detunings(&self) -> Vec<f64> {
        let n = self.n_points as usize;
        let step = self.span_mhz / (n - 1) as f64;
        (0..n).map(|i| -self.span_mhz / 2.0 + step * i as f64).collect()
    }

    fn exposure_s(&self) -> f64 {
        self.dwell_s * f64::from(self.repeats)
    }

    /// Emitter line position in scan coordinates.
    fn line_center_mhz(&self, emitter: &Emitter) -> f64 {
        (emitter.zpl_offset_ghz - self.center_offset_ghz) * 1000.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub detuning_mhz: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Spectrum {
    pub fn new(detuning_mhz: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        let s = Spectrum { detuning_mhz, counts };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.detuning_mhz.len() != self.counts.len() {
            return Err(Error::InvalidData("detuning and count lengths differ".into()));
        }
        if self.detuning_mhz.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidData("detunings must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: u64) -> Spectrum {
        Spectrum {
            detuning_mhz: self.detuning_mhz.clone(),
            counts: self.counts.iter().map(|c| c * factor).collect(),
        }
    }
}

/// A fitted value and its 1σ uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub center_mhz: Estimate,
    pub gamma_mhz: Estimate,
    /// Negative for a dip.
    pub amplitude: Estimate,
    pub background: Estimate,
    pub converged: bool,
    pub residual_norm: f64,
    pub iterations: usize,
    pub objective_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub delay_bins_ns: Vec<f64>,
    pub coincidences: Vec<u64>,
}

impl CorrelationHistogram {
    pub fn validate(&self) -> Result<()> {
        let n = self.delay_bins_ns.len();
        if n != self.coincidences.len() {
            return Err(Error::InvalidData("delay and coincidence lengths differ".into()));
        }
        let symmetric = (0..n).all(|i| {
            let (a, b) = (self.delay_bins_ns[i], self.delay_bins_ns[n - 1 - i]);
            (a + b).abs() <= 1e-9 * (1.0 + a.abs())
        });
        if !symmetric {
            return Err(Error::InvalidData("delay bins must be symmetric about 0".into()));
        }
        Ok(())
    }
}

fn poisson_draw(mean: f64, rng: &mut StreamRng) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Expected PLE rate at `detuning_mhz` for a line centred at `center_mhz`.
pub fn ple_rate(peak_cps: f64, background_cps: f64, gamma_mhz: f64, center_mhz: f64, detuning_mhz: f64) -> f64 {
    let h = gamma_mhz / 2.0;
    peak_cps * h * h / ((detuning_mhz - center_mhz).powi(2) + h * h) + background_cps
}

pub fn synthesize_ple(emitter: &Emitter, scan: &ScanConfig, seed: u64) -> Result<Spectrum> {
    scan.validate()?;
    emitter.validate()?;
    let gamma = emitter.gamma_mhz();
    let center = scan.line_center_mhz(emitter);
    let exposure = scan.exposure_s();
    let streams = Streams::new(seed, "spectra/ple");
    let detuning = scan.detunings();
    let counts = detuning
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            let mean = ple_rate(scan.peak_rate_cps, scan.background_cps, gamma, center, d) * exposure;
            poisson_draw(mean, &mut streams.stream(i as u64))
        })
        .collect();
    Spectrum::new(detuning, counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Polarity {
    Peak,
    Dip,
}

/// `background + amplitude · (Γ/2)² / ((x − center)² + (Γ/2)²)`,
/// parameters `[center, Γ, amplitude, background]`.
struct Lorentzian;

impl Model for Lorentzian {
    fn n_params(&self) -> usize {
        4
    }

    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        let h = p[1] / 2.0;
        p[3] + p[2] * h * h / ((x - p[0]).powi(2) + h * h)
    }

    fn gradient(&self, x: f64, p: &[f64], g: &mut [f64]) {
        let (c, a) = (p[0], p[2]);
        let h = p[1] / 2.0;
        let u = x - c;
        let d = u * u + h * h;
        g[0] = a * h * h * 2.0 * u / (d * d);
        g[1] = a * h * u * u / (d * d);
        g[2] = h * h / d;
        g[3] = 1.0;
    }

    fn feasible(&self, p: &[f64]) -> bool {
        p[1] > 0.0 && p[1].is_finite()
    }
}

/// Inverse-variance weights `1/c`. Empty bins get the weight of the
/// smallest non-empty bin, which keeps fits invariant under count scaling.
fn poisson_weights(counts: &[u64]) -> Vec<f64> {
    let floor = counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(1);
    counts.iter().map(|&c| 1.0 / c.max(floor) as f64).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of the outermost quarter of points on each side.
fn outer_quartile_median(ys: &[f64]) -> f64 {
    let q = (ys.len() / 4).max(1);
    let outer: Vec<f64> = ys[..q].iter().chain(&ys[ys.len() - q..]).copied().collect();
    median(outer)
}

/// Linear-interpolated half-level crossings walking outward from `idx`.
fn empirical_fwhm(xs: &[f64], ys: &[f64], idx: usize, half: f64, polarity: Polarity) -> f64 {
    let beyond = |y: f64| match polarity {
        Polarity::Peak => y < half,
        Polarity::Dip => y > half,
    };
    let cross = |i: usize, j: usize| {
        let (x0, x1, y0, y1) = (xs[i], xs[j], ys[i], ys[j]);
        if y1 == y0 {
            x1
        } else {
            x0 + (half - y0) * (x1 - x0) / (y1 - y0)
        }
    };
    let left = (0..idx)
        .rev()
        .find(|&i| beyond(ys[i]))
        .map(|i| cross(i + 1, i))
        .unwrap_or(xs[0]);
    let right = (idx + 1..xs.len())
        .find(|&i| beyond(ys[i]))
        .map(|i| cross(i - 1, i))
        .unwrap_or(xs[xs.len() - 1]);
    let step = (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64;
    (right - left).max(step)
}

fn fit_line(detuning: &[f64], counts: &[u64], polarity: Polarity) -> Result<FitResult> {
    if detuning.len() < 5 {
        return Err(Error::Usage("a Lorentzian fit needs at least 5 points".into()));
    }
    let ys: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let weights = poisson_weights(counts);
    let background = outer_quartile_median(&ys);

    // ties resolve to the lowest detuning
    let idx = match polarity {
        Polarity::Peak => (0..ys.len()).fold(0, |best, i| if ys[i] > ys[best] { i } else { best }),
        Polarity::Dip => (0..ys.len()).fold(0, |best, i| if ys[i] < ys[best] { i } else { best }),
    };
    let excess = (ys[idx] - background).abs();
    let threshold = 5.0 * background.max(1.0).sqrt();
    if excess <= threshold {
        return Err(Error::NoPeak { excess, threshold });
    }
    let half = background + (ys[idx] - background) / 2.0;
    let fwhm = empirical_fwhm(detuning, &ys, idx, half, polarity);
    let initial = [detuning[idx], fwhm, ys[idx] - background, background];

    let out = lm::minimize(&Lorentzian, detuning, &ys, &weights, &initial, &LmOptions::default());
    let est = |k: usize| Estimate {
        value: out.params[k],
        sigma: out.sigma(k),
    };
    Ok(FitResult {
        center_mhz: est(0),
        gamma_mhz: est(1),
        amplitude: est(2),
        background: est(3),
        converged: out.converged,
        residual_norm: out.objective.sqrt(),
        iterations: out.iterations,
        objective_trace: out.objective_trace,
    })
}

/// Weighted Lorentzian fit of a PLE peak.
pub fn fit_lorentzian(spectrum: &Spectrum) -> Result<FitResult> {
    spectrum.validate()?;
    fit_line(&spectrum.detuning_mhz, &spectrum.counts, Polarity::Peak)
}

/// Probe transmission scan: raw transmitted counts per point plus a
/// far-detuned reference, integrated for the duration of the whole scan,
/// used for normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmissionScan {
    pub detuning_mhz: Vec<f64>,
    pub counts: Vec<u64>,
    pub reference_counts: u64,
    pub transmission: Vec<f64>,
}

impl TransmissionScan {
    pub fn as_spectrum(&self) -> Spectrum {
        Spectrum {
            detuning_mhz: self.detuning_mhz.clone(),
            counts: self.counts.clone(),
        }
    }
}

pub fn synthesize_transmission_scan(emitter: &Emitter, scan: &ScanConfig, seed: u64) -> Result<TransmissionScan> {
    scan.validate()?;
    emitter.validate()?;
    let gamma = emitter.gamma_mhz();
    let beta_eff = emitter.beta_eff();
    let center = scan.line_center_mhz(emitter);
    let full = scan.probe_rate_cps * scan.exposure_s();
    let streams = Streams::new(seed, "spectra/transmission");
    let detuning = scan.detunings();
    let counts: Vec<u64> = detuning
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            let t = transmission_lineshape(beta_eff, gamma, d - center);
            poisson_draw(t * full, &mut streams.stream(i as u64))
        })
        .collect();
    // the reference integrates for as long as the whole scan
    let n = detuning.len() as f64;
    let far = transmission_lineshape(beta_eff, gamma, 1e4 * gamma);
    let reference_counts = poisson_draw(far * full * n, &mut streams.stream(u64::MAX));
    let norm = (reference_counts as f64 / n).max(f64::MIN_POSITIVE);
    let transmission = counts.iter().map(|&c| c as f64 / norm).collect();
    Ok(TransmissionScan {
        detuning_mhz: detuning,
        counts,
        reference_counts,
        transmission,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DipFit {
    pub fit: FitResult,
    /// Fractional extinction on resonance, `1 − T(0)`.
    pub depth: f64,
    pub depth_sigma: f64,
}

impl DipFit {
    pub fn transmission_on_resonance(&self) -> f64 {
        1.0 - self.depth
    }
}

/// Fits an inverted Lorentzian to the transmitted counts and reports the
/// fractional dip depth relative to the fitted baseline.
pub fn fit_transmission_dip(scan: &TransmissionScan) -> Result<DipFit> {
    let spectrum = scan.as_spectrum();
    spectrum.validate()?;
    let fit = fit_line(&spectrum.detuning_mhz, &spectrum.counts, Polarity::Dip)?;
    let (a, b) = (fit.amplitude, fit.background);
    let depth = -a.value / b.value;
    let depth_sigma = depth.abs() * ((a.sigma / a.value).powi(2) + (b.sigma / b.value).powi(2)).sqrt();
    Ok(DipFit {
        fit,
        depth,
        depth_sigma,
    })
}

/// Parameters for a synthetic coincidence histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct G2Synthesis {
    pub g2_zero: f64,
    pub tau_corr_ns: f64,
    pub bin_width_ns: f64,
    /// Bins on each side of zero delay.
    pub half_bins: u32,
    /// Expected coincidences per bin at long delay.
    pub asymptote_counts: f64,
}

impl Default for G2Synthesis {
    fn default() -> Self {
        G2Synthesis {
            g2_zero: 0.06,
            tau_corr_ns: 5.0,
            bin_width_ns: 0.5,
            half_bins: 100,
            asymptote_counts: 300.0,
        }
    }
}

pub fn synthesize_g2(params: &G2Synthesis, seed: u64) -> Result<CorrelationHistogram> {
    if !(params.g2_zero >= 0.0 && params.tau_corr_ns > 0.0 && params.bin_width_ns > 0.0) {
        return Err(Error::domain(
            "synthesize_g2",
            "need g2_zero >= 0, tau_corr > 0, bin width > 0",
        ));
    }
    if params.half_bins < 3 || !(params.asymptote_counts >= 0.0) {
        return Err(Error::domain(
            "synthesize_g2",
            "need >= 3 bins per side and non-negative counts",
        ));
    }
    let streams = Streams::new(seed, "spectra/g2");
    let h = i64::from(params.half_bins);
    let delay_bins_ns: Vec<f64> = (-h..=h).map(|k| k as f64 * params.bin_width_ns).collect();
    let coincidences = delay_bins_ns
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let mean = params.asymptote_counts * g2_model(t, params.g2_zero, params.tau_corr_ns);
            poisson_draw(mean, &mut streams.stream(i as u64))
        })
        .collect();
    Ok(CorrelationHistogram {
        delay_bins_ns,
        coincidences,
    })
}

/// `asymptote · g²(τ; g2_zero, tau_corr)`, parameters
/// `[asymptote, g2_zero, tau_corr]`.
struct ScaledG2;

impl Model for ScaledG2 {
    fn n_params(&self) -> usize {
        3
    }

    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        p[0] * g2_model(x, p[1], p[2])
    }

    fn gradient(&self, x: f64, p: &[f64], g: &mut [f64]) {
        let e = (-x.abs() / p[2]).exp();
        g[0] = 1.0 - (1.0 - p[1]) * e;
        g[1] = p[0] * e;
        g[2] = -p[0] * (1.0 - p[1]) * e * x.abs() / (p[2] * p[2]);
    }

    fn feasible(&self, p: &[f64]) -> bool {
        p[0] > 0.0 && p[2] > 0.0 && p[2].is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct G2Fit {
    pub g2_zero: Estimate,
    pub tau_corr_ns: Estimate,
    pub asymptote: Estimate,
    /// False when the antibunching dip is not resolved, so the correlation
    /// time is meaningless.
    pub tau_identifiable: bool,
    pub converged: bool,
}

pub fn fit_g2(hist: &CorrelationHistogram) -> Result<G2Fit> {
    hist.validate()?;
    let n = hist.delay_bins_ns.len();
    if n < 7 {
        return Err(Error::Usage("g2 fit needs at least 7 bins".into()));
    }
    if hist.coincidences.iter().all(|&c| c == 0) {
        return Err(Error::DegenerateData("histogram has no coincidences".into()));
    }
    let xs = &hist.delay_bins_ns;
    let ys: Vec<f64> = hist.coincidences.iter().map(|&c| c as f64).collect();
    let weights = poisson_weights(&hist.coincidences);
    let asymptote = outer_quartile_median(&ys);
    if asymptote <= 0.0 {
        return Err(Error::DegenerateData("zero asymptotic coincidence level".into()));
    }
    let zero = (0..n).min_by(|&a, &b| xs[a].abs().total_cmp(&xs[b].abs())).unwrap_or(0);
    let g0 = (ys[zero] / asymptote).max(0.0);
    let max_delay = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let level = asymptote * (1.0 - (1.0 - g0) / std::f64::consts::E);
    let tau0 = if g0 < 0.9 {
        (zero..n)
            .find(|&i| xs[i] > 0.0 && ys[i] >= level)
            .map(|i| xs[i])
            .unwrap_or(max_delay / 4.0)
    } else {
        max_delay / 4.0
    };

    let out = lm::minimize(
        &ScaledG2,
        xs,
        &ys,
        &weights,
        &[asymptote, g0, tau0.max(1e-9)],
        &LmOptions::default(),
    );
    let est = |k: usize| Estimate {
        value: out.params[k],
        sigma: out.sigma(k),
    };
    let (g2_zero, tau) = (est(1), est(2));
    let dip = 1.0 - g2_zero.value;
    let tau_identifiable = dip > 3.0 * g2_zero.sigma && tau.sigma.is_finite() && tau.sigma < tau.value;
    Ok(G2Fit {
        g2_zero,
        tau_corr_ns: tau,
        asymptote: est(0),
        tau_identifiable,
        converged: out.converged,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinewidthRow {
    pub channel: u32,
    pub gamma_mhz: f64,
    pub gamma_err: f64,
    pub gamma0_mhz: f64,
    pub ratio: f64,
    pub center_offset_ghz: f64,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinewidthReport {
    pub rows: Vec<LinewidthRow>,
    pub mean_gamma_mhz: f64,
    pub std_gamma_mhz: f64,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    /// Max minus min ZPL offset across channels.
    pub inhom_spread_ghz: f64,
    /// The synthesized scan behind each row, in scan coordinates of that
    /// channel.
    pub spectra: Vec<Option<Spectrum>>,
}

/// Synthesises and fits one PLE scan per channel (scan centred on each
/// emitter's line) and aggregates the fitted linewidths.
pub fn chiplet_linewidth_report(emitters: &[Emitter], scan: &ScanConfig, seed: u64) -> Result<LinewidthReport> {
    if emitters.is_empty() {
        return Err(Error::Usage("linewidth report needs at least one channel".into()));
    }
    scan.validate()?;
    let per_channel: Vec<(LinewidthRow, Option<Spectrum>)> = emitters
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let channel_scan = scan.centered_on(e.zpl_offset_ghz);
            let channel_seed = derive_seed(seed, &format!("ple/channel/{i}"));
            let gamma0 = e.gamma0_mhz();
            let failed = |err: Error| LinewidthRow {
                channel: i as u32,
                gamma_mhz: f64::NAN,
                gamma_err: f64::NAN,
                gamma0_mhz: gamma0,
                ratio: f64::NAN,
                center_offset_ghz: e.zpl_offset_ghz,
                converged: false,
                error: Some(err.to_string()),
            };
            let spectrum = match synthesize_ple(e, &channel_scan, channel_seed) {
                Ok(s) => s,
                Err(err) => return (failed(err), None),
            };
            let row = match fit_lorentzian(&spectrum) {
                Ok(f) => LinewidthRow {
                    channel: i as u32,
                    gamma_mhz: f.gamma_mhz.value,
                    gamma_err: f.gamma_mhz.sigma,
                    gamma0_mhz: gamma0,
                    ratio: f.gamma_mhz.value / gamma0,
                    center_offset_ghz: channel_scan.center_offset_ghz + f.center_mhz.value / 1000.0,
                    converged: f.converged,
                    error: None,
                },
                Err(err) => failed(err),
            };
            (row, Some(spectrum))
        })
        .collect();
    let (rows, spectra): (Vec<LinewidthRow>, Vec<Option<Spectrum>>) = per_channel.into_iter().unzip();

    let good: Vec<&LinewidthRow> = rows.iter().filter(|r| r.converged).collect();
    let gammas: Vec<f64> = good.iter().map(|r| r.gamma_mhz).collect();
    let ratios: Vec<f64> = good.iter().map(|r| r.ratio).collect();
    let (mean_gamma_mhz, std_gamma_mhz) = mean_std(&gammas);
    let (mean_ratio, std_ratio) = mean_std(&ratios);
    let (lo, hi) = emitters.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
        (lo.min(e.zpl_offset_ghz), hi.max(e.zpl_offset_ghz))
    });
    Ok(LinewidthReport {
        rows,
        mean_gamma_mhz,
        std_gamma_mhz,
        mean_ratio,
        std_ratio,
        inhom_spread_ghz: hi - lo,
        spectra,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

pub const SPECTRUM_CSV_HEADER: [&str; 2] = ["detuning_mhz", "counts"];
pub const FIT_REPORT_CSV_HEADER: [&str; 7] = [
    "channel",
    "gamma_mhz",
    "gamma_err",
    "gamma0_mhz",
    "ratio",
    "center_offset_ghz",
    "converged",
];
pub const HISTOGRAM_CSV_HEADER: [&str; 2] = ["delay_ns", "coincidences"];

pub fn write_spectrum_csv<W: Write>(w: W, s: &Spectrum) -> Result<()> {
    let mut out = io::writer(w, &SPECTRUM_CSV_HEADER)?;
    for (d, c) in s.detuning_mhz.iter().zip(&s.counts) {
        out.write_record([io::fmt_f64(*d), c.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_spectrum_csv<R: Read>(r: R) -> Result<Spectrum> {
    let mut rdr = io::reader(r, &SPECTRUM_CSV_HEADER)?;
    let (mut d, mut c) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        d.push(io::field(&rec, 0, "detuning_mhz")?);
        c.push(io::field(&rec, 1, "counts")?);
    }
    Spectrum::new(d, c)
}

pub fn write_fit_report_csv<W: Write>(w: W, rows: &[LinewidthRow]) -> Result<()> {
    let mut out = io::writer(w, &FIT_REPORT_CSV_HEADER)?;
    for r in rows {
        out.write_record([
            r.channel.to_string(),
            io::fmt_f64(r.gamma_mhz),
            io::fmt_f64(r.gamma_err),
            io::fmt_f64(r.gamma0_mhz),
            io::fmt_f64(r.ratio),
            io::fmt_f64(r.center_offset_ghz),
            io::fmt_bool(r.converged).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_fit_report_csv<R: Read>(r: R) -> Result<Vec<LinewidthRow>> {
    let mut rdr = io::reader(r, &FIT_REPORT_CSV_HEADER)?;
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            Ok(LinewidthRow {
                channel: io::field(&rec, 0, "channel")?,
                gamma_mhz: io::field(&rec, 1, "gamma_mhz")?,
                gamma_err: io::field(&rec, 2, "gamma_err")?,
                gamma0_mhz: io::field(&rec, 3, "gamma0_mhz")?,
                ratio: io::field(&rec, 4, "ratio")?,
                center_offset_ghz: io::field(&rec, 5, "center_offset_ghz")?,
                converged: io::parse_bool(&rec, 6, "converged")?,
                error: None,
            })
        })
        .collect()
}

pub fn write_histogram_csv<W: Write>(w: W, h: &CorrelationHistogram) -> Result<()> {
    let mut out = io::writer(w, &HISTOGRAM_CSV_HEADER)?;
    for (d, c) in h.delay_bins_ns.iter().zip(&h.coincidences) {
        out.write_record([io::fmt_f64(*d), c.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_histogram_csv<R: Read>(r: R) -> Result<CorrelationHistogram> {
    let mut rdr = io::reader(r, &HISTOGRAM_CSV_HEADER)?;
    let (mut d, mut c) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        d.push(io::field(&rec, 0, "delay_ns")?);
        c.push(io::field(&rec, 1, "coincidences")?);
    }
    let h = CorrelationHistogram {
        delay_bins_ns: d,
        coincidences: c,
    };
    h.validate()?;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emitters::{lifetime_for_linewidth, Species};
    use proptest::prelude::*;

    /// Emitter with Γ₀ = 24 MHz and total linewidth `gamma`.
    fn emitter(gamma: f64) -> Emitter {
        let tau = lifetime_for_linewidth(24.0).unwrap();
        Emitter::new(Species::GeV, tau, (gamma - 24.0) / 2.0)
    }

    fn exact_spectrum(gamma: f64, scale: f64) -> Spectrum {
        let scan = ScanConfig::default();
        let d = scan.detunings();
        let counts = d
            .iter()
            .map(|&x| (scale * ple_rate(1.0, 0.1, gamma, 3.0, x)).round() as u64)
            .collect();
        Spectrum::new(d, counts).unwrap()
    }

    #[test]
    fn flat_background_when_dark() {
        let scan = ScanConfig {
            peak_rate_cps: 0.0,
            ..Default::default()
        };
        let s = synthesize_ple(&emitter(37.0), &scan, 1).unwrap();
        assert!(matches!(fit_lorentzian(&s), Err(Error::NoPeak { .. })));
    }

    #[test]
    fn lineshape_maximum_and_half_width() {
        assert_eq!(ple_rate(600.0, 50.0, 37.0, 0.0, 0.0), 650.0);
        assert!((ple_rate(1.0, 0.0, 37.0, 0.0, 18.5) - 0.5).abs() < 1e-15);
        assert!((ple_rate(1.0, 0.0, 37.0, 0.0, -18.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn noiseless_fit_recovers_width() {
        let f = fit_lorentzian(&exact_spectrum(37.0, 1e6)).unwrap();
        assert!(f.converged);
        assert!((f.gamma_mhz.value - 37.0).abs() < 0.1);
        assert!((f.center_mhz.value - 3.0).abs() < 0.1);
    }

    #[test]
    fn objective_never_increases() {
        let s = synthesize_ple(&emitter(37.0), &ScanConfig::default(), 5).unwrap();
        let f = fit_lorentzian(&s).unwrap();
        assert!(f.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn count_scaling_leaves_shape_unchanged() {
        let s = synthesize_ple(&emitter(37.0), &ScanConfig::default(), 8).unwrap();
        let a = fit_lorentzian(&s).unwrap();
        let b = fit_lorentzian(&s.scaled(7)).unwrap();
        let rel = |x: f64, y: f64| ((x - y) / x).abs();
        assert!(rel(a.gamma_mhz.value, b.gamma_mhz.value) < 1e-6);
        assert!((a.center_mhz.value - b.center_mhz.value).abs() < 1e-6 * a.gamma_mhz.value);
    }

    #[test]
    fn default_scan_uncertainty() {
        let s = synthesize_ple(&emitter(37.0), &ScanConfig::default(), 2).unwrap();
        let f = fit_lorentzian(&s).unwrap();
        assert!(f.converged);
        assert!((f.gamma_mhz.value - 37.0).abs() < 3.0 * f.gamma_mhz.sigma);
        assert!((2.0..4.5).contains(&f.gamma_mhz.sigma), "sigma {}", f.gamma_mhz.sigma);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let s = Spectrum::new(vec![0.0, 1.0, 2.0], vec![1, 5, 1]).unwrap();
        assert!(fit_lorentzian(&s).is_err());
        assert!(Spectrum::new(vec![0.0, 0.0], vec![1, 1]).is_err());
    }

    #[test]
    fn transmission_without_coupling_is_flat() {
        let s = synthesize_transmission_scan(&emitter(37.0), &ScanConfig::default(), 3).unwrap();
        let mean = s.transmission.iter().sum::<f64>() / s.transmission.len() as f64;
        assert!((mean - 1.0).abs() < 0.01);
    }

    #[test]
    fn transmission_dip_depth() {
        // β_ideal chosen so that β_eff = 0.213 at Γ = 37, Γ₀ = 24
        let mut e = emitter(37.0);
        e.beta_ideal = 0.213 * 37.0 / 24.0;
        let s = synthesize_transmission_scan(&e, &ScanConfig::default(), 4).unwrap();
        let dip = fit_transmission_dip(&s).unwrap();
        assert!((dip.depth - 0.38).abs() < 0.02, "depth {}", dip.depth);
        assert!((dip.fit.gamma_mhz.value - 37.0).abs() < 3.0);
    }

    #[test]
    fn bright_probe_recovers_analytic_transmission() {
        let mut e = emitter(37.0);
        e.beta_ideal = 0.5;
        let scan = ScanConfig {
            probe_rate_cps: 1e12,
            ..Default::default()
        };
        let s = synthesize_transmission_scan(&e, &scan, 6).unwrap();
        let exact = crate::emitters::transmission_spectrum(&e, &s.detuning_mhz).unwrap();
        for (a, b) in s.transmission.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn g2_recovery() {
        for (g0, tol) in [(0.06, 0.02), (0.19, 0.07)] {
            let p = G2Synthesis {
                g2_zero: g0,
                ..Default::default()
            };
            let h = synthesize_g2(&p, 9).unwrap();
            let f = fit_g2(&h).unwrap();
            assert!(f.converged);
            assert!((f.g2_zero.value - g0).abs() < tol, "{g0}: {:?}", f.g2_zero);
            assert!(f.tau_identifiable);
        }
    }

    #[test]
    fn flat_g2_is_unidentifiable() {
        let h = CorrelationHistogram {
            delay_bins_ns: (-10..=10).map(f64::from).collect(),
            coincidences: vec![100; 21],
        };
        let f = fit_g2(&h).unwrap();
        assert!((f.g2_zero.value - 1.0).abs() < 1e-6);
        assert!(!f.tau_identifiable);
    }

    #[test]
    fn g2_degenerate_inputs() {
        let empty = CorrelationHistogram {
            delay_bins_ns: (-5..=5).map(f64::from).collect(),
            coincidences: vec![0; 11],
        };
        assert!(matches!(fit_g2(&empty), Err(Error::DegenerateData(_))));
        let short = CorrelationHistogram {
            delay_bins_ns: vec![-1.0, 0.0, 1.0],
            coincidences: vec![5, 0, 5],
        };
        assert!(fit_g2(&short).is_err());
        let lopsided = CorrelationHistogram {
            delay_bins_ns: vec![-1.0, 0.0, 2.0],
            coincidences: vec![5, 0, 5],
        };
        assert!(lopsided.validate().is_err());
    }

    #[test]
    fn lifetime_limited_chiplet_ratio_is_one() {
        let emitters: Vec<Emitter> = (0..8)
            .map(|i| {
                let mut e = emitter(24.0);
                e.zpl_offset_ghz = f64::from(i) * 3.0;
                e
            })
            .collect();
        let r = chiplet_linewidth_report(&emitters, &ScanConfig::default(), 1).unwrap();
        assert!(r.rows.iter().all(|r| r.converged));
        assert!((r.mean_ratio - 1.0).abs() < 0.1, "{}", r.mean_ratio);
        assert!((r.inhom_spread_ghz - 21.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trips() {
        let s = synthesize_ple(&emitter(37.0), &ScanConfig::default(), 5).unwrap();
        let mut buf = Vec::new();
        write_spectrum_csv(&mut buf, &s).unwrap();
        assert_eq!(read_spectrum_csv(buf.as_slice()).unwrap(), s);

        let h = synthesize_g2(&G2Synthesis::default(), 2).unwrap();
        let mut buf = Vec::new();
        write_histogram_csv(&mut buf, &h).unwrap();
        assert_eq!(read_histogram_csv(buf.as_slice()).unwrap(), h);
    }

    proptest! {
        #[test]
        fn detuning_grid_round_trips_through_csv(span in 1.0f64..5000.0, n in 5u32..300) {
            let scan = ScanConfig { span_mhz: span, n_points: n, ..Default::default() };
            let s = Spectrum::new(scan.detunings(), vec![0; n as usize]).unwrap();
            let mut buf = Vec::new();
            write_spectrum_csv(&mut buf, &s).unwrap();
            let back = read_spectrum_csv(buf.as_slice()).unwrap();
            prop_assert!(back.detuning_mhz.iter().zip(&s.detuning_mhz).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
