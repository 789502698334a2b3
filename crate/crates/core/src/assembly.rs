//! Pick-and-place transfer, taper coupling and per-channel efficiency budgets.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal as StatNormal};

use crate::io;
use crate::rng::Streams;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaperPoint {
    pub wavelength_nm: f64,
    pub eta0: f64,
}

/// Diamond-to-AlN inverse-taper efficiency with a Gaussian roll-off in
/// transverse offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaperModel {
    pub eta0_by_wavelength: Vec<TaperPoint>,
    pub rolloff_w_nm: f64,
}

impl Default for TaperModel {
    fn default() -> Self {
        TaperModel {
            eta0_by_wavelength: vec![
                TaperPoint {
                    wavelength_nm: 602.0,
                    eta0: 0.97,
                },
                TaperPoint {
                    wavelength_nm: 737.0,
                    eta0: 0.98,
                },
            ],
            rolloff_w_nm: calibrate_rolloff(38.0, 0.10).expect("valid reference point"),
        }
    }
}

impl TaperModel {
    pub fn eta0(&self, wavelength_nm: f64) -> Result<f64> {
        self.eta0_by_wavelength
            .iter()
            .find(|p| (p.wavelength_nm - wavelength_nm).abs() < 1e-6)
            .map(|p| p.eta0)
            .ok_or(Error::UnknownWavelength(wavelength_nm))
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta0_by_wavelength.is_empty() {
            return Err(Error::domain("taper", "at least one wavelength is required"));
        }
        for p in &self.eta0_by_wavelength {
            if !(p.eta0 > 0.0 && p.eta0 <= 1.0) {
                return Err(Error::domain(
                    "taper",
                    format!("eta0 at {} nm must be in (0, 1]", p.wavelength_nm),
                ));
            }
        }
        if !(self.rolloff_w_nm > 0.0) {
            return Err(Error::domain("taper", "rolloff_w_nm must be > 0"));
        }
        Ok(())
    }
}

/// Transfer statistics. `offset_mean_nm` and `offset_std_nm` are the
/// moments of the placement-error *magnitude*, which is non-negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementModel {
    pub success_prob: f64,
    pub offset_mean_nm: f64,
    pub offset_std_nm: f64,
}

impl Default for PlacementModel {
    fn default() -> Self {
        PlacementModel {
            success_prob: 0.90,
            offset_mean_nm: 38.0,
            offset_std_nm: 16.0,
        }
    }
}

impl PlacementModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.success_prob) {
            return Err(Error::domain("placement", "success_prob must be in [0, 1]"));
        }
        if !(self.offset_std_nm >= 0.0) {
            return Err(Error::domain("placement", "offset_std_nm must be >= 0"));
        }
        if !(self.offset_mean_nm > self.offset_std_nm) {
            return Err(Error::domain(
                "placement",
                "a zero-truncated normal needs offset_mean_nm > offset_std_nm",
            ));
        }
        Ok(())
    }

    /// Location and scale of the parent normal whose zero-truncation has the
    /// configured mean and standard deviation.
    pub fn parent_normal(&self) -> Result<(f64, f64)> {
        self.validate()?;
        let (m, s) = (self.offset_mean_nm, self.offset_std_nm);
        if s == 0.0 {
            return Ok((m, 0.0));
        }
        let std_normal = StatNormal::standard();
        let (mut mu, mut sigma) = (m, s);
        for _ in 0..500 {
            let alpha = -mu / sigma;
            let lambda = std_normal.pdf(alpha) / std_normal.sf(alpha);
            let next_sigma = s / (1.0 + alpha * lambda - lambda * lambda).sqrt();
            let next_mu = m - next_sigma * lambda;
            let done = (next_mu - mu).abs() < 1e-13 * m && (next_sigma - sigma).abs() < 1e-13 * s;
            mu = next_mu;
            sigma = next_sigma;
            if done {
                return Ok((mu, sigma));
            }
        }
        Err(Error::domain("placement", "moment matching did not converge"))
    }
}

/// Gaussian width `w` such that `exp(−(offset_ref/w)²) = 1 − drop_fraction`.
pub fn calibrate_rolloff(offset_ref_nm: f64, drop_fraction: f64) -> Result<f64> {
    if !(offset_ref_nm > 0.0) || !offset_ref_nm.is_finite() {
        return Err(Error::domain("calibrate_rolloff", "reference offset must be positive"));
    }
    if !(drop_fraction > 0.0 && drop_fraction < 1.0) {
        return Err(Error::domain("calibrate_rolloff", "drop fraction must be in (0, 1)"));
    }
    Ok(offset_ref_nm / (1.0 / (1.0 - drop_fraction)).ln().sqrt())
}

pub fn coupling_efficiency(offset_nm: f64, taper: &TaperModel, wavelength_nm: f64) -> Result<f64> {
    if !(offset_nm >= 0.0) {
        return Err(Error::domain("coupling_efficiency", "offset must be >= 0"));
    }
    let eta0 = taper.eta0(wavelength_nm)?;
    Ok(eta0 * (-(offset_nm / taper.rolloff_w_nm).powi(2)).exp())
}

/// Loss in dB relative to perfect alignment.
pub fn offset_penalty_db(offset_nm: f64, taper: &TaperModel) -> f64 {
    10.0 * (offset_nm / taper.rolloff_w_nm).powi(2) * std::f64::consts::LOG10_E
}

#[derive(Clone, Debug, PartialEq)]
pub struct SocketOutcome {
    pub socket_id: u32,
    pub placed: bool,
    pub offset_nm: Option<f64>,
    pub eta_602: Option<f64>,
    pub eta_737: Option<f64>,
}

pub fn simulate_assembly(
    sockets: u32,
    placement: &PlacementModel,
    taper: &TaperModel,
    seed: u64,
) -> Result<Vec<SocketOutcome>> {
    if sockets == 0 {
        return Err(Error::Usage("simulate_assembly needs at least one socket".into()));
    }
    taper.validate()?;
    let (mu, sigma) = placement.parent_normal()?;
    let parent = Normal::new(mu, sigma).map_err(|e| Error::domain("placement", e.to_string()))?;
    let streams = Streams::new(seed, "assembly/sockets");
    let eta_at = |offset: f64, wl: f64| -> Option<f64> { coupling_efficiency(offset, taper, wl).ok() };
    Ok((0..sockets)
        .into_par_iter()
        .map(|id| {
            let mut rng = streams.stream(u64::from(id));
            let placed = rng.gen::<f64>() < placement.success_prob;
            if !placed {
                return SocketOutcome {
                    socket_id: id,
                    placed,
                    offset_nm: None,
                    eta_602: None,
                    eta_737: None,
                };
            }
            let offset = loop {
                let v: f64 = parent.sample(&mut rng);
                if v >= 0.0 {
                    break v;
                }
            };
            SocketOutcome {
                socket_id: id,
                placed,
                offset_nm: Some(offset),
                eta_602: eta_at(offset, 602.0),
                eta_737: eta_at(offset, 737.0),
            }
        })
        .collect())
}

/// End-to-end ZPL photon efficiency into the PIC waveguide:
/// `β_dipole · DW · (Γ₀/Γ) · η_taper · 10^(−loss/10)`.
pub fn channel_budget(
    beta_dipole: f64,
    debye_waller: f64,
    gamma0_mhz: f64,
    gamma_mhz: f64,
    eta_taper: f64,
    extra_loss_db: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta_dipole) || !(0.0..=1.0).contains(&eta_taper) {
        return Err(Error::domain("channel_budget", "efficiencies must be in [0, 1]"));
    }
    if !(debye_waller > 0.0 && debye_waller <= 1.0) {
        return Err(Error::domain("channel_budget", "debye_waller must be in (0, 1]"));
    }
    if !(gamma0_mhz > 0.0 && gamma_mhz >= gamma0_mhz) {
        return Err(Error::domain("channel_budget", "need 0 < gamma0 <= gamma"));
    }
    if !(extra_loss_db >= 0.0) {
        return Err(Error::domain("channel_budget", "extra loss must be >= 0 dB"));
    }
    Ok(beta_dipole * debye_waller * (gamma0_mhz / gamma_mhz) * eta_taper * 10f64.powf(-extra_loss_db / 10.0))
}

/// Fixed inputs used to attach a budget to each placed socket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetInputs {
    pub wavelength_nm: f64,
    pub beta_dipole: f64,
    pub debye_waller: f64,
    pub gamma0_mhz: f64,
    pub gamma_mhz: f64,
    pub extra_loss_db: f64,
}

impl Default for BudgetInputs {
    fn default() -> Self {
        BudgetInputs {
            wavelength_nm: 602.0,
            beta_dipole: 0.8,
            debye_waller: 0.6,
            gamma0_mhz: 32.0,
            gamma_mhz: 54.0,
            extra_loss_db: 0.0,
        }
    }
}

pub const ASSEMBLY_CSV_HEADER: [&str; 6] = ["socket_id", "placed", "offset_nm", "eta_602", "eta_737", "budget"];

pub fn write_assembly_csv<W: Write>(
    w: W,
    sockets: &[SocketOutcome],
    budget: &BudgetInputs,
    taper: &TaperModel,
) -> Result<()> {
    let mut out = io::writer(w, &ASSEMBLY_CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(io::fmt_f64).unwrap_or_default();
    for s in sockets {
        let b = match s.offset_nm {
            Some(offset) => Some(channel_budget(
                budget.beta_dipole,
                budget.debye_waller,
                budget.gamma0_mhz,
                budget.gamma_mhz,
                coupling_efficiency(offset, taper, budget.wavelength_nm)?,
                budget.extra_loss_db,
            )?),
            None => None,
        };
        out.write_record([
            s.socket_id.to_string(),
            io::fmt_bool(s.placed).to_string(),
            opt(s.offset_nm),
            opt(s.eta_602),
            opt(s.eta_737),
            opt(b),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Socket ids and placement flags from an assembly CSV.
pub fn read_assembly_placed<R: std::io::Read>(r: R) -> Result<Vec<(u32, bool)>> {
    let mut rdr = io::reader(r, &ASSEMBLY_CSV_HEADER)?;
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            Ok((io::field(&rec, 0, "socket_id")?, io::parse_bool(&rec, 1, "placed")?))
        })
        .collect()
}
