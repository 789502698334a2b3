//! Colour-centre photophysics.
//!
//! Units: linewidths and detunings in MHz, ZPL offsets in GHz, times in ns.
//! A lifetime in ns maps to a linewidth in MHz through `1000 / (2π τ)`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Species {
    GeV,
    SiV,
}

impl Species {
    pub fn params(self) -> SpeciesParams {
        match self {
            Species::GeV => SpeciesParams::gev(),
            Species::SiV => SpeciesParams::siv(),
        }
    }
}

impl fmt::Display for Species {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Species::GeV => "GeV",
            Species::SiV => "SiV",
        })
    }
}

/// Per-species physical constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesParams {
    pub name: Species,
    pub zpl_wavelength_nm: f64,
    /// Population-mean lifetime-limited linewidth.
    pub gamma0_mean_mhz: f64,
    /// Fraction of emission into the zero-phonon line.
    pub debye_waller: f64,
    /// FWHM of the ZPL centre-frequency distribution.
    pub inhom_spread_ghz: f64,
    pub implant_depth_nm: f64,
    pub straggle_nm: f64,
    pub lateral_fwhm_nm: f64,
    /// Scale of the half-normal pure-dephasing distribution. Chosen so that
    /// sampled chiplets reproduce the measured mean Γ/Γ₀.
    pub dephasing_sigma_mhz: f64,
    /// Relative standard deviation of sampled excited-state lifetimes.
    pub lifetime_rel_sigma: f64,
}

impl SpeciesParams {
    pub fn gev() -> Self {
        SpeciesParams {
            name: Species::GeV,
            zpl_wavelength_nm: 602.0,
            gamma0_mean_mhz: 32.0,
            debye_waller: 0.6,
            inhom_spread_ghz: 85.0,
            implant_depth_nm: 74.0,
            straggle_nm: 12.0,
            lateral_fwhm_nm: 40.0,
            dephasing_sigma_mhz: 13.6,
            lifetime_rel_sigma: 0.1,
        }
    }

    pub fn siv() -> Self {
        SpeciesParams {
            name: Species::SiV,
            zpl_wavelength_nm: 737.0,
            gamma0_mean_mhz: 93.0,
            // assumed; 0.7 is a typical bulk SiV value
            debye_waller: 0.7,
            inhom_spread_ghz: 30.0,
            implant_depth_nm: 113.0,
            straggle_nm: 19.0,
            lateral_fwhm_nm: 50.0,
            dephasing_sigma_mhz: 32.6,
            lifetime_rel_sigma: 0.1,
        }
    }

    /// Lifetime whose transform limit equals `gamma0_mean_mhz`.
    pub fn mean_lifetime_ns(&self) -> f64 {
        1000.0 / (2.0 * PI * self.gamma0_mean_mhz)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("zpl_wavelength_nm", self.zpl_wavelength_nm),
            ("gamma0_mean_mhz", self.gamma0_mean_mhz),
            ("inhom_spread_ghz", self.inhom_spread_ghz),
            ("implant_depth_nm", self.implant_depth_nm),
            ("straggle_nm", self.straggle_nm),
            ("lateral_fwhm_nm", self.lateral_fwhm_nm),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::domain("species", format!("{key} must be > 0, got {v}")));
            }
        }
        if !(self.debye_waller > 0.0 && self.debye_waller <= 1.0) {
            return Err(Error::domain(
                "species",
                format!("debye_waller must be in (0, 1], got {}", self.debye_waller),
            ));
        }
        if !(self.dephasing_sigma_mhz >= 0.0 && self.dephasing_sigma_mhz.is_finite()) {
            return Err(Error::domain("species", "dephasing_sigma_mhz must be >= 0"));
        }
        if !(self.lifetime_rel_sigma >= 0.0 && self.lifetime_rel_sigma < 1.0) {
            return Err(Error::domain("species", "lifetime_rel_sigma must be in [0, 1)"));
        }
        Ok(())
    }
}

/// One colour centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Emitter {
    pub species: Species,
    pub position_nm: [f64; 3],
    pub lifetime_ns: f64,
    pub dephasing_mhz: f64,
    /// ZPL offset from the species centre frequency.
    pub zpl_offset_ghz: f64,
    pub beta_ideal: f64,
    /// Signed strain response; the strained shift is `k·V²`.
    pub strain_coeff_ghz_per_v2: f64,
    pub stable: bool,
}

impl Emitter {
    /// A stable emitter at the origin with the given line parameters.
    pub fn new(species: Species, lifetime_ns: f64, dephasing_mhz: f64) -> Self {
        Emitter {
            species,
            position_nm: [0.0, 0.0, 0.0],
            lifetime_ns,
            dephasing_mhz,
            zpl_offset_ghz: 0.0,
            beta_ideal: 0.0,
            strain_coeff_ghz_per_v2: 0.0,
            stable: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lifetime_ns > 0.0 && self.lifetime_ns.is_finite()) {
            return Err(Error::domain("emitter", "lifetime_ns must be > 0"));
        }
        if !(self.dephasing_mhz >= 0.0) {
            return Err(Error::domain("emitter", "dephasing_mhz must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.beta_ideal) {
            return Err(Error::domain("emitter", "beta_ideal must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn gamma0_mhz(&self) -> f64 {
        1000.0 / (2.0 * PI * self.lifetime_ns)
    }

    pub fn gamma_mhz(&self) -> f64 {
        self.gamma0_mhz() + 2.0 * self.dephasing_mhz
    }

    /// Coupling seen by a coherent probe once dephasing is folded in.
    pub fn beta_eff(&self) -> f64 {
        self.beta_ideal * self.gamma0_mhz() / self.gamma_mhz()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingFigures {
    pub transmission_on_resonance: f64,
    pub beta_observed: f64,
    pub cooperativity: f64,
    pub beta_dipole: Option<f64>,
}

impl CouplingFigures {
    pub fn extinction(&self) -> f64 {
        1.0 - self.transmission_on_resonance
    }

    pub fn with_dipole(mut self, correction: BetaCorrection) -> Self {
        self.beta_dipole = Some(correction.beta_dipole);
        self
    }
}

/// Result of [`correct_beta`]. `exceeded_unity` flags a correction that
/// would have produced an efficiency above 1 and was clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaCorrection {
    pub beta_dipole: f64,
    pub raw: f64,
    pub exceeded_unity: bool,
}

pub fn lifetime_limited_linewidth(tau_ns: f64) -> Result<f64> {
    if !(tau_ns > 0.0) || tau_ns.is_nan() {
        return Err(Error::domain(
            "lifetime_limited_linewidth",
            format!("lifetime must be positive, got {tau_ns}"),
        ));
    }
    Ok(1000.0 / (2.0 * PI * tau_ns))
}

/// Inverse of [`lifetime_limited_linewidth`].
pub fn lifetime_for_linewidth(gamma0_mhz: f64) -> Result<f64> {
    if !(gamma0_mhz > 0.0) || gamma0_mhz.is_nan() {
        return Err(Error::domain(
            "lifetime_for_linewidth",
            format!("linewidth must be positive, got {gamma0_mhz}"),
        ));
    }
    Ok(1000.0 / (2.0 * PI * gamma0_mhz))
}

/// Γ = Γ₀ + 2Γ_d.
pub fn total_linewidth(gamma0_mhz: f64, gamma_d_mhz: f64) -> Result<f64> {
    if !(gamma0_mhz >= 0.0 && gamma_d_mhz >= 0.0) {
        return Err(Error::domain(
            "total_linewidth",
            format!("rates must be non-negative, got ({gamma0_mhz}, {gamma_d_mhz})"),
        ));
    }
    Ok(gamma0_mhz + 2.0 * gamma_d_mhz)
}

/// Inverts an on-resonance transmission into β and cooperativity, assuming
/// `T = (1 − β)²` and `C = β / (1 − β)`.
pub fn extinction_to_coupling(transmission_on_resonance: f64) -> Result<CouplingFigures> {
    let t = transmission_on_resonance;
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::domain(
            "extinction_to_coupling",
            format!("transmission must lie in (0, 1], got {t}"),
        ));
    }
    let beta = 1.0 - t.sqrt();
    Ok(CouplingFigures {
        transmission_on_resonance: t,
        beta_observed: beta,
        cooperativity: beta / (1.0 - beta),
        beta_dipole: None,
    })
}

/// Undoes line broadening and the phonon sideband:
/// `β_dipole = β_obs · (Γ/Γ₀) / DW`, clamped to 1.
pub fn correct_beta(beta_observed: f64, gamma_mhz: f64, gamma0_mhz: f64, debye_waller: f64) -> Result<BetaCorrection> {
    if !(gamma0_mhz > 0.0) {
        return Err(Error::domain("correct_beta", "gamma0 must be positive"));
    }
    if gamma_mhz < gamma0_mhz || gamma_mhz.is_nan() {
        return Err(Error::domain(
            "correct_beta",
            format!("linewidth {gamma_mhz} MHz is narrower than its lifetime limit {gamma0_mhz} MHz"),
        ));
    }
    if !(debye_waller > 0.0 && debye_waller <= 1.0) {
        return Err(Error::domain("correct_beta", "debye_waller must be in (0, 1]"));
    }
    if !(0.0..1.0).contains(&beta_observed) {
        return Err(Error::domain("correct_beta", "beta_observed must be in [0, 1)"));
    }
    let raw = beta_observed * (gamma_mhz / gamma0_mhz) / debye_waller;
    Ok(BetaCorrection {
        beta_dipole: raw.min(1.0),
        raw,
        exceeded_unity: raw > 1.0,
    })
}

/// Single-exponential antibunching dip, normalised to 1 at long delay.
pub fn g2_model(delay_ns: f64, g2_zero: f64, tau_corr_ns: f64) -> f64 {
    1.0 - (1.0 - g2_zero) * (-delay_ns.abs() / tau_corr_ns).exp()
}

/// g²(0) of an ideal single emitter diluted by uncorrelated background at
/// the given signal-to-background ratio. `+∞` dB gives 0.
pub fn background_to_g2(signal_to_background_db: f64) -> f64 {
    let rho = 1.0 / (1.0 + 10f64.powf(-signal_to_background_db / 10.0));
    1.0 - rho * rho
}

/// Intensity transmission past an emitter with effective coupling `beta_eff`
/// and linewidth `gamma_mhz`, probed at `detuning_mhz`.
pub fn transmission_lineshape(beta_eff: f64, gamma_mhz: f64, detuning_mhz: f64) -> f64 {
    let denom = Complex::new(1.0, 2.0 * detuning_mhz / gamma_mhz);
    let t = Complex::new(1.0, 0.0) - Complex::new(beta_eff, 0.0) / denom;
    t.norm_sqr()
}

pub fn transmission_spectrum(emitter: &Emitter, detunings_mhz: &[f64]) -> Result<Vec<f64>> {
    let gamma = emitter.gamma_mhz();
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::domain(
            "transmission_spectrum",
            "emitter linewidth must be positive",
        ));
    }
    let beta_eff = emitter.beta_eff();
    Ok(detunings_mhz
        .iter()
        .map(|&d| transmission_lineshape(beta_eff, gamma, d))
        .collect())
}
