//! Run configuration: JSON in, validated [`RunConfig`] out.
//!
//! A config file only needs the keys it wants to change. Loading starts
//! from the defaults for the selected species, overlays the file key by key
//! and rejects keys that the defaults do not have. Every numeric field is
//! then range-checked and errors name the dotted key, e.g. `scan.span_mhz`.
//!
//! | key | default |
//! |-----|---------|
//! | `species.name` | `"GeV"` (or `"SiV"`); other species fields follow it |
//! | `implant.mean_emitters_per_spot` | 2 |
//! | `implant.pitch_nm` | 1000 |
//! | `implant.grid_rows` | 1 |
//! | `chiplet.n_channels` | 8 |
//! | `chiplet.sigma_offset_nm` | 100 |
//! | `chiplet.target_yield` | 0.4 (`null` skips calibration) |
//! | `chiplet.channel_counts` | `[8, 16]` |
//! | `assembly.sockets` | 1000 |
//! | `scan.*` | species-scaled span, 121 points, see `ScanConfig` |
//! | `actuator.v_max` / `cap_ghz` | 100 V / 100 GHz |
//! | `seed` | 42 |
//! | `trials` | 20000 |
//! | `output_dir` | `"out"` |
//!
//! The scan rate and dwell defaults are not measured values. They are set
//! so that a 37 MHz GeV line fits to about ±3 MHz.

use std::fmt;
use std::path::{Path, PathBuf};

use chipletsim_core::assembly::BudgetInputs;
use chipletsim_core::tuning::StrainPrior;
use chipletsim_core::{
    ActuatorConfig, AlignmentModel, ChipletDesign, ImplantSpec, PlacementModel, ScanConfig, Species, SpeciesParams,
    TaperModel,
};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImplantSection {
    pub pitch_nm: f64,
    pub grid_rows: u32,
    pub mean_emitters_per_spot: f64,
    pub stable_fraction: f64,
    pub beta_ideal: f64,
    pub strain: StrainPrior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChipletSection {
    pub n_channels: u32,
    pub waveguide_width_nm: f64,
    pub waveguide_height_nm: f64,
    pub channel_pitch_nm: f64,
    pub min_emitters_per_channel: u32,
    pub sigma_offset_nm: f64,
    pub rotation_mrad_sigma: f64,
    /// Yield the implant density is calibrated to; `None` keeps
    /// `implant.mean_emitters_per_spot`.
    pub target_yield: Option<f64>,
    /// Channel counts reported in the yield table.
    pub channel_counts: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssemblySection {
    pub sockets: u32,
    pub placement: PlacementModel,
    pub taper: TaperModel,
    pub budget: BudgetInputs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub species: SpeciesParams,
    pub implant: ImplantSection,
    pub chiplet: ChipletSection,
    pub assembly: AssemblySection,
    pub scan: ScanConfig,
    pub actuator: ActuatorConfig,
    pub seed: u64,
    pub trials: u64,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn for_species(species: Species) -> Self {
        let params = species.params();
        let spec = ImplantSpec::new(params.clone());
        let design = ChipletDesign::default();
        let alignment = AlignmentModel::default();
        let budget = match species {
            Species::GeV => BudgetInputs::default(),
            Species::SiV => BudgetInputs {
                wavelength_nm: 737.0,
                debye_waller: params.debye_waller,
                gamma0_mhz: 93.0,
                gamma_mhz: 146.0,
                ..BudgetInputs::default()
            },
        };
        RunConfig {
            scan: ScanConfig::for_species(&params),
            species: params,
            implant: ImplantSection {
                pitch_nm: spec.pitch_nm,
                grid_rows: spec.grid_rows,
                mean_emitters_per_spot: spec.mean_emitters_per_spot,
                stable_fraction: spec.stable_fraction,
                beta_ideal: spec.beta_ideal,
                strain: spec.strain,
            },
            chiplet: ChipletSection {
                n_channels: design.n_channels,
                waveguide_width_nm: design.waveguide_width_nm,
                waveguide_height_nm: design.waveguide_height_nm,
                channel_pitch_nm: design.channel_pitch_nm,
                min_emitters_per_channel: design.min_emitters_per_channel,
                sigma_offset_nm: alignment.sigma_offset_nm,
                rotation_mrad_sigma: alignment.rotation_mrad_sigma,
                target_yield: Some(0.4),
                channel_counts: vec![8, 16],
            },
            assembly: AssemblySection {
                sockets: 1000,
                placement: PlacementModel::default(),
                taper: TaperModel::default(),
                budget,
            },
            actuator: ActuatorConfig::default(),
            seed: 42,
            trials: 20_000,
            output_dir: PathBuf::from("out"),
        }
    }

    /// Implant grid covering one chiplet.
    pub fn implant_spec(&self) -> ImplantSpec {
        ImplantSpec {
            species: self.species.clone(),
            pitch_nm: self.implant.pitch_nm,
            grid_cols: self.chiplet.n_channels,
            grid_rows: self.implant.grid_rows,
            mean_emitters_per_spot: self.implant.mean_emitters_per_spot,
            stable_fraction: self.implant.stable_fraction,
            beta_ideal: self.implant.beta_ideal,
            strain: self.implant.strain.clone(),
        }
    }

    pub fn design(&self) -> ChipletDesign {
        let c = &self.chiplet;
        ChipletDesign {
            n_channels: c.n_channels,
            waveguide_width_nm: c.waveguide_width_nm,
            waveguide_height_nm: c.waveguide_height_nm,
            channel_pitch_nm: c.channel_pitch_nm,
            min_emitters_per_channel: c.min_emitters_per_channel,
        }
    }

    pub fn alignment(&self) -> AlignmentModel {
        AlignmentModel {
            sigma_offset_nm: self.chiplet.sigma_offset_nm,
            rotation_mrad_sigma: self.chiplet.rotation_mrad_sigma,
        }
    }

    /// Canonical JSON with `output_dir` blanked, so the same run written to
    /// two places hashes the same.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        serde_json::to_string_pretty(&c).expect("config serializes")
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_species(Species::GeV)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed JSON in config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{key}: {constraint}")]
    Invalid { key: String, constraint: String },
}

impl ConfigError {
    fn invalid(key: impl fmt::Display, constraint: impl fmt::Display) -> Self {
        ConfigError::Invalid {
            key: key.to_string(),
            constraint: constraint.to_string(),
        }
    }

    /// Dotted key the error refers to, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } => Some(key),
            _ => None,
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let user: Value = serde_json::from_str(text)?;
    let Value::Object(user) = user else {
        return Err(ConfigError::invalid("<root>", "config must be a JSON object"));
    };
    let species = match user.get("species").and_then(|s| s.get("name")) {
        None => Species::GeV,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| ConfigError::invalid("species.name", format!("must be \"GeV\" or \"SiV\", got {v}")))?,
    };
    let mut merged = serde_json::to_value(RunConfig::for_species(species))?;
    overlay(&mut merged, &Value::Object(user), "")?;
    let cfg: RunConfig = serde_json::from_value(merged)?;
    validate(&cfg)?;
    Ok(cfg)
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Keys whose value may be `null`.
const NULLABLE: &[&str] = &["chiplet.target_yield"];

/// Writes `user` over `base`, checking keys and JSON types against `base`.
fn overlay(base: &mut Value, user: &Value, path: &str) -> Result<(), ConfigError> {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => overlay_object(b, u, path),
        (b, Value::Null) if NULLABLE.contains(&path) => {
            *b = Value::Null;
            Ok(())
        }
        (b @ Value::Null, u) if NULLABLE.contains(&path) => {
            *b = u.clone();
            Ok(())
        }
        (b, u) => {
            let ok = match (&*b, u) {
                (Value::Number(n), Value::Number(m)) => !(n.is_u64() && !m.is_u64()),
                (Value::Number(_), Value::Null) => false,
                (Value::String(_), Value::String(_)) => true,
                (Value::Bool(_), Value::Bool(_)) => true,
                (Value::Array(_), Value::Array(_)) => true,
                _ => false,
            };
            if !ok {
                let expected = match &*b {
                    Value::Number(n) if n.is_u64() => "a non-negative integer",
                    Value::Number(_) => "a number",
                    Value::String(_) => "a string",
                    Value::Bool(_) => "a boolean",
                    Value::Array(_) => "an array",
                    _ => "an object",
                };
                return Err(ConfigError::invalid(path, format!("expected {expected}, got {u}")));
            }
            *b = u.clone();
            Ok(())
        }
    }
}

fn overlay_object(base: &mut Map<String, Value>, user: &Map<String, Value>, path: &str) -> Result<(), ConfigError> {
    for (k, v) in user {
        let key = join(path, k);
        match base.get_mut(k) {
            Some(slot) => overlay(slot, v, &key)?,
            None => return Err(ConfigError::invalid(key, "unknown key")),
        }
    }
    Ok(())
}

struct Checker {
    first: Option<ConfigError>,
}

impl Checker {
    fn check(&mut self, key: &str, ok: bool, constraint: impl fmt::Display) {
        if !ok && self.first.is_none() {
            self.first = Some(ConfigError::invalid(key, constraint));
        }
    }

    fn positive(&mut self, key: &str, v: f64) {
        self.check(key, v.is_finite() && v > 0.0, format!("must be > 0, got {v}"));
    }

    fn non_negative(&mut self, key: &str, v: f64) {
        self.check(key, v.is_finite() && v >= 0.0, format!("must be >= 0, got {v}"));
    }

    fn fraction(&mut self, key: &str, v: f64) {
        self.check(key, (0.0..=1.0).contains(&v), format!("must be in [0, 1], got {v}"));
    }

    fn at_least(&mut self, key: &str, v: u64, min: u64) {
        self.check(key, v >= min, format!("must be >= {min}, got {v}"));
    }
}

/// Range checks against every module precondition.
pub fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    let mut c = Checker { first: None };

    let s = &cfg.species;
    c.positive("species.zpl_wavelength_nm", s.zpl_wavelength_nm);
    c.positive("species.gamma0_mean_mhz", s.gamma0_mean_mhz);
    c.check(
        "species.debye_waller",
        s.debye_waller > 0.0 && s.debye_waller <= 1.0,
        format!("must be in (0, 1], got {}", s.debye_waller),
    );
    c.positive("species.inhom_spread_ghz", s.inhom_spread_ghz);
    c.positive("species.implant_depth_nm", s.implant_depth_nm);
    c.positive("species.straggle_nm", s.straggle_nm);
    c.positive("species.lateral_fwhm_nm", s.lateral_fwhm_nm);
    c.non_negative("species.dephasing_sigma_mhz", s.dephasing_sigma_mhz);
    c.check(
        "species.lifetime_rel_sigma",
        (0.0..1.0).contains(&s.lifetime_rel_sigma),
        format!("must be in [0, 1), got {}", s.lifetime_rel_sigma),
    );

    let i = &cfg.implant;
    c.positive("implant.pitch_nm", i.pitch_nm);
    c.at_least("implant.grid_rows", u64::from(i.grid_rows), 1);
    c.non_negative("implant.mean_emitters_per_spot", i.mean_emitters_per_spot);
    c.fraction("implant.stable_fraction", i.stable_fraction);
    c.fraction("implant.beta_ideal", i.beta_ideal);
    c.positive("implant.strain.center_ghz_per_v2", i.strain.center_ghz_per_v2);
    c.non_negative("implant.strain.decades", i.strain.decades);
    c.fraction("implant.strain.positive_fraction", i.strain.positive_fraction);

    let ch = &cfg.chiplet;
    c.at_least("chiplet.n_channels", u64::from(ch.n_channels), 1);
    c.positive("chiplet.waveguide_width_nm", ch.waveguide_width_nm);
    c.positive("chiplet.waveguide_height_nm", ch.waveguide_height_nm);
    c.positive("chiplet.channel_pitch_nm", ch.channel_pitch_nm);
    c.non_negative("chiplet.sigma_offset_nm", ch.sigma_offset_nm);
    c.non_negative("chiplet.rotation_mrad_sigma", ch.rotation_mrad_sigma);
    if let Some(t) = ch.target_yield {
        c.check(
            "chiplet.target_yield",
            t > 0.0 && t < 1.0,
            format!("must be in (0, 1), got {t}"),
        );
    }
    c.check(
        "chiplet.channel_counts",
        !ch.channel_counts.is_empty() && ch.channel_counts.iter().all(|&n| n >= 1),
        "must be a non-empty list of counts >= 1",
    );

    let a = &cfg.assembly;
    c.at_least("assembly.sockets", u64::from(a.sockets), 1);
    c.fraction("assembly.placement.success_prob", a.placement.success_prob);
    c.non_negative("assembly.placement.offset_std_nm", a.placement.offset_std_nm);
    c.check(
        "assembly.placement.offset_mean_nm",
        a.placement.offset_mean_nm > a.placement.offset_std_nm,
        "must exceed assembly.placement.offset_std_nm",
    );
    c.check(
        "assembly.taper.eta0_by_wavelength",
        !a.taper.eta0_by_wavelength.is_empty()
            && a.taper.eta0_by_wavelength.iter().all(|p| p.eta0 > 0.0 && p.eta0 <= 1.0),
        "needs at least one entry, each eta0 in (0, 1]",
    );
    c.positive("assembly.taper.rolloff_w_nm", a.taper.rolloff_w_nm);
    let b = &a.budget;
    c.check(
        "assembly.budget.wavelength_nm",
        a.taper.eta0(b.wavelength_nm).is_ok(),
        format!("{} nm has no taper efficiency entry", b.wavelength_nm),
    );
    c.fraction("assembly.budget.beta_dipole", b.beta_dipole);
    c.check(
        "assembly.budget.debye_waller",
        b.debye_waller > 0.0 && b.debye_waller <= 1.0,
        format!("must be in (0, 1], got {}", b.debye_waller),
    );
    c.positive("assembly.budget.gamma0_mhz", b.gamma0_mhz);
    c.check(
        "assembly.budget.gamma_mhz",
        b.gamma_mhz >= b.gamma0_mhz,
        "must be >= assembly.budget.gamma0_mhz",
    );
    c.non_negative("assembly.budget.extra_loss_db", b.extra_loss_db);

    let sc = &cfg.scan;
    c.check(
        "scan.center_offset_ghz",
        sc.center_offset_ghz.is_finite(),
        "must be finite",
    );
    c.positive("scan.span_mhz", sc.span_mhz);
    c.at_least("scan.n_points", u64::from(sc.n_points), 5);
    c.at_least("scan.repeats", u64::from(sc.repeats), 1);
    c.non_negative("scan.peak_rate_cps", sc.peak_rate_cps);
    c.non_negative("scan.background_cps", sc.background_cps);
    c.positive("scan.dwell_s", sc.dwell_s);
    c.non_negative("scan.probe_rate_cps", sc.probe_rate_cps);

    c.positive("actuator.v_max", cfg.actuator.v_max);
    c.non_negative("actuator.cap_ghz", cfg.actuator.cap_ghz);
    c.non_negative("actuator.electrode_gap_um", cfg.actuator.electrode_gap_um);

    c.at_least("trials", cfg.trials, 1);

    match c.first {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(parse_config("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn species_choice_changes_dependent_defaults() {
        let cfg = parse_config(r#"{"species": {"name": "SiV"}}"#).unwrap();
        assert_eq!(cfg.species, SpeciesParams::siv());
        assert_eq!(
            cfg.scan.span_mhz,
            ScanConfig::for_species(&SpeciesParams::siv()).span_mhz
        );
        assert_eq!(cfg.assembly.budget.wavelength_nm, 737.0);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = parse_config(r#"{"scan": {"span_mhz": 800}, "seed": 7}"#).unwrap();
        assert_eq!(cfg.scan.span_mhz, 800.0);
        assert_eq!(cfg.scan.n_points, 121);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn errors_name_the_key() {
        let err = parse_config(r#"{"scan": {"span_mhz": -1}}"#).unwrap_err();
        assert_eq!(err.key(), Some("scan.span_mhz"));
        let err = parse_config(r#"{"scan": {"spam_mhz": 1}}"#).unwrap_err();
        assert_eq!(err.key(), Some("scan.spam_mhz"));
        assert!(err.to_string().contains("unknown key"));
        let err = parse_config(r#"{"chiplet": {"n_channels": 2.5}}"#).unwrap_err();
        assert_eq!(err.key(), Some("chiplet.n_channels"));
        let err = parse_config(r#"{"actuator": {"cap_ghz": "big"}}"#).unwrap_err();
        assert_eq!(err.key(), Some("actuator.cap_ghz"));
        let err = parse_config(r#"{"species": {"name": "NV"}}"#).unwrap_err();
        assert_eq!(err.key(), Some("species.name"));
        let err = parse_config(r#"{"chiplet": {"target_yield": 1.5}}"#).unwrap_err();
        assert_eq!(err.key(), Some("chiplet.target_yield"));
    }

    #[test]
    fn optional_target_can_be_cleared() {
        let cfg = parse_config(r#"{"chiplet": {"target_yield": null}}"#).unwrap();
        assert_eq!(cfg.chiplet.target_yield, None);
    }

    #[test]
    fn malformed_json_is_rejected() {
        assert!(matches!(parse_config("{"), Err(ConfigError::Json(_))));
        assert!(parse_config("[1]").is_err());
    }
}
