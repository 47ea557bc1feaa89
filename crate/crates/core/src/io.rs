//! Run configuration, data ingestion, result envelopes and plot-data CSV.
//!
//! Config keys carry SI unit suffixes (`_m`, `_s`, `_K`, `_hz`, `_W`, ...).
//! A key that differs from a known key only in its unit suffix is reported
//! as a unit mismatch naming the expected key.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::atomic::{AtomSpecies, SpeciesError};
use crate::constants::kelvin_to_joule;
use crate::fitting::{FitOptions, Minimizer};
use crate::loading::{BoundingBox, LoadingOptions, MotCloud, StepPolicy, TerminationRules};
use crate::optics::{BeamGeometry, DivergenceModel, OpticsError, TrapConfig};
use crate::spectroscopy::{detuning_grid, Lineshape, ProbeSequenceConfig, SpectrumModel, TransmissionTrace};

/// Environment variable naming the default species data file.
pub const SPECIES_ENV: &str = "FIBERLOAD_SPECIES";

/// Version of the [`ResultEnvelope`] layout.
pub const ENVELOPE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("config is not valid {format}: {message}")]
    Syntax { format: &'static str, message: String },
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("config key `{key}` has the wrong unit; expected `{expected}`")]
    UnitMismatch { key: String, expected: String },
    #[error("invalid config value for `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("config: {0}")]
    Schema(String),
    #[error(transparent)]
    Species(#[from] SpeciesError),
    #[error(transparent)]
    Trap(#[from] OpticsError),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed CSV {path}: {message}")]
    Csv { path: String, message: String },
    #[error("{path}: expected header {expected}, found {found}")]
    Header { path: String, expected: String, found: String },
    #[error("{path}: row {row} ({column} = {value}) is out of order; the grid must increase strictly")]
    OutOfOrder {
        path: String,
        row: usize,
        column: String,
        value: f64,
    },
    #[error("{path}: row {row} has a non-finite or unparsable value in `{column}`")]
    BadValue { path: String, row: usize, column: String },
    #[error("dataset is empty: {0}")]
    Empty(String),
    #[error("dataset columns have different lengths: {0}")]
    Ragged(String),
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
    #[error(transparent)]
    Trace(#[from] crate::spectroscopy::SpectroscopyError),
}

// ---------------------------------------------------------------------------
// Configuration

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapSection {
    /// Alternatively give `trap_power_W`; the echo always records the depth.
    pub trap_depth_K: Option<f64>,
    pub trap_power_W: Option<f64>,
    pub depth_per_power_K_per_W: f64,
    pub waist_m: f64,
    pub numerical_aperture: f64,
    pub tip_z_m: f64,
    pub fiber_length_m: f64,
    pub core_radius_m: f64,
    pub divergence: DivergenceModel,
    pub fort_wavelength_m: f64,
    pub gravity_m_s2: f64,
}

impl Default for TrapSection {
    fn default() -> Self {
        let g = BeamGeometry::hcpcf_default();
        TrapSection {
            trap_depth_K: None,
            trap_power_W: None,
            depth_per_power_K_per_W: 5e-3 / 0.27,
            waist_m: g.waist,
            numerical_aperture: g.numerical_aperture,
            tip_z_m: g.tip_z,
            fiber_length_m: g.fiber_length,
            core_radius_m: g.core_radius,
            divergence: g.divergence,
            fort_wavelength_m: g.wavelength,
            gravity_m_s2: crate::constants::STANDARD_GRAVITY,
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloudSection {
    pub center_m: [f64; 3],
    pub half_widths_1e_m: [f64; 3],
    pub temperature_K: f64,
    pub atom_count: u64,
}

impl Default for CloudSection {
    fn default() -> Self {
        CloudSection {
            center_m: [0.0, 0.0, 1e-3],
            half_widths_1e_m: [50e-6, 50e-6, 0.4e-3],
            temperature_K: 120e-6,
            atom_count: 10_000_000,
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceSection {
    pub modulation_frequency_hz: f64,
    pub off_window_s: f64,
    pub gate_time_s: f64,
    pub n_gates: u32,
    pub probe_power_W: f64,
    pub detector_efficiency: f64,
    pub mot_load_s: f64,
    pub compress_s: f64,
    pub hold_s: f64,
}

impl Default for SequenceSection {
    fn default() -> Self {
        let p = ProbeSequenceConfig::stroboscopic_default();
        SequenceSection {
            modulation_frequency_hz: p.modulation_frequency,
            off_window_s: p.off_window,
            gate_time_s: p.gate_time,
            n_gates: p.n_gates,
            probe_power_W: p.probe_power,
            detector_efficiency: 1.0,
            mot_load_s: 0.99,
            compress_s: 0.03,
            hold_s: 0.02,
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub n_atoms: usize,
    pub seed: u64,
    /// Simulated time per trajectory; defaults to the sequence hold time.
    pub max_time_s: Option<f64>,
    pub capture_depth_m: f64,
    pub full_fiber_transit: bool,
    pub steps_per_period: f64,
    pub max_step_s: f64,
    pub fixed_step_s: Option<f64>,
    pub box_half_width_m: f64,
    pub box_height_m: f64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    /// Trap depths for a loading sweep; empty runs a single simulation.
    pub depth_sweep_K: Vec<f64>,
    /// Temperature of the thermal in-fiber ensemble used for recapture.
    pub recapture_temperature_K: f64,
    pub recapture_atoms: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let step = StepPolicy::default();
        let rules = TerminationRules::default();
        SimulationSection {
            n_atoms: 10_000,
            seed: 1,
            max_time_s: None,
            capture_depth_m: rules.capture_depth,
            full_fiber_transit: rules.full_fiber_transit,
            steps_per_period: step.steps_per_period,
            max_step_s: step.max_step,
            fixed_step_s: None,
            box_half_width_m: rules.bounding_box.half_width,
            box_height_m: rules.bounding_box.height_above_tip,
            threads: 0,
            depth_sweep_K: Vec::new(),
            recapture_temperature_K: 450e-6,
            recapture_atoms: 2000,
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    pub ground_F: u32,
    pub reference_excited_F: u32,
    pub excited_F: Vec<u32>,
    pub od: Vec<f64>,
    /// Defaults to the species' natural linewidth.
    pub linewidth_fwhm_hz: Option<f64>,
    pub frequency_offset_hz: f64,
    /// Gaussian FWHM convolved with the Lorentzian; 0 keeps a pure Lorentzian.
    pub doppler_fwhm_hz: f64,
    pub detuning_start_hz: f64,
    pub detuning_stop_hz: f64,
    pub detuning_step_hz: f64,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        SpectrumSection {
            ground_F: 1,
            reference_excited_F: 1,
            excited_F: vec![0, 1, 2],
            od: vec![300.0, 1000.0, 1000.0],
            linewidth_fwhm_hz: None,
            frequency_offset_hz: 0.0,
            doppler_fwhm_hz: 0.0,
            detuning_start_hz: -600e6,
            detuning_stop_hz: 600e6,
            detuning_step_hz: 2e6,
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub method: Minimizer,
    pub max_iterations: usize,
    pub rescale_covariance: bool,
    pub free_linewidth: bool,
    pub free_offset: bool,
    pub free_background: bool,
    pub bootstrap_replicates: usize,
    pub bootstrap_seed: u64,
}

impl Default for FitSection {
    fn default() -> Self {
        let o = FitOptions::default();
        FitSection {
            method: o.method,
            max_iterations: o.max_iterations,
            rescale_covariance: o.rescale_covariance,
            free_linewidth: false,
            free_offset: false,
            free_background: false,
            bootstrap_replicates: 0,
            bootstrap_seed: 1,
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtomNumberSection {
    pub photons_per_atom: f64,
    pub cloud_width_1e_full_m: f64,
}

impl Default for AtomNumberSection {
    fn default() -> Self {
        AtomNumberSection {
            photons_per_atom: 2.0,
            cloud_width_1e_full_m: 1.4e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// CSV plot data written next to the JSON envelope.
    pub plot_csv: Option<PathBuf>,
    /// Per-trajectory dump of a loading run.
    pub trajectories_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Species data file; `None` uses the built-in ⁸⁷Rb data.
    pub species_file: Option<PathBuf>,
    pub trap: TrapSection,
    pub cloud: CloudSection,
    pub sequence: SequenceSection,
    pub simulation: SimulationSection,
    pub spectrum: SpectrumSection,
    pub fit: FitSection,
    pub atom_number: AtomNumberSection,
    pub output: OutputSection,
}

const UNIT_SUFFIXES: &[&str] = &[
    "m", "mm", "um", "nm", "cm", "s", "ms", "us", "ns", "K", "mK", "uK", "nK", "hz", "Hz", "khz", "kHz", "mhz", "MHz",
    "ghz", "GHz", "W", "mW", "uW", "nW", "pW", "m_s2", "kg", "K_per_W", "mK_per_W", "K_per_mW",
];

/// Splits `key` into (stem, unit suffix) when it ends in a recognized unit.
fn split_unit(key: &str) -> Option<(&str, &str)> {
    UNIT_SUFFIXES
        .iter()
        .filter_map(|u| {
            let stem = key.strip_suffix(u)?.strip_suffix('_')?;
            (!stem.is_empty()).then_some((stem, *u))
        })
        .max_by_key(|(_, u)| u.len())
}

fn check_keys(doc: &Value, known: &Value, prefix: &str) -> Result<(), ConfigError> {
    let (Value::Object(doc), Value::Object(known)) = (doc, known) else {
        return Ok(());
    };
    for (key, value) in doc {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match known.get(key) {
            Some(k @ Value::Object(_)) => check_keys(value, k, &path)?,
            Some(_) => {}
            None => {
                if let Some((stem, _)) = split_unit(key) {
                    if let Some(expected) = known
                        .keys()
                        .find(|k| split_unit(k).map(|(s, _)| s) == Some(stem))
                    {
                        let expected = if prefix.is_empty() {
                            expected.clone()
                        } else {
                            format!("{prefix}.{expected}")
                        };
                        return Err(ConfigError::UnitMismatch { key: path, expected });
                    }
                }
                return Err(ConfigError::UnknownKey { key: path });
            }
        }
    }
    Ok(())
}

/// Template of every accepted key with `null` for optional entries.
fn known_keys() -> Value {
    serde_json::to_value(RunConfig::default()).expect("default config serializes")
}

fn from_document<T: DeserializeOwned>(doc: Value) -> Result<T, ConfigError> {
    serde_json::from_value(doc).map_err(|e| ConfigError::Schema(e.to_string()))
}

/// Parses a TOML config document, or a JSON config echo when the text is a
/// JSON object.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let doc: Value = if text.trim_start().starts_with('{') {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
            format: "JSON",
            message: e.to_string(),
        })?;
        // A whole result envelope re-runs from its config echo.
        if doc.get("schema_version").is_some() {
            doc = doc
                .get_mut("config")
                .map(Value::take)
                .ok_or_else(|| ConfigError::Schema("result envelope without a config echo".into()))?;
        }
        doc
    } else {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax {
            format: "TOML",
            message: e.message().to_string(),
        })?;
        serde_json::to_value(table).map_err(|e| ConfigError::Schema(e.to_string()))?
    };
    check_keys(&doc, &known_keys(), "")?;
    let config: RunConfig = from_document(doc)?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut config = parse_config(&text)?;
    // Relative species paths are taken relative to the config file.
    if let Some(species) = &config.species_file {
        if species.is_relative() {
            if let Some(dir) = path.parent() {
                config.species_file = Some(dir.join(species));
            }
        }
        config.validate()?;
    }
    Ok(config)
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

fn non_negative(key: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("must be a finite value ≥ 0, got {v}")))
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, format!("must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(path) = &self.species_file {
            if !path.exists() {
                return Err(invalid("species_file", format!("{} does not exist", path.display())));
            }
        }
        let t = &self.trap;
        match (t.trap_depth_K, t.trap_power_W) {
            (Some(_), Some(_)) => {
                return Err(invalid("trap.trap_power_W", "give either trap_depth_K or trap_power_W, not both"))
            }
            (Some(d), None) => non_negative("trap.trap_depth_K", d)?,
            (None, Some(p)) => {
                non_negative("trap.trap_power_W", p)?;
                positive("trap.depth_per_power_K_per_W", t.depth_per_power_K_per_W)?;
            }
            (None, None) => {}
        }
        let s = &self.sequence;
        for (k, v) in [
            ("sequence.off_window_s", s.off_window_s),
            ("sequence.gate_time_s", s.gate_time_s),
            ("sequence.mot_load_s", s.mot_load_s),
            ("sequence.compress_s", s.compress_s),
            ("sequence.hold_s", s.hold_s),
            ("sequence.probe_power_W", s.probe_power_W),
        ] {
            non_negative(k, v)?;
        }
        if !(s.detector_efficiency > 0.0 && s.detector_efficiency <= 1.0) {
            return Err(invalid("sequence.detector_efficiency", "must lie in (0, 1]"));
        }
        let sim = &self.simulation;
        if let Some(t) = sim.max_time_s {
            positive("simulation.max_time_s", t)?;
        } else if !(s.hold_s > 0.0) {
            return Err(invalid(
                "simulation.max_time_s",
                "required when sequence.hold_s is 0 (the hold time bounds each trajectory)",
            ));
        }
        for &d in &sim.depth_sweep_K {
            non_negative("simulation.depth_sweep_K", d)?;
        }
        positive("simulation.recapture_temperature_K", sim.recapture_temperature_K)?;
        let sp = &self.spectrum;
        if sp.excited_F.len() != sp.od.len() {
            return Err(invalid(
                "spectrum.od",
                format!("{} ODs for {} lines in spectrum.excited_F", sp.od.len(), sp.excited_F.len()),
            ));
        }
        if sp.excited_F.is_empty() {
            return Err(invalid("spectrum.excited_F", "at least one line is required"));
        }
        for &od in &sp.od {
            non_negative("spectrum.od", od)?;
        }
        if let Some(w) = sp.linewidth_fwhm_hz {
            positive("spectrum.linewidth_fwhm_hz", w)?;
        }
        non_negative("spectrum.doppler_fwhm_hz", sp.doppler_fwhm_hz)?;
        positive("spectrum.detuning_step_hz", sp.detuning_step_hz)?;
        if !(sp.detuning_stop_hz >= sp.detuning_start_hz) {
            return Err(invalid("spectrum.detuning_stop_hz", "must not be below detuning_start_hz"));
        }
        positive("atom_number.photons_per_atom", self.atom_number.photons_per_atom)?;
        positive("atom_number.cloud_width_1e_full_m", self.atom_number.cloud_width_1e_full_m)?;
        self.geometry().validate()?;
        self.mot_cloud()
            .validate()
            .map_err(|e| invalid("cloud", e.to_string()))?;
        self.probe_sequence()
            .validate()
            .map_err(|e| invalid("sequence", e.to_string()))?;
        self.step_policy()
            .validate()
            .map_err(|e| invalid("simulation", e.to_string()))?;
        Ok(())
    }

    /// Copy with every default made explicit: trap depth instead of power,
    /// the simulated time, the linewidth and the species file.
    pub fn resolved(&self) -> Result<RunConfig, ConfigError> {
        let mut c = self.clone();
        c.trap.trap_depth_K = Some(self.trap_depth_kelvin());
        c.trap.trap_power_W = None;
        c.simulation.max_time_s = Some(self.max_time());
        if c.species_file.is_none() {
            c.species_file = std::env::var_os(SPECIES_ENV).map(PathBuf::from);
        }
        if c.spectrum.linewidth_fwhm_hz.is_none() {
            c.spectrum.linewidth_fwhm_hz = Some(c.species()?.natural_linewidth());
        }
        c.validate()?;
        Ok(c)
    }

    /// JSON echo of the resolved config; feeding it back reproduces the run.
    pub fn echo(&self) -> Result<Value, ConfigError> {
        serde_json::to_value(self.resolved()?).map_err(|e| ConfigError::Schema(e.to_string()))
    }

    /// Species from `species_file`, the environment variable, or the
    /// built-in ⁸⁷Rb data, in that order.
    pub fn species(&self) -> Result<AtomSpecies, ConfigError> {
        match &self.species_file {
            Some(path) => Ok(AtomSpecies::load(path)?),
            None => match std::env::var_os(SPECIES_ENV) {
                Some(path) => Ok(AtomSpecies::load(PathBuf::from(path))?),
                None => Ok(AtomSpecies::rb87()),
            },
        }
    }

    pub fn trap_depth_kelvin(&self) -> f64 {
        match (self.trap.trap_depth_K, self.trap.trap_power_W) {
            (Some(d), _) => d,
            (None, Some(p)) => p * self.trap.depth_per_power_K_per_W,
            (None, None) => 5e-3,
        }
    }

    pub fn max_time(&self) -> f64 {
        self.simulation.max_time_s.unwrap_or(self.sequence.hold_s)
    }

    pub fn geometry(&self) -> BeamGeometry {
        let t = &self.trap;
        BeamGeometry {
            waist: t.waist_m,
            numerical_aperture: t.numerical_aperture,
            tip_z: t.tip_z_m,
            fiber_length: t.fiber_length_m,
            core_radius: t.core_radius_m,
            divergence: t.divergence,
            wavelength: t.fort_wavelength_m,
        }
    }

    pub fn trap_config(&self) -> Result<TrapConfig, ConfigError> {
        let trap = TrapConfig::new(self.geometry(), kelvin_to_joule(self.trap_depth_kelvin()))?;
        Ok(trap.with_gravity(self.trap.gravity_m_s2))
    }

    pub fn mot_cloud(&self) -> MotCloud {
        let c = &self.cloud;
        MotCloud {
            center: c.center_m,
            half_widths_1e: c.half_widths_1e_m,
            temperature: c.temperature_K,
            atom_count: c.atom_count,
        }
    }

    pub fn probe_sequence(&self) -> ProbeSequenceConfig {
        let s = &self.sequence;
        ProbeSequenceConfig {
            modulation_frequency: s.modulation_frequency_hz,
            off_window: s.off_window_s,
            gate_time: s.gate_time_s,
            n_gates: s.n_gates,
            probe_power: s.probe_power_W,
        }
    }

    pub fn step_policy(&self) -> StepPolicy {
        let s = &self.simulation;
        StepPolicy {
            steps_per_period: s.steps_per_period,
            max_step: s.max_step_s,
            fixed_step: s.fixed_step_s,
            ..StepPolicy::default()
        }
    }

    pub fn loading_options(&self) -> LoadingOptions {
        let s = &self.simulation;
        LoadingOptions {
            step_policy: self.step_policy(),
            termination: TerminationRules {
                max_time: self.max_time(),
                capture_depth: s.capture_depth_m,
                full_fiber_transit: s.full_fiber_transit,
                bounding_box: BoundingBox {
                    half_width: s.box_half_width_m,
                    height_above_tip: s.box_height_m,
                },
                enabled: true,
            },
            threads: (s.threads > 0).then_some(s.threads),
        }
    }

    pub fn spectrum_model(&self, species: &AtomSpecies) -> Result<SpectrumModel, ConfigError> {
        let sp = &self.spectrum;
        let pairs: Vec<(u32, f64)> = sp.excited_F.iter().copied().zip(sp.od.iter().copied()).collect();
        let mut model = SpectrumModel::for_species(species, sp.ground_F, sp.reference_excited_F, &pairs)
            .map_err(|e| invalid("spectrum", e.to_string()))?;
        if let Some(w) = sp.linewidth_fwhm_hz {
            model.linewidth_fwhm = w;
        }
        model.frequency_offset = sp.frequency_offset_hz;
        if sp.doppler_fwhm_hz > 0.0 {
            model.lineshape = Lineshape::Voigt {
                doppler_fwhm_hz: sp.doppler_fwhm_hz,
            };
        }
        model.validate().map_err(|e| invalid("spectrum", e.to_string()))?;
        Ok(model)
    }

    pub fn detuning_grid(&self) -> Vec<f64> {
        let sp = &self.spectrum;
        detuning_grid(sp.detuning_start_hz, sp.detuning_stop_hz, sp.detuning_step_hz)
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            method: self.fit.method,
            max_iterations: self.fit.max_iterations,
            rescale_covariance: self.fit.rescale_covariance,
            ..FitOptions::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Result envelope

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEnvelope<T> {
    pub schema_version: u32,
    pub tool: String,
    pub tool_version: String,
    /// RFC 3339 creation time.
    pub timestamp: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub payload: T,
}

impl<T: Serialize> ResultEnvelope<T> {
    pub fn new(command: &str, seed: Option<u64>, config: Value, payload: T, timestamp: String) -> Self {
        ResultEnvelope {
            schema_version: ENVELOPE_SCHEMA_VERSION,
            tool: "fiberload".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            timestamp,
            command: command.into(),
            seed,
            config,
            payload,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("envelope serializes")
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut text = self.to_json();
        text.push('\n');
        std::fs::write(path, text).map_err(|e| DataError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Reads an envelope, refusing schema versions this build does not know.
pub fn read_envelope<T: DeserializeOwned>(text: &str) -> Result<ResultEnvelope<T>, ConfigError> {
    let raw: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
        format: "JSON",
        message: e.to_string(),
    })?;
    match raw.get("schema_version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(ENVELOPE_SCHEMA_VERSION) => from_document(raw),
        Some(v) => Err(ConfigError::Schema(format!(
            "envelope schema version {v} is not supported (expected {ENVELOPE_SCHEMA_VERSION})"
        ))),
        None => Err(ConfigError::Schema("envelope has no schema_version".into())),
    }
}

// ---------------------------------------------------------------------------
// Ingestion

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    PowerTrace,
    CountSpectrum,
}

/// Photon counts versus probe detuning, optionally averaged over cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSpectrum {
    pub detuning: Vec<f64>,
    pub counts: Vec<f64>,
    pub counts_stderr: Option<Vec<f64>>,
    pub n_gates: Option<Vec<f64>>,
    pub cycles: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Power(TransmissionTrace),
    Counts(CountSpectrum),
}

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> Result<Table, DataError> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| DataError::Io {
            path: name.clone(),
            message: e.to_string(),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Csv {
            path: name.clone(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv {
            path: name.clone(),
            message: e.to_string(),
        })?;
        let row = record
            .iter()
            .enumerate()
            .map(|(j, field)| {
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::BadValue {
                        path: name.clone(),
                        row: i + 1,
                        column: headers.get(j).cloned().unwrap_or_default(),
                    })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::Empty(format!("{name} has no data rows")));
    }
    Ok(Table { headers, rows })
}

/// Column indices of `base` or of its numbered repeats `base_1, base_2, ...`.
fn columns_named(headers: &[String], base: &str) -> Vec<usize> {
    if let Some(i) = headers.iter().position(|h| h == base) {
        return vec![i];
    }
    let mut numbered: Vec<(u32, usize)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            let n: u32 = h.strip_prefix(base)?.strip_prefix('_')?.parse().ok()?;
            Some((n, i))
        })
        .collect();
    numbered.sort();
    numbered.into_iter().map(|(_, i)| i).collect()
}

/// Per-row mean and, for more than one column, standard error σ/√k.
fn average(rows: &[Vec<f64>], cols: &[usize]) -> (Vec<f64>, Option<Vec<f64>>) {
    let k = cols.len() as f64;
    let mean: Vec<f64> = rows.iter().map(|r| cols.iter().map(|&c| r[c]).sum::<f64>() / k).collect();
    if cols.len() < 2 {
        return (mean, None);
    }
    let stderr = rows
        .iter()
        .zip(&mean)
        .map(|(r, m)| {
            let var = cols.iter().map(|&c| (r[c] - m).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        })
        .collect();
    (mean, Some(stderr))
}

fn check_increasing(path: &Path, column: &str, values: &[f64]) -> Result<(), DataError> {
    for i in 1..values.len() {
        if !(values[i] > values[i - 1]) {
            return Err(DataError::OutOfOrder {
                path: path.display().to_string(),
                row: i + 1,
                column: column.to_string(),
                value: values[i],
            });
        }
    }
    Ok(())
}

/// Reads a power trace (`time_s, power_ref_W, power_atoms_W`) or a count
/// spectrum (`detuning_hz, counts[, n_gates]`). Repeated cycles are given
/// as numbered columns (`power_atoms_W_1 ...`, `counts_1 ...`) and averaged.
/// Rows are numbered from 1 after the header.
pub fn ingest_trace(path: &Path, kind: TraceKind, probe_wavelength: f64) -> Result<Dataset, DataError> {
    let table = read_table(path)?;
    let name = path.display().to_string();
    let header_error = |expected: &str| DataError::Header {
        path: name.clone(),
        expected: expected.to_string(),
        found: table.headers.join(","),
    };
    match kind {
        TraceKind::PowerTrace => {
            let expected = "time_s,power_ref_W,power_atoms_W";
            if table.headers.first().map(String::as_str) != Some("time_s") {
                return Err(header_error(expected));
            }
            let reference = columns_named(&table.headers, "power_ref_W");
            let atoms = columns_named(&table.headers, "power_atoms_W");
            if reference.is_empty() || atoms.is_empty() || 1 + reference.len() + atoms.len() != table.headers.len() {
                return Err(header_error(expected));
            }
            let time: Vec<f64> = table.rows.iter().map(|r| r[0]).collect();
            check_increasing(path, "time_s", &time)?;
            let (power_reference, reference_stderr) = average(&table.rows, &reference);
            let (power_atoms, atoms_stderr) = average(&table.rows, &atoms);
            let mut trace = TransmissionTrace::new(time, power_reference, power_atoms, probe_wavelength)?;
            trace.reference_stderr = reference_stderr;
            trace.atoms_stderr = atoms_stderr;
            Ok(Dataset::Power(trace))
        }
        TraceKind::CountSpectrum => {
            let expected = "detuning_hz,counts[,n_gates]";
            if table.headers.first().map(String::as_str) != Some("detuning_hz") {
                return Err(header_error(expected));
            }
            let counts_cols = columns_named(&table.headers, "counts");
            let gates = table.headers.iter().position(|h| h == "n_gates");
            if counts_cols.is_empty() || 1 + counts_cols.len() + usize::from(gates.is_some()) != table.headers.len() {
                return Err(header_error(expected));
            }
            let detuning: Vec<f64> = table.rows.iter().map(|r| r[0]).collect();
            check_increasing(path, "detuning_hz", &detuning)?;
            let (counts, counts_stderr) = average(&table.rows, &counts_cols);
            Ok(Dataset::Counts(CountSpectrum {
                detuning,
                counts,
                counts_stderr,
                n_gates: gates.map(|g| table.rows.iter().map(|r| r[g]).collect()),
                cycles: counts_cols.len(),
            }))
        }
    }
}

// ---------------------------------------------------------------------------
// Plot data

/// Named numeric columns written as CSV in the given order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlotData {
    pub columns: Vec<(String, Vec<f64>)>,
}

impl PlotData {
    pub fn new() -> Self {
        PlotData::default()
    }

    pub fn with_column(mut self, name: &str, values: Vec<f64>) -> Self {
        self.columns.push((name.to_string(), values));
        self
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.1.len())
    }

    pub fn to_csv_string(&self) -> Result<String, DataError> {
        if self.columns.is_empty() || self.n_rows() == 0 {
            return Err(DataError::Empty("refusing to write a plot file without rows".into()));
        }
        let n = self.n_rows();
        if let Some((name, c)) = self.columns.iter().find(|(_, c)| c.len() != n) {
            return Err(DataError::Ragged(format!("column {name} has {} rows, expected {n}", c.len())));
        }
        let mut out = String::new();
        let header: Vec<&str> = self.columns.iter().map(|(name, _)| name.as_str()).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..n {
            let row: Vec<String> = self.columns.iter().map(|(_, c)| format_value(c[i])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        Ok(out)
    }
}

/// 17 significant digits in scientific notation.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn emit_plot_data(data: &PlotData, path: &Path) -> Result<(), DataError> {
    let text = data.to_csv_string()?;
    let write_error = |e: std::io::Error| DataError::Write {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut file = BufWriter::new(File::create(path).map_err(write_error)?);
    file.write_all(text.as_bytes()).map_err(write_error)?;
    file.flush().map_err(write_error)
}

/// Writes one row per trajectory: index, fate, transit time, final
/// position and velocity.
pub fn write_trajectories_csv(
    outcomes: &[crate::loading::TrajectoryOutcome],
    path: &Path,
) -> Result<(), DataError> {
    if outcomes.is_empty() {
        return Err(DataError::Empty("no trajectories to write".into()));
    }
    let write_error = |e: std::io::Error| DataError::Write {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut file = BufWriter::new(File::create(path).map_err(write_error)?);
    writeln!(
        file,
        "atom_index,fate,transit_time_s,x_m,y_m,z_m,r_m,vx_m_s,vy_m_s,vz_m_s"
    )
    .map_err(write_error)?;
    for (i, o) in outcomes.iter().enumerate() {
        let [x, y, z] = o.final_state.position;
        let [vx, vy, vz] = o.final_state.velocity;
        let values = [o.transit_time, x, y, z, x.hypot(y), vx, vy, vz].map(format_value);
        writeln!(file, "{i},{},{}", o.fate.as_str(), values.join(",")).map_err(write_error)?;
    }
    file.flush().map_err(write_error)
}

/// Parameter name → value map used for compact JSON payloads.
pub fn named(names: &[String], values: &[f64]) -> BTreeMap<String, f64> {
    names.iter().cloned().zip(values.iter().copied()).collect()
}
