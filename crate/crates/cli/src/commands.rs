use std::path::{Path, PathBuf};

use fiberload_core::atomic::{AtomSpecies, PolarizationModel};
use fiberload_core::constants::{joule_to_kelvin, kelvin_to_joule};
use fiberload_core::fitting::{
    estimate_uncertainties, fit_spectrum, FitError, FitOptions, FitProblem, UncertaintyMethod, Uncertainties,
};
use fiberload_core::io::{
    emit_plot_data, ingest_trace, load_config, named, write_trajectories_csv, ConfigError, DataError, Dataset,
    PlotData, ResultEnvelope, RunConfig, TraceKind,
};
use fiberload_core::loading::{
    captured_ensemble, run_loading_simulation, sample_trapped_thermal, simulate_recapture, LoadingError,
    LoadingResult, RecaptureResult,
};
use fiberload_core::optics::DivergenceModel;
use fiberload_core::spectroscopy::{
    atom_number_from_absorption, column_od_estimate, incident_photons_per_gate, peak_volume_density,
    simulate_probe_counts, AtomNumberEstimate, ProbeCounts, SpectroscopyError, SpectrumModel, SpectrumPoint,
};
use serde::{Deserialize, Serialize};

use crate::Common;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": {
                "category": self.category(),
                "code": self.code(),
                "message": self.message(),
            }
        })
        .to_string()
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LoadingError> for CliError {
    fn from(e: LoadingError) -> Self {
        match e {
            LoadingError::TooFewAtoms { .. }
            | LoadingError::InvalidCloud(_)
            | LoadingError::InvalidStepPolicy(_)
            | LoadingError::InvalidTermination(_)
            | LoadingError::Trap(_)
            | LoadingError::Sequence(_) => CliError::Config(e.to_string()),
            LoadingError::ThreadPool(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<SpectroscopyError> for CliError {
    fn from(e: SpectroscopyError) -> Self {
        match e {
            SpectroscopyError::InvalidModel(_) | SpectroscopyError::InvalidSequence(_) | SpectroscopyError::Species(_) => {
                CliError::Config(e.to_string())
            }
            SpectroscopyError::InvalidTrace(_)
            | SpectroscopyError::InconsistentTraces { .. }
            | SpectroscopyError::InvalidIntensity(_) => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::InvalidProblem(_) => CliError::Data(e.to_string()),
            FitError::Model(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn read_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(species) = &common.species {
        config.species_file = Some(species.clone());
    }
    config.validate()?;
    Ok(config)
}

fn finish<T: Serialize>(
    common: &Common,
    command: &str,
    seed: Option<u64>,
    config: &RunConfig,
    payload: T,
    plot: Option<PlotData>,
) -> Result<(), CliError> {
    let envelope = ResultEnvelope::new(command, seed, config.echo()?, payload, timestamp());
    if let (Some(path), Some(plot)) = (common.csv.as_ref().or(config.output.plot_csv.as_ref()), plot) {
        emit_plot_data(&plot, path)?;
    }
    match &common.out {
        Some(path) => envelope.write(path)?,
        None => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            // A closed pipe downstream is not an error for us.
            if let Err(e) = writeln!(out, "{}", envelope.to_json()) {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(CliError::Data(format!("writing stdout: {e}")));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

pub struct LoadingArgs {
    pub atoms: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub sweep: bool,
    pub recapture: bool,
    pub trajectories: Option<PathBuf>,
}

#[allow(non_snake_case)]
#[derive(Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub trap_depth_K: f64,
    pub result: LoadingResult,
}

#[allow(non_snake_case)]
#[derive(Debug, Serialize, Deserialize)]
pub struct RecapturePayload {
    /// Atoms captured by the loading run itself.
    pub captured: RecaptureResult,
    /// Thermal in-fiber ensemble at `temperature_K`.
    pub thermal: RecaptureResult,
    pub temperature_K: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LoadingPayload {
    pub result: Option<LoadingResult>,
    pub sweep: Vec<SweepPoint>,
    pub recapture: Option<RecapturePayload>,
}

#[allow(non_snake_case)]
pub fn simulate_loading(common: &Common, args: LoadingArgs) -> Result<(), CliError> {
    let mut config = read_config(common)?;
    if let Some(n) = args.atoms {
        config.simulation.n_atoms = n;
    }
    if let Some(seed) = args.seed {
        config.simulation.seed = seed;
    }
    if let Some(t) = args.threads {
        config.simulation.threads = t;
    }
    config.validate()?;
    let species = config.species()?;
    let trap = config.trap_config()?;
    let cloud = config.mot_cloud();
    let options = config.loading_options();
    let (n, seed) = (config.simulation.n_atoms, config.simulation.seed);

    if args.sweep {
        if config.simulation.depth_sweep_K.is_empty() {
            return Err(CliError::Config("--sweep needs simulation.depth_sweep_K".into()));
        }
        let mut points = Vec::new();
        for &depth in &config.simulation.depth_sweep_K {
            let run = run_loading_simulation(&cloud, &trap.with_depth(kelvin_to_joule(depth)), species.mass(), n, seed, &options)?;
            points.push(SweepPoint {
                trap_depth_K: depth,
                result: run.result,
            });
        }
        let plot = PlotData::new()
            .with_column("trap_depth_K", points.iter().map(|p| p.trap_depth_K).collect())
            .with_column("efficiency", points.iter().map(|p| p.result.efficiency).collect())
            .with_column("efficiency_stderr", points.iter().map(|p| p.result.efficiency_stderr).collect());
        let payload = LoadingPayload {
            result: None,
            sweep: points,
            recapture: None,
        };
        return finish(common, "simulate-loading", Some(seed), &config, payload, Some(plot));
    }

    let run = run_loading_simulation(&cloud, &trap, species.mass(), n, seed, &options)?;
    if let Some(path) = args.trajectories.as_ref().or(config.output.trajectories_csv.as_ref()) {
        write_trajectories_csv(&run.outcomes, path)?;
    }
    let recapture = if args.recapture {
        let sequence = config.probe_sequence();
        let T = config.simulation.recapture_temperature_K;
        let z = trap.geometry.tip_z - config.simulation.capture_depth_m;
        let thermal = sample_trapped_thermal(&trap, species.mass(), T, z, config.simulation.recapture_atoms, seed)?;
        let threads = options.threads;
        let step = options.step_policy;
        Some(RecapturePayload {
            captured: simulate_recapture(&captured_ensemble(&run), &trap, species.mass(), &sequence, sequence.n_gates, &step, threads)?,
            thermal: simulate_recapture(&thermal, &trap, species.mass(), &sequence, sequence.n_gates, &step, threads)?,
            temperature_K: T,
        })
    } else {
        None
    };
    let plot = PlotData::new()
        .with_column("trap_depth_K", vec![config.trap_depth_kelvin()])
        .with_column("efficiency", vec![run.result.efficiency])
        .with_column("efficiency_stderr", vec![run.result.efficiency_stderr]);
    let payload = LoadingPayload {
        result: Some(run.result),
        sweep: Vec::new(),
        recapture,
    };
    finish(common, "simulate-loading", Some(seed), &config, payload, Some(plot))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct SpectrumPayload {
    pub model: SpectrumModel,
    pub points: Vec<SpectrumPoint>,
}

pub fn spectrum(common: &Common) -> Result<(), CliError> {
    let config = read_config(common)?;
    let species = config.species()?;
    let model = config.spectrum_model(&species)?;
    let points = model.transmission_spectrum(&config.detuning_grid());
    let plot = PlotData::new()
        .with_column("detuning_hz", points.iter().map(|p| p.detuning).collect())
        .with_column("transmission", points.iter().map(|p| p.transmission).collect())
        .with_column("optical_depth", points.iter().map(|p| p.optical_depth).collect());
    finish(common, "spectrum", None, &config, SpectrumPayload { model, points }, Some(plot))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct ProbeCountsPayload {
    pub photons_per_gate: f64,
    pub detector_efficiency: f64,
    pub counts: Vec<ProbeCounts>,
}

pub fn probe_counts(common: &Common, seed: Option<u64>) -> Result<(), CliError> {
    let mut config = read_config(common)?;
    if let Some(seed) = seed {
        config.simulation.seed = seed;
    }
    let species = config.species()?;
    let model = config.spectrum_model(&species)?;
    let sequence = config.probe_sequence();
    let wavelength = species.d2_wavelength();
    let efficiency = config.sequence.detector_efficiency;
    let seed = config.simulation.seed;
    let counts = simulate_probe_counts(&model, &sequence, &config.detuning_grid(), wavelength, efficiency, seed)?;
    let plot = PlotData::new()
        .with_column("detuning_hz", counts.iter().map(|c| c.detuning).collect())
        .with_column("counts", counts.iter().map(|c| c.sampled as f64).collect())
        .with_column("n_gates", counts.iter().map(|c| f64::from(c.n_gates)).collect());
    let payload = ProbeCountsPayload {
        photons_per_gate: incident_photons_per_gate(sequence.probe_power, sequence.gate_time, wavelength),
        detector_efficiency: efficiency,
        counts,
    };
    finish(common, "probe-counts", Some(seed), &config, payload, Some(plot))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct FitPayload {
    pub converged: bool,
    pub best_fit: std::collections::BTreeMap<String, f64>,
    pub standard_errors: std::collections::BTreeMap<String, f64>,
    pub parameter_names: Vec<String>,
    pub free: Vec<bool>,
    pub covariance: Vec<Vec<f64>>,
    pub objective: f64,
    pub reduced_chi2: f64,
    pub n_iterations: usize,
    pub residuals: Vec<f64>,
    pub uncertainties: Option<Uncertainties>,
    pub model: SpectrumModel,
    pub options: FitOptions,
    pub data_file: String,
    pub cycles: usize,
}

fn relative_strengths(species: &AtomSpecies, config: &RunConfig) -> Vec<f64> {
    config
        .spectrum
        .excited_F
        .iter()
        .map(|&f| species.strength(config.spectrum.ground_F, f))
        .collect()
}

pub fn fit_od(common: &Common, data: &Path) -> Result<(), CliError> {
    let config = read_config(common)?;
    let species = config.species()?;
    let template = config.spectrum_model(&species)?;
    let Dataset::Counts(spectrum) = ingest_trace(data, TraceKind::CountSpectrum, species.d2_wavelength())? else {
        unreachable!("count spectrum requested")
    };
    let mut problem = FitProblem::from_counts(template, &spectrum.detuning, &spectrum.counts, &relative_strengths(&species, &config))?;
    // Averaged counts over k cycles have Poisson variance mean / k.
    for p in &mut problem.data {
        p.weight *= spectrum.cycles as f64;
    }
    let k = problem.template.lines.len();
    problem.set_free(k, config.fit.free_linewidth);
    problem.set_free(k + 1, config.fit.free_offset);
    problem.set_free(k + 3, config.fit.free_background);
    let options = config.fit_options();
    let result = fit_spectrum(&problem, &options)?;

    let uncertainties = if result.converged {
        let method = if config.fit.bootstrap_replicates > 0 {
            UncertaintyMethod::Bootstrap {
                replicates: config.fit.bootstrap_replicates,
                seed: config.fit.bootstrap_seed,
            }
        } else {
            UncertaintyMethod::Covariance
        };
        Some(estimate_uncertainties(&result, method)?)
    } else {
        None
    };
    let errors = uncertainties
        .as_ref()
        .map(|u| u.standard_errors.clone())
        .unwrap_or_else(|| result.standard_errors());
    let fitted = result.model();
    let plot = PlotData::new()
        .with_column("detuning_hz", spectrum.detuning.clone())
        .with_column("counts", spectrum.counts.clone())
        .with_column("fit_counts", spectrum.counts.iter().zip(&result.residuals).map(|(c, r)| c - r).collect())
        .with_column("fit_transmission", spectrum.detuning.iter().map(|&d| fitted.transmission_at(d).value).collect());
    let converged = result.converged;
    let payload = FitPayload {
        converged,
        best_fit: named(&result.parameter_names, &result.best_fit),
        standard_errors: named(&result.parameter_names, &errors),
        parameter_names: result.parameter_names.clone(),
        free: result.free.clone(),
        covariance: result.covariance.clone(),
        objective: result.objective,
        reduced_chi2: result.reduced_chi2,
        n_iterations: result.n_iterations,
        residuals: result.residuals.clone(),
        uncertainties,
        model: fitted,
        options,
        data_file: data.display().to_string(),
        cycles: spectrum.cycles,
    };
    let seed = (config.fit.bootstrap_replicates > 0).then_some(config.fit.bootstrap_seed);
    finish(common, "fit-od", seed, &config, payload, Some(plot))?;
    if !converged {
        return Err(CliError::Numeric(format!(
            "fit did not converge within {} iterations",
            options.max_iterations
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct AtomNumberPayload {
    pub estimate: AtomNumberEstimate,
    pub cross_section_m2: f64,
    pub cloud_width_1e_full_m: f64,
    pub column_od: f64,
    pub peak_density_m3: f64,
}

pub fn atom_number(common: &Common, data: &Path) -> Result<(), CliError> {
    let config = read_config(common)?;
    let species = config.species()?;
    let Dataset::Power(trace) = ingest_trace(data, TraceKind::PowerTrace, species.d2_wavelength())? else {
        unreachable!("power trace requested")
    };
    let estimate = atom_number_from_absorption(&trace, config.atom_number.photons_per_atom)?;
    let sigma = species.resonant_cross_section(
        config.spectrum.ground_F,
        config.spectrum.reference_excited_F,
        PolarizationModel::Unpolarized,
    );
    let width = config.atom_number.cloud_width_1e_full_m;
    let geometry = config.geometry();
    let payload = AtomNumberPayload {
        cross_section_m2: sigma,
        cloud_width_1e_full_m: width,
        column_od: column_od_estimate(estimate.atom_number, width, geometry.waist, sigma, geometry.fiber_length),
        peak_density_m3: peak_volume_density(estimate.atom_number, width, geometry.fiber_length),
        estimate,
    };
    finish(common, "atom-number", None, &config, payload, None)
}

// ---------------------------------------------------------------------------

#[allow(non_snake_case)]
#[derive(Debug, Serialize, Deserialize)]
pub struct CaptureRangePayload {
    pub trap_depth_K: f64,
    pub threshold_K: f64,
    pub capture_range_m: f64,
    pub divergence: DivergenceModel,
    pub divergence_length_m: f64,
    pub transverse_trap_frequency_hz: f64,
}

pub fn capture_range(common: &Common, threshold_k: Option<f64>) -> Result<(), CliError> {
    let config = read_config(common)?;
    let species = config.species()?;
    let trap = config.trap_config()?;
    let threshold = threshold_k.unwrap_or(config.cloud.temperature_K);
    let range = trap
        .capture_range(kelvin_to_joule(threshold))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let payload = CaptureRangePayload {
        trap_depth_K: joule_to_kelvin(trap.trap_depth),
        threshold_K: threshold,
        capture_range_m: range,
        divergence: trap.geometry.divergence,
        divergence_length_m: trap.geometry.divergence_length(),
        transverse_trap_frequency_hz: trap.transverse_trap_frequency(species.mass()),
    };
    finish(common, "capture-range", None, &config, payload, None)
}
