//! Monte-Carlo loading of atoms from a MOT cloud into the in-fiber FORT.
//!
//! Every atom gets its own ChaCha8 stream (`stream = atom index` under the
//! global seed), trajectories are integrated independently with
//! velocity-Verlet, and results are reduced in atom-index order. A run is
//! therefore bit-identical whatever the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::BOLTZMANN;
use crate::optics::{OpticsError, TrapConfig};
use crate::spectroscopy::{ProbeSequenceConfig, SpectroscopyError};

/// Smallest ensemble accepted by [`run_loading_simulation`].
pub const MIN_LOADING_ATOMS: usize = 100;

/// Relative energy drift above which a static-field trajectory is flagged.
pub const ENERGY_DRIFT_LIMIT: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum LoadingError {
    #[error("invalid MOT cloud: {0}")]
    InvalidCloud(String),
    #[error("at least {min} atoms are required, got {got}")]
    TooFewAtoms { min: usize, got: usize },
    #[error("invalid step policy: {0}")]
    InvalidStepPolicy(String),
    #[error("invalid termination rules: {0}")]
    InvalidTermination(String),
    #[error("cannot build worker pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Trap(#[from] OpticsError),
    #[error(transparent)]
    Sequence(#[from] SpectroscopyError),
}

/// Gaussian MOT cloud with density ∝ exp(−Σ (x_i − c_i)² / s_i²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotCloud {
    pub center: [f64; 3],
    /// 1/e half widths s_i of the density, m.
    pub half_widths_1e: [f64; 3],
    pub temperature: f64,
    pub atom_count: u64,
}

impl MotCloud {
    pub fn validate(&self) -> Result<(), LoadingError> {
        if self.half_widths_1e.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(LoadingError::InvalidCloud(format!(
                "half widths must be positive, got {:?}",
                self.half_widths_1e
            )));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(LoadingError::InvalidCloud("center must be finite".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LoadingError::InvalidCloud(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.atom_count == 0 {
            return Err(LoadingError::InvalidCloud("atom count must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpacePoint {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
}

/// Sampled initial conditions; regenerating from the same cloud, size and
/// seed gives the same ensemble bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub atoms: Vec<PhaseSpacePoint>,
    pub seed: u64,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// The random stream owned by atom `index` under `seed`.
pub fn atom_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_atom(cloud: &MotCloud, mass: f64, seed: u64, index: u64) -> PhaseSpacePoint {
    let mut rng = atom_rng(seed, index);
    let v_sigma = (BOLTZMANN * cloud.temperature / mass).sqrt();
    let mut position = [0.0; 3];
    let mut velocity = [0.0; 3];
    for k in 0..3 {
        let g: f64 = StandardNormal.sample(&mut rng);
        position[k] = cloud.center[k] + g * cloud.half_widths_1e[k] / 2f64.sqrt();
    }
    for v in &mut velocity {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v = g * v_sigma;
    }
    PhaseSpacePoint { position, velocity }
}

/// Draws `n` atoms from the cloud: Gaussian positions with the stated 1/e
/// half widths and Maxwell–Boltzmann velocities at the cloud temperature.
pub fn sample_mot_cloud(cloud: &MotCloud, mass: f64, n: usize, seed: u64) -> Result<Ensemble, LoadingError> {
    cloud.validate()?;
    let atoms = (0..n as u64).map(|i| sample_atom(cloud, mass, seed, i)).collect();
    Ok(Ensemble { atoms, seed })
}

/// Thermal ensemble already bound inside the fiber: transverse positions
/// from the Boltzmann distribution in the Gaussian well (truncated at the
/// core), Maxwell–Boltzmann velocities, keeping only atoms whose transverse
/// energy cannot reach the wall.
pub fn sample_trapped_thermal(
    trap: &TrapConfig,
    mass: f64,
    temperature: f64,
    z: f64,
    n: usize,
    seed: u64,
) -> Result<Ensemble, LoadingError> {
    trap.validate()?;
    if !(temperature > 0.0) {
        return Err(LoadingError::InvalidCloud(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !(trap.trap_depth > 0.0) || z > trap.geometry.tip_z {
        return Err(LoadingError::InvalidCloud(
            "a trapped ensemble needs a nonzero trap and a height inside the fiber".into(),
        ));
    }
    let kt = BOLTZMANN * temperature;
    let core = trap.geometry.core_radius;
    let wall = trap.dipole_potential(core, z);
    let v_sigma = (kt / mass).sqrt();
    let atoms = (0..n as u64)
        .map(|i| {
            let mut rng = atom_rng(seed, i);
            loop {
                let x = rng.random_range(-core..core);
                let y = rng.random_range(-core..core);
                let r_sq = x * x + y * y;
                if r_sq >= core * core {
                    continue;
                }
                let u = trap.dipole_potential_sq(r_sq, z);
                let accept: f64 = rng.random();
                if accept >= (-(u + trap.trap_depth) / kt).exp() {
                    continue;
                }
                let mut velocity = [0.0; 3];
                for v in &mut velocity {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    *v = g * v_sigma;
                }
                let e_perp = 0.5 * mass * (velocity[0].powi(2) + velocity[1].powi(2)) + u;
                if e_perp < wall {
                    return PhaseSpacePoint {
                        position: [x, y, z],
                        velocity,
                    };
                }
            }
        })
        .collect();
    Ok(Ensemble { atoms, seed })
}

// ---------------------------------------------------------------------------
// Trajectory integration

/// Velocity-Verlet step selection.
///
/// Near the beam (r < `beam_radius_factor` · w(z)) the step resolves the
/// local radial oscillation with `steps_per_period` steps; far from it the
/// dynamics are ballistic and `max_step` is used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepPolicy {
    pub steps_per_period: f64,
    pub max_step: f64,
    pub beam_radius_factor: f64,
    /// Overrides the adaptive rule with a single fixed step.
    #[serde(default)]
    pub fixed_step: Option<f64>,
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy {
            steps_per_period: 200.0,
            max_step: 1e-6,
            beam_radius_factor: 3.0,
            fixed_step: None,
        }
    }
}

impl StepPolicy {
    pub fn validate(&self) -> Result<(), LoadingError> {
        if !(self.steps_per_period > 0.0 && self.max_step > 0.0 && self.beam_radius_factor > 0.0) {
            return Err(LoadingError::InvalidStepPolicy(format!("{self:?}")));
        }
        if let Some(dt) = self.fixed_step {
            if !(dt > 0.0) {
                return Err(LoadingError::InvalidStepPolicy(format!("fixed step {dt} must be positive")));
            }
        }
        Ok(())
    }

    /// The in-fiber step, min(1/(N ν_trap), max_step).
    pub fn base_step(&self, trap: &TrapConfig, mass: f64) -> f64 {
        if let Some(dt) = self.fixed_step {
            return dt;
        }
        let nu = trap.transverse_trap_frequency(mass);
        if nu > 0.0 {
            (1.0 / (self.steps_per_period * nu)).min(self.max_step)
        } else {
            self.max_step
        }
    }

    #[inline]
    fn step_at(&self, trap: &TrapConfig, nu0: f64, r_sq: f64, z: f64) -> f64 {
        if let Some(dt) = self.fixed_step {
            return dt;
        }
        if nu0 <= 0.0 {
            return self.max_step;
        }
        let w_sq = trap.geometry.beam_waist_at(z).powi(2);
        let k = self.beam_radius_factor;
        if r_sq > k * k * w_sq {
            return self.max_step;
        }
        let w0_sq = trap.geometry.waist * trap.geometry.waist;
        let nu = nu0 * w0_sq / w_sq;
        (1.0 / (self.steps_per_period * nu)).min(self.max_step)
    }
}

/// Axis-aligned region outside of which an atom counts as escaped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    /// Largest |x| and |y|, m.
    pub half_width: f64,
    /// Largest height above the fiber tip, m.
    pub height_above_tip: f64,
}

impl Default for BoundingBox {
    fn default() -> Self {
        BoundingBox {
            half_width: 10e-3,
            height_above_tip: 20e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminationRules {
    pub max_time: f64,
    /// Depth below the tip at which a bound atom counts as captured.
    pub capture_depth: f64,
    /// Follow captured atoms through the whole fiber instead of stopping at
    /// `capture_depth`.
    #[serde(default)]
    pub full_fiber_transit: bool,
    pub bounding_box: BoundingBox,
    /// When false, only the time limit ends a trajectory (free evolution).
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TerminationRules {
    fn default() -> Self {
        TerminationRules {
            max_time: 0.1,
            capture_depth: 1e-3,
            full_fiber_transit: false,
            bounding_box: BoundingBox::default(),
            enabled: true,
        }
    }
}

impl TerminationRules {
    /// Only the time limit applies.
    pub fn free_evolution(max_time: f64) -> Self {
        TerminationRules {
            max_time,
            enabled: false,
            ..TerminationRules::default()
        }
    }

    pub fn validate(&self) -> Result<(), LoadingError> {
        if !(self.max_time > 0.0 && self.max_time.is_finite()) {
            return Err(LoadingError::InvalidTermination(format!(
                "a positive maximum simulated time is required, got {}",
                self.max_time
            )));
        }
        if !(self.capture_depth > 0.0) {
            return Err(LoadingError::InvalidTermination(format!(
                "capture depth must be positive, got {}",
                self.capture_depth
            )));
        }
        if !(self.bounding_box.half_width > 0.0 && self.bounding_box.height_above_tip > 0.0) {
            return Err(LoadingError::InvalidTermination("bounding box must be non-empty".into()));
        }
        Ok(())
    }

    fn capture_plane(&self, trap: &TrapConfig) -> f64 {
        let depth = if self.full_fiber_transit {
            trap.geometry.fiber_length
        } else {
            self.capture_depth
        };
        trap.geometry.tip_z - depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fate {
    CapturedInFiber,
    WallLoss,
    FacetLoss,
    Escaped,
    Timeout,
}

impl Fate {
    pub const ALL: [Fate; 5] = [
        Fate::CapturedInFiber,
        Fate::WallLoss,
        Fate::FacetLoss,
        Fate::Escaped,
        Fate::Timeout,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Fate::CapturedInFiber => "captured_in_fiber",
            Fate::WallLoss => "wall_loss",
            Fate::FacetLoss => "facet_loss",
            Fate::Escaped => "escaped",
            Fate::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryOutcome {
    pub fate: Fate,
    pub final_state: PhaseSpacePoint,
    /// Height at which capture was declared; present iff captured.
    pub capture_depth_z: Option<f64>,
    pub transit_time: f64,
    pub steps: u64,
    /// Largest |E − E0| / (U0 + KE0) seen along the trajectory.
    pub max_energy_drift: f64,
    /// Energy drift exceeded [`ENERGY_DRIFT_LIMIT`] in a static field.
    pub integrator_failure: bool,
}

impl TrajectoryOutcome {
    pub fn is_captured(&self) -> bool {
        self.fate == Fate::CapturedInFiber
    }
}

#[inline]
fn kinetic(mass: f64, v: &[f64; 3]) -> f64 {
    0.5 * mass * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
}

/// Integrates one atom under the FORT dipole force and gravity until it is
/// captured, lost, escapes or the time limit is reached.
///
/// The FORT is treated as static; modulation is handled by
/// [`simulate_recapture`].
pub fn integrate_trajectory(
    initial: PhaseSpacePoint,
    trap: &TrapConfig,
    mass: f64,
    policy: &StepPolicy,
    rules: &TerminationRules,
) -> TrajectoryOutcome {
    let geometry = &trap.geometry;
    let tip = geometry.tip_z;
    let core_sq = geometry.core_radius * geometry.core_radius;
    let capture_plane = rules.capture_plane(trap);
    let nu0 = trap.transverse_trap_frequency(mass);
    let bbox = rules.bounding_box;

    let mut x = initial.position;
    let mut v = initial.velocity;
    let energy_of = |x: &[f64; 3], v: &[f64; 3]| kinetic(mass, v) + trap.total_potential(*x, mass);
    let e0 = energy_of(&x, &v);
    let energy_scale = trap.trap_depth + kinetic(mass, &v);
    // Floor for untrapped atoms starting at rest.
    let energy_scale = energy_scale.max(BOLTZMANN * 1e-6);
    let mut max_drift: f64 = 0.0;

    let finish = |fate: Fate, x: [f64; 3], v: [f64; 3], t: f64, steps: u64, drift: f64| TrajectoryOutcome {
        fate,
        final_state: PhaseSpacePoint { position: x, velocity: v },
        capture_depth_z: (fate == Fate::CapturedInFiber).then_some(x[2]),
        transit_time: t,
        steps,
        max_energy_drift: drift,
        integrator_failure: drift > ENERGY_DRIFT_LIMIT,
    };

    if rules.enabled && x[2] <= tip && x[0] * x[0] + x[1] * x[1] >= core_sq {
        return finish(Fate::FacetLoss, x, v, 0.0, 0, 0.0);
    }

    let mut a = {
        let f = trap.force(x, mass);
        [f[0] / mass, f[1] / mass, f[2] / mass]
    };
    let mut t = 0.0;
    let mut steps = 0u64;
    while t < rules.max_time {
        let r_sq = x[0] * x[0] + x[1] * x[1];
        let dt = policy.step_at(trap, nu0, r_sq, x[2]).min(rules.max_time - t);
        let z_old = x[2];
        let (x_old, y_old) = (x[0], x[1]);
        for k in 0..3 {
            v[k] += 0.5 * dt * a[k];
            x[k] += dt * v[k];
        }
        let f = trap.force(x, mass);
        for k in 0..3 {
            a[k] = f[k] / mass;
            v[k] += 0.5 * dt * a[k];
        }
        t += dt;
        steps += 1;

        if steps.is_multiple_of(64) || !rules.enabled {
            let drift = (energy_of(&x, &v) - e0).abs() / energy_scale;
            max_drift = max_drift.max(drift);
        }
        if !rules.enabled {
            continue;
        }

        let r_sq = x[0] * x[0] + x[1] * x[1];
        if z_old > tip && x[2] <= tip {
            // Radial position where the straight segment crosses the tip plane.
            let s = (z_old - tip) / (z_old - x[2]);
            let xc = x_old + s * (x[0] - x_old);
            let yc = y_old + s * (x[1] - y_old);
            if xc * xc + yc * yc >= core_sq {
                return finish(Fate::FacetLoss, x, v, t, steps, max_drift);
            }
        }
        if x[2] <= tip {
            if r_sq >= core_sq {
                return finish(Fate::WallLoss, x, v, t, steps, max_drift);
            }
            if x[2] <= capture_plane {
                let e_perp = 0.5 * mass * (v[0] * v[0] + v[1] * v[1]) + trap.dipole_potential_sq(r_sq, x[2]);
                let wall = trap.dipole_potential_sq(core_sq, x[2]);
                if e_perp < wall {
                    let drift = (energy_of(&x, &v) - e0).abs() / energy_scale;
                    max_drift = max_drift.max(drift);
                    return finish(Fate::CapturedInFiber, x, v, t, steps, max_drift);
                }
            }
        }
        if x[0].abs() > bbox.half_width || x[1].abs() > bbox.half_width || x[2] > tip + bbox.height_above_tip {
            return finish(Fate::Escaped, x, v, t, steps, max_drift);
        }
    }
    let drift = (energy_of(&x, &v) - e0).abs() / energy_scale;
    max_drift = max_drift.max(drift);
    finish(Fate::Timeout, x, v, t, steps, max_drift)
}

// ---------------------------------------------------------------------------
// Loading runs

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FateCounts {
    pub captured_in_fiber: u64,
    pub wall_loss: u64,
    pub facet_loss: u64,
    pub escaped: u64,
    pub timeout: u64,
}

impl FateCounts {
    pub fn add(&mut self, fate: Fate) {
        *self.get_mut(fate) += 1;
    }

    fn get_mut(&mut self, fate: Fate) -> &mut u64 {
        match fate {
            Fate::CapturedInFiber => &mut self.captured_in_fiber,
            Fate::WallLoss => &mut self.wall_loss,
            Fate::FacetLoss => &mut self.facet_loss,
            Fate::Escaped => &mut self.escaped,
            Fate::Timeout => &mut self.timeout,
        }
    }

    pub fn get(&self, fate: Fate) -> u64 {
        match fate {
            Fate::CapturedInFiber => self.captured_in_fiber,
            Fate::WallLoss => self.wall_loss,
            Fate::FacetLoss => self.facet_loss,
            Fate::Escaped => self.escaped,
            Fate::Timeout => self.timeout,
        }
    }

    pub fn total(&self) -> u64 {
        Fate::ALL.iter().map(|&f| self.get(f)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingResult {
    pub n_sampled: u64,
    pub n_captured: u64,
    pub efficiency: f64,
    /// Binomial standard error of the efficiency.
    pub efficiency_stderr: f64,
    /// ⟨KE⊥⟩ / k_B over captured atoms (two transverse degrees of freedom), K.
    pub in_fiber_temperature: Option<f64>,
    /// 2·√2·σ of the captured transverse positions (1/e full width), m.
    pub transverse_width_1e_full: Option<f64>,
    /// Mean captured transverse position (x, y), m.
    pub transverse_center: Option<[f64; 2]>,
    pub fate_histogram: FateCounts,
    pub integrator_failures: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct LoadingOptions {
    pub step_policy: StepPolicy,
    pub termination: TerminationRules,
    /// Worker threads; `Some(1)` runs serially, `None` uses the global pool.
    pub threads: Option<usize>,
}


#[derive(Debug, Clone, PartialEq)]
pub struct LoadingRun {
    pub result: LoadingResult,
    /// One outcome per sampled atom, in atom-index order.
    pub outcomes: Vec<TrajectoryOutcome>,
}

fn run_indexed<T, F>(n: usize, threads: Option<usize>, f: F) -> Result<Vec<T>, LoadingError>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match threads {
        Some(1) => Ok((0..n).map(f).collect()),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| LoadingError::ThreadPool(e.to_string()))?;
            Ok(pool.install(|| (0..n).into_par_iter().map(&f).collect()))
        }
        None => Ok((0..n).into_par_iter().map(f).collect()),
    }
}

/// Samples `n` atoms from `cloud`, integrates each trajectory and
/// aggregates loading statistics over the captured atoms.
pub fn run_loading_simulation(
    cloud: &MotCloud,
    trap: &TrapConfig,
    mass: f64,
    n: usize,
    seed: u64,
    options: &LoadingOptions,
) -> Result<LoadingRun, LoadingError> {
    if n < MIN_LOADING_ATOMS {
        return Err(LoadingError::TooFewAtoms {
            min: MIN_LOADING_ATOMS,
            got: n,
        });
    }
    cloud.validate()?;
    trap.validate()?;
    options.step_policy.validate()?;
    options.termination.validate()?;

    let outcomes = run_indexed(n, options.threads, |i| {
        let start = sample_atom(cloud, mass, seed, i as u64);
        integrate_trajectory(start, trap, mass, &options.step_policy, &options.termination)
    })?;
    let result = summarize(&outcomes, mass, seed);
    Ok(LoadingRun { result, outcomes })
}

/// Ordered reduction of trajectory outcomes into a [`LoadingResult`].
pub fn summarize(outcomes: &[TrajectoryOutcome], mass: f64, seed: u64) -> LoadingResult {
    let mut histogram = FateCounts::default();
    let mut failures = 0;
    let mut ke_sum = 0.0;
    let (mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0);
    for o in outcomes {
        histogram.add(o.fate);
        if o.integrator_failure {
            failures += 1;
        }
        if o.is_captured() {
            let [x, y, _] = o.final_state.position;
            let [vx, vy, _] = o.final_state.velocity;
            ke_sum += 0.5 * mass * (vx * vx + vy * vy);
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
        }
    }
    let n = outcomes.len() as u64;
    let captured = histogram.captured_in_fiber;
    let efficiency = if n > 0 { captured as f64 / n as f64 } else { 0.0 };
    let efficiency_stderr = if n > 0 {
        (efficiency * (1.0 - efficiency) / n as f64).sqrt()
    } else {
        0.0
    };
    let (temperature, width, center) = if captured > 0 {
        let c = captured as f64;
        let (mx, my) = (sx / c, sy / c);
        let temperature = ke_sum / c / BOLTZMANN;
        let width = if captured > 1 {
            // Per-axis sample variance, pooled over x and y.
            let var = ((sxx - c * mx * mx) + (syy - c * my * my)) / (2.0 * (c - 1.0));
            Some(2.0 * (2.0 * var.max(0.0)).sqrt())
        } else {
            None
        };
        (Some(temperature), width, Some([mx, my]))
    } else {
        (None, None, None)
    };
    LoadingResult {
        n_sampled: n,
        n_captured: captured,
        efficiency,
        efficiency_stderr,
        in_fiber_temperature: temperature,
        transverse_width_1e_full: width,
        transverse_center: center,
        fate_histogram: histogram,
        integrator_failures: failures,
        seed,
    }
}

/// Captured atoms of a run, as an ensemble for [`simulate_recapture`].
pub fn captured_ensemble(run: &LoadingRun) -> Ensemble {
    Ensemble {
        atoms: run
            .outcomes
            .iter()
            .filter(|o| o.is_captured())
            .map(|o| o.final_state)
            .collect(),
        seed: run.result.seed,
    }
}

// ---------------------------------------------------------------------------
// Stroboscopic release and recapture

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecaptureResult {
    pub n_atoms: u64,
    /// Fraction of the atoms alive at the start of cycle k that survive it.
    pub per_cycle_survival: Vec<f64>,
    /// Fraction of the initial atoms alive after cycle k.
    pub cumulative_survival: Vec<f64>,
}

impl RecaptureResult {
    pub fn min_per_cycle(&self) -> f64 {
        self.per_cycle_survival.iter().copied().fold(1.0, f64::min)
    }

    pub fn final_survival(&self) -> f64 {
        self.cumulative_survival.last().copied().unwrap_or(1.0)
    }
}

/// Number of cycles (out of `n_cycles`) the atom survives.
fn recapture_atom(
    atom: &PhaseSpacePoint,
    trap: &TrapConfig,
    mass: f64,
    sequence: &ProbeSequenceConfig,
    n_cycles: u32,
    dt: f64,
) -> u32 {
    let z = trap.geometry.tip_z.min(atom.position[2]);
    let core_sq = trap.geometry.core_radius * trap.geometry.core_radius;
    let wall = trap.dipole_potential_sq(core_sq, z);
    let [mut x, mut y, _] = atom.position;
    let [mut vx, mut vy, _] = atom.velocity;
    let on_time = sequence.on_window();
    let on_steps = (on_time / dt).ceil().max(1.0) as u64;
    let h = on_time / on_steps as f64;
    let accel = |x: f64, y: f64| {
        let f = trap.dipole_force([x, y, z]);
        (f[0] / mass, f[1] / mass)
    };
    for cycle in 0..n_cycles {
        // FORT off: free flight. Gravity acts only along the fiber axis.
        x += vx * sequence.off_window;
        y += vy * sequence.off_window;
        let r_sq = x * x + y * y;
        if r_sq >= core_sq {
            return cycle;
        }
        let e_perp = 0.5 * mass * (vx * vx + vy * vy) + trap.dipole_potential_sq(r_sq, z);
        if e_perp >= wall {
            return cycle;
        }
        // FORT on: bound transverse motion.
        let (mut ax, mut ay) = accel(x, y);
        for _ in 0..on_steps {
            vx += 0.5 * h * ax;
            vy += 0.5 * h * ay;
            x += h * vx;
            y += h * vy;
            (ax, ay) = accel(x, y);
            vx += 0.5 * h * ax;
            vy += 0.5 * h * ay;
        }
    }
    n_cycles
}

/// Alternates FORT-off free flight and FORT-on trapped evolution for
/// `n_cycles` modulation periods. An atom survives a cycle when, at the
/// moment the FORT returns, it is inside the core with transverse energy
/// below the potential at the core wall.
pub fn simulate_recapture(
    captured: &Ensemble,
    trap: &TrapConfig,
    mass: f64,
    sequence: &ProbeSequenceConfig,
    n_cycles: u32,
    policy: &StepPolicy,
    threads: Option<usize>,
) -> Result<RecaptureResult, LoadingError> {
    trap.validate()?;
    sequence.validate()?;
    policy.validate()?;
    let dt = policy.base_step(trap, mass);
    let survived = run_indexed(captured.len(), threads, |i| {
        recapture_atom(&captured.atoms[i], trap, mass, sequence, n_cycles, dt)
    })?;
    let n = captured.len() as u64;
    let mut per_cycle = Vec::with_capacity(n_cycles as usize);
    let mut cumulative = Vec::with_capacity(n_cycles as usize);
    let mut alive = n;
    for cycle in 0..n_cycles {
        let still = survived.iter().filter(|&&s| s > cycle).count() as u64;
        per_cycle.push(if alive > 0 { still as f64 / alive as f64 } else { 1.0 });
        cumulative.push(if n > 0 { still as f64 / n as f64 } else { 1.0 });
        alive = still;
    }
    Ok(RecaptureResult {
        n_atoms: n,
        per_cycle_survival: per_cycle,
        cumulative_survival: cumulative,
    })
}

/// Root-mean-square transverse free-flight displacement of a thermal
/// ensemble during `duration`, √(2 k_B T / m) · t.
pub fn rms_free_flight_displacement(temperature: f64, mass: f64, duration: f64) -> f64 {
    (2.0 * BOLTZMANN * temperature / mass).sqrt() * duration
}

/// Harmonic-approximation 1/e full width of a thermal cloud in the fiber,
/// 2·w0·√(k_B T / 2U0).
pub fn thermal_width_1e_full(trap: &TrapConfig, temperature: f64) -> f64 {
    2.0 * trap.geometry.waist * (BOLTZMANN * temperature / (2.0 * trap.trap_depth)).sqrt()
}

/// Fraction of a transverse Maxwell–Boltzmann distribution with kinetic
/// energy above `energy`: exp(−E / k_B T).
pub fn transverse_tail_fraction(energy: f64, temperature: f64) -> f64 {
    (-energy / (BOLTZMANN * temperature)).exp()
}
