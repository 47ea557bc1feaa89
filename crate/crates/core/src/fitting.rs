//! Weighted nonlinear least-squares fits of optical depths to transmission
//! or photon-count spectra.
//!
//! The parameter vector of a spectrum fit is laid out as
//! `[od_0 .. od_{k-1}, linewidth_fwhm_hz, frequency_offset_hz, amplitude, background]`
//! and the model is `amplitude · T(δ) + background`. Transmission data use
//! amplitude 1 and background 0 (both fixed by default).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loading::atom_rng;
use crate::spectroscopy::{od_from_half_transmission_width, transmission, SpectroscopyError, SpectrumModel};

/// Largest singular-value ratio of the column-scaled Jacobian treated as
/// identifiable.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid fit problem: {0}")]
    InvalidProblem(String),
    #[error("degenerate fit: parameter `{parameter}` is not identifiable from the data")]
    Degenerate { parameter: String },
    #[error("lines F'={first} and F'={second} coincide within 1% of the linewidth; refusing to split OD between them")]
    CoincidentLines { first: u32, second: u32 },
    #[error("the fit did not converge; uncertainties are not available")]
    NotConverged,
    #[error(transparent)]
    Model(#[from] SpectroscopyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub detuning: f64,
    pub value: f64,
    pub weight: f64,
}

/// Poisson weight 1 / max(count, 1).
pub fn poisson_weight(count: f64) -> f64 {
    1.0 / count.max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProblem {
    pub data: Vec<DataPoint>,
    /// Line positions, line shape and the starting linewidth and offset.
    pub template: SpectrumModel,
    /// Which entries of the parameter vector are varied.
    pub free: Vec<bool>,
    pub bounds: Vec<[f64; 2]>,
    /// Full parameter vector; fixed entries keep these values.
    pub initial_guess: Vec<f64>,
}

impl FitProblem {
    /// Counts at each detuning with Poisson weights. Line ODs and the
    /// amplitude are free; the default initial guess is used.
    pub fn from_counts(
        template: SpectrumModel,
        detunings: &[f64],
        counts: &[f64],
        relative_strengths: &[f64],
    ) -> Result<Self, FitError> {
        if detunings.len() != counts.len() {
            return Err(FitError::InvalidProblem(format!(
                "{} detunings but {} counts",
                detunings.len(),
                counts.len()
            )));
        }
        let data: Vec<DataPoint> = detunings
            .iter()
            .zip(counts)
            .map(|(&detuning, &value)| DataPoint {
                detuning,
                value,
                weight: poisson_weight(value),
            })
            .collect();
        Self::with_layout(template, data, true, relative_strengths)
    }

    /// Transmission samples with caller-supplied weights; amplitude and
    /// background stay fixed at 1 and 0.
    pub fn from_transmission(
        template: SpectrumModel,
        data: Vec<DataPoint>,
        relative_strengths: &[f64],
    ) -> Result<Self, FitError> {
        Self::with_layout(template, data, false, relative_strengths)
    }

    fn with_layout(
        template: SpectrumModel,
        data: Vec<DataPoint>,
        counts: bool,
        relative_strengths: &[f64],
    ) -> Result<Self, FitError> {
        template.validate()?;
        let k = template.lines.len();
        if relative_strengths.len() != k {
            return Err(FitError::InvalidProblem(format!(
                "{} relative strengths for {} lines",
                relative_strengths.len(),
                k
            )));
        }
        let gamma = template.linewidth_fwhm;
        let mut free = vec![true; k];
        free.extend([false, false, counts, false]);
        let mut bounds = vec![[0.0, 1e6]; k];
        bounds.push([0.05 * gamma, 100.0 * gamma]);
        bounds.push([-100.0 * gamma, 100.0 * gamma]);
        bounds.push([0.0, f64::INFINITY]);
        bounds.push([f64::NEG_INFINITY, f64::INFINITY]);
        let mut problem = FitProblem {
            data,
            template,
            free,
            bounds,
            initial_guess: Vec::new(),
        };
        let amplitude = if counts { estimate_amplitude(&problem.data) } else { 1.0 };
        problem.initial_guess = default_initial_guess(&problem.template, &problem.data, relative_strengths, amplitude, 0.0);
        for (x, b) in problem.initial_guess.iter_mut().zip(&problem.bounds) {
            *x = x.clamp(b[0], b[1]);
        }
        Ok(problem)
    }

    pub fn n_parameters(&self) -> usize {
        self.template.lines.len() + 4
    }

    pub fn parameter_names(&self) -> Vec<String> {
        parameter_names(&self.template)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.parameter_names().iter().position(|n| n == name)
    }

    pub fn set_free(&mut self, index: usize, free: bool) -> &mut Self {
        self.free[index] = free;
        self
    }

    pub fn set_value(&mut self, index: usize, value: f64) -> &mut Self {
        self.initial_guess[index] = value;
        self
    }

    pub fn set_bounds(&mut self, index: usize, lo: f64, hi: f64) -> &mut Self {
        self.bounds[index] = [lo, hi];
        self
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.n_parameters()).filter(|&i| self.free[i]).collect()
    }

    pub fn validate(&self) -> Result<(), FitError> {
        self.template.validate()?;
        let p = self.n_parameters();
        if self.free.len() != p || self.bounds.len() != p || self.initial_guess.len() != p {
            return Err(FitError::InvalidProblem(format!(
                "free mask, bounds and initial guess must all have {p} entries"
            )));
        }
        let n_free = self.free.iter().filter(|&&f| f).count();
        if n_free == 0 {
            return Err(FitError::InvalidProblem("no free parameters".into()));
        }
        if self.data.len() < n_free {
            return Err(FitError::InvalidProblem(format!(
                "{} data points cannot constrain {} free parameters",
                self.data.len(),
                n_free
            )));
        }
        for (i, d) in self.data.iter().enumerate() {
            if !(d.weight > 0.0 && d.weight.is_finite()) {
                return Err(FitError::InvalidProblem(format!("data point {i} has non-positive weight {}", d.weight)));
            }
            if !(d.detuning.is_finite() && d.value.is_finite()) {
                return Err(FitError::InvalidProblem(format!("data point {i} is not finite")));
            }
        }
        let names = self.parameter_names();
        for i in 0..p {
            let [lo, hi] = self.bounds[i];
            let x = self.initial_guess[i];
            if !(lo <= hi) {
                return Err(FitError::InvalidProblem(format!("empty bounds for `{}`", names[i])));
            }
            if !(x >= lo && x <= hi) {
                return Err(FitError::InvalidProblem(format!(
                    "initial `{}` = {x} lies outside [{lo}, {hi}]",
                    names[i]
                )));
            }
        }
        let k = self.template.lines.len();
        let gamma = self.template.linewidth_fwhm;
        for a in 0..k {
            for b in a + 1..k {
                let (la, lb) = (&self.template.lines[a], &self.template.lines[b]);
                if self.free[a] && self.free[b] && (la.center_detuning - lb.center_detuning).abs() < 0.01 * gamma {
                    return Err(FitError::CoincidentLines {
                        first: la.excited_f,
                        second: lb.excited_f,
                    });
                }
            }
        }
        Ok(())
    }

    /// Spectrum model with the line ODs, linewidth and offset of `theta`.
    pub fn model_at(&self, theta: &[f64]) -> SpectrumModel {
        let k = self.template.lines.len();
        let mut model = self.template.clone();
        for (line, &od) in model.lines.iter_mut().zip(theta) {
            line.od = od;
        }
        model.linewidth_fwhm = theta[k];
        model.frequency_offset = theta[k + 1];
        model
    }

    /// amplitude · T(δ) + background at every data point.
    pub fn predict(&self, theta: &[f64]) -> Vec<f64> {
        let k = self.template.lines.len();
        let model = self.model_at(theta);
        let (amplitude, background) = (theta[k + 2], theta[k + 3]);
        self.data
            .iter()
            .map(|d| amplitude * transmission(model.optical_depth_at(d.detuning)) + background)
            .collect()
    }

    /// Σ wᵢ (yᵢ − model(δᵢ; θ))².
    pub fn objective(&self, theta: &[f64]) -> f64 {
        self.predict(theta)
            .iter()
            .zip(&self.data)
            .map(|(f, d)| d.weight * (d.value - f).powi(2))
            .sum()
    }

    /// Characteristic magnitude of each parameter, used for finite
    /// difference steps and relative step tests near zero.
    fn typical_scales(&self) -> Vec<f64> {
        let k = self.template.lines.len();
        let gamma = self.template.linewidth_fwhm;
        let y_scale = self.data.iter().map(|d| d.value.abs()).fold(0.0, f64::max).max(1.0);
        let mut s = vec![1.0; k];
        s.extend([gamma, gamma, y_scale, 1e-3 * y_scale]);
        s
    }

    /// Same problem with data sorted by (detuning, value, weight), plus the
    /// permutation back to the caller's order.
    fn canonical(&self) -> (FitProblem, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.sort_by(|&a, &b| {
            let (da, db) = (&self.data[a], &self.data[b]);
            da.detuning
                .total_cmp(&db.detuning)
                .then(da.value.total_cmp(&db.value))
                .then(da.weight.total_cmp(&db.weight))
        });
        let mut sorted = self.clone();
        sorted.data = order.iter().map(|&i| self.data[i]).collect();
        (sorted, order)
    }
}

pub fn parameter_names(template: &SpectrumModel) -> Vec<String> {
    let mut names: Vec<String> = template.lines.iter().map(|l| format!("od_f{}", l.excited_f)).collect();
    names.extend(
        ["linewidth_fwhm_hz", "frequency_offset_hz", "amplitude", "background"]
            .iter()
            .map(|s| s.to_string()),
    );
    names
}

/// Mean of the largest tenth of the observations.
fn estimate_amplitude(data: &[DataPoint]) -> f64 {
    let mut values: Vec<f64> = data.iter().map(|d| d.value).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let m = (values.len() / 10).max(1).min(values.len());
    if m == 0 {
        return 1.0;
    }
    let mean = values[..m].iter().sum::<f64>() / m as f64;
    if mean > 0.0 {
        mean
    } else {
        1.0
    }
}

/// ODs proportional to `relative_strengths`, scaled so the strongest line
/// reproduces the observed half-transmission half width next to its center
/// (the nearer crossing is used).
pub fn default_initial_guess(
    template: &SpectrumModel,
    data: &[DataPoint],
    relative_strengths: &[f64],
    amplitude: f64,
    background: f64,
) -> Vec<f64> {
    let gamma = template.linewidth_fwhm;
    let k = template.lines.len();
    let strongest = (0..k).max_by(|&a, &b| relative_strengths[a].total_cmp(&relative_strengths[b]));
    let mut theta = vec![0.0; k];
    if let Some(s) = strongest.filter(|&s| relative_strengths[s] > 0.0) {
        let center = template.lines[s].center_detuning + template.frequency_offset;
        let mut sorted: Vec<(f64, f64)> = data
            .iter()
            .map(|d| (d.detuning, (d.value - background) / amplitude))
            .collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let od_strong = match half_width_around(&sorted, center) {
            Some(half_width) => od_from_half_transmission_width(half_width, gamma),
            None => {
                // Never below 1/2: invert the deepest point near the line.
                let nearest = sorted
                    .iter()
                    .min_by(|a, b| (a.0 - center).abs().total_cmp(&(b.0 - center).abs()))
                    .map(|p| p.1)
                    .unwrap_or(1.0);
                (-nearest.clamp(1e-12, 1.0).ln()).max(0.1)
            }
        };
        for (i, t) in theta.iter_mut().enumerate() {
            *t = od_strong * relative_strengths[i] / relative_strengths[s];
        }
    }
    theta.extend([gamma, template.frequency_offset, amplitude, background]);
    theta
}

/// Distance from `center` to the nearest point where the sorted
/// (detuning, transmission) samples cross 1/2 going outwards, if the
/// transmission at the center is below 1/2.
fn half_width_around(sorted: &[(f64, f64)], center: f64) -> Option<f64> {
    let i0 = sorted
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 .0 - center).abs().total_cmp(&(b.1 .0 - center).abs()))?
        .0;
    if sorted[i0].1 >= 0.5 {
        return None;
    }
    let crossing = |a: (f64, f64), b: (f64, f64)| a.0 + (0.5 - a.1) * (b.0 - a.0) / (b.1 - a.1);
    let right = (i0 + 1..sorted.len())
        .find(|&i| sorted[i].1 >= 0.5)
        .map(|i| crossing(sorted[i - 1], sorted[i]) - center);
    let left = (0..i0)
        .rev()
        .find(|&i| sorted[i].1 >= 0.5)
        .map(|i| center - crossing(sorted[i + 1], sorted[i]));
    match (left, right) {
        (Some(l), Some(r)) => Some(l.min(r)),
        (l, r) => l.or(r),
    }
    .filter(|w| *w > 0.0)
}

// ---------------------------------------------------------------------------
// Minimizers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Minimizer {
    LevenbergMarquardt,
    NelderMead,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub method: Minimizer,
    pub max_iterations: usize,
    /// Converged when the relative objective decrease of an accepted step
    /// falls below this.
    pub objective_tolerance: f64,
    /// Converged when every parameter moves by less than this, relative.
    pub step_tolerance: f64,
    /// Scale the covariance by the reduced χ².
    pub rescale_covariance: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            method: Minimizer::LevenbergMarquardt,
            max_iterations: 200,
            objective_tolerance: 1e-10,
            step_tolerance: 1e-8,
            rescale_covariance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub parameter_names: Vec<String>,
    pub best_fit: Vec<f64>,
    pub free: Vec<bool>,
    /// Full-size covariance; rows and columns of fixed parameters are zero.
    pub covariance: Vec<Vec<f64>>,
    pub objective: f64,
    pub reduced_chi2: f64,
    pub n_iterations: usize,
    pub converged: bool,
    /// yᵢ − model(δᵢ), in the caller's data order.
    pub residuals: Vec<f64>,
    /// Objective after every accepted iteration, starting at the initial guess.
    pub objective_history: Vec<f64>,
    pub options: FitOptions,
    pub problem: FitProblem,
}

impl FitResult {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.best_fit.len()).map(|i| self.covariance[i][i].max(0.0).sqrt()).collect()
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        let i = self.parameter_names.iter().position(|n| n == name)?;
        Some(self.best_fit[i])
    }

    /// Best-fit line ODs, in template line order.
    pub fn ods(&self) -> &[f64] {
        &self.best_fit[..self.problem.template.lines.len()]
    }

    pub fn model(&self) -> SpectrumModel {
        self.problem.model_at(&self.best_fit)
    }
}

/// Free-parameter view of a problem used by the minimizers.
struct Reduced<'a> {
    problem: &'a FitProblem,
    free: Vec<usize>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    typical: Vec<f64>,
    base: Vec<f64>,
}

impl<'a> Reduced<'a> {
    fn new(problem: &'a FitProblem) -> Self {
        let free = problem.free_indices();
        let typical_all = problem.typical_scales();
        Reduced {
            lo: free.iter().map(|&i| problem.bounds[i][0]).collect(),
            hi: free.iter().map(|&i| problem.bounds[i][1]).collect(),
            typical: free.iter().map(|&i| typical_all[i]).collect(),
            base: problem.initial_guess.clone(),
            free,
            problem,
        }
    }

    fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut theta = self.base.clone();
        for (&i, &v) in self.free.iter().zip(x) {
            theta[i] = v;
        }
        theta
    }

    fn start(&self) -> Vec<f64> {
        self.free.iter().map(|&i| self.base[i]).collect()
    }

    fn clamp(&self, x: &mut [f64]) {
        for j in 0..x.len() {
            x[j] = x[j].clamp(self.lo[j], self.hi[j]);
        }
    }

    fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.problem.predict(&self.expand(x))
    }

    fn objective(&self, x: &[f64]) -> f64 {
        self.problem.objective(&self.expand(x))
    }

    fn step(&self, x: &[f64], j: usize) -> f64 {
        1e-6 * x[j].abs().max(self.typical[j])
    }

    /// ∂model/∂x: central differences for the spectral parameters, exact
    /// columns for amplitude and background, in which the model is linear.
    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.problem.data.len();
        let p = x.len();
        let k = self.problem.template.lines.len();
        let mut jac = DMatrix::zeros(n, p);
        let mut probe = x.to_vec();
        let theta = self.expand(x);
        let model = self.problem.model_at(&theta);
        for j in 0..p {
            if self.free[j] == k + 2 {
                for (i, d) in self.problem.data.iter().enumerate() {
                    jac[(i, j)] = transmission(model.optical_depth_at(d.detuning));
                }
                continue;
            }
            if self.free[j] == k + 3 {
                jac.column_mut(j).fill(1.0);
                continue;
            }
            let h = self.step(x, j);
            probe[j] = x[j] + h;
            let up = self.predict(&probe);
            probe[j] = x[j] - h;
            let down = self.predict(&probe);
            probe[j] = x[j];
            for i in 0..n {
                jac[(i, j)] = (up[i] - down[i]) / (2.0 * h);
            }
        }
        jac
    }

    fn relative_step(&self, x: &[f64], dx: &[f64]) -> f64 {
        (0..x.len())
            .map(|j| dx[j].abs() / x[j].abs().max(self.typical[j]))
            .fold(0.0, f64::max)
    }

    /// Fails with the name of the parameter that dominates the null space
    /// of the column-scaled Jacobian, if there is one.
    fn check_rank(&self, jac: &DMatrix<f64>) -> Result<(), FitError> {
        let names = self.problem.parameter_names();
        let p = jac.ncols();
        let norms: Vec<f64> = (0..p).map(|j| jac.column(j).norm()).collect();
        let largest = norms.iter().copied().fold(0.0, f64::max);
        for j in 0..p {
            if !(norms[j] > 1e-14 * largest) || !norms[j].is_finite() {
                return Err(FitError::Degenerate {
                    parameter: names[self.free[j]].clone(),
                });
            }
        }
        if p < 2 {
            return Ok(());
        }
        let mut scaled = jac.clone();
        for j in 0..p {
            scaled.column_mut(j).scale_mut(1.0 / norms[j]);
        }
        let svd = scaled.svd(false, true);
        let s = &svd.singular_values;
        let (imin, smin) = s.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        let smax = s.iter().copied().fold(0.0, f64::max);
        if smin <= RANK_TOLERANCE * smax {
            let v_t = svd.v_t.expect("requested V^T");
            let row = v_t.row(imin);
            let j = (0..p).max_by(|&a, &b| row[a].abs().total_cmp(&row[b].abs())).unwrap_or(0);
            return Err(FitError::Degenerate {
                parameter: names[self.free[j]].clone(),
            });
        }
        Ok(())
    }
}

struct MinimizerOutcome {
    x: Vec<f64>,
    objective: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

fn levenberg_marquardt(red: &Reduced, options: &FitOptions) -> Result<MinimizerOutcome, FitError> {
    let data = &red.problem.data;
    let w = DVector::from_iterator(data.len(), data.iter().map(|d| d.weight));
    let y = DVector::from_iterator(data.len(), data.iter().map(|d| d.value));
    let p = red.free.len();

    let mut x = red.start();
    let mut f = DVector::from_vec(red.predict(&x));
    let mut s = red.objective(&x);
    let mut history = vec![s];
    let mut jac = red.jacobian(&x);
    red.check_rank(&jac)?;
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;

    'outer: while iterations < options.max_iterations {
        if s == 0.0 {
            converged = true;
            break;
        }
        let r = &y - &f;
        let mut jw = jac.clone();
        for (i, mut row) in jw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let a = jw.transpose() * &jac;
        let g = jw.transpose() * &r;

        // Parameters pinned at a bound with the gradient pointing outwards
        // are held for this iteration.
        let active: Vec<usize> = (0..p)
            .filter(|&j| !((x[j] <= red.lo[j] && g[j] < 0.0) || (x[j] >= red.hi[j] && g[j] > 0.0)))
            .collect();
        if active.is_empty() {
            converged = true;
            break;
        }
        let m = active.len();
        let a_act = DMatrix::from_fn(m, m, |i, k| a[(active[i], active[k])]);
        let g_act = DVector::from_fn(m, |i, _| g[active[i]]);

        loop {
            let mut lhs = a_act.clone();
            for i in 0..m {
                let d = a_act[(i, i)];
                lhs[(i, i)] += lambda * if d > 0.0 { d } else { 1.0 };
            }
            let delta = match lhs.cholesky() {
                Some(ch) => ch.solve(&g_act),
                None => {
                    lambda *= 10.0;
                    if lambda > 1e20 {
                        break 'outer;
                    }
                    continue;
                }
            };
            let mut trial = x.clone();
            for (i, &j) in active.iter().enumerate() {
                trial[j] += delta[i];
            }
            red.clamp(&mut trial);
            let dx: Vec<f64> = (0..p).map(|j| trial[j] - x[j]).collect();
            let tiny_step = red.relative_step(&x, &dx) < options.step_tolerance;
            let s_trial = red.objective(&trial);
            if tiny_step {
                if s_trial < s {
                    x = trial;
                    s = s_trial;
                    history.push(s);
                    iterations += 1;
                }
                converged = true;
                break 'outer;
            }
            if s_trial < s {
                let decrease = (s - s_trial) / s;
                // A small decrease only signals a minimum after a nearly
                // undamped step.
                let gauss_newton = lambda <= 1e-4;
                x = trial;
                s = s_trial;
                f = DVector::from_vec(red.predict(&x));
                history.push(s);
                iterations += 1;
                lambda = (lambda / 10.0).max(1e-12);
                if gauss_newton && decrease < options.objective_tolerance {
                    converged = true;
                    break 'outer;
                }
                jac = red.jacobian(&x);
                break;
            }
            lambda *= 10.0;
            if lambda > 1e20 {
                break 'outer;
            }
        }
    }
    Ok(MinimizerOutcome {
        x,
        objective: s,
        iterations,
        converged,
        history,
    })
}

fn nelder_mead(red: &Reduced, options: &FitOptions) -> MinimizerOutcome {
    let p = red.free.len();
    let x0 = red.start();
    let mut simplex: Vec<Vec<f64>> = vec![x0.clone()];
    for j in 0..p {
        let mut v = x0.clone();
        let h = 0.05 * x0[j].abs().max(red.typical[j]);
        v[j] = if v[j] + h <= red.hi[j] { v[j] + h } else { v[j] - h };
        red.clamp(&mut v);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| red.objective(v)).collect();
    let mut history = vec![values[0]];
    let mut iterations = 0;
    let mut converged = false;
    let max_iterations = options.max_iterations * 50 * p.max(1);

    let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        let mut v: Vec<f64> = a.iter().zip(b).map(|(ai, bi)| ai + t * (bi - ai)).collect();
        red.clamp(&mut v);
        v
    };

    while iterations < max_iterations {
        let mut order: Vec<usize> = (0..=p).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        history.push(values[0]);

        let spread = values[p] - values[0];
        let size = (1..=p)
            .map(|i| {
                let dx: Vec<f64> = (0..p).map(|j| simplex[i][j] - simplex[0][j]).collect();
                red.relative_step(&simplex[0], &dx)
            })
            .fold(0.0, f64::max);
        if spread <= options.objective_tolerance * values[0].abs() && size < options.step_tolerance {
            converged = true;
            break;
        }
        if values[0] == 0.0 && size < options.step_tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..p).map(|j| simplex[..p].iter().map(|v| v[j]).sum::<f64>() / p as f64).collect();
        let reflected = combine(&centroid, &simplex[p], -1.0);
        let fr = red.objective(&reflected);
        if fr < values[0] {
            let expanded = combine(&centroid, &simplex[p], -2.0);
            let fe = red.objective(&expanded);
            if fe < fr {
                simplex[p] = expanded;
                values[p] = fe;
            } else {
                simplex[p] = reflected;
                values[p] = fr;
            }
        } else if fr < values[p - 1] {
            simplex[p] = reflected;
            values[p] = fr;
        } else {
            let contracted = if fr < values[p] {
                combine(&centroid, &reflected, 0.5)
            } else {
                combine(&centroid, &simplex[p], 0.5)
            };
            let fc = red.objective(&contracted);
            if fc < values[p].min(fr) {
                simplex[p] = contracted;
                values[p] = fc;
            } else {
                for i in 1..=p {
                    simplex[i] = combine(&simplex[0], &simplex[i], 0.5);
                    values[i] = red.objective(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=p).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
    MinimizerOutcome {
        x: simplex[best].clone(),
        objective: values[best],
        iterations,
        converged,
        history,
    }
}

/// Minimizes Σ wᵢ (yᵢ − model(δᵢ; θ))² over the free parameters within
/// their bounds.
///
/// The data are processed in a canonical sorted order so the result does
/// not depend on the order in which points are supplied.
pub fn fit_spectrum(problem: &FitProblem, options: &FitOptions) -> Result<FitResult, FitError> {
    problem.validate()?;
    let (sorted, order) = problem.canonical();
    let red = Reduced::new(&sorted);
    let outcome = match options.method {
        Minimizer::LevenbergMarquardt => levenberg_marquardt(&red, options)?,
        Minimizer::NelderMead => {
            red.check_rank(&red.jacobian(&red.start()))?;
            nelder_mead(&red, options)
        }
    };
    let theta = red.expand(&outcome.x);

    let n = sorted.data.len();
    let p_free = red.free.len();
    let dof = n.saturating_sub(p_free);
    let reduced_chi2 = if dof > 0 { outcome.objective / dof as f64 } else { 0.0 };

    let jac = red.jacobian(&outcome.x);
    red.check_rank(&jac)?;
    let mut jw = jac.clone();
    for (i, mut row) in jw.row_iter_mut().enumerate() {
        row *= sorted.data[i].weight;
    }
    let normal = jw.transpose() * &jac;
    let inverse = invert_symmetric(&normal).ok_or_else(|| FitError::Degenerate {
        parameter: problem.parameter_names()[red.free[0]].clone(),
    })?;
    let scale = if options.rescale_covariance { reduced_chi2 } else { 1.0 };
    let p_all = problem.n_parameters();
    let mut covariance = vec![vec![0.0; p_all]; p_all];
    for (a, &ia) in red.free.iter().enumerate() {
        for (b, &ib) in red.free.iter().enumerate() {
            // Symmetrize against rounding in the inverse.
            covariance[ia][ib] = 0.5 * (inverse[(a, b)] + inverse[(b, a)]) * scale;
        }
    }

    let predicted = sorted.predict(&theta);
    let mut residuals = vec![0.0; n];
    for (k, &orig) in order.iter().enumerate() {
        residuals[orig] = sorted.data[k].value - predicted[k];
    }

    Ok(FitResult {
        parameter_names: problem.parameter_names(),
        best_fit: theta,
        free: problem.free.clone(),
        covariance,
        objective: outcome.objective,
        reduced_chi2,
        n_iterations: outcome.iterations,
        converged: outcome.converged,
        residuals,
        objective_history: outcome.history,
        options: *options,
        problem: problem.clone(),
    })
}

fn invert_symmetric(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    // Equilibrate so that the Cholesky factorization sees a unit diagonal.
    let p = m.nrows();
    let d: Vec<f64> = (0..p).map(|i| m[(i, i)].sqrt()).collect();
    if d.iter().any(|&v| !(v > 0.0)) {
        return None;
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| m[(i, j)] / (d[i] * d[j]));
    let inv = scaled.cholesky()?.inverse();
    Some(DMatrix::from_fn(p, p, |i, j| inv[(i, j)] / (d[i] * d[j])))
}

// ---------------------------------------------------------------------------
// Uncertainties

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UncertaintyMethod {
    Covariance,
    Bootstrap { replicates: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uncertainties {
    pub method: UncertaintyMethod,
    /// One entry per parameter; fixed parameters get 0.
    pub standard_errors: Vec<f64>,
    pub warnings: Vec<String>,
    /// Bootstrap replicates whose refit failed or did not converge.
    pub failed_replicates: usize,
}

pub fn estimate_uncertainties(result: &FitResult, method: UncertaintyMethod) -> Result<Uncertainties, FitError> {
    if !result.converged {
        return Err(FitError::NotConverged);
    }
    match method {
        UncertaintyMethod::Covariance => Ok(Uncertainties {
            method,
            standard_errors: result.standard_errors(),
            warnings: Vec::new(),
            failed_replicates: 0,
        }),
        UncertaintyMethod::Bootstrap { replicates, seed } => bootstrap(result, replicates, seed),
    }
}

fn bootstrap(result: &FitResult, replicates: usize, seed: u64) -> Result<Uncertainties, FitError> {
    let method = UncertaintyMethod::Bootstrap { replicates, seed };
    let p = result.best_fit.len();
    let mut warnings = Vec::new();
    if replicates < 2 {
        warnings.push(format!(
            "{replicates} bootstrap replicate(s) cannot estimate a spread; reporting zero"
        ));
        return Ok(Uncertainties {
            method,
            standard_errors: vec![0.0; p],
            warnings,
            failed_replicates: 0,
        });
    }
    let base = &result.problem;
    let n = base.data.len();
    let fits: Vec<Option<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = atom_rng(seed, r as u64);
            let mut problem = base.clone();
            problem.data = (0..n).map(|_| base.data[rng.random_range(0..n)]).collect();
            problem.initial_guess = result.best_fit.clone();
            match fit_spectrum(&problem, &result.options) {
                Ok(fit) if fit.converged => Some(fit.best_fit),
                _ => None,
            }
        })
        .collect();
    let good: Vec<&Vec<f64>> = fits.iter().flatten().collect();
    let failed = replicates - good.len();
    if failed > 0 {
        warnings.push(format!("{failed} of {replicates} bootstrap refits failed and were skipped"));
    }
    let mut errors = vec![0.0; p];
    if good.len() >= 2 {
        let m = good.len() as f64;
        for (j, e) in errors.iter_mut().enumerate() {
            let mean = good.iter().map(|v| v[j]).sum::<f64>() / m;
            *e = (good.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        }
    } else {
        warnings.push("fewer than two successful replicates; reporting zero spread".into());
    }
    Ok(Uncertainties {
        method,
        standard_errors: errors,
        warnings,
        failed_replicates: failed,
    })
}

/// Objective with parameter `index` pinned at each grid value and the
/// remaining free parameters re-optimized, starting from `start`.
pub fn profile_objective(
    problem: &FitProblem,
    start: &[f64],
    index: usize,
    grid: &[f64],
    options: &FitOptions,
) -> Result<Vec<f64>, FitError> {
    if index >= problem.n_parameters() {
        return Err(FitError::InvalidProblem(format!(
            "parameter index {index} out of range (0..{})",
            problem.n_parameters()
        )));
    }
    if start.len() != problem.n_parameters() {
        return Err(FitError::InvalidProblem("start vector has the wrong length".into()));
    }
    grid.iter()
        .map(|&value| {
            let mut pinned = problem.clone();
            pinned.initial_guess = start.to_vec();
            pinned.free[index] = false;
            pinned.initial_guess[index] = value;
            for (x, b) in pinned.initial_guess.iter_mut().zip(&pinned.bounds) {
                *x = x.clamp(b[0], b[1]);
            }
            pinned.initial_guess[index] = value;
            if pinned.free.iter().any(|&f| f) {
                fit_spectrum(&pinned, options).map(|r| r.objective)
            } else {
                Ok(pinned.objective(&pinned.initial_guess))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atomic::AtomSpecies;
    use crate::spectroscopy::{detuning_grid, simulate_probe_counts, ProbeSequenceConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rb() -> AtomSpecies {
        AtomSpecies::rb87()
    }

    fn strengths() -> Vec<f64> {
        let s = rb();
        [0, 1, 2].iter().map(|&f| s.strength(1, f)).collect()
    }

    fn template() -> SpectrumModel {
        SpectrumModel::for_species(&rb(), 1, 1, &[(0, 0.0), (1, 0.0), (2, 0.0)]).unwrap()
    }

    fn noiseless_counts(ods: [f64; 3], amplitude: f64, step: f64) -> FitProblem {
        let truth = SpectrumModel::for_species(&rb(), 1, 1, &[(0, ods[0]), (1, ods[1]), (2, ods[2])]).unwrap();
        let grid = detuning_grid(-600e6, 600e6, step);
        let counts: Vec<f64> = grid.iter().map(|&d| amplitude * truth.transmission_at(d).value).collect();
        FitProblem::from_counts(template(), &grid, &counts, &strengths()).unwrap()
    }

    #[test]
    fn noiseless_reference_ods_recovered() {
        let problem = noiseless_counts([300.0, 1000.0, 1000.0], 2670.9, 2e6);
        let fit = fit_spectrum(&problem, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        for (od, truth) in fit.ods().iter().zip([300.0, 1000.0, 1000.0]) {
            assert_relative_eq!(*od, truth, max_relative = 1e-3);
        }
        assert_eq!(fit.residuals.len(), problem.data.len());
    }

    #[test]
    fn default_guess_uses_half_transmission_width() {
        let problem = noiseless_counts([300.0, 1000.0, 1000.0], 1000.0, 1e6);
        let guess = &problem.initial_guess;
        // F'=0 follows the equally strong F'=1 and F'=2 lines at 0.4× by strength.
        assert_relative_eq!(guess[0] / guess[1], 0.4, max_relative = 1e-12);
        assert_eq!(guess[1], guess[2]);
        assert!(guess[1] > 100.0 && guess[1] < 5000.0, "{guess:?}");
        assert!(guess[5] > 900.0 && guess[5] <= 1000.0, "{guess:?}");
    }

    #[test]
    fn poisson_noise_recovered_within_quoted_errors() {
        let truth = SpectrumModel::for_species(&rb(), 1, 1, &[(0, 300.0), (1, 1000.0), (2, 1000.0)]).unwrap();
        let grid = detuning_grid(-600e6, 600e6, 2e6);
        let seq = ProbeSequenceConfig::stroboscopic_default();
        let counts = simulate_probe_counts(&truth, &seq, &grid, rb().d2_wavelength(), 1.0, 11).unwrap();
        let y: Vec<f64> = counts.iter().map(|c| c.sampled as f64).collect();
        let problem = FitProblem::from_counts(template(), &grid, &y, &strengths()).unwrap();
        let fit = fit_spectrum(&problem, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        for ((od, truth), tol) in fit.ods().iter().zip([300.0, 1000.0, 1000.0]).zip([45.0, 150.0, 150.0]) {
            assert!((od - truth).abs() < tol, "{:?}", fit.ods());
        }
        assert!(fit.reduced_chi2 > 0.7 && fit.reduced_chi2 < 1.3, "{}", fit.reduced_chi2);
    }

    #[test]
    fn empty_medium_fits_zero() {
        let grid = detuning_grid(-600e6, 600e6, 4e6);
        let model = template();
        let seq = ProbeSequenceConfig::stroboscopic_default();
        let (mut inside, mut total) = (0, 0);
        for seed in 0..10 {
            let counts = simulate_probe_counts(&model, &seq, &grid, rb().d2_wavelength(), 1.0, seed).unwrap();
            let y: Vec<f64> = counts.iter().map(|c| c.sampled as f64).collect();
            let problem = FitProblem::from_counts(template(), &grid, &y, &strengths()).unwrap();
            let fit = fit_spectrum(&problem, &FitOptions::default()).unwrap();
            let se = fit.standard_errors();
            for i in 0..3 {
                assert!(fit.best_fit[i] >= 0.0);
                total += 1;
                if fit.best_fit[i] <= 2.0 * se[i] {
                    inside += 1;
                }
            }
        }
        // A bounded estimate of zero lies within 2σ about 97.7% of the time.
        assert!(inside >= 27, "{inside} of {total}");
    }

    #[test]
    fn objective_never_increases() {
        let mut problem = noiseless_counts([300.0, 1000.0, 1000.0], 2670.9, 4e6);
        problem.initial_guess[0] = 50.0;
        problem.initial_guess[1] = 3000.0;
        for method in [Minimizer::LevenbergMarquardt, Minimizer::NelderMead] {
            let options = FitOptions { method, ..FitOptions::default() };
            let fit = fit_spectrum(&problem, &options).unwrap();
            assert!(fit.objective_history.windows(2).all(|w| w[1] <= w[0]), "{method:?}");
        }
    }

    #[test]
    fn nelder_mead_fallback_agrees() {
        let problem = noiseless_counts([300.0, 1000.0, 1000.0], 2670.9, 4e6);
        let lm = fit_spectrum(&problem, &FitOptions::default()).unwrap();
        let nm = fit_spectrum(
            &problem,
            &FitOptions {
                method: Minimizer::NelderMead,
                ..FitOptions::default()
            },
        )
        .unwrap();
        for i in 0..3 {
            assert_relative_eq!(nm.best_fit[i], lm.best_fit[i], max_relative = 1e-3);
        }
    }

    /// y = a·T(δ) + b with only a and b free is linear in (a, b).
    fn linear_problem() -> (FitProblem, Vec<f64>) {
        let model = SpectrumModel::for_species(&rb(), 1, 1, &[(0, 0.5), (1, 2.0), (2, 1.0)]).unwrap();
        let grid = detuning_grid(-60e6, 200e6, 5e6);
        let t: Vec<f64> = grid.iter().map(|&d| model.transmission_at(d).value).collect();
        let data: Vec<DataPoint> = grid
            .iter()
            .zip(&t)
            .enumerate()
            .map(|(i, (&d, &ti))| DataPoint {
                detuning: d,
                value: 100.0 * ti + 7.0 + if i % 2 == 0 { 0.5 } else { -0.3 },
                weight: 0.5 + (i % 3) as f64,
            })
            .collect();
        let mut problem = FitProblem::from_transmission(model.clone(), data, &strengths()).unwrap();
        for i in 0..5 {
            problem.set_free(i, false);
        }
        for (i, l) in model.lines.iter().enumerate() {
            problem.set_value(i, l.od);
        }
        problem.set_free(5, true).set_value(5, 90.0).set_bounds(5, 0.0, 1e3);
        problem.set_free(6, true).set_value(6, 0.0);
        (problem, t)
    }

    #[test]
    fn linear_limit_matches_closed_form() {
        let (problem, t) = linear_problem();
        let options = FitOptions {
            rescale_covariance: false,
            ..FitOptions::default()
        };
        let fit = fit_spectrum(&problem, &options).unwrap();
        // Weighted normal equations for y = a t + b.
        let (mut sw, mut st, mut stt, mut sy, mut sty) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (d, &ti) in problem.data.iter().zip(&t) {
            sw += d.weight;
            st += d.weight * ti;
            stt += d.weight * ti * ti;
            sy += d.weight * d.value;
            sty += d.weight * ti * d.value;
        }
        let det = sw * stt - st * st;
        let a = (sw * sty - st * sy) / det;
        let b = (stt * sy - st * sty) / det;
        assert_relative_eq!(fit.best_fit[5], a, max_relative = 1e-8);
        assert_relative_eq!(fit.best_fit[6], b, max_relative = 1e-8);
        assert_relative_eq!(fit.covariance[5][5], sw / det, max_relative = 1e-10);
        assert_relative_eq!(fit.covariance[6][6], stt / det, max_relative = 1e-10);
        assert_relative_eq!(fit.covariance[5][6], -st / det, max_relative = 1e-10);

        let rescaled = fit_spectrum(&problem, &FitOptions::default()).unwrap();
        assert_relative_eq!(rescaled.covariance[5][5], sw / det * rescaled.reduced_chi2, max_relative = 1e-10);
    }

    #[test]
    fn weight_scaling_invariance() {
        let (problem, _) = linear_problem();
        let mut nonlinear = noiseless_counts([300.0, 1000.0, 1000.0], 2670.9, 4e6);
        for d in nonlinear.data.iter_mut().step_by(3) {
            d.value += 5.0;
        }
        for base in [problem, nonlinear] {
            let options = FitOptions {
                rescale_covariance: false,
                ..FitOptions::default()
            };
            let a = fit_spectrum(&base, &options).unwrap();
            let mut scaled = base.clone();
            for d in &mut scaled.data {
                d.weight *= 37.0;
            }
            let b = fit_spectrum(&scaled, &options).unwrap();
            for i in 0..a.best_fit.len() {
                assert!((a.best_fit[i] - b.best_fit[i]).abs() <= 1e-8 * a.best_fit[i].abs().max(1.0));
                let (ca, cb) = (a.covariance[i][i], b.covariance[i][i]);
                assert!((ca / 37.0 - cb).abs() <= 1e-6 * cb.abs() + f64::MIN_POSITIVE);
            }
            let ra = fit_spectrum(&base, &FitOptions::default()).unwrap();
            let rb = fit_spectrum(&scaled, &FitOptions::default()).unwrap();
            for i in 0..ra.best_fit.len() {
                let (ca, cb) = (ra.covariance[i][i], rb.covariance[i][i]);
                assert!((ca - cb).abs() <= 1e-6 * ca.abs() + f64::MIN_POSITIVE);
            }
        }
    }

    #[test]
    fn reordering_does_not_change_result() {
        let mut problem = noiseless_counts([300.0, 1000.0, 1000.0], 2670.9, 4e6);
        for (i, d) in problem.data.iter_mut().enumerate() {
            d.value += (i % 5) as f64 - 2.0;
        }
        let a = fit_spectrum(&problem, &FitOptions::default()).unwrap();
        let mut shuffled = problem.clone();
        shuffled.data.reverse();
        shuffled.data.swap(3, 100);
        let b = fit_spectrum(&shuffled, &FitOptions::default()).unwrap();
        for i in 0..a.best_fit.len() {
            assert!((a.best_fit[i] - b.best_fit[i]).abs() <= 1e-12 * a.best_fit[i].abs().max(1.0));
        }
    }

    #[test]
    fn bounds_are_respected() {
        let mut problem = noiseless_counts([300.0, 1000.0, 1000.0], 2670.9, 4e6);
        problem.set_bounds(1, 0.0, 500.0);
        problem.set_value(1, 400.0);
        let fit = fit_spectrum(&problem, &FitOptions::default()).unwrap();
        for (x, b) in fit.best_fit.iter().zip(&problem.bounds) {
            assert!(*x >= b[0] && *x <= b[1]);
        }
        assert_eq!(fit.best_fit[1], 500.0);
    }

    #[test]
    fn coincident_lines_refused() {
        let mut model = template();
        model.lines[1].center_detuning = model.lines[0].center_detuning + 0.001 * model.linewidth_fwhm;
        let grid = detuning_grid(-300e6, 300e6, 5e6);
        let y = vec![100.0; grid.len()];
        let problem = FitProblem::from_counts(model, &grid, &y, &strengths()).unwrap();
        assert!(matches!(
            fit_spectrum(&problem, &FitOptions::default()),
            Err(FitError::CoincidentLines { first: 0, second: 1 })
        ));
    }

    #[test]
    fn unidentifiable_parameter_named() {
        // Without any absorption the background and amplitude are confounded.
        let grid = detuning_grid(-600e6, -500e6, 5e6);
        let y = vec![100.0; grid.len()];
        let mut problem = FitProblem::from_counts(template(), &grid, &y, &strengths()).unwrap();
        for i in 0..3 {
            problem.set_free(i, false).set_value(i, 0.0);
        }
        problem.set_free(6, true);
        match fit_spectrum(&problem, &FitOptions::default()) {
            Err(FitError::Degenerate { parameter }) => {
                assert!(parameter == "amplitude" || parameter == "background", "{parameter}")
            }
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn invalid_problems_rejected() {
        let mut problem = noiseless_counts([1.0, 2.0, 3.0], 100.0, 50e6);
        problem.data[0].weight = 0.0;
        assert!(fit_spectrum(&problem, &FitOptions::default()).is_err());
        let mut problem = noiseless_counts([1.0, 2.0, 3.0], 100.0, 50e6);
        problem.initial_guess[0] = -1.0;
        assert!(matches!(problem.validate(), Err(FitError::InvalidProblem(_))));
        let mut problem = noiseless_counts([1.0, 2.0, 3.0], 100.0, 50e6);
        problem.free = vec![false; problem.n_parameters()];
        assert!(problem.validate().is_err());
    }

    #[test]
    fn uncertainties_need_convergence() {
        let problem = noiseless_counts([300.0, 1000.0, 1000.0], 2670.9, 4e6);
        let mut fit = fit_spectrum(&problem, &FitOptions::default()).unwrap();
        fit.converged = false;
        assert!(matches!(
            estimate_uncertainties(&fit, UncertaintyMethod::Covariance),
            Err(FitError::NotConverged)
        ));
    }

    #[test]
    fn single_bootstrap_replicate_warns() {
        let problem = noiseless_counts([300.0, 1000.0, 1000.0], 2670.9, 4e6);
        let fit = fit_spectrum(&problem, &FitOptions::default()).unwrap();
        let u = estimate_uncertainties(&fit, UncertaintyMethod::Bootstrap { replicates: 1, seed: 1 }).unwrap();
        assert!(u.standard_errors.iter().all(|&e| e == 0.0));
        assert_eq!(u.warnings.len(), 1);
    }

    #[test]
    fn bootstrap_agrees_with_covariance() {
        let truth = SpectrumModel::for_species(&rb(), 1, 1, &[(0, 3.0), (1, 10.0), (2, 8.0)]).unwrap();
        let grid = detuning_grid(-300e6, 400e6, 2e6);
        let seq = ProbeSequenceConfig::stroboscopic_default();
        let counts = simulate_probe_counts(&truth, &seq, &grid, rb().d2_wavelength(), 1.0, 21).unwrap();
        let y: Vec<f64> = counts.iter().map(|c| c.sampled as f64).collect();
        let problem = FitProblem::from_counts(template(), &grid, &y, &strengths()).unwrap();
        let fit = fit_spectrum(&problem, &FitOptions::default()).unwrap();
        let cov = estimate_uncertainties(&fit, UncertaintyMethod::Covariance).unwrap();
        let method = UncertaintyMethod::Bootstrap { replicates: 200, seed: 5 };
        let boot = estimate_uncertainties(&fit, method).unwrap();
        for i in 0..3 {
            let (c, b) = (cov.standard_errors[i], boot.standard_errors[i]);
            assert!((b - c).abs() < 0.3 * c, "parameter {i}: bootstrap {b} vs covariance {c}");
        }
        let again = estimate_uncertainties(&fit, method).unwrap();
        assert_eq!(again, boot);
    }

    #[test]
    fn profile_of_linear_problem_is_parabolic() {
        let (problem, _) = linear_problem();
        let fit = fit_spectrum(&problem, &FitOptions::default()).unwrap();
        let a = fit.best_fit[5];
        let grid: Vec<f64> = (-3..=3).map(|k| a + k as f64).collect();
        let profile = profile_objective(&problem, &fit.best_fit, 5, &grid, &FitOptions::default()).unwrap();
        let min = profile.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(profile[3], min);
        // Equal second differences for a parabola.
        let d2: Vec<f64> = profile.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect();
        for v in &d2 {
            assert_relative_eq!(*v, d2[0], max_relative = 1e-6);
        }
        assert_relative_eq!(profile[4] - profile[3], profile[2] - profile[3], max_relative = 1e-6);
        assert!(profile_objective(&problem, &fit.best_fit, 5, &[], &FitOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn saturated_core_gives_flat_profile() {
        // Single OD=1000 line probed only within ±Γ/2: every point is dark.
        let model = SpectrumModel::for_species(&rb(), 1, 1, &[(1, 1000.0)]).unwrap();
        let gamma = model.linewidth_fwhm;
        let grid = detuning_grid(-0.5 * gamma, 0.5 * gamma, gamma / 20.0);
        let y: Vec<f64> = grid.iter().map(|&d| 2670.9 * model.transmission_at(d).value).collect();
        let mut problem = FitProblem::from_counts(model, &grid, &y, &[1.0]).unwrap();
        problem.set_free(3, false).set_value(3, 2670.9);
        let profile = profile_objective(&problem, &problem.initial_guess.clone(), 0, &[50.0, 200.0, 1000.0, 3000.0], &FitOptions::default()).unwrap();
        for v in &profile {
            assert!(v.abs() < 1e-3, "{profile:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]
        #[test]
        fn noiseless_round_trip(
            od0 in 1.0f64..500.0,
            od1 in 1.0f64..1500.0,
            od2 in 1.0f64..1500.0,
            offset in -5e6f64..5e6,
            amplitude in 500.0f64..5000.0,
        ) {
            let truth = SpectrumModel { frequency_offset: offset, ..SpectrumModel::for_species(&rb(), 1, 1, &[(0, od0), (1, od1), (2, od2)]).unwrap() };
            let grid = detuning_grid(-600e6, 600e6, 2e6);
            let y: Vec<f64> = grid.iter().map(|&d| amplitude * truth.transmission_at(d).value).collect();
            let mut problem = FitProblem::from_counts(template(), &grid, &y, &strengths()).unwrap();
            problem.set_free(4, true);
            let fit = fit_spectrum(&problem, &FitOptions::default()).unwrap();
            let expected = [od0, od1, od2, truth.linewidth_fwhm, offset, amplitude];
            for (i, e) in expected.iter().enumerate() {
                let scale = if i == 4 { truth.linewidth_fwhm } else { e.abs() };
                prop_assert!((fit.best_fit[i] - e).abs() <= 1e-3 * scale, "{i}: {} vs {}", fit.best_fit[i], e);
            }
        }
    }
}
