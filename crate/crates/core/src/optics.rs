//! FORT beam geometry and the conservative dipole + gravity potential.
//!
//! The coordinate system has `z` pointing up along the fiber axis. The fiber
//! occupies `z <= tip_z`; above the tip the guided mode diverges freely.
//! Inside the fiber the mode is a non-diverging Gaussian with 1/e² intensity
//! radius `w0`. Above the tip
//!
//! ```text
//! w(z) = w0 * sqrt(1 + ((z - tip_z) / L)^2)
//! U(r, z) = -U0 * (w0 / w(z))^2 * exp(-2 r^2 / w(z)^2)
//! ```
//!
//! where the divergence length `L` is `w0 / NA` (default) or the
//! diffraction-limited Rayleigh range `pi w0^2 / lambda`. Both `w` and
//! `dw/dz` are continuous at the tip, so the force is continuous there too.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::STANDARD_GRAVITY;
use crate::spectroscopy::ProbeSequenceConfig;

#[derive(Debug, Error, PartialEq)]
pub enum OpticsError {
    #[error("invalid beam geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid trap configuration: {0}")]
    InvalidTrap(String),
    #[error("capture threshold {threshold:e} J is outside (0, U0 = {depth:e} J]")]
    ThresholdOutOfRange { threshold: f64, depth: f64 },
}

/// How the mode diverges after leaving the fiber tip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceModel {
    /// Effective Rayleigh length `w0 / NA`.
    #[default]
    NaPinned,
    /// Gaussian-beam Rayleigh range `pi w0^2 / lambda` at the FORT wavelength.
    Diffraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamGeometry {
    /// 1/e² intensity radius of the guided mode, m.
    pub waist: f64,
    pub numerical_aperture: f64,
    /// Axial position of the upper fiber tip, m.
    pub tip_z: f64,
    pub fiber_length: f64,
    pub core_radius: f64,
    pub divergence: DivergenceModel,
    /// FORT vacuum wavelength, m. Only used by [`DivergenceModel::Diffraction`].
    pub wavelength: f64,
}

impl BeamGeometry {
    /// 5.5 μm 1/e full width mode (w0 = 2.75 μm), NA 0.1, 7 μm core, 14 cm
    /// fiber with its tip at z = 0, 855 nm light.
    pub fn hcpcf_default() -> Self {
        BeamGeometry {
            waist: 2.75e-6,
            numerical_aperture: 0.1,
            tip_z: 0.0,
            fiber_length: 0.14,
            core_radius: 3.5e-6,
            divergence: DivergenceModel::NaPinned,
            wavelength: 855e-9,
        }
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        let bad = |msg: String| Err(OpticsError::InvalidGeometry(msg));
        if !(self.waist > 0.0 && self.waist.is_finite()) {
            return bad(format!("waist must be positive, got {}", self.waist));
        }
        if !(self.numerical_aperture > 0.0 && self.numerical_aperture < 1.0) {
            return bad(format!(
                "numerical aperture must lie in (0, 1), got {}",
                self.numerical_aperture
            ));
        }
        if !(self.fiber_length > 0.0) {
            return bad(format!("fiber length must be positive, got {}", self.fiber_length));
        }
        if !(self.core_radius >= self.waist / 2.0) {
            return bad(format!(
                "core radius {} is smaller than half the waist {}",
                self.core_radius, self.waist
            ));
        }
        if !self.tip_z.is_finite() {
            return bad("tip position must be finite".into());
        }
        if self.divergence == DivergenceModel::Diffraction && !(self.wavelength > 0.0) {
            return bad(format!(
                "diffraction divergence needs a positive wavelength, got {}",
                self.wavelength
            ));
        }
        Ok(())
    }

    /// Axial distance over which the mode area doubles above the tip, m.
    pub fn divergence_length(&self) -> f64 {
        match self.divergence {
            DivergenceModel::NaPinned => self.waist / self.numerical_aperture,
            DivergenceModel::Diffraction => PI * self.waist * self.waist / self.wavelength,
        }
    }

    /// 1/e² radius of the FORT mode at height `z`.
    pub fn beam_waist_at(&self, z: f64) -> f64 {
        self.waist_sq(z).sqrt()
    }

    #[inline]
    fn waist_sq(&self, z: f64) -> f64 {
        let w0_sq = self.waist * self.waist;
        if z <= self.tip_z {
            w0_sq
        } else {
            let zeta = (z - self.tip_z) / self.divergence_length();
            w0_sq * (1.0 + zeta * zeta)
        }
    }

    /// w(z)² and d(w²)/dz.
    #[inline]
    fn waist_sq_with_slope(&self, z: f64) -> (f64, f64) {
        let w0_sq = self.waist * self.waist;
        if z <= self.tip_z {
            (w0_sq, 0.0)
        } else {
            let len = self.divergence_length();
            let zeta = (z - self.tip_z) / len;
            (w0_sq * (1.0 + zeta * zeta), 2.0 * w0_sq * zeta / len)
        }
    }

    /// True when the point lies inside the fiber's hollow core.
    #[inline]
    pub fn inside_core(&self, r_sq: f64, z: f64) -> bool {
        z <= self.tip_z && r_sq < self.core_radius * self.core_radius
    }
}

/// Static FORT configuration plus gravity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapConfig {
    pub geometry: BeamGeometry,
    /// U0, magnitude of the on-axis potential minimum inside the fiber, J.
    pub trap_depth: f64,
    /// Magnitude of the gravitational acceleration along −z, m/s².
    pub gravity: f64,
    /// On/off modulation of the FORT, if any.
    pub modulation: Option<ProbeSequenceConfig>,
}

impl TrapConfig {
    pub fn new(geometry: BeamGeometry, trap_depth: f64) -> Result<Self, OpticsError> {
        let trap = TrapConfig {
            geometry,
            trap_depth,
            gravity: STANDARD_GRAVITY,
            modulation: None,
        };
        trap.validate()?;
        Ok(trap)
    }

    pub fn validate(&self) -> Result<(), OpticsError> {
        self.geometry.validate()?;
        if !(self.trap_depth >= 0.0 && self.trap_depth.is_finite()) {
            return Err(OpticsError::InvalidTrap(format!(
                "trap depth must be non-negative, got {}",
                self.trap_depth
            )));
        }
        if !(self.gravity >= 0.0 && self.gravity.is_finite()) {
            return Err(OpticsError::InvalidTrap(format!(
                "gravity magnitude must be non-negative, got {}",
                self.gravity
            )));
        }
        Ok(())
    }

    pub fn with_depth(mut self, trap_depth: f64) -> Self {
        self.trap_depth = trap_depth;
        self
    }

    pub fn with_gravity(mut self, gravity: f64) -> Self {
        self.gravity = gravity;
        self
    }

    /// Whether the FORT is on at time `t`. Without modulation it is always on.
    ///
    /// A modulated trap is off during the first `off_window` of every period.
    pub fn is_on(&self, t: f64) -> bool {
        match &self.modulation {
            None => true,
            Some(seq) => {
                let period = 1.0 / seq.modulation_frequency;
                let phase = t.rem_euclid(period);
                phase >= seq.off_window
            }
        }
    }

    /// Dipole potential (FORT on) at radial distance `r` and height `z`, J.
    pub fn dipole_potential(&self, r: f64, z: f64) -> f64 {
        self.dipole_potential_sq(r * r, z)
    }

    #[inline]
    pub(crate) fn dipole_potential_sq(&self, r_sq: f64, z: f64) -> f64 {
        let w0_sq = self.geometry.waist * self.geometry.waist;
        let w_sq = self.geometry.waist_sq(z);
        -self.trap_depth * (w0_sq / w_sq) * (-2.0 * r_sq / w_sq).exp()
    }

    /// Dipole plus gravitational potential energy of an atom of `mass`.
    pub fn total_potential(&self, position: [f64; 3], mass: f64) -> f64 {
        let [x, y, z] = position;
        self.dipole_potential_sq(x * x + y * y, z) + mass * self.gravity * z
    }

    /// Exact gradient force −∇(U_dip + m g z), N.
    #[inline]
    pub fn force(&self, position: [f64; 3], mass: f64) -> [f64; 3] {
        let [fx, fy, fz] = self.dipole_force(position);
        [fx, fy, fz - mass * self.gravity]
    }

    /// −∇U_dip only.
    #[inline]
    pub fn dipole_force(&self, position: [f64; 3]) -> [f64; 3] {
        let [x, y, z] = position;
        let r_sq = x * x + y * y;
        let w0_sq = self.geometry.waist * self.geometry.waist;
        let (w_sq, dw_sq_dz) = self.geometry.waist_sq_with_slope(z);
        let gauss = (-2.0 * r_sq / w_sq).exp();
        // U = -U0 w0² g / w²
        let amplitude = self.trap_depth * w0_sq * gauss / w_sq;
        let radial = -4.0 * amplitude / w_sq;
        let d_u_d_wsq = amplitude / w_sq * (1.0 - 2.0 * r_sq / w_sq);
        [radial * x, radial * y, -d_u_d_wsq * dw_sq_dz]
    }

    /// Magnitude of the on-axis dipole potential at height `z`, J.
    pub fn on_axis_depth(&self, z: f64) -> f64 {
        -self.dipole_potential_sq(0.0, z)
    }

    /// Small-oscillation radial frequency inside the fiber, Hz.
    pub fn transverse_trap_frequency(&self, mass: f64) -> f64 {
        if self.trap_depth <= 0.0 {
            return 0.0;
        }
        let w0 = self.geometry.waist;
        (4.0 * self.trap_depth / (mass * w0 * w0)).sqrt() / (2.0 * PI)
    }

    /// Small-oscillation radial frequency at height `z`, Hz. Scales as
    /// (w0/w(z))² above the tip.
    pub fn local_trap_frequency(&self, z: f64, mass: f64) -> f64 {
        let w0_sq = self.geometry.waist * self.geometry.waist;
        self.transverse_trap_frequency(mass) * w0_sq / self.geometry.waist_sq(z)
    }

    /// Height above the tip at which the on-axis depth has fallen to
    /// `threshold_energy`, m.
    pub fn capture_range(&self, threshold_energy: f64) -> Result<f64, OpticsError> {
        let depth = self.trap_depth;
        if !(threshold_energy > 0.0 && threshold_energy <= depth) {
            return Err(OpticsError::ThresholdOutOfRange {
                threshold: threshold_energy,
                depth,
            });
        }
        let ratio = (depth / threshold_energy - 1.0).max(0.0);
        Ok(self.geometry.divergence_length() * ratio.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constants::{kelvin_to_joule, BOLTZMANN};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const RB87_MASS: f64 = 1.443160648e-25;

    fn reference_trap() -> TrapConfig {
        TrapConfig::new(BeamGeometry::hcpcf_default(), kelvin_to_joule(5e-3)).unwrap()
    }

    #[test]
    fn waist_is_constant_inside_and_continuous_at_tip() {
        let g = BeamGeometry::hcpcf_default();
        assert_eq!(g.beam_waist_at(-0.01), g.waist);
        assert_eq!(g.beam_waist_at(0.0), g.waist);
        assert_relative_eq!(g.beam_waist_at(27.5e-6), g.waist * 2f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn waist_at_200_um() {
        // 2.75 μm * sqrt(1 + (200/27.5)^2)
        let w = BeamGeometry::hcpcf_default().beam_waist_at(200e-6);
        assert_relative_eq!(w, 20.188e-6, max_relative = 1e-4);
    }

    #[test]
    fn diffraction_model_uses_rayleigh_range() {
        let g = BeamGeometry {
            divergence: DivergenceModel::Diffraction,
            ..BeamGeometry::hcpcf_default()
        };
        let z_r = PI * 2.75e-6 * 2.75e-6 / 855e-9;
        assert_relative_eq!(g.divergence_length(), z_r, max_relative = 1e-15);
        assert_relative_eq!(g.beam_waist_at(z_r), g.waist * 2f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let g = BeamGeometry::hcpcf_default();
        assert!(BeamGeometry { numerical_aperture: 1.0, ..g }.validate().is_err());
        assert!(BeamGeometry { waist: 0.0, ..g }.validate().is_err());
        assert!(BeamGeometry { core_radius: 1e-6, ..g }.validate().is_err());
        assert!(BeamGeometry { fiber_length: 0.0, ..g }.validate().is_err());
        assert!(TrapConfig::new(g, -1.0).is_err());
    }

    #[test]
    fn potential_minimum_and_asymptote() {
        let trap = reference_trap();
        assert_eq!(trap.dipole_potential(0.0, -1e-3), -trap.trap_depth);
        assert!(trap.dipole_potential(1e-3, -1e-3).abs() < 1e-300);
    }

    #[test]
    fn depth_175_um_above_tip_is_mot_thermal_energy() {
        let trap = reference_trap();
        let depth_k = trap.on_axis_depth(175e-6) / BOLTZMANN;
        // 5 mK / (1 + (175/27.5)^2)
        assert_relative_eq!(depth_k, 120.5e-6, max_relative = 2e-3);
    }

    #[test]
    fn trap_frequency_closure() {
        let nu = reference_trap().transverse_trap_frequency(RB87_MASS);
        assert!((nu - 80e3).abs() / 80e3 < 0.02, "{nu}");
        let deeper = reference_trap().with_depth(4.0 * kelvin_to_joule(5e-3));
        assert_relative_eq!(deeper.transverse_trap_frequency(RB87_MASS), 2.0 * nu, max_relative = 1e-14);
        assert_eq!(reference_trap().with_depth(0.0).transverse_trap_frequency(RB87_MASS), 0.0);
    }

    #[test]
    fn capture_range_examples() {
        let trap = reference_trap();
        assert_eq!(trap.capture_range(trap.trap_depth).unwrap(), 0.0);
        let d = trap.capture_range(kelvin_to_joule(120e-6)).unwrap();
        assert!((d - 175e-6).abs() < 1e-6, "{d}");
        assert_relative_eq!(trap.capture_range(trap.trap_depth / 2.0).unwrap(), 27.5e-6, max_relative = 1e-12);
        assert!(trap.capture_range(trap.trap_depth * 1.01).is_err());
        assert!(trap.capture_range(0.0).is_err());
    }

    #[test]
    fn modulation_schedule() {
        let mut trap = reference_trap();
        assert!(trap.is_on(1.234));
        trap.modulation = Some(ProbeSequenceConfig::stroboscopic_default());
        assert!(!trap.is_on(0.0));
        assert!(!trap.is_on(799e-9));
        assert!(trap.is_on(801e-9));
        assert!(!trap.is_on(4e-6 + 100e-9));
    }

    #[test]
    fn continuity_across_tip() {
        let trap = reference_trap();
        for r in [0.0, 0.5e-6, 1.5e-6, 3e-6] {
            let below = trap.total_potential([r, 0.0, -1e-15], RB87_MASS);
            let above = trap.total_potential([r, 0.0, 1e-15], RB87_MASS);
            assert_relative_eq!(below, above, max_relative = 1e-9);
            let fb = trap.force([r, 0.0, -1e-15], RB87_MASS);
            let fa = trap.force([r, 0.0, 1e-15], RB87_MASS);
            let scale = trap.trap_depth / trap.geometry.waist;
            for k in 0..3 {
                assert!((fb[k] - fa[k]).abs() <= 1e-9 * scale, "r={r} k={k}");
            }
        }
    }

    #[test]
    fn depth_decays_monotonically_above_tip() {
        let trap = reference_trap();
        let mut previous = trap.on_axis_depth(0.0);
        for i in 1..2000 {
            let d = trap.on_axis_depth(i as f64 * 1e-6);
            assert!(d < previous);
            previous = d;
        }
    }

    /// Central-difference gradient of the total potential, used as an
    /// independent check of the analytic force.
    fn numeric_force(trap: &TrapConfig, p: [f64; 3]) -> [f64; 3] {
        let mut f = [0.0; 3];
        for k in 0..3 {
            let h = 1e-10;
            let mut plus = p;
            let mut minus = p;
            plus[k] += h;
            minus[k] -= h;
            f[k] = -(trap.total_potential(plus, RB87_MASS) - trap.total_potential(minus, RB87_MASS)) / (2.0 * h);
        }
        f
    }

    #[test]
    fn analytic_force_matches_finite_differences() {
        let trap = reference_trap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let z: f64 = rng.random_range(-50e-6..150e-6);
            let w = trap.geometry.beam_waist_at(z);
            let p = [rng.random_range(-w..w), rng.random_range(-w..w), z];
            let exact = trap.force(p, RB87_MASS);
            let approx = numeric_force(&trap, p);
            let norm = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..3 {
                assert!(
                    (exact[k] - approx[k]).abs() <= 1e-6 * norm,
                    "component {k} at {p:?}: {} vs {}",
                    exact[k],
                    approx[k]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn capture_range_inverts_depth(frac in 1e-4f64..1.0) {
            let trap = reference_trap();
            let e = trap.trap_depth * frac;
            let d = trap.capture_range(e).unwrap();
            let back = -trap.dipole_potential(0.0, trap.geometry.tip_z + d);
            prop_assert!((back - e).abs() <= 1e-9 * e);
        }
    }
}
