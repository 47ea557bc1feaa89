//! CODATA 2018 exact SI constants plus the standard acceleration of gravity.

/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380649e-23;
/// Planck constant, J s.
pub const PLANCK: f64 = 6.62607015e-34;
/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Standard gravity, m/s².
pub const STANDARD_GRAVITY: f64 = 9.80665;

/// Converts a temperature in kelvin to an energy in joules.
#[inline]
pub fn kelvin_to_joule(t: f64) -> f64 {
    t * BOLTZMANN
}

#[inline]
pub fn joule_to_kelvin(e: f64) -> f64 {
    e / BOLTZMANN
}

/// Energy of a single photon of vacuum wavelength `wavelength` (m).
#[inline]
pub fn photon_energy(wavelength: f64) -> f64 {
    PLANCK * SPEED_OF_LIGHT / wavelength
}
