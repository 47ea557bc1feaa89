//! Atomic reference data: hyperfine structure of the D2 line, relative
//! transition strengths and resonant cross-sections.
//!
//! Data is loaded from a versioned TOML document (see
//! `data/rb87_d2.toml` for the shipped ⁸⁷Rb file). Level frequencies are
//! stored as offsets from the centroid of their own manifold; any line
//! position relative to another line is computed on demand.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Schema version understood by [`AtomSpecies::from_toml_str`].
pub const SPECIES_SCHEMA_VERSION: u32 = 1;

/// Shipped ⁸⁷Rb D2 reference data.
pub const RB87_D2_TOML: &str = include_str!("../data/rb87_d2.toml");

const STRENGTH_SUM_TOLERANCE: f64 = 1e-9;

const REQUIRED_KEYS: [&str; 9] = [
    "schema_version",
    "name",
    "mass_kg",
    "d2_wavelength_m",
    "gamma_fwhm_hz",
    "j_ground",
    "j_excited",
    "levels",
    "strengths",
];

#[derive(Debug, Error)]
pub enum SpeciesError {
    #[error("cannot read species file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("species data is not valid TOML: {0}")]
    Parse(String),
    #[error("species data is missing required field `{0}`")]
    MissingField(&'static str),
    #[error("species data does not match the schema: {0}")]
    Schema(String),
    #[error("unsupported species schema version {found} (this build reads version {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("relative strengths from ground F={ground_f} sum to {sum}, expected 1")]
    StrengthSum { ground_f: u32, sum: f64 },
    #[error("invalid species data: {0}")]
    Invalid(String),
    #[error("no {manifold} level with F={f}")]
    UnknownLevel { manifold: Manifold, f: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Manifold {
    Ground,
    Excited,
}

impl fmt::Display for Manifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Manifold::Ground => f.write_str("ground"),
            Manifold::Excited => f.write_str("excited"),
        }
    }
}

/// A single hyperfine level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperfineLevel {
    pub f: u32,
    /// Offset from the manifold centroid, Hz.
    pub frequency_offset: f64,
}

impl HyperfineLevel {
    /// Number of Zeeman sublevels, 2F+1.
    pub fn degeneracy(&self) -> u32 {
        2 * self.f + 1
    }
}

/// Relative strength factor S(F, F') of one hyperfine component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionStrength {
    pub ground_f: u32,
    pub excited_f: u32,
    pub relative_strength: f64,
}

/// How the ground-state Zeeman population and the probe polarization are
/// averaged when computing a cross-section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarizationModel {
    /// Equal population in all 2F+1 ground sublevels, polarization averaged
    /// over all directions.
    #[default]
    Unpolarized,
}

/// Immutable reference data for one atomic species and its D2 line.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomSpecies {
    name: String,
    mass: f64,
    d2_wavelength: f64,
    gamma_fwhm: f64,
    j_ground: f64,
    j_excited: f64,
    ground_levels: Vec<HyperfineLevel>,
    excited_levels: Vec<HyperfineLevel>,
    strengths: Vec<TransitionStrength>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeciesDocument {
    schema_version: u32,
    name: String,
    mass_kg: f64,
    d2_wavelength_m: f64,
    gamma_fwhm_hz: f64,
    j_ground: f64,
    j_excited: f64,
    levels: Vec<LevelRecord>,
    strengths: Vec<StrengthRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelRecord {
    manifold: Manifold,
    #[serde(rename = "F")]
    f: u32,
    frequency_offset_hz: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrengthRecord {
    #[serde(rename = "ground_F")]
    ground_f: u32,
    #[serde(rename = "excited_F")]
    excited_f: u32,
    relative_strength: f64,
}

impl AtomSpecies {
    /// The shipped ⁸⁷Rb D2 data set.
    pub fn rb87() -> Self {
        Self::from_toml_str(RB87_D2_TOML).expect("shipped 87Rb data is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SpeciesError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SpeciesError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Parses and validates a species document.
    pub fn from_toml_str(text: &str) -> Result<Self, SpeciesError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| SpeciesError::Parse(e.to_string()))?;
        for key in REQUIRED_KEYS {
            if !table.contains_key(key) {
                return Err(SpeciesError::MissingField(key));
            }
        }
        let doc: SpeciesDocument = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| SpeciesError::Schema(e.message().to_string()))?;
        Self::from_document(doc)
    }

    fn from_document(doc: SpeciesDocument) -> Result<Self, SpeciesError> {
        if doc.schema_version != SPECIES_SCHEMA_VERSION {
            return Err(SpeciesError::SchemaVersion {
                found: doc.schema_version,
                expected: SPECIES_SCHEMA_VERSION,
            });
        }
        for (key, value) in [
            ("mass_kg", doc.mass_kg),
            ("d2_wavelength_m", doc.d2_wavelength_m),
            ("gamma_fwhm_hz", doc.gamma_fwhm_hz),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(SpeciesError::Invalid(format!("{key} must be positive, got {value}")));
            }
        }
        for (key, j) in [("j_ground", doc.j_ground), ("j_excited", doc.j_excited)] {
            if !(j > 0.0 && (2.0 * j).fract() == 0.0) {
                return Err(SpeciesError::Invalid(format!(
                    "{key} must be a positive half-integer, got {j}"
                )));
            }
        }

        let mut ground_levels = Vec::new();
        let mut excited_levels = Vec::new();
        for rec in &doc.levels {
            if !rec.frequency_offset_hz.is_finite() {
                return Err(SpeciesError::Invalid(format!(
                    "{} level F={} has a non-finite frequency offset",
                    rec.manifold, rec.f
                )));
            }
            let level = HyperfineLevel {
                f: rec.f,
                frequency_offset: rec.frequency_offset_hz,
            };
            match rec.manifold {
                Manifold::Ground => ground_levels.push(level),
                Manifold::Excited => excited_levels.push(level),
            }
        }
        for (manifold, levels) in [
            (Manifold::Ground, &ground_levels),
            (Manifold::Excited, &excited_levels),
        ] {
            if levels.is_empty() {
                return Err(SpeciesError::Invalid(format!("no {manifold} levels")));
            }
            for pair in levels.windows(2) {
                if pair[1].f <= pair[0].f {
                    return Err(SpeciesError::Invalid(format!(
                        "{manifold} levels must be listed in increasing F (F={} after F={})",
                        pair[1].f, pair[0].f
                    )));
                }
                if pair[1].frequency_offset <= pair[0].frequency_offset {
                    return Err(SpeciesError::Invalid(format!(
                        "{manifold} level offsets must be strictly increasing (F={} at {} Hz, F={} at {} Hz)",
                        pair[0].f, pair[0].frequency_offset, pair[1].f, pair[1].frequency_offset
                    )));
                }
            }
        }

        let strengths: Vec<TransitionStrength> = doc
            .strengths
            .iter()
            .map(|r| TransitionStrength {
                ground_f: r.ground_f,
                excited_f: r.excited_f,
                relative_strength: r.relative_strength,
            })
            .collect();

        for s in &strengths {
            let known_ground = ground_levels.iter().any(|l| l.f == s.ground_f);
            let known_excited = excited_levels.iter().any(|l| l.f == s.excited_f);
            if !known_ground || !known_excited {
                return Err(SpeciesError::Invalid(format!(
                    "strength entry F={} -> F'={} refers to an unknown level",
                    s.ground_f, s.excited_f
                )));
            }
            if !(0.0..=1.0).contains(&s.relative_strength) {
                return Err(SpeciesError::Invalid(format!(
                    "strength F={} -> F'={} is outside [0, 1]: {}",
                    s.ground_f, s.excited_f, s.relative_strength
                )));
            }
            if s.ground_f.abs_diff(s.excited_f) > 1 && s.relative_strength != 0.0 {
                return Err(SpeciesError::Invalid(format!(
                    "dipole-forbidden line F={} -> F'={} has nonzero strength",
                    s.ground_f, s.excited_f
                )));
            }
            let duplicates = strengths
                .iter()
                .filter(|o| o.ground_f == s.ground_f && o.excited_f == s.excited_f)
                .count();
            if duplicates > 1 {
                return Err(SpeciesError::Invalid(format!(
                    "duplicate strength entry F={} -> F'={}",
                    s.ground_f, s.excited_f
                )));
            }
        }

        for g in &ground_levels {
            for e in &excited_levels {
                if g.f.abs_diff(e.f) <= 1
                    && !strengths
                        .iter()
                        .any(|s| s.ground_f == g.f && s.excited_f == e.f)
                {
                    return Err(SpeciesError::Invalid(format!(
                        "missing strength entry for allowed line F={} -> F'={}",
                        g.f, e.f
                    )));
                }
            }
            let sum: f64 = strengths
                .iter()
                .filter(|s| s.ground_f == g.f)
                .map(|s| s.relative_strength)
                .sum();
            if (sum - 1.0).abs() > STRENGTH_SUM_TOLERANCE {
                return Err(SpeciesError::StrengthSum { ground_f: g.f, sum });
            }
        }

        Ok(AtomSpecies {
            name: doc.name,
            mass: doc.mass_kg,
            d2_wavelength: doc.d2_wavelength_m,
            gamma_fwhm: doc.gamma_fwhm_hz,
            j_ground: doc.j_ground,
            j_excited: doc.j_excited,
            ground_levels,
            excited_levels,
            strengths,
        })
    }

    /// Serializes back into the document format read by [`Self::from_toml_str`].
    pub fn to_toml_string(&self) -> String {
        let levels = self
            .ground_levels
            .iter()
            .map(|l| (Manifold::Ground, l))
            .chain(self.excited_levels.iter().map(|l| (Manifold::Excited, l)))
            .map(|(manifold, l)| LevelRecord {
                manifold,
                f: l.f,
                frequency_offset_hz: l.frequency_offset,
            })
            .collect();
        let doc = SpeciesDocument {
            schema_version: SPECIES_SCHEMA_VERSION,
            name: self.name.clone(),
            mass_kg: self.mass,
            d2_wavelength_m: self.d2_wavelength,
            gamma_fwhm_hz: self.gamma_fwhm,
            j_ground: self.j_ground,
            j_excited: self.j_excited,
            levels,
            strengths: self
                .strengths
                .iter()
                .map(|s| StrengthRecord {
                    ground_f: s.ground_f,
                    excited_f: s.excited_f,
                    relative_strength: s.relative_strength,
                })
                .collect(),
        };
        toml::to_string(&doc).expect("species document serializes")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Atomic mass, kg.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// D2 vacuum wavelength, m.
    pub fn d2_wavelength(&self) -> f64 {
        self.d2_wavelength
    }

    /// Natural linewidth Γ/2π as a FWHM in Hz.
    pub fn natural_linewidth(&self) -> f64 {
        self.gamma_fwhm
    }

    pub fn ground_levels(&self) -> &[HyperfineLevel] {
        &self.ground_levels
    }

    pub fn excited_levels(&self) -> &[HyperfineLevel] {
        &self.excited_levels
    }

    pub fn strengths(&self) -> &[TransitionStrength] {
        &self.strengths
    }

    pub fn level(&self, manifold: Manifold, f: u32) -> Result<&HyperfineLevel, SpeciesError> {
        let levels = match manifold {
            Manifold::Ground => &self.ground_levels,
            Manifold::Excited => &self.excited_levels,
        };
        levels
            .iter()
            .find(|l| l.f == f)
            .ok_or(SpeciesError::UnknownLevel { manifold, f })
    }

    /// S(F, F'); zero for any pair without a table entry.
    pub fn strength(&self, ground_f: u32, excited_f: u32) -> f64 {
        self.strengths
            .iter()
            .find(|s| s.ground_f == ground_f && s.excited_f == excited_f)
            .map_or(0.0, |s| s.relative_strength)
    }

    /// Frequency of the F→F' line relative to the F→F'_ref line, Hz.
    ///
    /// The ground level is common to both lines and cancels, but it must
    /// still exist.
    pub fn line_detuning(
        &self,
        ground_f: u32,
        excited_f: u32,
        reference_excited_f: u32,
    ) -> Result<f64, SpeciesError> {
        self.level(Manifold::Ground, ground_f)?;
        let line = self.level(Manifold::Excited, excited_f)?;
        let reference = self.level(Manifold::Excited, reference_excited_f)?;
        Ok(line.frequency_offset - reference.frequency_offset)
    }

    /// (2J'+1) / (3(2J+1)); 2/3 for a J=1/2 → J'=3/2 line.
    pub fn polarization_factor(&self, model: PolarizationModel) -> f64 {
        match model {
            PolarizationModel::Unpolarized => {
                (2.0 * self.j_excited + 1.0) / (3.0 * (2.0 * self.j_ground + 1.0))
            }
        }
    }

    /// 3λ²/2π, the two-level resonant cross-section, m².
    pub fn bare_cross_section(&self) -> f64 {
        3.0 * self.d2_wavelength * self.d2_wavelength / (2.0 * PI)
    }

    /// On-resonance absorption cross-section of the F→F' component, m².
    ///
    /// Forbidden or unknown lines return 0.
    pub fn resonant_cross_section(
        &self,
        ground_f: u32,
        excited_f: u32,
        model: PolarizationModel,
    ) -> f64 {
        self.bare_cross_section() * self.strength(ground_f, excited_f) * self.polarization_factor(model)
    }
}
