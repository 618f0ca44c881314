//! JSON-backed configuration types for the three physics clients.

use serde::{Deserialize, Serialize};

use pmfw::error::Error;
use pmfw::Result;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DomainSpec {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

/// Optional deterministic initial velocities: uniform in
/// `[-scale, scale]` per component, derived from the seed and the gid.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VelocityInit {
    pub seed: u64,
    pub scale: f64,
}

/// Lennard-Jones molecular dynamics configuration.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LJConfig {
    pub sigma: f64,
    pub epsilon: f64,
    pub r_cut: f64,
    pub dt: f64,
    pub steps: usize,
    /// Lattice nodes per axis for the initial configuration.
    pub lattice: Vec<usize>,
    pub domain: DomainSpec,
    /// Energy-trace cadence in steps.
    #[serde(default = "one")]
    pub output_every: usize,
    #[serde(default)]
    pub init_velocity: Option<VelocityInit>,
}

fn one() -> usize {
    1
}

impl LJConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_cut > 0.0) {
            return Err(Error::Usage("r_cut must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Usage("dt must be positive".into()));
        }
        if self.lattice.len() != self.domain.low.len()
            || self.domain.low.len() != self.domain.high.len()
        {
            return Err(Error::Usage("lattice and domain dimensions differ".into()));
        }
        if self.output_every == 0 {
            return Err(Error::Usage("output_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Gray-Scott reaction-diffusion configuration. The domain spans
/// `grid[d] * spacing` per axis with periodic boundaries.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GSConfig {
    pub d_u: f64,
    pub d_v: f64,
    pub f: f64,
    pub k: f64,
    pub grid: Vec<usize>,
    pub dt: f64,
    pub spacing: f64,
    pub steps: usize,
    /// Seed for the 1% initialization noise.
    #[serde(default)]
    pub seed: u64,
}

impl GSConfig {
    pub fn validate(&self) -> Result<()> {
        for v in [self.d_u, self.d_v, self.dt, self.spacing] {
            if !(v > 0.0) {
                return Err(Error::Usage("Gray-Scott parameters must be positive".into()));
            }
        }
        if self.f < 0.0 || self.k < 0.0 {
            return Err(Error::Usage("F and k must be nonnegative".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::Usage("grid must have at least one axis".into()));
        }
        let bound = self.stability_bound();
        if self.dt > bound {
            return Err(Error::Usage(format!(
                "dt {} violates the FTCS stability bound {bound}",
                self.dt
            )));
        }
        Ok(())
    }

    /// `dt <= h^2 / (4 * dim * max(D_u, D_v))`.
    pub fn stability_bound(&self) -> f64 {
        let h2 = self.spacing * self.spacing;
        h2 / (4.0 * self.grid.len() as f64 * self.d_u.max(self.d_v))
    }
}

/// Pattern-regime presets (F, k). Published classifications place these in
/// distinct pattern classes; the values here are conventional, not
/// normative.
pub const GS_PRESETS: &[(&str, f64, f64)] = &[
    ("alpha", 0.010, 0.047),
    ("lambda", 0.026, 0.061),
    ("solitons", 0.030, 0.060),
    ("worms", 0.058, 0.065),
    ("waves", 0.014, 0.045),
];

/// Discrete-element method configuration (3D).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DEMConfig {
    pub k_n: f64,
    pub k_t: f64,
    pub gamma_n: f64,
    /// Defaults to `gamma_n / 2`.
    #[serde(default)]
    pub gamma_t: Option<f64>,
    /// Particle radius.
    pub radius: f64,
    pub mass: f64,
    pub inertia: f64,
    /// Coulomb friction coefficient; defaults to 0.5.
    #[serde(default = "half")]
    pub mu: f64,
    /// Gravity vector, already rotated for an inclined plane.
    pub g: Vec<f64>,
    pub dt: f64,
    pub steps: usize,
    pub domain: DomainSpec,
    /// Initial particle block (lattice inside this box).
    pub initial_box: DomainSpec,
    pub lattice: Vec<usize>,
    /// Optional uniform initial velocity for every particle.
    #[serde(default)]
    pub boost: Option<Vec<f64>>,
}

fn half() -> f64 {
    0.5
}

impl DEMConfig {
    pub fn gamma_t(&self) -> f64 {
        self.gamma_t.unwrap_or(self.gamma_n / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k_n", self.k_n),
            ("k_t", self.k_t),
            ("gamma_n", self.gamma_n),
            ("gamma_t", self.gamma_t()),
            ("mu", self.mu),
        ] {
            if v < 0.0 {
                return Err(Error::Usage(format!("{name} must be >= 0")));
            }
        }
        if !(self.radius > 0.0) {
            return Err(Error::Usage("radius must be positive".into()));
        }
        if !(self.mass > 0.0) || !(self.inertia > 0.0) {
            return Err(Error::Usage("mass and inertia must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Usage("dt must be positive".into()));
        }
        if self.domain.low.len() != 3 {
            return Err(Error::Usage("the DEM client is three-dimensional".into()));
        }
        if self.g.len() != 3 || self.lattice.len() != 3 {
            return Err(Error::Usage("g and lattice must be three-dimensional".into()));
        }
        Ok(())
    }

    /// Gravity of magnitude `g_mag` rotated by `angle_deg` about the y axis,
    /// pointing down-slope in +x.
    pub fn rotated_gravity(g_mag: f64, angle_deg: f64) -> Vec<f64> {
        let a = angle_deg.to_radians();
        vec![g_mag * a.sin(), 0.0, -g_mag * a.cos()]
    }
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Usage(format!("config parse: {e}")))
}
