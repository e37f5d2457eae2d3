//! Torus geometry, positions and model parameters.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Largest supported state-space dimension.
pub const MAX_DIM: usize = 3;

/// The flat torus `[0, side)^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub d: usize,
    pub side: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry { d: 2, side: 1.0 }
    }
}

impl Geometry {
    pub fn new(d: usize, side: f64) -> Result<Self> {
        let g = Geometry { d, side };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d > MAX_DIM {
            return Err(Error::InvalidConfig(format!(
                "dimension d must be in 1..={MAX_DIM}, got {}",
                self.d
            )));
        }
        if !(self.side.is_finite() && self.side > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "side must be finite and > 0, got {}",
                self.side
            )));
        }
        Ok(())
    }

    /// Lebesgue volume of the torus, `side^d`.
    pub fn volume(&self) -> f64 {
        self.side.powi(self.d as i32)
    }

    /// Reduce each raw coordinate modulo `side` into `[0, side)`.
    pub fn wrap(&self, raw: &[f64]) -> Result<Position> {
        if raw.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: raw.len(),
            });
        }
        let mut coords = [0.0; MAX_DIM];
        for (c, &x) in coords.iter_mut().zip(raw) {
            if !x.is_finite() {
                return Err(Error::InvalidPosition(x));
            }
            *c = wrap_coord(x, self.side);
        }
        Ok(Position {
            coords,
            d: self.d as u8,
        })
    }

    /// Torus distance with the per-coordinate minimum-image convention.
    pub fn distance(&self, p: &Position, q: &Position) -> f64 {
        self.distance_sq(p, q).sqrt()
    }

    pub fn distance_sq(&self, p: &Position, q: &Position) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.d {
            let delta = min_image(p.coords[k] - q.coords[k], self.side);
            acc += delta * delta;
        }
        acc
    }

    /// Minimum-image displacement `q - p`, each component in `[-side/2, side/2]`.
    pub fn displacement(&self, p: &Position, q: &Position) -> [f64; MAX_DIM] {
        let mut out = [0.0; MAX_DIM];
        for (k, o) in out.iter_mut().enumerate().take(self.d) {
            *o = min_image(q.coords[k] - p.coords[k], self.side);
        }
        out
    }

    /// Translate `p` by `offset` and wrap. `offset` must be finite.
    pub fn translate(&self, p: &Position, offset: &[f64]) -> Position {
        let mut coords = [0.0; MAX_DIM];
        for k in 0..self.d {
            coords[k] = wrap_coord(p.coords[k] + offset[k], self.side);
        }
        Position { coords, d: p.d }
    }
}

#[inline]
fn wrap_coord(x: f64, side: f64) -> f64 {
    let r = x.rem_euclid(side);
    // rem_euclid rounds tiny negatives up to `side` itself
    if r >= side {
        0.0
    } else {
        r
    }
}

#[inline]
fn min_image(mut delta: f64, side: f64) -> f64 {
    let half = 0.5 * side;
    if delta > half {
        delta -= side;
    } else if delta < -half {
        delta += side;
    }
    delta
}

/// A point of the torus. Only the first `dim()` coordinates are meaningful.
#[derive(Clone, Copy, PartialEq)]
pub struct Position {
    coords: [f64; MAX_DIM],
    d: u8,
}

impl Position {
    /// Build a position without wrapping. Callers guarantee the coordinates
    /// already lie in `[0, side)`.
    pub fn from_wrapped(raw: &[f64]) -> Self {
        assert!(!raw.is_empty() && raw.len() <= MAX_DIM);
        let mut coords = [0.0; MAX_DIM];
        coords[..raw.len()].copy_from_slice(raw);
        Position {
            coords,
            d: raw.len() as u8,
        }
    }

    pub fn xy(x: f64, y: f64) -> Self {
        Position::from_wrapped(&[x, y])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d as usize
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.coords[..self.d as usize]
    }

    #[inline]
    pub fn coord(&self, axis: usize) -> f64 {
        self.coords[axis]
    }
}

impl fmt::Debug for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Position").field(&self.coords()).finish()
    }
}

impl Serialize for Position {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.coords().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Position {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v: Vec<f64> = Vec::deserialize(d)?;
        if v.is_empty() || v.len() > MAX_DIM {
            return Err(serde::de::Error::custom(format!(
                "position must have 1..={MAX_DIM} coordinates"
            )));
        }
        Ok(Position::from_wrapped(&v))
    }
}

/// Free-function form of [`Geometry::wrap`].
pub fn torus_wrap(geometry: &Geometry, raw: &[f64]) -> Result<Position> {
    geometry.wrap(raw)
}

/// Free-function form of [`Geometry::distance`].
pub fn torus_distance(geometry: &Geometry, p: &Position, q: &Position) -> f64 {
    geometry.distance(p, q)
}

fn one() -> f64 {
    1.0
}

/// Model parameters. JSON field names follow the model notation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// Invitation rate per vertex.
    pub alpha: f64,
    /// Withdrawal rate per vertex at the first event.
    pub beta0: f64,
    /// Added to the withdrawal rate after every scheme iteration.
    #[serde(default)]
    pub beta_increment: f64,
    #[serde(rename = "A_f")]
    pub affinity_amplitude: f64,
    #[serde(rename = "a_f")]
    pub affinity_radius: f64,
    /// Standard deviation of the Gaussian invitation offset.
    pub sigma: f64,
    #[serde(default = "one")]
    pub gamma1: f64,
    #[serde(default = "one")]
    pub gamma2: f64,
}

impl Params {
    /// Baseline parameter set: unit rates, `a_f = 0.1`, `sigma = 0.01`.
    pub fn reference() -> Self {
        Params {
            alpha: 1.0,
            beta0: 1.0,
            beta_increment: 0.0,
            affinity_amplitude: 1.0,
            affinity_radius: 0.1,
            sigma: 0.01,
            gamma1: 1.0,
            gamma2: 1.0,
        }
    }
}

/// Check every parameter invariant and report all violations at once.
///
/// `alpha` and `A_f` may be exactly zero, which switches the corresponding
/// recruitment mechanism off.
pub fn validate_params(raw: Params, geometry: &Geometry) -> Result<Params> {
    let mut problems = Vec::new();
    let fields = [
        ("alpha", raw.alpha),
        ("beta0", raw.beta0),
        ("beta_increment", raw.beta_increment),
        ("A_f", raw.affinity_amplitude),
        ("a_f", raw.affinity_radius),
        ("sigma", raw.sigma),
        ("gamma1", raw.gamma1),
        ("gamma2", raw.gamma2),
    ];
    for (name, v) in fields {
        if !v.is_finite() {
            problems.push(format!("{name} must be finite"));
        }
    }
    let nonneg = |problems: &mut Vec<String>, name: &str, v: f64, what: &str| {
        if v.is_finite() && v < 0.0 {
            problems.push(format!("{name} must be > 0 ({what})"));
        }
    };
    nonneg(&mut problems, "alpha", raw.alpha, "0 disables invitation");
    nonneg(&mut problems, "A_f", raw.affinity_amplitude, "0 disables affinity");
    for (name, v) in [("beta0", raw.beta0), ("a_f", raw.affinity_radius), ("sigma", raw.sigma)] {
        if v.is_finite() && v <= 0.0 {
            problems.push(format!("{name} must be > 0"));
        }
    }
    if raw.beta_increment.is_finite() && raw.beta_increment < 0.0 {
        problems.push("beta_increment must be >= 0".to_string());
    }
    for (name, v) in [("gamma1", raw.gamma1), ("gamma2", raw.gamma2)] {
        if v.is_finite() && v < 1.0 {
            problems.push(format!("{name} must be >= 1"));
        }
    }
    if raw.affinity_radius.is_finite() && raw.affinity_radius >= 0.5 * geometry.side {
        problems.push(format!(
            "a_f must be < side/2 (a_f = {}, side = {})",
            raw.affinity_radius, geometry.side
        ));
    }
    if problems.is_empty() {
        Ok(raw)
    } else {
        Err(Error::InvalidParams(problems))
    }
}
