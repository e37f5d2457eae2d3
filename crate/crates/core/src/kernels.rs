//! Invitation dispersal, affinity-site and local-affinity kernels.
//!
//! Each sampling kernel exposes its true density, the envelope it is sampled
//! from and the domination constant `gamma` with `density <= gamma * envelope`.
//! The simulator draws from the envelope and thins with the density ratio.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::{Geometry, Params, Position, MAX_DIM};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Offset kernel `K(x, dz) = k(x, z) dz` for recruitment by invitation.
pub trait DispersalKernel: Send + Sync + fmt::Debug {
    /// Draw an offset from the envelope density into `out[..d]`.
    fn sample_offset(&self, rng: &mut Stream, out: &mut [f64]);
    /// `k(x, z)`.
    fn density(&self, x: &Position, z: &[f64]) -> f64;
    /// `k~(z)`.
    fn envelope_density(&self, z: &[f64]) -> f64;
    fn gamma(&self) -> f64;
}

/// Placement kernel `K_af(dy) = k_af(y) dy` for recruitment by affinity.
pub trait SiteKernel: Send + Sync + fmt::Debug {
    fn sample(&self, rng: &mut Stream) -> Position;
    fn density(&self, y: &Position) -> f64;
    fn envelope_density(&self, y: &Position) -> f64;
    fn gamma(&self) -> f64;
}

/// Isotropic Gaussian offset `N(0, sigma^2 I_d)`, wrapped onto the torus by
/// the caller. With `sigma` small against the side the wrapped and unwrapped
/// densities agree, so the kernel is its own envelope.
#[derive(Debug, Clone)]
pub struct GaussianDispersal {
    pub sigma: f64,
    pub d: usize,
    pub gamma1: f64,
}

impl GaussianDispersal {
    fn norm_const(&self) -> f64 {
        (2.0 * PI * self.sigma * self.sigma).powf(-0.5 * self.d as f64)
    }
}

impl DispersalKernel for GaussianDispersal {
    fn sample_offset(&self, rng: &mut Stream, out: &mut [f64]) {
        for o in out.iter_mut().take(self.d) {
            *o = self.sigma * rng.normal();
        }
    }

    fn density(&self, _x: &Position, z: &[f64]) -> f64 {
        self.envelope_density(z)
    }

    fn envelope_density(&self, z: &[f64]) -> f64 {
        let r2: f64 = z[..self.d].iter().map(|v| v * v).sum();
        self.norm_const() * (-0.5 * r2 / (self.sigma * self.sigma)).exp()
    }

    fn gamma(&self) -> f64 {
        self.gamma1
    }
}

/// Uniform placement on the torus.
#[derive(Debug, Clone)]
pub struct UniformSite {
    pub geometry: Geometry,
    pub gamma2: f64,
}

impl SiteKernel for UniformSite {
    fn sample(&self, rng: &mut Stream) -> Position {
        let mut c = [0.0; MAX_DIM];
        for v in c.iter_mut().take(self.geometry.d) {
            *v = rng.uniform() * self.geometry.side;
        }
        // u < 1 but u * side can round up to side
        self.geometry
            .wrap(&c[..self.geometry.d])
            .expect("uniform draws are finite")
    }

    fn density(&self, _y: &Position) -> f64 {
        1.0 / self.geometry.volume()
    }

    fn envelope_density(&self, y: &Position) -> f64 {
        self.density(y)
    }

    fn gamma(&self) -> f64 {
        self.gamma2
    }
}

/// Triangular truncated affinity `A_f (1 - |x - y| / a_f)^+`, zero at `x = y`.
#[derive(Debug, Clone, Copy)]
pub struct TriangularAffinity {
    pub amplitude: f64,
    pub radius: f64,
    pub geometry: Geometry,
}

impl TriangularAffinity {
    /// Value as a function of the torus distance alone (no `x = y` special
    /// case).
    #[inline]
    pub fn profile(&self, dist: f64) -> f64 {
        if dist >= self.radius {
            0.0
        } else {
            self.amplitude * (1.0 - dist / self.radius)
        }
    }

    #[inline]
    pub fn value(&self, x: &Position, y: &Position) -> f64 {
        if x == y {
            return 0.0;
        }
        self.profile(self.geometry.distance(x, y))
    }

    /// `int_{|z| <= a_f} (1 - |z|/a_f) dz` in dimension `d`.
    pub fn unit_mass(&self) -> f64 {
        let d = self.geometry.d;
        let sphere = match d {
            1 => 2.0,
            2 => 2.0 * PI,
            3 => 4.0 * PI,
            _ => unreachable!("geometry validated to d <= 3"),
        };
        sphere * self.radius.powi(d as i32) / (d * (d + 1)) as f64
    }

    /// `int aff(x, y) k_af(y) dy` for the uniform placement kernel: the
    /// per-vertex affinity recruitment rate, independent of `x`.
    pub fn integral(&self) -> f64 {
        self.amplitude * self.unit_mass() / self.geometry.volume()
    }
}

/// Kernel choices as they appear in a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelsConfig {
    pub invitation: InvitationSpec,
    pub affinity_site: SiteSpec,
    pub affinity: AffinitySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum InvitationSpec {
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum SiteSpec {
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum AffinitySpec {
    Triangular {
        #[serde(rename = "A_f")]
        amplitude: f64,
        #[serde(rename = "a_f")]
        radius: f64,
    },
}

impl KernelsConfig {
    pub fn from_params(p: &Params) -> Self {
        KernelsConfig {
            invitation: InvitationSpec::Gaussian { sigma: p.sigma },
            affinity_site: SiteSpec::Uniform,
            affinity: AffinitySpec::Triangular {
                amplitude: p.affinity_amplitude,
                radius: p.affinity_radius,
            },
        }
    }

    /// The kernel block must restate the parameter values, not override them.
    pub fn check_consistent(&self, p: &Params) -> Result<()> {
        if *self != KernelsConfig::from_params(p) {
            return Err(Error::InvalidConfig(
                "kernels block disagrees with params (sigma, A_f, a_f)".into(),
            ));
        }
        Ok(())
    }
}

/// Geometry, parameters and kernels of one model instance. Immutable and
/// cheap to clone; share it across workers that each own a [`Stream`].
#[derive(Debug, Clone)]
pub struct Model {
    pub geometry: Geometry,
    pub params: Params,
    pub invitation: Arc<dyn DispersalKernel>,
    pub site: Arc<dyn SiteKernel>,
    pub affinity: TriangularAffinity,
}

impl Model {
    /// Validate and build the default Gaussian / uniform / triangular model.
    pub fn new(geometry: Geometry, params: Params) -> Result<Self> {
        geometry.validate()?;
        let params = crate::domain::validate_params(params, &geometry)?;
        Ok(Model {
            geometry,
            params,
            invitation: Arc::new(GaussianDispersal {
                sigma: params.sigma,
                d: geometry.d,
                gamma1: params.gamma1,
            }),
            site: Arc::new(UniformSite {
                geometry,
                gamma2: params.gamma2,
            }),
            affinity: TriangularAffinity {
                amplitude: params.affinity_amplitude,
                radius: params.affinity_radius,
                geometry,
            },
        })
    }

    /// Build from a scenario's optional kernel block.
    pub fn from_config(geometry: Geometry, params: Params, kernels: Option<&KernelsConfig>) -> Result<Self> {
        if let Some(k) = kernels {
            k.check_consistent(&params)?;
        }
        Model::new(geometry, params)
    }

    /// Replace the dispersal kernel; the clock then uses its `gamma`.
    pub fn with_invitation(mut self, kernel: Arc<dyn DispersalKernel>) -> Self {
        self.params.gamma1 = kernel.gamma();
        self.invitation = kernel;
        self
    }

    pub fn with_site(mut self, kernel: Arc<dyn SiteKernel>) -> Self {
        self.params.gamma2 = kernel.gamma();
        self.site = kernel;
        self
    }

    pub fn local_affinity(&self, x: &Position, y: &Position) -> f64 {
        self.affinity.value(x, y)
    }

    pub fn sample_invitation_offset(&self, rng: &mut Stream) -> [f64; MAX_DIM] {
        let mut z = [0.0; MAX_DIM];
        self.invitation.sample_offset(rng, &mut z[..self.geometry.d]);
        z
    }

    /// `k(x, z) / (gamma1 k~(z))`.
    pub fn invitation_accept_prob(&self, x: &Position, z: &[f64]) -> Result<f64> {
        let k = &self.invitation;
        ratio(k.density(x, z), k.gamma() * k.envelope_density(z))
    }

    pub fn sample_affinity_site(&self, rng: &mut Stream) -> Position {
        self.site.sample(rng)
    }

    /// `aff(x_i, y) k_af(y) / (A_f gamma2 k~_af(y))`.
    pub fn affinity_accept_prob(&self, x_i: &Position, y: &Position) -> Result<f64> {
        let aff = self.affinity.value(x_i, y);
        if aff == 0.0 {
            return Ok(0.0);
        }
        ratio(
            aff * self.site.density(y),
            self.affinity.amplitude * self.site.gamma() * self.site.envelope_density(y),
        )
    }

    /// Per-vertex affinity recruitment rate under the uniform placement kernel.
    pub fn affinity_integral(&self) -> f64 {
        self.affinity.integral()
    }
}

fn ratio(num: f64, den: f64) -> Result<f64> {
    if num == 0.0 {
        return Ok(0.0);
    }
    let r = num / den;
    // tolerate last-bit rounding in density evaluations
    if r.is_nan() || r > 1.0 + 1e-12 {
        return Err(Error::EnvelopeViolation { ratio: r });
    }
    Ok(r.min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(Geometry::default(), Params::reference()).unwrap()
    }

    /// Radial-quadrature oracle for `2 pi int_0^a (1 - r/a) r dr`, midpoint
    /// rule on a fine grid. Independent of the closed form in `unit_mass`.
    fn radial_oracle(a: f64) -> f64 {
        let n = 200_000;
        let h = a / n as f64;
        (0..n)
            .map(|i| {
                let r = (i as f64 + 0.5) * h;
                2.0 * PI * (1.0 - r / a) * r * h
            })
            .sum()
    }

    #[test]
    fn local_affinity_examples() {
        let m = model();
        let x = Position::xy(0.3, 0.3);
        assert_eq!(m.local_affinity(&x, &x), 0.0);
        let y = Position::xy(0.35, 0.3);
        assert!((m.local_affinity(&x, &y) - 0.5).abs() < 1e-12);
        assert_eq!(m.local_affinity(&x, &Position::xy(0.4, 0.3)), 0.0);
        assert_eq!(m.local_affinity(&x, &Position::xy(0.6, 0.6)), 0.0);
    }

    #[test]
    fn affinity_integral_matches_radial_oracle() {
        let oracle = radial_oracle(0.1);
        assert!((oracle - PI / 300.0).abs() < 1e-9);
        let m = model();
        assert!((m.affinity_integral() - oracle).abs() < 1e-9);
        assert!((m.affinity_integral() - 0.0104720).abs() < 1e-7);

        let zero = Model::new(
            Geometry::default(),
            Params {
                affinity_amplitude: 0.0,
                ..Params::reference()
            },
        )
        .unwrap();
        assert_eq!(zero.affinity_integral(), 0.0);

        let double = Model::new(
            Geometry::default(),
            Params {
                affinity_amplitude: 2.0,
                ..Params::reference()
            },
        )
        .unwrap();
        assert!((double.affinity_integral() - 2.0 * oracle).abs() < 1e-9);
        assert!((double.affinity_integral() - 0.0209440).abs() < 1e-7);
    }

    #[test]
    fn unit_mass_other_dimensions() {
        // d = 1: int_{-a}^{a} (1 - |z|/a) dz = a
        let g1 = Geometry::new(1, 1.0).unwrap();
        let t = TriangularAffinity {
            amplitude: 1.0,
            radius: 0.2,
            geometry: g1,
        };
        assert!((t.unit_mass() - 0.2).abs() < 1e-15);
        // d = 3: 4 pi int_0^a (1 - r/a) r^2 dr = pi a^3 / 3
        let g3 = Geometry::new(3, 1.0).unwrap();
        let t = TriangularAffinity {
            amplitude: 1.0,
            radius: 0.2,
            geometry: g3,
        };
        assert!((t.unit_mass() - PI * 0.008 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn invitation_offset_statistics() {
        let m = model();
        let mut rng = Stream::new(11, 0);
        let n = 100_000;
        let (mut s1, mut s2) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n {
            let z = m.sample_invitation_offset(&mut rng);
            for k in 0..2 {
                s1[k] += z[k];
                s2[k] += z[k] * z[k];
            }
        }
        let sigma = 0.01;
        for k in 0..2 {
            let mean = s1[k] / n as f64;
            let sd = (s2[k] / n as f64 - mean * mean).sqrt();
            assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt());
            assert!((sd / sigma - 1.0).abs() < 0.05);
        }
        let mut a = Stream::new(5, 2);
        let mut b = Stream::new(5, 2);
        assert_eq!(m.sample_invitation_offset(&mut a), m.sample_invitation_offset(&mut b));
    }

    #[derive(Debug)]
    struct Scaled {
        base: GaussianDispersal,
        hole: bool,
    }

    impl DispersalKernel for Scaled {
        fn sample_offset(&self, rng: &mut Stream, out: &mut [f64]) {
            self.base.sample_offset(rng, out)
        }
        fn density(&self, x: &Position, z: &[f64]) -> f64 {
            if self.hole {
                1.0
            } else {
                self.base.density(x, z)
            }
        }
        fn envelope_density(&self, z: &[f64]) -> f64 {
            if self.hole {
                0.0
            } else {
                self.base.envelope_density(z)
            }
        }
        fn gamma(&self) -> f64 {
            self.base.gamma1
        }
    }

    #[test]
    fn invitation_acceptance() {
        let m = model();
        let x = Position::xy(0.5, 0.5);
        for z in [[0.0, 0.0], [0.01, -0.02], [0.05, 0.0]] {
            assert_eq!(m.invitation_accept_prob(&x, &z).unwrap(), 1.0);
        }
        let base = GaussianDispersal {
            sigma: 0.01,
            d: 2,
            gamma1: 2.0,
        };
        let halved = model().with_invitation(Arc::new(Scaled {
            base: base.clone(),
            hole: false,
        }));
        assert!((halved.invitation_accept_prob(&x, &[0.003, 0.0]).unwrap() - 0.5).abs() < 1e-12);
        let broken = model().with_invitation(Arc::new(Scaled { base, hole: true }));
        assert!(matches!(
            broken.invitation_accept_prob(&x, &[0.0, 0.0]),
            Err(Error::EnvelopeViolation { .. })
        ));
    }

    #[test]
    fn affinity_acceptance() {
        let m = model();
        let x = Position::xy(0.1, 0.1);
        let half = Position::xy(0.15, 0.1);
        assert!((m.affinity_accept_prob(&x, &half).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(m.affinity_accept_prob(&x, &Position::xy(0.2, 0.1)).unwrap(), 0.0);
        assert_eq!(m.affinity_accept_prob(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn affinity_site_uniformity() {
        let m = model();
        let mut rng = Stream::new(21, 0);
        let mut counts = [0u32; 100];
        for _ in 0..100_000 {
            let y = m.sample_affinity_site(&mut rng);
            assert!(y.coords().iter().all(|c| (0.0..1.0).contains(c)));
            let cell = (y.coord(0) * 10.0) as usize * 10 + (y.coord(1) * 10.0) as usize;
            counts[cell] += 1;
        }
        let sd = (100_000.0 * 0.01 * 0.99f64).sqrt();
        for c in counts {
            assert!((c as f64 - 1000.0).abs() < 5.0 * sd, "{c}");
        }
        let mut a = Stream::new(4, 0);
        let mut b = Stream::new(4, 0);
        assert_eq!(m.sample_affinity_site(&mut a), m.sample_affinity_site(&mut b));
    }

    #[test]
    fn affinity_bounded_and_symmetric() {
        let m = model();
        let mut rng = Stream::new(8, 0);
        for _ in 0..1_000_000 {
            let x = m.sample_affinity_site(&mut rng);
            let y = m.sample_affinity_site(&mut rng);
            let v = m.local_affinity(&x, &y);
            assert!((0.0..=1.0).contains(&v));
            assert_eq!(v, m.local_affinity(&y, &x));
        }
    }

    /// Thinned sampler around one vertex: the accepted radius has density
    /// proportional to `(1 - r/a) r` on `[0, a]`, CDF `3u^2 - 2u^3`.
    #[test]
    fn rejection_sampler_radial_chi_square() {
        let m = model();
        let a = 0.1;
        let x = Position::xy(0.97, 0.02);
        let mut rng = Stream::new(99, 0);
        let bins = 20;
        let mut counts = vec![0u64; bins];
        let mut accepted = 0;
        while accepted < 100_000 {
            let y = m.sample_affinity_site(&mut rng);
            let p = m.affinity_accept_prob(&x, &y).unwrap();
            if rng.uniform() < p {
                let u = m.geometry.distance(&x, &y) / a;
                counts[((u * bins as f64) as usize).min(bins - 1)] += 1;
                accepted += 1;
            }
        }
        let cdf = |u: f64| 3.0 * u * u - 2.0 * u * u * u;
        let chi2: f64 = (0..bins)
            .map(|b| {
                let lo = b as f64 / bins as f64;
                let hi = (b + 1) as f64 / bins as f64;
                let expected = accepted as f64 * (cdf(hi) - cdf(lo));
                (counts[b] as f64 - expected).powi(2) / expected
            })
            .sum();
        // chi-square upper 0.1% point with 19 degrees of freedom
        assert!(chi2 < 43.82, "chi2 = {chi2}");
    }

    #[test]
    fn affinity_integral_lattice_cross_check() {
        // 3163^2 ~ 1e7 midpoint-lattice evaluations of aff(x, U)
        let m = model();
        let x = Position::xy(0.123_456, 0.654_321);
        let n = 3163usize;
        let h = 1.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            let u0 = (i as f64 + 0.5) * h;
            let mut row = 0.0;
            for j in 0..n {
                row += m.local_affinity(&x, &Position::xy(u0, (j as f64 + 0.5) * h));
            }
            total += row;
        }
        let lattice = total * h * h;
        let rel = (lattice / m.affinity_integral() - 1.0).abs();
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn affinity_integral_monte_carlo_cross_check() {
        let m = model();
        let x = Position::xy(0.5, 0.5);
        let mut rng = Stream::new(2024, 0);
        let n = 10_000_000u64;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let v = m.local_affinity(&x, &m.sample_affinity_site(&mut rng));
            s1 += v;
            s2 += v * v;
        }
        let mean = s1 / n as f64;
        let stderr = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - m.affinity_integral()).abs() < 4.0 * stderr);
    }

    #[test]
    fn kernels_config_round_trip_and_consistency() {
        let p = Params::reference();
        let k = KernelsConfig::from_params(&p);
        let json = serde_json::to_string(&k).unwrap();
        assert!(json.contains(r#""type":"gaussian""#) && json.contains(r#""A_f":1.0"#));
        let back: KernelsConfig = serde_json::from_str(&json).unwrap();
        assert!(back.check_consistent(&p).is_ok());
        let other = Params { sigma: 0.02, ..p };
        assert!(back.check_consistent(&other).is_err());
    }
}
