//! Deterministic density evolution on a periodic `L x L` grid:
//!
//! `∂g/∂τ = α (g ⊛ k) − β(τ) g + k^af (g ⊛ aff)`
//!
//! with `⊛` circular convolution and `k^af = 1/side²`. The linear operator is
//! diagonal in Fourier space, so each step multiplies every mode by the
//! scheme's amplification factor; positivity is checked on the physical grid
//! after every step.

use std::fmt::Write as _;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::domain::{Geometry, Params};
use crate::error::{Error, Result};
use crate::kernels::TriangularAffinity;
use crate::parallel::{for_each_chunk_mut, Execution};

/// Sub-samples per axis for cell averages of the affinity kernel.
const AFFINITY_SUBSAMPLES: usize = 8;
/// Minimum number of cells across the wider kernel support.
const MIN_CELLS_ACROSS_KERNEL: f64 = 3.0;
const STABILITY_LIMIT: f64 = 0.5;
const CLAMP_TOLERANCE: f64 = 1e-12;

/// Cell densities, `values[ix * l + iy]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub l: usize,
    pub side: f64,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(l: usize, side: f64, values: Vec<f64>) -> Result<Self> {
        if l == 0 || values.len() != l * l {
            return Err(Error::ShapeMismatch(format!(
                "grid of {} values is not {l} x {l}",
                values.len()
            )));
        }
        if let Some((cell, &value)) = values.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::NegativeDensity { cell, value });
        }
        Ok(DensityGrid { l, side, values })
    }

    /// Constant density carrying total mass `mass`.
    pub fn uniform(l: usize, side: f64, mass: f64) -> Self {
        DensityGrid {
            l,
            side,
            values: vec![mass / (side * side); l * l],
        }
    }

    pub fn zeros(l: usize, side: f64) -> Self {
        Self::uniform(l, side, 0.0)
    }

    pub fn cell_side(&self) -> f64 {
        self.side / self.l as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_side().powi(2)
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[ix * self.l + iy]
    }

    /// Cell centre of `(ix, iy)`.
    pub fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let h = self.cell_side();
        ((ix as f64 + 0.5) * h, (iy as f64 + 0.5) * h)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Circular shift by whole cells.
    pub fn shifted(&self, dx: usize, dy: usize) -> Self {
        let l = self.l;
        let mut values = vec![0.0; l * l];
        for ix in 0..l {
            for iy in 0..l {
                values[((ix + dx) % l) * l + (iy + dy) % l] = self.values[ix * l + iy];
            }
        }
        DensityGrid { values, ..*self }
    }

    /// `L` rows of `L` values, row index `ix`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.l) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// `{L, side, time}`.
    pub fn sidecar(&self, time: f64) -> serde_json::Value {
        serde_json::json!({ "L": self.l, "side": self.side, "time": time })
    }
}

/// `Σ values · cell_volume`.
pub fn total_mass(g: &DensityGrid) -> f64 {
    g.values.iter().sum::<f64>() * g.cell_volume()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    #[default]
    Rk4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(rename = "L", default = "default_l")]
    pub l: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(rename = "T")]
    pub t_end: f64,
    /// Grid outputs besides `0` and `T`.
    #[serde(default)]
    pub output_times: Vec<f64>,
    /// `β(τ) = β0 + beta_slope · τ`.
    #[serde(default)]
    pub beta_slope: f64,
}

fn default_l() -> usize {
    128
}

fn default_dt() -> f64 {
    0.01
}

impl SolverConfig {
    pub fn new(l: usize, dt: f64, scheme: Scheme, t_end: f64) -> Self {
        SolverConfig {
            l,
            dt,
            scheme,
            t_end,
            output_times: Vec::new(),
            beta_slope: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.l < 1 {
            bad.push("L must be >= 1".to_string());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            bad.push(format!("dt must be finite and > 0, got {}", self.dt));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            bad.push(format!("T must be finite and >= 0, got {}", self.t_end));
        }
        if !(self.beta_slope.is_finite() && self.beta_slope >= 0.0) {
            bad.push("beta_slope must be finite and >= 0".to_string());
        }
        for t in &self.output_times {
            if !(t.is_finite() && *t >= 0.0 && *t <= self.t_end) {
                bad.push(format!("output time {t} outside [0, T]"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }

    /// Sorted output times including `0` and `T`.
    pub fn schedule(&self) -> Vec<f64> {
        let mut v = self.output_times.clone();
        v.push(0.0);
        v.push(self.t_end);
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }
}

/// Periodic stencils indexed like [`DensityGrid`], offset `(a, b)` at
/// `values[a * l + b]`.
#[derive(Debug, Clone)]
pub struct Stencils {
    pub l: usize,
    pub side: f64,
    pub dispersal: Vec<f64>,
    pub affinity: Vec<f64>,
}

impl Stencils {
    fn cell_volume(&self) -> f64 {
        (self.side / self.l as f64).powi(2)
    }

    /// `Σ dispersal · cell_volume`.
    pub fn dispersal_mass(&self) -> f64 {
        self.dispersal.iter().sum::<f64>() * self.cell_volume()
    }

    /// `Σ affinity · cell_volume`, the discrete `∫ aff`.
    pub fn affinity_total(&self) -> f64 {
        self.affinity.iter().sum::<f64>() * self.cell_volume()
    }

    /// Per-particle affinity rate `k^af ∫ aff`.
    pub fn affinity_rate(&self) -> f64 {
        self.affinity_total() / (self.side * self.side)
    }
}

/// Wrapped offset of stencil index `a` in `(-side/2, side/2]`.
fn offset(a: usize, l: usize, h: f64) -> f64 {
    if 2 * a <= l {
        a as f64 * h
    } else {
        (a as f64 - l as f64) * h
    }
}

/// Cell averages of the wrapped 1-D Gaussian.
fn gaussian_cell_averages(sigma: f64, l: usize, side: f64) -> Vec<f64> {
    let h = side / l as f64;
    let images = (8.0 * sigma / side).ceil() as i64 + 1;
    let s = sigma * std::f64::consts::SQRT_2;
    (0..l)
        .map(|a| {
            let o = offset(a, l, h);
            let mut acc = 0.0;
            for m in -images..=images {
                let c = o + m as f64 * side;
                let lo = (c - 0.5 * h) / s;
                let hi = (c + 0.5 * h) / s;
                acc += if lo >= 0.0 {
                    0.5 * (libm::erfc(lo) - libm::erfc(hi))
                } else if hi <= 0.0 {
                    0.5 * (libm::erfc(-hi) - libm::erfc(-lo))
                } else {
                    0.5 * (libm::erf(hi) - libm::erf(lo))
                };
            }
            acc / h
        })
        .collect()
}

/// Dispersal and affinity stencils on an `l x l` grid.
pub fn discretize_kernels(geometry: &Geometry, params: &Params, l: usize) -> Result<Stencils> {
    if geometry.d != 2 {
        return Err(Error::InvalidConfig(format!(
            "mean-field grid supports d = 2 only, got d = {}",
            geometry.d
        )));
    }
    let side = geometry.side;
    let widest = params.sigma.max(params.affinity_radius);
    if (l as f64) * widest / side < MIN_CELLS_ACROSS_KERNEL {
        return Err(Error::UnderResolvedKernel(format!(
            "L = {l} gives {:.3} cells across a kernel of width {widest}; need >= {MIN_CELLS_ACROSS_KERNEL}",
            l as f64 * widest / side
        )));
    }
    let h = side / l as f64;
    let cell_volume = h * h;

    let g1 = gaussian_cell_averages(params.sigma, l, side);
    let mut dispersal = vec![0.0; l * l];
    for a in 0..l {
        for b in 0..l {
            dispersal[a * l + b] = g1[a] * g1[b];
        }
    }
    let norm: f64 = dispersal.iter().sum::<f64>() * cell_volume;
    dispersal.iter_mut().for_each(|v| *v /= norm);

    let aff = TriangularAffinity {
        amplitude: params.affinity_amplitude,
        radius: params.affinity_radius,
        geometry: *geometry,
    };
    let mut affinity = vec![0.0; l * l];
    let half_diag = h * std::f64::consts::FRAC_1_SQRT_2;
    let n = AFFINITY_SUBSAMPLES;
    let wrap = |v: f64| v - side * (v / side).round();
    for a in 0..l {
        let oa = offset(a, l, h);
        for b in 0..l {
            let ob = offset(b, l, h);
            if oa.hypot(ob) > params.affinity_radius + half_diag {
                continue;
            }
            let mut acc = 0.0;
            for u in 0..n {
                let x = wrap(oa + ((u as f64 + 0.5) / n as f64 - 0.5) * h);
                for v in 0..n {
                    let y = wrap(ob + ((v as f64 + 0.5) / n as f64 - 0.5) * h);
                    acc += aff.profile(x.hypot(y));
                }
            }
            affinity[a * l + b] = acc / (n * n) as f64;
        }
    }
    Ok(Stencils {
        l,
        side,
        dispersal,
        affinity,
    })
}

/// Direct circular convolution `(g ⊛ s)[c] = Σ_c' g[c'] s[c − c'] · cell_volume`.
pub fn convolve_direct(g: &[f64], stencil: &[f64], l: usize, cell_volume: f64) -> Vec<f64> {
    let mut out = vec![0.0; l * l];
    for a in 0..l {
        for b in 0..l {
            let s = stencil[a * l + b];
            if s == 0.0 {
                continue;
            }
            for px in 0..l {
                let row = ((px + a) % l) * l;
                for py in 0..l {
                    out[row + (py + b) % l] += g[px * l + py] * s;
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= cell_volume);
    out
}

/// 2-D FFT over `l x l` row-major buffers.
#[derive(Clone)]
struct Fft2 {
    l: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    exec: Execution,
}

impl Fft2 {
    fn new(l: usize, exec: Execution) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            l,
            forward: planner.plan_fft_forward(l),
            inverse: planner.plan_fft_inverse(l),
            exec,
        }
    }

    fn rows(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let l = self.l;
        for_each_chunk_mut(data, l, self.exec, |_, row| {
            let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
            plan.process_with_scratch(row, &mut scratch);
        });
    }

    fn transpose(&self, data: &mut [Complex64]) {
        let l = self.l;
        for i in 0..l {
            for j in i + 1..l {
                data.swap(i * l + j, j * l + i);
            }
        }
    }

    fn apply(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        self.rows(data, plan);
        self.transpose(data);
        self.rows(data, plan);
        self.transpose(data);
    }

    fn forward_real(&self, values: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let plan = self.forward.clone();
        self.apply(&mut data, &plan);
        data
    }

    fn inverse_real(&self, spectrum: &[Complex64]) -> Vec<f64> {
        let mut data = spectrum.to_vec();
        let plan = self.inverse.clone();
        self.apply(&mut data, &plan);
        let scale = 1.0 / (self.l * self.l) as f64;
        data.iter().map(|c| c.re * scale).collect()
    }
}

/// Grids at the output times and the mass after every step.
#[derive(Debug, Clone)]
pub struct Solution {
    pub grids: Vec<(f64, DensityGrid)>,
    pub mass: Vec<(f64, f64)>,
}

impl Solution {
    pub fn mass_csv(&self) -> String {
        let mut s = String::from("time,mass\n");
        for (t, m) in &self.mass {
            writeln!(s, "{t},{m:e}").expect("writing to a String cannot fail");
        }
        s
    }

    pub fn final_grid(&self) -> &DensityGrid {
        &self.grids.last().expect("solution has an initial grid").1
    }
}

/// Discretized operator for fixed geometry, parameters and resolution.
#[derive(Clone)]
pub struct MeanField {
    pub params: Params,
    pub geometry: Geometry,
    pub stencils: Stencils,
    beta_slope: f64,
    fft: Fft2,
    /// `α·ĝ_disp + k^af·ĝ_aff`, both scaled by the cell volume.
    gain: Vec<Complex64>,
}

impl MeanField {
    pub fn new(geometry: Geometry, params: Params, l: usize) -> Result<Self> {
        Self::with_execution(geometry, params, l, Execution::default())
    }

    pub fn with_execution(geometry: Geometry, params: Params, l: usize, exec: Execution) -> Result<Self> {
        let stencils = discretize_kernels(&geometry, &params, l)?;
        let fft = Fft2::new(l, exec);
        let cell_volume = stencils.cell_volume();
        let kd = fft.forward_real(&stencils.dispersal);
        let ka = fft.forward_real(&stencils.affinity);
        let k_af = 1.0 / (geometry.side * geometry.side);
        let gain = kd
            .iter()
            .zip(&ka)
            .map(|(d, a)| (d * params.alpha + a * k_af) * cell_volume)
            .collect();
        Ok(MeanField {
            params,
            geometry,
            stencils,
            beta_slope: 0.0,
            fft,
            gain,
        })
    }

    pub fn with_beta_slope(mut self, slope: f64) -> Self {
        self.beta_slope = slope;
        self
    }

    pub fn l(&self) -> usize {
        self.stencils.l
    }

    pub fn beta_at(&self, t: f64) -> f64 {
        self.params.beta0 + self.beta_slope * t
    }

    /// `dt·(α·γ̂ + β + Â) ≤ 0.5` with `β` at its largest over `[0, t_end]`.
    pub fn check_stability(&self, dt: f64, t_end: f64) -> Result<()> {
        let gamma_hat: f64 = self.stencils.dispersal.iter().map(|v| v.abs()).sum::<f64>() * self.stencils.cell_volume();
        let norm =
            self.params.alpha * gamma_hat + self.beta_at(t_end).max(self.beta_at(0.0)) + self.stencils.affinity_rate();
        if dt * norm > STABILITY_LIMIT {
            return Err(Error::Stability(format!(
                "dt * operator norm = {:.4} exceeds {STABILITY_LIMIT}",
                dt * norm
            )));
        }
        Ok(())
    }

    fn check_shape(&self, g: &DensityGrid) -> Result<()> {
        if g.l != self.l() || g.side != self.geometry.side {
            return Err(Error::ShapeMismatch(format!(
                "grid is {0} x {0} on side {1}, operator is {2} x {2} on side {3}",
                g.l,
                g.side,
                self.l(),
                self.geometry.side
            )));
        }
        Ok(())
    }

    /// Rate field at time `t`, convolutions by FFT.
    pub fn rhs_at(&self, g: &DensityGrid, t: f64) -> Result<Vec<f64>> {
        self.check_shape(g)?;
        let mut spec = self.fft.forward_real(&g.values);
        spec.iter_mut().zip(&self.gain).for_each(|(s, k)| *s *= k);
        let gain = self.fft.inverse_real(&spec);
        let beta = self.beta_at(t);
        Ok(gain.iter().zip(&g.values).map(|(a, v)| a - beta * v).collect())
    }

    pub fn rhs(&self, g: &DensityGrid) -> Result<Vec<f64>> {
        self.rhs_at(g, 0.0)
    }

    /// Rate field with direct-sum convolutions.
    pub fn rhs_direct(&self, g: &DensityGrid, t: f64) -> Result<Vec<f64>> {
        self.check_shape(g)?;
        let l = self.l();
        let cv = g.cell_volume();
        let k_af = 1.0 / (g.side * g.side);
        let disp = convolve_direct(&g.values, &self.stencils.dispersal, l, cv);
        let aff = convolve_direct(&g.values, &self.stencils.affinity, l, cv);
        let beta = self.beta_at(t);
        Ok((0..l * l)
            .map(|c| self.params.alpha * disp[c] - beta * g.values[c] + k_af * aff[c])
            .collect())
    }

    fn amplify(&self, spec: &mut [Complex64], t: f64, dt: f64, scheme: Scheme) {
        let b1 = self.beta_at(t);
        let b2 = self.beta_at(t + 0.5 * dt);
        let b4 = self.beta_at(t + dt);
        let l = self.l();
        let gain = &self.gain;
        for_each_chunk_mut(spec, l, self.fft.exec, |row, chunk| {
            for (j, s) in chunk.iter_mut().enumerate() {
                let c = gain[row * l + j];
                let factor = match scheme {
                    Scheme::Euler => 1.0 + dt * (c - b1),
                    Scheme::Rk4 => {
                        let a1 = c - b1;
                        let a2 = (c - b2) * (1.0 + 0.5 * dt * a1);
                        let a3 = (c - b2) * (1.0 + 0.5 * dt * a2);
                        let a4 = (c - b4) * (1.0 + dt * a3);
                        1.0 + dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
                    }
                };
                *s *= factor;
            }
        });
    }

    /// Clamp roundoff-level negatives, reject material ones.
    fn enforce_positivity(values: &mut [f64]) -> Result<bool> {
        let max = values.iter().copied().fold(0.0, f64::max);
        let mut clamped = false;
        for (cell, v) in values.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(Error::NegativeDensity { cell, value: *v });
            }
            if *v < 0.0 {
                if -*v < CLAMP_TOLERANCE * max {
                    *v = 0.0;
                    clamped = true;
                } else {
                    return Err(Error::NegativeDensity { cell, value: *v });
                }
            }
        }
        Ok(clamped)
    }

    /// One step of size `dt` from time `t`.
    pub fn step_at(&self, g: &DensityGrid, t: f64, dt: f64, scheme: Scheme) -> Result<DensityGrid> {
        self.check_shape(g)?;
        if dt == 0.0 {
            return Ok(g.clone());
        }
        let mut spec = self.fft.forward_real(&g.values);
        self.amplify(&mut spec, t, dt, scheme);
        let mut values = self.fft.inverse_real(&spec);
        Self::enforce_positivity(&mut values)?;
        Ok(DensityGrid { values, ..*g })
    }

    pub fn step(&self, g: &DensityGrid, dt: f64, scheme: Scheme) -> Result<DensityGrid> {
        self.step_at(g, 0.0, dt, scheme)
    }

    /// `M(0)·exp((α·γ̂ + Â)τ − ∫β)`.
    pub fn mass_bound(&self, m0: f64, tau: f64) -> f64 {
        let gamma_hat = self.stencils.dispersal_mass();
        let growth = (self.params.alpha * gamma_hat + self.stencils.affinity_rate()) * tau;
        let decay = self.params.beta0 * tau + 0.5 * self.beta_slope * tau * tau;
        m0 * (growth - decay).exp()
    }

    /// March `g0` to every output time of `config`. The mass is checked
    /// against [`MeanField::mass_bound`] after every step, allowing the RK4
    /// truncation remainder.
    pub fn solve(&self, g0: &DensityGrid, config: &SolverConfig) -> Result<Solution> {
        config.validate()?;
        self.check_shape(g0)?;
        self.check_stability(config.dt, config.t_end)?;
        let m0 = total_mass(g0);
        let cv = g0.cell_volume();
        let mut spec = self.fft.forward_real(&g0.values);
        let mut current = g0.clone();
        let mut t = 0.0;
        let mut grids = Vec::new();
        let mut mass = vec![(0.0, m0)];
        let mut slack = 1e-9;
        for target in config.schedule() {
            let remaining = target - t;
            if remaining > 0.0 {
                let n = (remaining / config.dt - 1e-9).ceil().max(1.0) as usize;
                let h = remaining / n as f64;
                for i in 0..n {
                    let t0 = t + i as f64 * h;
                    self.amplify(&mut spec, t0, h, config.scheme);
                    let mut values = self.fft.inverse_real(&spec);
                    if Self::enforce_positivity(&mut values)? {
                        spec = self.fft.forward_real(&values);
                    }
                    current.values = values;
                    let tn = if i + 1 == n { target } else { t0 + h };
                    let m = current.values.iter().sum::<f64>() * cv;
                    if config.scheme == Scheme::Rk4 {
                        let z = h * (self.params.alpha + self.stencils.affinity_rate() - self.beta_at(t0));
                        slack += z.abs().powi(5) / 60.0;
                    }
                    let bound = self.mass_bound(m0, tn);
                    if m > bound * (1.0 + slack) + 1e-300 {
                        return Err(Error::Stability(format!(
                            "mass {m} exceeds the Gronwall bound {bound} at time {tn}"
                        )));
                    }
                    mass.push((tn, m));
                }
                t = target;
            }
            grids.push((target, current.clone()));
        }
        Ok(Solution { grids, mass })
    }
}

/// Build the operator for `config` and solve from `g0`.
pub fn solve(g0: &DensityGrid, config: &SolverConfig, geometry: &Geometry, params: &Params) -> Result<Solution> {
    config.validate()?;
    MeanField::new(*geometry, *params, config.l)?
        .with_beta_slope(config.beta_slope)
        .solve(g0, config)
}
