//! Observables of a configuration or a density grid: pairings with test
//! functions, spatial histograms, generator and quadratic-variation
//! integrands, and Monte Carlo drift estimates.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{Geometry, Position, MAX_DIM};
use crate::error::{Error, Result};
use crate::kernels::Model;
use crate::meanfield::DensityGrid;
use crate::parallel::{map_indexed, Execution};
use crate::quadrature::{breakpoints, GaussLegendre};
use crate::rng::Stream;
use crate::simulator::Simulator;
use crate::state::SystemState;

const DISPERSAL_NODES: usize = 33;
const AFFINITY_NODES: usize = 65;
/// Half-width of the dispersal integration box, in units of sigma.
const DISPERSAL_RANGE: f64 = 8.0;
/// Panel width inside the dispersal box, in units of sigma.
const DISPERSAL_PANEL: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    ConstantOne,
    /// The wrapped coordinate `x_axis` in `[0, side)`.
    Coordinate {
        axis: usize,
    },
    /// Indicator of a set of `(ix, iy)` cells of an `L x L` partition.
    Indicator {
        #[serde(rename = "L")]
        l: usize,
        cells: Vec<[usize; 2]>,
    },
    /// `cos(2 pi m . x / side)`.
    Cosine {
        mode: Vec<i64>,
    },
}

impl TestFunction {
    pub fn validate(&self, geometry: &Geometry) -> Result<()> {
        match self {
            TestFunction::ConstantOne => Ok(()),
            TestFunction::Coordinate { axis } if *axis < geometry.d => Ok(()),
            TestFunction::Coordinate { axis } => Err(Error::InvalidConfig(format!(
                "coordinate axis {axis} out of range for d = {}",
                geometry.d
            ))),
            TestFunction::Indicator { l, cells } => {
                if geometry.d != 2 {
                    return Err(Error::InvalidConfig("indicator test functions need d = 2".into()));
                }
                if *l == 0 || cells.iter().any(|c| c[0] >= *l || c[1] >= *l) {
                    return Err(Error::InvalidConfig(format!(
                        "indicator cells outside a {l} x {l} grid"
                    )));
                }
                Ok(())
            }
            TestFunction::Cosine { mode } if mode.len() == geometry.d => Ok(()),
            TestFunction::Cosine { mode } => Err(Error::DimensionMismatch {
                expected: geometry.d,
                got: mode.len(),
            }),
        }
    }

    /// Short label for file names and tables.
    pub fn label(&self) -> String {
        match self {
            TestFunction::ConstantOne => "one".into(),
            TestFunction::Coordinate { axis } => format!("coord{axis}"),
            TestFunction::Indicator { l, cells } => format!("ind{l}x{}", cells.len()),
            TestFunction::Cosine { mode } => {
                let m: Vec<String> = mode.iter().map(i64::to_string).collect();
                format!("cos{}", m.join("_"))
            }
        }
    }

    pub fn eval(&self, p: &Position, geometry: &Geometry) -> f64 {
        match self {
            TestFunction::ConstantOne => 1.0,
            TestFunction::Coordinate { axis } => p.coord(*axis),
            TestFunction::Indicator { l, cells } => {
                let cell = |v: f64| ((v / geometry.side * *l as f64) as usize).min(l - 1);
                let (ix, iy) = (cell(p.coord(0)), cell(p.coord(1)));
                if cells.iter().any(|c| c[0] == ix && c[1] == iy) {
                    1.0
                } else {
                    0.0
                }
            }
            TestFunction::Cosine { mode } => (self.phase(p.coords(), geometry, mode)).cos(),
        }
    }

    fn phase(&self, x: &[f64], geometry: &Geometry, mode: &[i64]) -> f64 {
        2.0 * PI / geometry.side * x.iter().zip(mode).map(|(v, m)| v * *m as f64).sum::<f64>()
    }

    /// `sup |f|` over the torus.
    pub fn sup_norm(&self, geometry: &Geometry) -> f64 {
        match self {
            TestFunction::Coordinate { .. } => geometry.side,
            TestFunction::Indicator { cells, .. } if cells.is_empty() => 0.0,
            _ => 1.0,
        }
    }

    /// Coordinates in `[0, side)` where `f` jumps across `axis`.
    fn jump_lines(&self, axis: usize, geometry: &Geometry) -> Vec<f64> {
        match self {
            TestFunction::Coordinate { axis: a } if *a == axis => vec![0.0],
            TestFunction::Indicator { l, cells } => {
                let h = geometry.side / *l as f64;
                let mut v: Vec<f64> = cells
                    .iter()
                    .flat_map(|c| [c[axis] as f64 * h, ((c[axis] + 1) % l) as f64 * h])
                    .collect();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            }
            _ => Vec::new(),
        }
    }
}

fn wrap_coords(raw: &[f64], side: f64) -> Position {
    let mut c = [0.0; MAX_DIM];
    for (o, v) in c.iter_mut().zip(raw) {
        let w = v.rem_euclid(side);
        *o = if w >= side { 0.0 } else { w };
    }
    Position::from_wrapped(&c[..raw.len()])
}

/// Jump lines across `axis`, with periodic images, inside `(lo, hi)`.
fn lines_in(f: &TestFunction, axis: usize, geometry: &Geometry, lo: f64, hi: f64) -> Vec<f64> {
    let side = geometry.side;
    let base = f.jump_lines(axis, geometry);
    let first = (lo / side).floor() as i64 - 1;
    let last = (hi / side).ceil() as i64 + 1;
    let mut out = Vec::new();
    for m in first..=last {
        for c in &base {
            let v = c + m as f64 * side;
            if v > lo && v < hi {
                out.push(v);
            }
        }
    }
    out
}

/// `⟨μ, f⟩` for a point configuration.
pub fn pair(state: &SystemState, f: &TestFunction) -> f64 {
    let g = state.geometry();
    state.positions().map(|p| f.eval(p, g)).sum()
}

/// `Σ f(cell centre) · value · cell_volume`.
pub fn pair_grid(grid: &DensityGrid, f: &TestFunction) -> f64 {
    let geometry = Geometry { d: 2, side: grid.side };
    let mut acc = 0.0;
    for ix in 0..grid.l {
        for iy in 0..grid.l {
            let (x, y) = grid.center(ix, iy);
            acc += f.eval(&Position::xy(x, y), &geometry) * grid.get(ix, iy);
        }
    }
    acc * grid.cell_volume()
}

/// Per-cell totals over an `L^d` partition, row-major in the axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub l: usize,
    pub values: Vec<f64>,
}

impl Histogram {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Rows of `L` values.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.l) {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

fn histogram_with_weight(state: &SystemState, l: usize, weight: f64) -> Result<Histogram> {
    if l == 0 {
        return Err(Error::InvalidConfig("L_obs must be >= 1".into()));
    }
    let g = state.geometry();
    let mut values = vec![0.0; l.pow(g.d as u32)];
    for p in state.positions() {
        let mut idx = 0;
        for a in 0..g.d {
            let c = ((p.coord(a) / g.side * l as f64) as usize).min(l - 1);
            idx = idx * l + c;
        }
        values[idx] += weight;
    }
    Ok(Histogram { l, values })
}

/// Particle counts per cell.
pub fn spatial_histogram(state: &SystemState, l: usize) -> Result<Histogram> {
    histogram_with_weight(state, l, 1.0)
}

/// Configuration seen with weight `1/n`.
#[derive(Debug, Clone, Copy)]
pub struct Rescaled<'a> {
    pub state: &'a SystemState,
    pub n: usize,
}

pub fn rescale(state: &SystemState, n: usize) -> Result<Rescaled<'_>> {
    if n == 0 {
        return Err(Error::InvalidConfig("rescaling size n must be >= 1".into()));
    }
    Ok(Rescaled { state, n })
}

impl Rescaled<'_> {
    pub fn pair(&self, f: &TestFunction) -> f64 {
        pair(self.state, f) / self.n as f64
    }

    pub fn histogram(&self, l: usize) -> Result<Histogram> {
        histogram_with_weight(self.state, l, 1.0 / self.n as f64)
    }
}

/// Overlap lengths of `fine` equal cells with `coarse` equal cells of `[0, side)`.
fn overlaps(fine: usize, coarse: usize, side: f64) -> Vec<Vec<(usize, f64)>> {
    let hf = side / fine as f64;
    let hc = side / coarse as f64;
    (0..fine)
        .map(|i| {
            let (a, b) = (i as f64 * hf, (i + 1) as f64 * hf);
            let first = ((a / hc) as usize).min(coarse - 1);
            let last = (((b / hc).ceil() as usize).max(first + 1)).min(coarse);
            (first..last)
                .filter_map(|j| {
                    let len = b.min((j + 1) as f64 * hc) - a.max(j as f64 * hc);
                    (len > 0.0).then_some((j, len))
                })
                .collect()
        })
        .collect()
}

/// Mass of a density grid in each cell of an `l_obs x l_obs` partition.
pub fn grid_histogram(grid: &DensityGrid, l_obs: usize) -> Result<Histogram> {
    if l_obs == 0 {
        return Err(Error::InvalidConfig("L_obs must be >= 1".into()));
    }
    let o = overlaps(grid.l, l_obs, grid.side);
    let mut values = vec![0.0; l_obs * l_obs];
    for ix in 0..grid.l {
        for iy in 0..grid.l {
            let v = grid.get(ix, iy);
            for &(jx, lx) in &o[ix] {
                for &(jy, ly) in &o[iy] {
                    values[jx * l_obs + jy] += v * lx * ly;
                }
            }
        }
    }
    Ok(Histogram { l: l_obs, values })
}

/// `Σ |a − b|` over cells.
pub fn l1_hist_distance(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.l != b.l || a.values.len() != b.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "histograms with L = {} and L = {}",
            a.l, b.l
        )));
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum())
}

/// Coefficient of variation (population std / mean) of the cell values.
pub fn cluster_cv(hist: &Histogram) -> Result<f64> {
    let n = hist.values.len() as f64;
    let total = hist.total();
    if total == 0.0 {
        return Err(Error::EmptySystem);
    }
    let mean = total / n;
    let var = hist.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// `time,value` lines.
pub fn series_csv(series: &[(f64, f64)]) -> String {
    let mut s = String::from("time,value\n");
    for (t, v) in series {
        writeln!(s, "{t},{v}").expect("writing to a String cannot fail");
    }
    s
}

/// Quadrature of the kernel actions on one test function (or its square).
#[derive(Debug, Clone)]
pub struct KernelActions<'a> {
    model: &'a Model,
    f: &'a TestFunction,
    squared: bool,
    dispersal_rule: GaussLegendre,
    affinity_rule: GaussLegendre,
}

impl<'a> KernelActions<'a> {
    pub fn new(model: &'a Model, f: &'a TestFunction, squared: bool) -> Self {
        KernelActions {
            model,
            f,
            squared,
            dispersal_rule: GaussLegendre::new(DISPERSAL_NODES),
            affinity_rule: GaussLegendre::new(AFFINITY_NODES),
        }
    }

    fn value(&self, p: &Position) -> f64 {
        let v = self.f.eval(p, &self.model.geometry);
        if self.squared {
            v * v
        } else {
            v
        }
    }

    fn value_raw(&self, y: &[f64]) -> f64 {
        self.value(&wrap_coords(y, self.model.geometry.side))
    }

    /// `∫ g(x + z) k(z) dz` for the Gaussian dispersal, `g = f` or `f²`.
    pub fn dispersal(&self, x: &Position) -> f64 {
        let sigma = self.model.params.sigma;
        let geometry = &self.model.geometry;
        let damp = |m: &[i64], scale: f64| {
            let k2: f64 = m.iter().map(|v| (*v as f64 * scale).powi(2)).sum();
            (-2.0 * PI * PI * sigma * sigma * k2 / geometry.side.powi(2)).exp()
        };
        match (self.f, self.squared) {
            (TestFunction::ConstantOne, _) => 1.0,
            (TestFunction::Cosine { mode }, false) => self.f.eval(x, geometry) * damp(mode, 1.0),
            (TestFunction::Cosine { mode }, true) => {
                let c2 = (2.0 * self.f.phase(x.coords(), geometry, mode)).cos();
                0.5 * (1.0 + c2 * damp(mode, 2.0))
            }
            _ => self.dispersal_quadrature(x),
        }
    }

    /// Tensor Gauss–Legendre over `±8σ` per axis, split at jumps of `f`.
    pub fn dispersal_quadrature(&self, x: &Position) -> f64 {
        let sigma = self.model.params.sigma;
        let geometry = &self.model.geometry;
        let d = geometry.d;
        let norm = 1.0 / (sigma * (2.0 * PI).sqrt());
        let axes: Vec<Vec<(f64, f64)>> = (0..d)
            .map(|a| {
                let c = x.coord(a);
                let (lo, hi) = (c - DISPERSAL_RANGE * sigma, c + DISPERSAL_RANGE * sigma);
                let panels = (2.0 * DISPERSAL_RANGE / DISPERSAL_PANEL) as usize;
                let interior = (1..panels)
                    .map(|i| lo + i as f64 * DISPERSAL_PANEL * sigma)
                    .chain(lines_in(self.f, a, geometry, lo, hi));
                let br = breakpoints(lo, hi, interior);
                br.windows(2)
                    .flat_map(|w| {
                        self.dispersal_rule.mapped(w[0], w[1]).map(|(y, wt)| {
                            let z = (y - c) / sigma;
                            (y, wt * norm * (-0.5 * z * z).exp())
                        })
                    })
                    .collect()
            })
            .collect();
        let mut acc = 0.0;
        let mut y = [0.0; MAX_DIM];
        let mut idx = vec![0usize; d];
        'outer: loop {
            let mut w = 1.0;
            for a in 0..d {
                let (ya, wa) = axes[a][idx[a]];
                y[a] = ya;
                w *= wa;
            }
            acc += w * self.value_raw(&y[..d]);
            for a in (0..d).rev() {
                idx[a] += 1;
                if idx[a] < axes[a].len() {
                    continue 'outer;
                }
                idx[a] = 0;
            }
            break;
        }
        acc
    }

    /// `∫ g(y) aff(x, y) k^af(y) dy` for the uniform placement kernel.
    pub fn affinity(&self, x: &Position) -> Result<f64> {
        let aff = &self.model.affinity;
        if aff.amplitude == 0.0 {
            return Ok(0.0);
        }
        let geometry = &self.model.geometry;
        match (self.f, self.squared) {
            (TestFunction::ConstantOne, _) => Ok(self.model.affinity_integral()),
            (TestFunction::Cosine { mode }, false) if geometry.d == 2 => {
                Ok(self.f.eval(x, geometry) * self.radial_transform(mode, 1.0))
            }
            (TestFunction::Cosine { mode }, true) if geometry.d == 2 => {
                let c2 = (2.0 * self.f.phase(x.coords(), geometry, mode)).cos();
                Ok(0.5 * (self.radial_transform(mode, 0.0) + c2 * self.radial_transform(mode, 2.0)))
            }
            _ if geometry.d == 2 => Ok(self.affinity_quadrature(x)),
            _ => Err(Error::InvalidConfig(format!(
                "affinity quadrature for {} needs d = 2",
                self.f.label()
            ))),
        }
    }

    /// `k^af ∫ cos(k·u) aff(|u|) du = k^af 2π A_f ∫_0^a J0(|k| r)(1 − r/a) r dr`
    /// for wave vector `scale · 2π m / side`.
    fn radial_transform(&self, mode: &[i64], scale: f64) -> f64 {
        let aff = &self.model.affinity;
        let side = self.model.geometry.side;
        let k = scale * 2.0 * PI / side * mode.iter().map(|m| (*m as f64).powi(2)).sum::<f64>().sqrt();
        let radial = self
            .affinity_rule
            .integrate(0.0, aff.radius, |r| libm::j0(k * r) * aff.profile(r) * r);
        2.0 * PI * radial / (side * side)
    }

    /// Polar Gauss–Legendre over the `a_f` disc around `x`, split in angle
    /// at tangencies and corners of the jump lines of `f` and in radius at
    /// their crossings.
    pub fn affinity_quadrature(&self, x: &Position) -> f64 {
        let aff = &self.model.affinity;
        let geometry = &self.model.geometry;
        let a = aff.radius;
        let (cx, cy) = (x.coord(0), x.coord(1));
        let vert: Vec<f64> = lines_in(self.f, 0, geometry, cx - a, cx + a)
            .iter()
            .map(|v| v - cx)
            .collect();
        let horiz: Vec<f64> = lines_in(self.f, 1, geometry, cy - a, cy + a)
            .iter()
            .map(|v| v - cy)
            .collect();

        let tau = 2.0 * PI;
        let norm_angle = |t: f64| t.rem_euclid(tau);
        let mut angles = Vec::new();
        for &c in &vert {
            let t = (c / a).acos();
            angles.push(norm_angle(t));
            angles.push(norm_angle(-t));
        }
        for &c in &horiz {
            let t = (c / a).asin();
            angles.push(norm_angle(t));
            angles.push(norm_angle(PI - t));
        }
        for &u in &vert {
            for &v in &horiz {
                if u.hypot(v) < a {
                    angles.push(norm_angle(v.atan2(u)));
                }
            }
        }
        for &u in &vert {
            angles.push(if u > 0.0 { 0.0 } else { PI });
        }
        for &v in &horiz {
            angles.push(if v > 0.0 { 0.5 * PI } else { 1.5 * PI });
        }
        let theta_breaks = breakpoints(0.0, tau, angles);

        let rule = &self.affinity_rule;
        let mut total = 0.0;
        for w in theta_breaks.windows(2) {
            for (theta, wt) in rule.mapped(w[0], w[1]) {
                let (s, c) = theta.sin_cos();
                let crossings = vert
                    .iter()
                    .filter(|_| c != 0.0)
                    .map(|u| u / c)
                    .chain(horiz.iter().filter(|_| s != 0.0).map(|v| v / s));
                let r_breaks = breakpoints(0.0, a, crossings);
                let radial = rule.integrate_pieces(&r_breaks, |r| {
                    aff.profile(r) * r * self.value_raw(&[cx + r * c, cy + r * s])
                });
                total += wt * radial;
            }
        }
        total / geometry.volume()
    }
}

/// `α Σ ∫ f(x_i + z) k dz − β Σ f(x_i) + Σ ∫ f(y) aff(x_i, y) k^af(y) dy`.
pub fn generator_apply(state: &SystemState, f: &TestFunction, model: &Model) -> Result<f64> {
    kernel_sum(state, f, model, false, -state.beta_current)
}

/// `α Σ ∫ f²(x_i + z) k dz + β Σ f²(x_i) + Σ ∫ f²(y) aff(x_i, y) k^af(y) dy`.
pub fn qv_rate(state: &SystemState, f: &TestFunction, model: &Model) -> Result<f64> {
    kernel_sum(state, f, model, true, state.beta_current)
}

fn kernel_sum(state: &SystemState, f: &TestFunction, model: &Model, squared: bool, local_coef: f64) -> Result<f64> {
    f.validate(&model.geometry)?;
    let actions = KernelActions::new(model, f, squared);
    let alpha = model.params.alpha;
    let ps = state.particles();
    let terms = map_indexed(ps.len(), Execution::default(), |i| -> Result<f64> {
        let x = &ps[i].pos;
        let v = actions.value(x);
        let disp = if alpha == 0.0 {
            0.0
        } else {
            alpha * actions.dispersal(x)
        };
        Ok(disp + local_coef * v + actions.affinity(x)?)
    });
    let mut total = 0.0;
    for t in terms {
        total += t?;
    }
    Ok(total)
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub replicas: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            stderr: (var / n).sqrt(),
            replicas: xs.len(),
        }
    }
}

/// Mean of `(⟨N_Δt, f⟩ − ⟨N_0, f⟩)/Δt` over `replicas` independent runs from
/// the frozen `state`; replica `r` uses stream `(seed, r)`.
pub fn empirical_drift(
    state: &SystemState,
    f: &TestFunction,
    model: &Model,
    dt: f64,
    replicas: usize,
    seed: u64,
    exec: Execution,
) -> Result<Estimate> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidConfig(format!("drift interval must be > 0, got {dt}")));
    }
    if replicas == 0 {
        return Err(Error::InvalidConfig("replicas must be >= 1".into()));
    }
    f.validate(&model.geometry)?;
    let start = pair(state, f);
    let t0 = state.time;
    let samples = map_indexed(replicas, exec, |r| -> Result<f64> {
        if state.is_empty() {
            return Ok(0.0);
        }
        let mut sim = Simulator::new(model.clone(), Stream::new(seed, r as u64));
        let end = sim.run_from(state.clone(), u64::MAX, Some(t0 + dt), |_, _| {})?;
        Ok((pair(&end.final_state, f) - start) / dt)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Params;

    fn model_with(p: Params) -> Model {
        Model::new(Geometry::default(), p).unwrap()
    }

    fn reference() -> Model {
        model_with(Params::reference())
    }

    fn random_state(model: &Model, n: usize, seed: u64) -> SystemState {
        let mut rng = Stream::new(seed, 0);
        let pts: Vec<Position> = (0..n).map(|_| model.sample_affinity_site(&mut rng)).collect();
        SystemState::with_positions(model, &pts)
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn pair_examples() {
        let m = reference();
        let s = random_state(&m, 37, 1);
        assert_eq!(pair(&s, &TestFunction::ConstantOne), 37.0);
        let g = DensityGrid::uniform(32, 1.0, 2.5);
        assert!((pair_grid(&g, &TestFunction::ConstantOne) - 2.5).abs() < 1e-12);
        let c = TestFunction::Cosine { mode: vec![1, 0] };
        assert!(pair_grid(&g, &c).abs() < 1e-12);
    }

    #[test]
    fn rescale_examples() {
        let m = reference();
        let one = TestFunction::ConstantOne;
        let s500 = random_state(&m, 500, 2);
        assert_eq!(rescale(&s500, 500).unwrap().pair(&one), 1.0);
        let s750 = random_state(&m, 750, 3);
        let r = rescale(&s750, 500).unwrap();
        assert_eq!(r.pair(&one), 1.5);
        assert!((r.histogram(10).unwrap().total() - 1.5).abs() < 1e-12);
        assert!(rescale(&s750, 0).is_err());
    }

    #[test]
    fn histogram_examples() {
        let m = reference();
        let s = SystemState::with_positions(&m, &[Position::xy(0.05, 0.05)]);
        let h = spatial_histogram(&s, 10).unwrap();
        assert_eq!(h.values[0], 1.0);
        assert_eq!(h.total(), 1.0);
        let empty = SystemState::for_model(&m);
        assert!(spatial_histogram(&empty, 10).unwrap().values.iter().all(|v| *v == 0.0));

        let big = random_state(&m, 100_000, 4);
        let h = spatial_histogram(&big, 10).unwrap();
        let sd = (100_000.0f64 * 0.01 * 0.99).sqrt();
        assert!(h.values.iter().all(|v| (v - 1000.0).abs() < 5.0 * sd));
    }

    #[test]
    fn grid_histogram_conserves_mass() {
        let g = DensityGrid::uniform(128, 1.0, 1.7);
        let h = grid_histogram(&g, 20).unwrap();
        assert!((h.total() - 1.7).abs() < 1e-12);
        assert!(h.values.iter().all(|v| (v - 1.7 / 400.0).abs() < 1e-14));
        let mut spike = DensityGrid::zeros(4, 1.0);
        spike.values[5] = 16.0;
        let h = grid_histogram(&spike, 2).unwrap();
        assert_eq!(h.values, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn l1_examples() {
        let a = Histogram {
            l: 2,
            values: vec![1.0, 0.0, 0.0, 0.0],
        };
        let b = Histogram {
            l: 2,
            values: vec![0.0, 1.0, 0.0, 0.0],
        };
        assert_eq!(l1_hist_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_hist_distance(&a, &b).unwrap(), 2.0);
        let c = Histogram {
            l: 2,
            values: vec![0.5, 0.5, 0.0, 0.0],
        };
        let d = Histogram {
            l: 2,
            values: vec![0.75, 0.25, 0.0, 0.0],
        };
        assert_eq!(
            l1_hist_distance(&d, &c).unwrap(),
            0.5 * l1_hist_distance(&a, &c).unwrap()
        );
        let e = Histogram {
            l: 3,
            values: vec![0.0; 9],
        };
        assert!(matches!(l1_hist_distance(&a, &e), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn cluster_cv_examples() {
        let mut v = vec![0.0; 100];
        v[17] = 5.0;
        let cv = cluster_cv(&Histogram { l: 10, values: v }).unwrap();
        assert!((cv - 99f64.sqrt()).abs() < 1e-12);
        assert_eq!(
            cluster_cv(&Histogram {
                l: 10,
                values: vec![3.0; 100]
            })
            .unwrap(),
            0.0
        );
        assert!(cluster_cv(&Histogram {
            l: 10,
            values: vec![0.0; 100]
        })
        .is_err());

        let m = reference();
        let s = random_state(&m, 10_000, 5);
        let cv = cluster_cv(&spatial_histogram(&s, 10).unwrap()).unwrap();
        assert!((cv - 0.0995).abs() < 0.03, "{cv}");
    }

    #[test]
    fn generator_of_one() {
        let m = reference();
        let s = random_state(&m, 10, 6);
        let g = generator_apply(&s, &TestFunction::ConstantOne, &m).unwrap();
        assert!((g - 10.0 * PI / 300.0).abs() < 1e-12);
        assert_eq!(
            generator_apply(&SystemState::for_model(&m), &TestFunction::ConstantOne, &m).unwrap(),
            0.0
        );
        let q = qv_rate(&s, &TestFunction::ConstantOne, &m).unwrap();
        assert!((q - (20.0 + 10.0 * PI / 300.0)).abs() < 1e-12);
        let zero = TestFunction::Indicator { l: 4, cells: vec![] };
        assert_eq!(qv_rate(&s, &zero, &m).unwrap(), 0.0);
        assert_eq!(zero.sup_norm(&m.geometry), 0.0);
    }

    #[test]
    fn generator_of_one_tracks_affinity_integral() {
        for (alpha, beta, amp, radius) in [
            (1.0, 1.0, 1.0, 0.1),
            (2.0, 1.6, 2.0, 0.1),
            (0.5, 1.0, 3.0, 0.2),
            (1.0, 0.3, 0.7, 0.05),
            (0.0, 1.0, 1.0, 0.4),
        ] {
            let p = Params {
                alpha,
                beta0: beta,
                affinity_amplitude: amp,
                affinity_radius: radius,
                ..Params::reference()
            };
            let m = model_with(p);
            let s = random_state(&m, 25, 7);
            let g = generator_apply(&s, &TestFunction::ConstantOne, &m).unwrap();
            let want = 25.0 * (alpha - beta + m.affinity_integral());
            assert!((g - want).abs() < 1e-12 * want.abs().max(1.0));
            let ones = TestFunction::Indicator {
                l: 1,
                cells: vec![[0, 0]],
            };
            let polar = KernelActions::new(&m, &ones, false).affinity_quadrature(&s.particles()[0].pos);
            assert!(close(polar, m.affinity_integral(), 1e-12), "{polar}");
        }
    }

    #[test]
    fn cosine_closed_forms_match_quadrature() {
        let p = Params {
            sigma: 0.05,
            ..Params::reference()
        };
        let m = model_with(p);
        for mode in [vec![1, 0], vec![2, 3]] {
            let f = TestFunction::Cosine { mode };
            for squared in [false, true] {
                let act = KernelActions::new(&m, &f, squared);
                for x in [Position::xy(0.3, 0.7), Position::xy(0.01, 0.99)] {
                    let (a, b) = (act.dispersal(&x), act.dispersal_quadrature(&x));
                    assert!((a - b).abs() < 1e-12, "{a} {b}");
                    let (a, b) = (act.affinity(&x).unwrap(), act.affinity_quadrature(&x));
                    assert!((a - b).abs() < 1e-12, "{a} {b}");
                }
            }
        }
    }

    #[test]
    fn cosine_generator_without_affinity() {
        let p = Params {
            affinity_amplitude: 0.0,
            ..Params::reference()
        };
        let m = model_with(p);
        let s = random_state(&m, 20, 8);
        let f = TestFunction::Cosine { mode: vec![1, 0] };
        let ghat = (-2.0 * PI * PI * 1e-4f64).exp();
        let want = (ghat - 1.0) * pair(&s, &f);
        assert!((generator_apply(&s, &f, &m).unwrap() - want).abs() < 1e-12);
        assert!(generator_apply(&s, &TestFunction::ConstantOne, &m).unwrap().abs() < 1e-12);
    }

    /// Independent check of the jump-aware quadrature: a coordinate function
    /// next to its wrap line, against a closed form via the normal CDF.
    #[test]
    fn coordinate_dispersal_across_wrap() {
        let m = reference();
        let f = TestFunction::Coordinate { axis: 0 };
        let act = KernelActions::new(&m, &f, false);
        let sigma = 0.01;
        for x0 in [0.003, 0.5, 0.9995] {
            let x = Position::xy(x0, 0.4);
            // E[wrap(x0 + Z)] = x0 + E[Z] + P(x0 + Z < 0) − P(x0 + Z ≥ 1).
            let cdf = |t: f64| 0.5 * libm::erfc(-t / (sigma * 2f64.sqrt()));
            let want = x0 + cdf(-x0) - (1.0 - cdf(1.0 - x0));
            let got = act.dispersal(&x);
            assert!((got - want).abs() < 1e-12, "x0={x0}: {got} vs {want}");
        }
    }

    #[test]
    fn quadrature_against_monte_carlo() {
        let m = reference();
        let x = Position::xy(0.04, 0.97);
        let f = TestFunction::Indicator {
            l: 20,
            cells: vec![[0, 19], [1, 19], [0, 0], [19, 19]],
        };
        let act = KernelActions::new(&m, &f, false);
        let quad_a = act.affinity(&x).unwrap();
        let quad_d = act.dispersal(&x);
        let mut rng = Stream::new(99, 0);
        let n = 10_000_000usize;
        let (mut sa, mut sa2, mut sd, mut sd2) = (0.0, 0.0, 0.0, 0.0);
        let g = &m.geometry;
        for _ in 0..n {
            let y = m.sample_affinity_site(&mut rng);
            let va = m.local_affinity(&x, &y) * f.eval(&y, g);
            sa += va;
            sa2 += va * va;
            let z = m.sample_invitation_offset(&mut rng);
            let vd = f.eval(&g.translate(&x, &z[..2]), g);
            sd += vd;
            sd2 += vd * vd;
        }
        let nf = n as f64;
        let (ma, md) = (sa / nf, sd / nf);
        let se_a = ((sa2 / nf - ma * ma) / nf).sqrt();
        let se_d = ((sd2 / nf - md * md) / nf).sqrt();
        assert!((quad_a - ma).abs() < 4.0 * se_a, "{quad_a} vs {ma} ± {se_a}");
        assert!((quad_d - md).abs() < 4.0 * se_d, "{quad_d} vs {md} ± {se_d}");
    }

    #[test]
    fn pure_death_drift() {
        let p = Params {
            alpha: 0.0,
            affinity_amplitude: 0.0,
            ..Params::reference()
        };
        let m = model_with(p);
        let s = random_state(&m, 20, 10);
        let est = empirical_drift(
            &s,
            &TestFunction::ConstantOne,
            &m,
            1e-3,
            20_000,
            3,
            Execution::default(),
        )
        .unwrap();
        assert!((est.mean + 20.0).abs() < 4.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn drift_modes_agree() {
        let m = reference();
        let s = random_state(&m, 10, 11);
        let f = TestFunction::Coordinate { axis: 1 };
        let a = empirical_drift(&s, &f, &m, 1e-2, 500, 4, Execution::Parallel).unwrap();
        let b = empirical_drift(&s, &f, &m, 1e-2, 500, 4, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn test_function_json() {
        let f: TestFunction = serde_json::from_str(r#"{"type": "cosine", "mode": [1, 0]}"#).unwrap();
        assert_eq!(f, TestFunction::Cosine { mode: vec![1, 0] });
        let f: TestFunction = serde_json::from_str(r#"{"type": "constant_one"}"#).unwrap();
        assert_eq!(f.label(), "one");
        let f: TestFunction = serde_json::from_str(r#"{"type": "indicator", "L": 4, "cells": [[0, 1]]}"#).unwrap();
        assert!(f.validate(&Geometry::default()).is_ok());
        assert!(TestFunction::Coordinate { axis: 2 }
            .validate(&Geometry::default())
            .is_err());
    }
}
