//! The point measure `N_t` as a particle collection with a uniform-grid index.

use serde::{Deserialize, Serialize};

use crate::domain::{Geometry, Position, MAX_DIM};
use crate::error::{Error, Result};
use crate::kernels::{Model, TriangularAffinity};
use crate::rng::Stream;

const ABSENT: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub id: u64,
    pub pos: Position,
}

/// Uniform grid of `per_axis^d` cells whose side is at least the largest
/// supported query radius, so a query scans at most `3^d` cells.
#[derive(Debug, Clone)]
pub struct GridIndex {
    geometry: Geometry,
    per_axis: usize,
    cell_side: f64,
    buckets: Vec<Vec<usize>>,
}

impl GridIndex {
    /// Cells are as small as possible subject to `cell_side >= min_side` and
    /// tiling the torus exactly.
    pub fn new(geometry: Geometry, min_side: f64) -> Self {
        let per_axis = if min_side > 0.0 {
            ((geometry.side / min_side).floor() as usize).max(1)
        } else {
            1
        };
        let cells = per_axis.pow(geometry.d as u32);
        GridIndex {
            geometry,
            per_axis,
            cell_side: geometry.side / per_axis as f64,
            buckets: vec![Vec::new(); cells],
        }
    }

    pub fn cell_side(&self) -> f64 {
        self.cell_side
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    pub fn cell_count(&self) -> usize {
        self.buckets.len()
    }

    fn axis_cell(&self, x: f64) -> usize {
        ((x / self.cell_side) as usize).min(self.per_axis - 1)
    }

    pub fn cell_of(&self, p: &Position) -> usize {
        let mut cell = 0;
        for k in 0..self.geometry.d {
            cell = cell * self.per_axis + self.axis_cell(p.coord(k));
        }
        cell
    }

    /// Distinct cells in the `3^d` block around the cell containing `p`.
    fn neighborhood(&self, p: &Position, out: &mut Vec<usize>) {
        out.clear();
        let d = self.geometry.d;
        let m = self.per_axis as isize;
        let mut base = [0isize; MAX_DIM];
        for (k, b) in base.iter_mut().enumerate().take(d) {
            *b = self.axis_cell(p.coord(k)) as isize;
        }
        let span = if self.per_axis >= 3 { 3 } else { self.per_axis };
        let total = span.pow(d as u32);
        for combo in 0..total {
            let mut rest = combo;
            let mut cell = 0usize;
            for &b in base.iter().take(d) {
                let off = (rest % span) as isize - if span == 3 { 1 } else { 0 };
                rest /= span;
                let c = if span == 3 { (b + off).rem_euclid(m) } else { off };
                cell = cell * self.per_axis + c as usize;
            }
            out.push(cell);
        }
        if span < 3 {
            out.sort_unstable();
            out.dedup();
        }
    }

    /// Distinct cells in the `3^d` block around `cell`.
    fn cell_neighborhood(&self, cell: usize, out: &mut Vec<usize>) {
        let d = self.geometry.d;
        let mut coords = [0.0; MAX_DIM];
        let mut rest = cell;
        for k in (0..d).rev() {
            coords[k] = ((rest % self.per_axis) as f64 + 0.5) * self.cell_side;
            rest /= self.per_axis;
        }
        self.neighborhood(&Position::from_wrapped(&coords[..d]), out);
    }

    fn bucket(&self, cell: usize) -> &[usize] {
        &self.buckets[cell]
    }

    fn push(&mut self, cell: usize, dense: usize) -> usize {
        self.buckets[cell].push(dense);
        self.buckets[cell].len() - 1
    }

    /// Remove the entry at `slot`; returns the dense index now stored there.
    fn swap_remove(&mut self, cell: usize, slot: usize) -> Option<usize> {
        let b = &mut self.buckets[cell];
        b.swap_remove(slot);
        b.get(slot).copied()
    }

    fn set(&mut self, cell: usize, slot: usize, dense: usize) {
        self.buckets[cell][slot] = dense;
    }
}

/// Current configuration of the system: time, particles, index and the
/// current withdrawal rate.
#[derive(Debug, Clone)]
pub struct SystemState {
    pub time: f64,
    pub beta_current: f64,
    geometry: Geometry,
    particles: Vec<Particle>,
    cell: Vec<usize>,
    slot: Vec<usize>,
    dense_of: Vec<usize>,
    index: GridIndex,
}

impl SystemState {
    pub fn new(geometry: Geometry, cell_side: f64, beta0: f64) -> Self {
        SystemState {
            time: 0.0,
            beta_current: beta0,
            geometry,
            particles: Vec::new(),
            cell: Vec::new(),
            slot: Vec::new(),
            dense_of: Vec::new(),
            index: GridIndex::new(geometry, cell_side),
        }
    }

    /// Empty state whose index supports radius-`a_f` queries.
    pub fn for_model(model: &Model) -> Self {
        SystemState::new(model.geometry, model.params.affinity_radius, model.params.beta0)
    }

    pub fn with_positions(model: &Model, positions: &[Position]) -> Self {
        let mut s = SystemState::for_model(model);
        for p in positions {
            s.insert(*p);
        }
        s
    }

    /// Copy of this state re-indexed with cells of side at least `min_side`.
    /// Particle ids and order are preserved.
    pub fn reindexed(&self, min_side: f64) -> Self {
        let mut s = SystemState::new(self.geometry, min_side, self.beta_current);
        s.time = self.time;
        s.dense_of = vec![ABSENT; self.dense_of.len()];
        for p in &self.particles {
            s.insert_with_id(p.id, p.pos);
        }
        s
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn index(&self) -> &GridIndex {
        &self.index
    }

    /// `N = <N_t, 1>`.
    #[inline]
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Particles in storage order (unspecified, stable between mutations).
    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn positions(&self) -> impl Iterator<Item = &Position> {
        self.particles.iter().map(|p| &p.pos)
    }

    pub fn get(&self, id: u64) -> Option<&Particle> {
        match self.dense_of.get(id as usize) {
            Some(&d) if d != ABSENT => Some(&self.particles[d]),
            _ => None,
        }
    }

    /// Add a particle at an already wrapped position; returns its fresh id.
    pub fn insert(&mut self, pos: Position) -> u64 {
        let id = self.dense_of.len() as u64;
        self.dense_of.push(ABSENT);
        self.insert_with_id(id, pos);
        id
    }

    fn insert_with_id(&mut self, id: u64, pos: Position) {
        let dense = self.particles.len();
        let cell = self.index.cell_of(&pos);
        let slot = self.index.push(cell, dense);
        self.particles.push(Particle { id, pos });
        self.cell.push(cell);
        self.slot.push(slot);
        self.dense_of[id as usize] = dense;
    }

    pub fn remove(&mut self, id: u64) -> Result<Particle> {
        match self.dense_of.get(id as usize) {
            Some(&d) if d != ABSENT => Ok(self.remove_at(d)),
            _ => Err(Error::MissingParticle(id)),
        }
    }

    /// Remove the particle at storage position `dense` (swap-remove).
    pub fn remove_at(&mut self, dense: usize) -> Particle {
        let (cell, slot) = (self.cell[dense], self.slot[dense]);
        if let Some(moved) = self.index.swap_remove(cell, slot) {
            self.slot[moved] = slot;
        }
        let removed = self.particles.swap_remove(dense);
        self.cell.swap_remove(dense);
        self.slot.swap_remove(dense);
        self.dense_of[removed.id as usize] = ABSENT;
        if dense < self.particles.len() {
            let moved = self.particles[dense];
            self.dense_of[moved.id as usize] = dense;
            self.index.set(self.cell[dense], self.slot[dense], dense);
        }
        removed
    }

    /// Storage position of a uniformly drawn particle.
    pub fn uniform_index(&self, rng: &mut Stream) -> Result<usize> {
        if self.is_empty() {
            return Err(Error::EmptySystem);
        }
        Ok(rng.index(self.len()))
    }

    pub fn uniform_particle(&self, rng: &mut Stream) -> Result<Particle> {
        self.uniform_index(rng).map(|i| self.particles[i])
    }

    /// Call `f` with every particle at torus distance `<= r` from `y`.
    pub fn for_each_within(&self, y: &Position, r: f64, mut f: impl FnMut(&Particle, f64)) -> Result<()> {
        if r > self.index.cell_side() {
            return Err(Error::UnsupportedRadius {
                radius: r,
                cell_side: self.index.cell_side(),
            });
        }
        let mut cells = Vec::with_capacity(27);
        self.index.neighborhood(y, &mut cells);
        let r2 = r * r;
        for &c in &cells {
            for &dense in self.index.bucket(c) {
                let p = &self.particles[dense];
                let d2 = self.geometry.distance_sq(y, &p.pos);
                if d2 <= r2 {
                    f(p, d2.sqrt());
                }
            }
        }
        Ok(())
    }

    /// Call `f(a, b)` once for every unordered pair of distinct particles at
    /// torus distance `<= r`. Each pair is tested exactly once.
    pub fn for_each_pair_within(&self, r: f64, mut f: impl FnMut(&Particle, &Particle)) -> Result<()> {
        if r > self.index.cell_side() {
            return Err(Error::UnsupportedRadius {
                radius: r,
                cell_side: self.index.cell_side(),
            });
        }
        let r2 = r * r;
        let mut cells = Vec::with_capacity(27);
        for c in 0..self.index.cell_count() {
            let own = self.index.bucket(c);
            for (i, &a) in own.iter().enumerate() {
                for &b in &own[i + 1..] {
                    let (pa, pb) = (&self.particles[a], &self.particles[b]);
                    if self.geometry.distance_sq(&pa.pos, &pb.pos) <= r2 {
                        f(pa, pb);
                    }
                }
            }
            self.index.cell_neighborhood(c, &mut cells);
            for &c2 in cells.iter().filter(|&&c2| c2 > c) {
                for &a in own {
                    for &b in self.index.bucket(c2) {
                        let (pa, pb) = (&self.particles[a], &self.particles[b]);
                        if self.geometry.distance_sq(&pa.pos, &pb.pos) <= r2 {
                            f(pa, pb);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Ids of particles at torus distance `<= r` from `y`, in no particular order.
    pub fn neighbors_within(&self, y: &Position, r: f64) -> Result<Vec<u64>> {
        let mut out = Vec::new();
        self.for_each_within(y, r, |p, _| out.push(p.id))?;
        Ok(out)
    }

    /// `w_af(y, N) = sum_i aff(x_i, y)`.
    pub fn affinity_field(&self, y: &Position, aff: &TriangularAffinity) -> f64 {
        let r = aff.radius.min(self.index.cell_side());
        let mut total = 0.0;
        self.for_each_within(y, r, |p, _| total += aff.value(&p.pos, y))
            .expect("radius clamped to the cell side");
        total
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            time: self.time,
            n: self.len(),
            beta_current: self.beta_current,
            particles: self.particles.clone(),
        }
    }

    /// Rebuild a state from an exported snapshot. Ids are kept; the next
    /// fresh id follows the largest one present.
    pub fn from_snapshot(model: &Model, snap: &StateSnapshot) -> Result<Self> {
        let mut s = SystemState::for_model(model);
        s.time = snap.time;
        s.beta_current = snap.beta_current;
        let max_id = snap.particles.iter().map(|p| p.id).max();
        s.dense_of = vec![ABSENT; max_id.map_or(0, |m| m as usize + 1)];
        for p in &snap.particles {
            if p.pos.dim() != model.geometry.d {
                return Err(Error::DimensionMismatch {
                    expected: model.geometry.d,
                    got: p.pos.dim(),
                });
            }
            let pos = model.geometry.wrap(p.pos.coords())?;
            if s.dense_of[p.id as usize] != ABSENT {
                return Err(Error::InvalidConfig(format!("duplicate particle id {}", p.id)));
            }
            s.insert_with_id(p.id, pos);
        }
        if snap.n != s.len() {
            return Err(Error::InvalidConfig(format!(
                "snapshot N = {} but {} particles listed",
                snap.n,
                s.len()
            )));
        }
        Ok(s)
    }
}

/// JSON export of a state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSnapshot {
    pub time: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub beta_current: f64,
    pub particles: Vec<Particle>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Params;

    fn model() -> Model {
        Model::new(Geometry::default(), Params::reference()).unwrap()
    }

    fn brute(state: &SystemState, y: &Position, r: f64) -> Vec<u64> {
        let mut v: Vec<u64> = state
            .particles()
            .iter()
            .filter(|p| state.geometry().distance(y, &p.pos) <= r)
            .map(|p| p.id)
            .collect();
        v.sort_unstable();
        v
    }

    fn sorted(mut v: Vec<u64>) -> Vec<u64> {
        v.sort_unstable();
        v
    }

    #[test]
    fn insert_and_remove() {
        let m = model();
        let mut s = SystemState::for_model(&m);
        let p = Position::xy(0.4, 0.4);
        let a = s.insert(p);
        assert_eq!(s.len(), 1);
        assert!(s.neighbors_within(&p, 0.1).unwrap().contains(&a));
        let b = s.insert(p);
        assert_eq!(s.len(), 2);
        assert_ne!(a, b);
        s.remove(a).unwrap();
        s.remove(b).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.remove(a), Err(Error::MissingParticle(a)));
        assert_eq!(s.remove(77), Err(Error::MissingParticle(77)));
    }

    #[test]
    fn removal_is_local() {
        let m = model();
        let mut s = SystemState::for_model(&m);
        let keep = s.insert(Position::xy(0.1, 0.1));
        let other = s.insert(Position::xy(0.8, 0.8));
        let y = Position::xy(0.12, 0.1);
        let before = s.neighbors_within(&y, 0.1).unwrap();
        s.remove(other).unwrap();
        assert_eq!(s.neighbors_within(&y, 0.1).unwrap(), before);
        assert_eq!(before, vec![keep]);
    }

    #[test]
    fn uniform_particle_examples() {
        let m = model();
        let mut rng = Stream::new(1, 0);
        let mut s = SystemState::for_model(&m);
        assert_eq!(s.uniform_particle(&mut rng), Err(Error::EmptySystem));
        let only = s.insert(Position::xy(0.5, 0.5));
        for _ in 0..10 {
            assert_eq!(s.uniform_particle(&mut rng).unwrap().id, only);
        }
        s.insert(Position::xy(0.1, 0.5));
        s.insert(Position::xy(0.9, 0.5));
        let mut counts = [0u32; 3];
        for _ in 0..300_000 {
            counts[s.uniform_particle(&mut rng).unwrap().id as usize] += 1;
        }
        let sd = (300_000.0 / 3.0 * (2.0 / 3.0f64)).sqrt();
        for c in counts {
            assert!((c as f64 - 100_000.0).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn neighbors_examples() {
        let m = model();
        let mut s = SystemState::for_model(&m);
        let y = Position::xy(0.5, 0.5);
        let near = s.insert(Position::xy(0.55, 0.5));
        s.insert(Position::xy(0.7, 0.5));
        assert_eq!(s.neighbors_within(&y, 0.1).unwrap(), vec![near]);
        let on = s.insert(y);
        assert_eq!(sorted(s.neighbors_within(&y, 0.1).unwrap()), vec![near, on]);
        assert!(matches!(
            s.neighbors_within(&y, 0.2),
            Err(Error::UnsupportedRadius { .. })
        ));
    }

    #[test]
    fn neighbors_match_brute_force() {
        let m = model();
        let mut rng = Stream::new(42, 0);
        for _ in 0..1000 {
            let n = 1 + rng.index(60);
            let pts: Vec<Position> = (0..n).map(|_| m.sample_affinity_site(&mut rng)).collect();
            let s = SystemState::with_positions(&m, &pts);
            let y = m.sample_affinity_site(&mut rng);
            let r = 0.1 * rng.uniform();
            assert_eq!(sorted(s.neighbors_within(&y, r).unwrap()), brute(&s, &y, r));
        }
    }

    #[test]
    fn coarse_grids_deduplicate_cells() {
        for min_side in [0.4, 0.6, 1.0] {
            let g = Geometry::default();
            let mut s = SystemState::new(g, min_side, 1.0);
            let mut rng = Stream::new(3, 0);
            for _ in 0..50 {
                s.insert(Position::xy(rng.uniform(), rng.uniform()));
            }
            let y = Position::xy(0.5, 0.5);
            let r = s.index().cell_side().min(0.5);
            assert_eq!(sorted(s.neighbors_within(&y, r).unwrap()), brute(&s, &y, r));
        }
    }

    #[test]
    fn index_coherence_under_random_mutation() {
        let m = model();
        let mut rng = Stream::new(7, 0);
        let mut s = SystemState::for_model(&m);
        let mut live: Vec<u64> = Vec::new();
        for step in 0..10_000 {
            if live.is_empty() || rng.uniform() < 0.55 {
                live.push(s.insert(m.sample_affinity_site(&mut rng)));
            } else {
                let i = rng.index(live.len());
                let id = live.swap_remove(i);
                s.remove(id).unwrap();
            }
            assert_eq!(s.len(), live.len());
            if step % 97 == 0 {
                let y = m.sample_affinity_site(&mut rng);
                assert_eq!(sorted(s.neighbors_within(&y, 0.1).unwrap()), brute(&s, &y, 0.1));
                for p in s.particles() {
                    assert_eq!(s.get(p.id).unwrap(), p);
                }
            }
        }
    }

    #[test]
    fn affinity_field_examples() {
        let m = model();
        let mut s = SystemState::for_model(&m);
        let y = Position::xy(0.5, 0.5);
        assert_eq!(s.affinity_field(&y, &m.affinity), 0.0);
        s.insert(Position::xy(0.55, 0.5));
        assert!((s.affinity_field(&y, &m.affinity) - 0.5).abs() < 1e-12);
        let mut s = SystemState::for_model(&m);
        s.insert(Position::xy(0.525, 0.5));
        s.insert(Position::xy(0.5, 0.45));
        assert!((s.affinity_field(&y, &m.affinity) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn affinity_field_bounded_by_amplitude_times_size() {
        let m = model();
        let mut rng = Stream::new(12, 0);
        let mut s = SystemState::for_model(&m);
        for _ in 0..300 {
            let c = Position::xy(0.3, 0.3);
            let z = m.sample_invitation_offset(&mut rng);
            s.insert(m.geometry.translate(&c, &z[..2]));
        }
        for _ in 0..1000 {
            let y = m.sample_affinity_site(&mut rng);
            let w = s.affinity_field(&y, &m.affinity);
            assert!(w >= 0.0 && w <= s.len() as f64);
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let m = model();
        let mut s = SystemState::for_model(&m);
        s.insert(Position::xy(0.1, 0.2));
        let gone = s.insert(Position::xy(0.3, 0.4));
        s.insert(Position::xy(0.5, 0.6));
        s.remove(gone).unwrap();
        s.time = 1.5;
        let snap = s.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        assert!(json.contains(r#""N":2"#) && json.contains(r#""pos":[0.1,0.2]"#));
        let back = SystemState::from_snapshot(&m, &serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.snapshot(), snap);
        let mut back = back;
        let fresh = back.insert(Position::xy(0.9, 0.9));
        assert!(back.get(fresh).is_some() && fresh > 2);
    }
}
