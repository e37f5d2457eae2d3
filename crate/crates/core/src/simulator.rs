//! Exact event loop: one global exponential clock, event-kind selection and
//! acceptance/rejection.
//!
//! Every iteration draws, in this order: (1) the waiting time, (2) the event
//! kind, (3) the acting vertex, (4) the kernel sample (offset or site) and
//! (5) the acceptance uniform. Withdrawals are always accepted and skip
//! draws (4) and (5). Keeping this order fixed is what makes event logs
//! replayable from a seed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{Geometry, Params, Position, MAX_DIM};
use crate::error::{Error, Result};
use crate::kernels::Model;
use crate::rng::Stream;
use crate::state::SystemState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Invitation,
    Withdrawal,
    Affinity,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Invitation => "invitation",
            EventKind::Withdrawal => "withdrawal",
            EventKind::Affinity => "affinity",
        }
    }
}

/// One iteration of the scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    /// 1-based iteration count, rejected candidates included.
    pub k: u64,
    pub time: f64,
    pub kind: EventKind,
    pub accepted: bool,
    pub actor_id: Option<u64>,
    pub new_pos: Option<Position>,
    pub removed_id: Option<u64>,
    pub size_after: usize,
}

pub const EVENT_LOG_HEADER: &str = "k,time,kind,accepted,actor_id,new_x,new_y,removed_id,size_after";

impl EventRecord {
    /// CSV row matching [`EVENT_LOG_HEADER`]; absent fields are empty.
    pub fn csv_row(&self) -> String {
        let mut s = String::with_capacity(64);
        let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        let (nx, ny) = match &self.new_pos {
            Some(p) => (
                p.coord(0).to_string(),
                if p.dim() > 1 {
                    p.coord(1).to_string()
                } else {
                    String::new()
                },
            ),
            None => (String::new(), String::new()),
        };
        write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            self.k,
            self.time,
            self.kind.as_str(),
            self.accepted,
            opt(self.actor_id),
            nx,
            ny,
            opt(self.removed_id),
            self.size_after
        )
        .expect("writing to a String cannot fail");
        s
    }
}

fn default_true() -> bool {
    true
}

/// Initial condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitSpec {
    /// `count` independent uniform positions drawn from the replica stream.
    Uniform {
        count: usize,
    },
    Explicit {
        positions: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub geometry: Geometry,
    pub params: Params,
    pub init: InitSpec,
    pub max_events: u64,
    #[serde(default)]
    pub time_horizon: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub record_rejections: bool,
}

impl RunConfig {
    pub fn new(params: Params, init: InitSpec, max_events: u64, seed: u64) -> Self {
        RunConfig {
            geometry: Geometry::default(),
            params,
            init,
            max_events,
            time_horizon: None,
            seed,
            record_rejections: true,
        }
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.time_horizon = Some(horizon);
        self
    }

    /// Validate and build the model this run uses.
    pub fn model(&self) -> Result<Model> {
        if self.max_events < 1 {
            return Err(Error::InvalidConfig("max_events must be >= 1".into()));
        }
        if let Some(h) = self.time_horizon {
            if !(h.is_finite() && h >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "time_horizon must be finite and >= 0, got {h}"
                )));
            }
        }
        Model::new(self.geometry, self.params)
    }

    /// Initial state for a replica; uniform positions consume the stream.
    pub fn initial_state(&self, model: &Model, rng: &mut Stream) -> Result<SystemState> {
        let mut state = SystemState::for_model(model);
        let g = &model.geometry;
        match &self.init {
            InitSpec::Uniform { count } => {
                let mut c = [0.0; MAX_DIM];
                for _ in 0..*count {
                    for v in c.iter_mut().take(g.d) {
                        *v = rng.uniform() * g.side;
                    }
                    state.insert(g.wrap(&c[..g.d])?);
                }
            }
            InitSpec::Explicit { positions } => {
                for p in positions {
                    state.insert(g.wrap(p)?);
                }
            }
        }
        Ok(state)
    }
}

/// A completed run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub events: Vec<EventRecord>,
    pub final_state: SystemState,
    pub extinct_at: Option<f64>,
    /// Iterations performed, including any not kept in `events`.
    pub event_count: u64,
}

/// Result of a run whose events were streamed to an observer.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_state: SystemState,
    pub extinct_at: Option<f64>,
    pub event_count: u64,
}

/// Per-vertex candidate rates `[alpha gamma1, A_f gamma2, beta]`.
pub fn clock_rates(state: &SystemState, params: &Params) -> [f64; 3] {
    [
        params.alpha * params.gamma1,
        params.affinity_amplitude * params.gamma2,
        state.beta_current,
    ]
}

/// `H = (alpha gamma1 + A_f gamma2 + beta) N`; with unit envelope constants
/// this is `(alpha + A_f + beta) N`.
pub fn global_rate(state: &SystemState, params: &Params) -> f64 {
    clock_rates(state, params).iter().sum::<f64>() * state.len() as f64
}

/// Exponential waiting time with rate `h`; `None` when the system is halted.
pub fn draw_waiting_time(h: f64, rng: &mut Stream) -> Option<f64> {
    if h > 0.0 {
        Some(rng.exponential(h))
    } else {
        None
    }
}

/// Probabilities of (invitation, affinity, withdrawal) candidates.
pub fn event_probabilities(state: &SystemState, params: &Params) -> [f64; 3] {
    let r = clock_rates(state, params);
    let total: f64 = r.iter().sum();
    r.map(|v| v / total)
}

pub fn choose_event_kind(state: &SystemState, params: &Params, rng: &mut Stream) -> EventKind {
    let [a, f, b] = clock_rates(state, params);
    let u = rng.uniform() * (a + f + b);
    if u < a {
        EventKind::Invitation
    } else if u < a + f {
        EventKind::Affinity
    } else {
        EventKind::Withdrawal
    }
}

/// Outcome of one candidate event, before time bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub kind: EventKind,
    pub actor_id: u64,
    pub accepted: bool,
    pub new_pos: Option<Position>,
    pub new_id: Option<u64>,
    pub removed_id: Option<u64>,
}

/// The event loop for one replica: a model plus that replica's stream.
#[derive(Debug, Clone)]
pub struct Simulator {
    model: Model,
    rng: Stream,
}

impl Simulator {
    pub fn new(model: Model, rng: Stream) -> Self {
        Simulator { model, rng }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn rng_mut(&mut self) -> &mut Stream {
        &mut self.rng
    }

    pub fn global_rate(&self, state: &SystemState) -> f64 {
        global_rate(state, &self.model.params)
    }

    /// Draws (3)–(5) for a candidate of the given kind, applied to `state`.
    pub fn apply_candidate(&mut self, state: &mut SystemState, kind: EventKind) -> Result<Candidate> {
        let dense = state.uniform_index(&mut self.rng)?;
        let actor = state.particles()[dense];
        let mut out = Candidate {
            kind,
            actor_id: actor.id,
            accepted: false,
            new_pos: None,
            new_id: None,
            removed_id: None,
        };
        match kind {
            EventKind::Invitation => {
                let d = self.model.geometry.d;
                let z = self.model.sample_invitation_offset(&mut self.rng);
                let p = self.model.invitation_accept_prob(&actor.pos, &z[..d])?;
                if self.rng.uniform() < p {
                    let y = self.model.geometry.translate(&actor.pos, &z[..d]);
                    out.accepted = true;
                    out.new_pos = Some(y);
                    out.new_id = Some(state.insert(y));
                }
            }
            EventKind::Affinity => {
                let y = self.model.sample_affinity_site(&mut self.rng);
                let p = self.model.affinity_accept_prob(&actor.pos, &y)?;
                if self.rng.uniform() < p {
                    out.accepted = true;
                    out.new_pos = Some(y);
                    out.new_id = Some(state.insert(y));
                }
            }
            EventKind::Withdrawal => {
                state.remove_at(dense);
                out.accepted = true;
                out.removed_id = Some(actor.id);
            }
        }
        Ok(out)
    }

    /// One full iteration with ordinal `k`.
    pub fn step(&mut self, state: &mut SystemState, k: u64) -> Result<EventRecord> {
        self.step_until(state, k, f64::INFINITY)?.ok_or(Error::EmptySystem)
    }

    /// Like [`Simulator::step`] but returns `Ok(None)` without mutating the
    /// configuration when the next event would fall after `horizon`; the
    /// state's clock is then set to `horizon`.
    pub fn step_until(&mut self, state: &mut SystemState, k: u64, horizon: f64) -> Result<Option<EventRecord>> {
        self.step_observed(state, k, horizon, |_, _| {})
    }

    /// [`Simulator::step_until`] that first shows `before` the drawn event
    /// time and the configuration holding up to it.
    pub fn step_observed(
        &mut self,
        state: &mut SystemState,
        k: u64,
        horizon: f64,
        mut before: impl FnMut(f64, &SystemState),
    ) -> Result<Option<EventRecord>> {
        let h = self.global_rate(state);
        let dt = draw_waiting_time(h, &mut self.rng).ok_or(Error::EmptySystem)?;
        let t = state.time + dt;
        before(t, state);
        if t > horizon {
            state.time = horizon;
            return Ok(None);
        }
        state.time = t;
        let kind = choose_event_kind(state, &self.model.params, &mut self.rng);
        let c = self.apply_candidate(state, kind)?;
        state.beta_current += self.model.params.beta_increment;
        Ok(Some(EventRecord {
            k,
            time: t,
            kind,
            accepted: c.accepted,
            actor_id: Some(c.actor_id),
            new_pos: c.new_pos,
            removed_id: c.removed_id,
            size_after: state.len(),
        }))
    }

    /// Iterate from `state` until `max_events` iterations, the horizon, or
    /// extinction, passing every record to `observer`.
    pub fn run_from(
        &mut self,
        state: SystemState,
        max_events: u64,
        horizon: Option<f64>,
        observer: impl FnMut(&EventRecord, &SystemState),
    ) -> Result<RunSummary> {
        self.run_observed(state, max_events, horizon, &[], |_, _| {}, observer)
    }

    /// [`Simulator::run_from`] that also reports the configuration at each of
    /// the ascending `times`. Times after the last event of a run cut short
    /// by `max_events` are not reported.
    pub fn run_observed(
        &mut self,
        mut state: SystemState,
        max_events: u64,
        horizon: Option<f64>,
        times: &[f64],
        mut on_time: impl FnMut(f64, &SystemState),
        mut observer: impl FnMut(&EventRecord, &SystemState),
    ) -> Result<RunSummary> {
        let horizon = horizon.unwrap_or(f64::INFINITY);
        let mut pending = times.iter().copied().filter(|t| *t <= horizon).peekable();
        let mut k = 0;
        let mut extinct_at = state.is_empty().then_some(state.time);
        while extinct_at.is_none() && k < max_events {
            let step = self.step_observed(&mut state, k + 1, horizon, |t_next, s| {
                while let Some(t) = pending.next_if(|t| *t < t_next) {
                    on_time(t, s);
                }
            })?;
            match step {
                None => break,
                Some(rec) => {
                    k += 1;
                    observer(&rec, &state);
                    if state.is_empty() {
                        extinct_at = Some(rec.time);
                    }
                }
            }
        }
        if extinct_at.is_some() {
            for t in pending {
                on_time(t, &state);
            }
        }
        Ok(RunSummary {
            final_state: state,
            extinct_at,
            event_count: k,
        })
    }
}

/// Run replica `replica` of `config`, streaming records to `observer`.
pub fn run_replica_with(
    config: &RunConfig,
    replica: u64,
    observer: impl FnMut(&EventRecord, &SystemState),
) -> Result<RunSummary> {
    let model = config.model()?;
    let mut rng = Stream::new(config.seed, replica);
    let state = config.initial_state(&model, &mut rng)?;
    Simulator::new(model, rng).run_from(state, config.max_events, config.time_horizon, observer)
}

/// [`run_replica_with`] that also reports the configuration at `times`.
pub fn run_replica_observed(
    config: &RunConfig,
    replica: u64,
    times: &[f64],
    on_time: impl FnMut(f64, &SystemState),
    observer: impl FnMut(&EventRecord, &SystemState),
) -> Result<RunSummary> {
    let model = config.model()?;
    let mut rng = Stream::new(config.seed, replica);
    let state = config.initial_state(&model, &mut rng)?;
    Simulator::new(model, rng).run_observed(state, config.max_events, config.time_horizon, times, on_time, observer)
}

/// Run replica `replica` of `config`, keeping the event records.
pub fn run_replica(config: &RunConfig, replica: u64) -> Result<Trajectory> {
    let mut events = Vec::new();
    let keep = config.record_rejections;
    let summary = run_replica_with(config, replica, |rec, _| {
        if keep || rec.accepted {
            events.push(rec.clone());
        }
    })?;
    Ok(Trajectory {
        events,
        final_state: summary.final_state,
        extinct_at: summary.extinct_at,
        event_count: summary.event_count,
    })
}

/// Replica 0 of `config`.
pub fn run(config: &RunConfig) -> Result<Trajectory> {
    run_replica(config, 0)
}

/// `inf { t : N_t = 0 }` along a trajectory, if reached.
pub fn extinction_time(traj: &Trajectory) -> Option<f64> {
    traj.events
        .iter()
        .find(|e| e.size_after == 0)
        .map(|e| e.time)
        .or(traj.extinct_at)
}

/// JSON trajectory summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub seed: u64,
    pub replica: u64,
    pub params: Params,
    pub extinct_at: Option<f64>,
    #[serde(rename = "final_N")]
    pub final_n: usize,
    pub event_count: u64,
}
