use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use socnet_core::graph::{self, connected_components, degree_distribution};
use socnet_core::meanfield::{DensityGrid, MeanField, Scheme, Solution, SolverConfig};
use socnet_core::observables::{cluster_cv, grid_histogram, l1_hist_distance, pair, rescale, spatial_histogram};
use socnet_core::parallel::{try_map_indexed, Execution};
use socnet_core::rng::{Stream, GENERATOR_ID};
use socnet_core::simulator::{InitSpec, EVENT_LOG_HEADER};
use socnet_core::state::StateSnapshot;
use socnet_core::{Geometry, Model, Params, RunConfig, Simulator, SystemState};

use crate::config::ScenarioConfig;
use crate::error::{CliError, CliResult};
use crate::output::{content_hash, ensure_dir, time_label, write_json, write_text, LineSink};

/// Replay record written next to every output set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub scenario: Option<String>,
    /// Git-style SHA-256 of `config.json` in the same directory.
    pub config_hash: String,
    pub generator: String,
    pub seed: u64,
    pub replicas: usize,
    /// Replica `r` draws from stream `(seed, r)`.
    pub replica_streams: Vec<u64>,
    pub params: Params,
    pub config: ScenarioConfig,
}

fn write_manifest(dir: &Path, command: &str, cfg: &ScenarioConfig, streams: Vec<u64>) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(cfg).expect("config serializes");
    text.push('\n');
    write_text(&dir.join("config.json"), &text)?;
    let manifest = Manifest {
        command: command.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        scenario: cfg.name.clone(),
        config_hash: content_hash(&text),
        generator: GENERATOR_ID.into(),
        seed: cfg.run.seed,
        replicas: cfg.replicas,
        replica_streams: streams,
        params: cfg.run.params,
        config: cfg.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

/// Per-replica outcome of `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaReport {
    pub replica: u64,
    pub initial_n: usize,
    #[serde(rename = "final_N")]
    pub final_n: usize,
    pub final_time: f64,
    pub extinct_at: Option<f64>,
    pub event_count: u64,
    pub max_n: usize,
    pub time_of_max: f64,
    pub initial_cv: Option<f64>,
    pub final_cv: Option<f64>,
}

fn cv_of(state: &SystemState, l_obs: usize) -> CliResult<Option<f64>> {
    let h = spatial_histogram(state, l_obs)?;
    Ok(cluster_cv(&h).ok())
}

/// Headline numbers of a graph export; the edge list goes to CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub radius: f64,
    pub vertices: usize,
    pub edges: usize,
    pub components: usize,
    pub largest_component: usize,
    pub mean_degree: f64,
}

fn export_graph(dir: &Path, stem: &str, state: &SystemState, radius: f64) -> CliResult<()> {
    let g = graph::snapshot(state, radius);
    let dist = degree_distribution(&g);
    let comps = connected_components(&g);
    let summary = GraphSummary {
        radius,
        vertices: g.vertices.len(),
        edges: g.edges.len(),
        components: comps.len(),
        largest_component: comps.iter().map(Vec::len).max().unwrap_or(0),
        mean_degree: if g.vertices.is_empty() {
            0.0
        } else {
            2.0 * g.edges.len() as f64 / g.vertices.len() as f64
        },
    };
    write_json(&dir.join(format!("{stem}.json")), &summary)?;
    write_text(&dir.join(format!("{stem}_edges.csv")), &g.edges_csv())?;
    let mut degrees = String::from("degree,count\n");
    for (d, c) in dist {
        degrees.push_str(&format!("{d},{c}\n"));
    }
    write_text(&dir.join(format!("{stem}_degrees.csv")), &degrees)?;
    let mut sizes = String::from("component,size,min_id\n");
    for (i, c) in comps.iter().enumerate() {
        sizes.push_str(&format!("{i},{},{}\n", c.len(), c[0]));
    }
    write_text(&dir.join(format!("{stem}_components.csv")), &sizes)
}

fn simulate_replica(cfg: &ScenarioConfig, model: &Model, r: u64, dir: &Path) -> CliResult<ReplicaReport> {
    let run = &cfg.run;
    let obs = &cfg.observe;
    let mut rng = Stream::new(run.seed, r);
    let state = run.initial_state(model, &mut rng)?;
    let initial_n = state.len();
    let initial_cv = cv_of(&state, obs.l_obs)?;

    let mut times: Vec<f64> = obs.output_times.iter().chain(&obs.snapshot_times).copied().collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    let mut events = LineSink::create(&dir.join(format!("events_r{r}.csv")), EVENT_LOG_HEADER)?;
    let mut sizes = LineSink::create(&dir.join(format!("size_r{r}.csv")), "time,value")?;
    sizes.line(&format!("{},{}", state.time, initial_n));
    let mut series: Vec<Vec<(f64, f64)>> = vec![Vec::new(); obs.test_functions.len()];
    let mut snapshots: Vec<(f64, StateSnapshot, String)> = Vec::new();
    let mut snapshot_error: Option<CliError> = None;
    let (mut max_n, mut time_of_max) = (initial_n, state.time);
    let keep_rejections = run.record_rejections;

    let summary = Simulator::new(model.clone(), rng).run_observed(
        state,
        run.max_events,
        run.time_horizon,
        &times,
        |t, s| {
            if obs.output_times.contains(&t) {
                for (f, out) in obs.test_functions.iter().zip(series.iter_mut()) {
                    out.push((t, pair(s, f)));
                }
            }
            if obs.snapshot_times.contains(&t) {
                match spatial_histogram(s, obs.l_obs) {
                    Ok(h) => snapshots.push((t, s.snapshot(), h.to_csv())),
                    Err(e) => snapshot_error = Some(e.into()),
                }
            }
        },
        |rec, s| {
            if keep_rejections || rec.accepted {
                events.line(&rec.csv_row());
            }
            if rec.accepted {
                sizes.line(&format!("{},{}", rec.time, rec.size_after));
                if s.len() > max_n {
                    max_n = s.len();
                    time_of_max = rec.time;
                }
            }
        },
    )?;
    events.finish()?;
    let final_state = summary.final_state;
    if summary.extinct_at.is_none() {
        sizes.line(&format!("{},{}", final_state.time, final_state.len()));
    }
    sizes.finish()?;
    if let Some(e) = snapshot_error {
        return Err(e);
    }
    for (f, s) in obs.test_functions.iter().zip(&series) {
        let path = dir.join(format!("obs_{}_r{r}.csv", f.label()));
        write_text(&path, &socnet_core::observables::series_csv(s))?;
    }
    for (t, snap, hist) in &snapshots {
        write_json(&dir.join(format!("state_r{r}_{}.json", time_label(*t))), snap)?;
        write_text(&dir.join(format!("hist_r{r}_{}.csv", time_label(*t))), hist)?;
    }
    write_json(&dir.join(format!("final_r{r}.json")), &final_state.snapshot())?;
    write_text(
        &dir.join(format!("hist_r{r}_final.csv")),
        &spatial_histogram(&final_state, obs.l_obs)?.to_csv(),
    )?;
    let radius = obs.graph_radius.unwrap_or(run.params.affinity_radius);
    export_graph(dir, &format!("graph_r{r}"), &final_state, radius)?;

    Ok(ReplicaReport {
        replica: r,
        initial_n,
        final_n: final_state.len(),
        final_time: final_state.time,
        extinct_at: summary.extinct_at,
        event_count: summary.event_count,
        max_n,
        time_of_max,
        initial_cv,
        final_cv: cv_of(&final_state, obs.l_obs)?,
    })
}

/// Run every replica; write logs, series, snapshots, graphs and a manifest.
pub fn simulate(cfg: &ScenarioConfig, exec: Execution) -> CliResult<Vec<ReplicaReport>> {
    let model = cfg.model()?;
    let dir = cfg.out_dir();
    ensure_dir(&dir)?;
    write_manifest(&dir, "simulate", cfg, (0..cfg.replicas as u64).collect())?;
    let reports = try_map_indexed(cfg.replicas, exec, |r| simulate_replica(cfg, &model, r as u64, &dir))?;
    write_json(&dir.join("summary.json"), &reports)?;
    Ok(reports)
}

/// Deterministic counterpart of the initial condition, rescaled by the
/// initial size.
pub fn initial_density(run: &RunConfig, l: usize) -> CliResult<DensityGrid> {
    let side = run.geometry.side;
    match &run.init {
        InitSpec::Uniform { .. } => Ok(DensityGrid::uniform(l, side, 1.0)),
        InitSpec::Explicit { positions } => {
            let mut g = DensityGrid::zeros(l, side);
            if positions.is_empty() {
                return Ok(g);
            }
            let w = 1.0 / positions.len() as f64 / g.cell_volume();
            for p in positions {
                let pos = run.geometry.wrap(p)?;
                let cell = |v: f64| ((v / side * l as f64) as usize).min(l - 1);
                g.values[cell(pos.coord(0)) * l + cell(pos.coord(1))] += w;
            }
            Ok(g)
        }
    }
}

fn solve_meanfield(cfg: &ScenarioConfig, solver: &SolverConfig, exec: Execution) -> CliResult<Solution> {
    let op =
        MeanField::with_execution(cfg.run.geometry, cfg.run.params, solver.l, exec)?.with_beta_slope(solver.beta_slope);
    let g0 = initial_density(&cfg.run, solver.l)?;
    Ok(op.solve(&g0, solver)?)
}

/// Solve the density equation; write grids and the mass series.
pub fn meanfield(cfg: &ScenarioConfig, exec: Execution) -> CliResult<Solution> {
    let solver = cfg
        .meanfield
        .as_ref()
        .ok_or_else(|| CliError::Config("the meanfield command needs a `meanfield` section".into()))?;
    let dir = cfg.out_dir();
    ensure_dir(&dir)?;
    write_manifest(&dir, "meanfield", cfg, Vec::new())?;
    let sol = solve_meanfield(cfg, solver, exec)?;
    for (t, g) in &sol.grids {
        let stem = format!("grid_{}", time_label(*t));
        write_text(&dir.join(format!("{stem}.csv")), &g.to_csv())?;
        write_json(&dir.join(format!("{stem}.json")), &g.sidecar(*t))?;
    }
    write_text(&dir.join("mass.csv"), &sol.mass_csv())?;
    Ok(sol)
}

/// One line of the convergence table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    #[serde(rename = "T")]
    pub t_end: f64,
    #[serde(rename = "L_obs")]
    pub l_obs: usize,
    pub replicas: usize,
    pub rows: Vec<CompareRow>,
    /// Consecutive median ratios `median(n_i) / median(n_{i+1})`.
    pub ratios: Vec<f64>,
    /// `None` for a single-row table.
    pub strictly_decreasing: Option<bool>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// L1 histogram distance between rescaled replicas and the density at `T`
/// for each configured initial size.
pub fn compare(cfg: &ScenarioConfig, exec: Execution) -> CliResult<CompareReport> {
    let c = cfg
        .compare
        .as_ref()
        .ok_or_else(|| CliError::Config("the compare command needs a `compare` section".into()))?;
    let replicas = c.replicas.unwrap_or(cfg.replicas);
    if replicas < 1 {
        return Err(CliError::Config("replicas must be >= 1".into()));
    }
    let l_obs = c.l_obs.unwrap_or(cfg.observe.l_obs);
    let dir = cfg.out_dir();
    ensure_dir(&dir)?;
    write_manifest(&dir, "compare", cfg, Vec::new())?;

    let mut solver = cfg
        .meanfield
        .clone()
        .unwrap_or_else(|| SolverConfig::new(128, 0.01, Scheme::Rk4, c.t_end));
    solver.t_end = c.t_end;
    solver.output_times.clear();
    let mut uniform = cfg.run.clone();
    uniform.init = InitSpec::Uniform { count: 1 };
    let density = solve_meanfield(
        &ScenarioConfig {
            run: uniform,
            ..cfg.clone()
        },
        &solver,
        exec,
    )?;
    let target = grid_histogram(density.final_grid(), l_obs)?;

    let mut rows = Vec::new();
    let mut table = String::from("n,replica,distance\n");
    for (i, &n) in c.n_values.iter().enumerate() {
        let run = RunConfig {
            init: InitSpec::Uniform { count: n },
            max_events: u64::MAX,
            time_horizon: Some(c.t_end),
            ..cfg.run.clone()
        };
        let model = run.model()?;
        let offset = (i * replicas) as u64;
        let distances = try_map_indexed(replicas, exec, |r| -> CliResult<f64> {
            let mut rng = Stream::new(run.seed, offset + r as u64);
            let state = run.initial_state(&model, &mut rng)?;
            let end =
                Simulator::new(model.clone(), rng).run_from(state, run.max_events, run.time_horizon, |_, _| {})?;
            let h = rescale(&end.final_state, n)?.histogram(l_obs)?;
            Ok(l1_hist_distance(&h, &target)?)
        })?;
        for (r, d) in distances.iter().enumerate() {
            table.push_str(&format!("{n},{},{d}\n", offset + r as u64));
        }
        rows.push(CompareRow {
            n,
            median: median(&distances),
            mean: distances.iter().sum::<f64>() / distances.len() as f64,
            min: distances.iter().copied().fold(f64::INFINITY, f64::min),
            max: distances.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            distances,
        });
    }
    let ratios: Vec<f64> = rows.windows(2).map(|w| w[0].median / w[1].median).collect();
    let strictly_decreasing = (rows.len() > 1).then(|| rows.windows(2).all(|w| w[1].median < w[0].median));
    let report = CompareReport {
        t_end: c.t_end,
        l_obs,
        replicas,
        rows,
        ratios,
        strictly_decreasing,
    };
    write_text(&dir.join("distances.csv"), &table)?;
    let mut summary = String::from("n,median,mean,min,max\n");
    for row in &report.rows {
        summary.push_str(&format!(
            "{},{},{},{},{}\n",
            row.n, row.median, row.mean, row.min, row.max
        ));
    }
    write_text(&dir.join("compare.csv"), &summary)?;
    write_json(&dir.join("compare.json"), &report)?;
    Ok(report)
}

/// Graph exports of a saved state.
pub fn graph_of_state(
    state_path: &Path,
    radius: Option<f64>,
    cfg: Option<&ScenarioConfig>,
    out: Option<PathBuf>,
) -> CliResult<PathBuf> {
    let text = std::fs::read_to_string(state_path).map_err(|e| CliError::io(state_path, e))?;
    let snap: StateSnapshot =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", state_path.display())))?;
    let model = match cfg {
        Some(c) => c.model()?,
        None => {
            let d = snap.particles.first().map_or(2, |p| p.pos.dim());
            Model::new(Geometry::new(d, 1.0)?, Params::reference())?
        }
    };
    let radius = radius
        .or(cfg.and_then(|c| c.observe.graph_radius))
        .unwrap_or(model.params.affinity_radius);
    if !(radius.is_finite() && radius > 0.0) {
        return Err(CliError::Config(format!("radius must be > 0, got {radius}")));
    }
    let state = SystemState::from_snapshot(&model, &snap)?;
    let dir = out.unwrap_or_else(|| {
        state_path
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    });
    ensure_dir(&dir)?;
    let stem = state_path
        .file_stem()
        .map_or_else(|| "state".to_string(), |s| s.to_string_lossy().into_owned());
    export_graph(&dir, &format!("graph_{stem}"), &state, radius)?;
    Ok(dir)
}

/// Human-readable summary of a validated scenario.
pub fn describe(cfg: &ScenarioConfig) -> BTreeMap<&'static str, String> {
    let mut m = BTreeMap::new();
    m.insert("name", cfg.name.clone().unwrap_or_default());
    m.insert("replicas", cfg.replicas.to_string());
    m.insert("seed", cfg.run.seed.to_string());
    m.insert("max_events", cfg.run.max_events.to_string());
    m.insert("meanfield", cfg.meanfield.is_some().to_string());
    m.insert("compare", cfg.compare.is_some().to_string());
    m
}
