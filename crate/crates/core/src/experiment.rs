//! Experiment configuration files, data synthesis and artifact output.
//!
//! A configuration is a JSON document:
//!
//! ```json
//! {
//!   "name": "experiment1",
//!   "time_intervals": 50,
//!   "schedule": { "kind": "spiral", "count": 20, "pitch": 0.6283, "max_radius": 10.0 },
//!   "ground_truth": [
//!     { "intensity": 1.0, "line": { "start": [0.2, 0.2], "velocity": [0.6, 0.6] } }
//!   ],
//!   "noise": { "level": 0.0, "seed": 0 },
//!   "alpha": 0.1,
//!   "beta": 0.1,
//!   "solver": { "multistart": { "restarts": 5 } },
//!   "output_dir": "out/experiment1",
//!   "raster_resolution": 128,
//!   "backprojection_times": [0, 25, 50]
//! }
//! ```
//!
//! Schedules are `spiral {count, pitch, max_radius}`, `rotating_lines
//! {lines, spacing, count}` or `file {path}` (per time a list of `[fx, fy]`).
//! Ground-truth curves are given as `line {start, velocity}`, `nodes` (one
//! point per sample time) or `waypoints {times, points}` (linearly
//! interpolated). Instead of a ground truth, `data` may name a JSON file of
//! measurements (per time a list of `[re, im]`). Relative paths resolve
//! against the configuration file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardOperator, FrequencySchedule, Measurements};
use crate::geometry::{Curve, MeasureJson, Point, RegParams, SparseMeasure, TimeGrid};
use crate::problem::{
    add_noise, backprojection_raster, synthesize, write_convergence_csv, Problem,
};
use crate::solver::{solve, Mode, SolveReport, SolverConfig, Termination};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Spiral {
        count: usize,
        pitch: f64,
        max_radius: f64,
    },
    RotatingLines {
        lines: usize,
        spacing: f64,
        count: usize,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub start: Point,
    pub velocity: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointSpec {
    pub times: Vec<f64>,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthAtomSpec {
    pub intensity: f64,
    #[serde(default)]
    pub line: Option<LineSpec>,
    #[serde(default)]
    pub nodes: Option<Vec<Point>>,
    #[serde(default)]
    pub waypoints: Option<WaypointSpec>,
}

impl TruthAtomSpec {
    pub fn curve(&self, grid: &TimeGrid) -> Result<Curve> {
        match (&self.line, &self.nodes, &self.waypoints) {
            (Some(l), None, None) => Curve::line(l.start, l.velocity, grid),
            (None, Some(n), None) => {
                let c = Curve::new(n.clone())?;
                c.check_grid(grid)?;
                Ok(c)
            }
            (None, None, Some(w)) => waypoint_curve(w, grid),
            _ => Err(Error::invalid(
                "each ground-truth atom needs exactly one of line, nodes or waypoints",
            )),
        }
    }
}

fn waypoint_curve(w: &WaypointSpec, grid: &TimeGrid) -> Result<Curve> {
    if w.times.len() != w.points.len() || w.times.len() < 2 {
        return Err(Error::invalid(
            "waypoints need matching times and points, at least two",
        ));
    }
    if w.times.windows(2).any(|p| p[1] <= p[0])
        || w.times[0] > 0.0
        || *w.times.last().unwrap() < 1.0
    {
        return Err(Error::invalid(
            "waypoint times must increase and cover [0, 1]",
        ));
    }
    Curve::from_fn(grid, |t| {
        let k = w
            .times
            .windows(2)
            .position(|p| t <= p[1])
            .unwrap_or(w.times.len() - 2);
        let s = (t - w.times[k]) / (w.times[k + 1] - w.times[k]);
        let (a, b) = (w.points[k], w.points[k + 1]);
        [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub level: f64,
    pub seed: u64,
}

fn default_resolution() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub time_intervals: usize,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub ground_truth: Vec<TruthAtomSpec>,
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_resolution")]
    pub raster_resolution: usize,
    #[serde(default)]
    pub backprojection_times: Vec<usize>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self =
            serde_json::from_str(s).map_err(|e| Error::invalid(format!("configuration: {e}")))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json_str(&text, &base)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.params()?;
        self.solver.validate()?;
        if self.ground_truth.is_empty() && self.data.is_none() {
            return Err(Error::invalid(
                "configuration needs a ground truth or a data file",
            ));
        }
        if let ScheduleSpec::File { path } = &self.schedule {
            if !self.resolve(path).exists() {
                return Err(Error::invalid(format!(
                    "schedule file {} not found",
                    path.display()
                )));
            }
        }
        if let Some(d) = &self.data {
            if !self.resolve(d).exists() {
                return Err(Error::invalid(format!(
                    "data file {} not found",
                    d.display()
                )));
            }
        }
        if let Some(&i) = self
            .backprojection_times
            .iter()
            .find(|&&i| i > self.time_intervals)
        {
            return Err(Error::invalid(format!(
                "backprojection time index {i} exceeds the grid"
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.time_intervals)
    }

    pub fn params(&self) -> Result<RegParams> {
        RegParams::new(self.alpha, self.beta)
    }

    pub fn schedule(&self) -> Result<FrequencySchedule> {
        let grid = self.grid()?;
        match &self.schedule {
            ScheduleSpec::Spiral {
                count,
                pitch,
                max_radius,
            } => FrequencySchedule::spiral(*count, *pitch, *max_radius, &grid),
            ScheduleSpec::RotatingLines {
                lines,
                spacing,
                count,
            } => FrequencySchedule::rotating_lines(*lines, *spacing, *count, &grid),
            ScheduleSpec::File { path } => {
                let s: FrequencySchedule =
                    serde_json::from_str(&fs::read_to_string(self.resolve(path))?)?;
                let s =
                    FrequencySchedule::new((0..s.num_times()).map(|i| s.at(i).to_vec()).collect())?;
                s.check_grid(&grid)?;
                Ok(s)
            }
        }
    }

    pub fn ground_truth(&self) -> Result<Option<SparseMeasure>> {
        if self.ground_truth.is_empty() {
            return Ok(None);
        }
        let grid = self.grid()?;
        let params = self.params()?;
        let atoms = self
            .ground_truth
            .iter()
            .map(|a| Ok((a.intensity, a.curve(&grid)?)))
            .collect::<Result<Vec<_>>>()?;
        SparseMeasure::from_intensities(params, atoms).map(Some)
    }

    /// Loads or synthesizes the (possibly noisy) measurements.
    pub fn measurements(&self) -> Result<Measurements> {
        let schedule = self.schedule()?;
        let clean = match &self.data {
            Some(p) => {
                let m: Measurements = serde_json::from_str(&fs::read_to_string(self.resolve(p))?)?;
                m.check_schedule(&schedule)?;
                m
            }
            None => {
                let truth = self
                    .ground_truth()?
                    .expect("validated: ground truth present");
                synthesize(&truth, &ForwardOperator::new(schedule))?
            }
        };
        match self.noise {
            Some(n) if n.level > 0.0 => add_noise(&clean, n.level, n.seed),
            _ => Ok(clean),
        }
    }

    pub fn problem(&self) -> Result<Problem> {
        Problem::new(
            self.grid()?,
            self.schedule()?,
            self.measurements()?,
            self.params()?,
        )
    }
}

/// `||a - b||_{L^2(0,1)}` for piecewise-linear curves on the same grid.
pub fn curve_l2_distance(a: &Curve, b: &Curve) -> f64 {
    let n = a.num_nodes();
    let h = 1.0 / (n - 1) as f64;
    let diff = |i: usize| [a.node(i)[0] - b.node(i)[0], a.node(i)[1] - b.node(i)[1]];
    l2_of(n, h, diff)
}

fn l2_of(n: usize, h: f64, f: impl Fn(usize) -> Point) -> f64 {
    let mut s = 0.0;
    for i in 0..n - 1 {
        let (p, q) = (f(i), f(i + 1));
        s += h
            * (p[0] * p[0] + p[0] * q[0] + q[0] * q[0] + p[1] * p[1] + p[1] * q[1] + q[1] * q[1])
            / 3.0;
    }
    s.sqrt()
}

/// `D(truth, recon) = ||truth - recon||_{L^2} / ||truth||_{L^2}`.
pub fn curve_discrepancy(truth: &Curve, recon: &Curve) -> f64 {
    let n = truth.num_nodes();
    let norm = l2_of(n, 1.0 / (n - 1) as f64, |i| truth.node(i));
    curve_l2_distance(truth, recon) / norm
}

/// `1/(T+1) sum_i |truth(t_i) - recon(t_i)|`.
pub fn mean_position_error(truth: &Curve, recon: &Curve) -> f64 {
    let n = truth.num_nodes();
    (0..n)
        .map(|i| crate::geometry::dist(truth.node(i), recon.node(i)))
        .sum::<f64>()
        / n as f64
}

/// Share of the largest intensity below which an unmatched atom is an artifact.
pub const ARTIFACT_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMatch {
    pub truth: usize,
    pub recon: usize,
    pub discrepancy: f64,
    pub mean_position_error: f64,
    pub truth_intensity: f64,
    pub recon_intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub matches: Vec<CurveMatch>,
    pub unmatched_truth: Vec<usize>,
    pub unmatched_recon: Vec<usize>,
    pub artifacts: Vec<usize>,
}

/// Greedy minimal-discrepancy assignment of reconstructed atoms to true
/// atoms. Atoms above the artifact threshold are matched first.
pub fn match_curves(recon: &SparseMeasure, truth: &SparseMeasure) -> Matching {
    let ri = recon.intensities();
    let ti = truth.intensities();
    let imax = ri.iter().cloned().fold(0.0, f64::max);
    let significant: Vec<bool> = ri.iter().map(|&i| i >= ARTIFACT_FRACTION * imax).collect();
    let mut used_r = vec![false; recon.len()];
    let mut used_t = vec![false; truth.len()];
    let mut matches = Vec::new();
    for pass_significant in [true, false] {
        let mut pairs = Vec::new();
        for (t, ta) in truth.atoms().iter().enumerate() {
            for (r, ra) in recon.atoms().iter().enumerate() {
                if significant[r] == pass_significant {
                    pairs.push((curve_discrepancy(&ta.curve, &ra.curve), t, r));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (d, t, r) in pairs {
            if used_t[t] || used_r[r] {
                continue;
            }
            used_t[t] = true;
            used_r[r] = true;
            matches.push(CurveMatch {
                truth: t,
                recon: r,
                discrepancy: d,
                mean_position_error: mean_position_error(
                    &truth.atoms()[t].curve,
                    &recon.atoms()[r].curve,
                ),
                truth_intensity: ti[t],
                recon_intensity: ri[r],
            });
        }
    }
    matches.sort_by_key(|m| m.truth);
    let unmatched_truth = (0..truth.len()).filter(|&t| !used_t[t]).collect();
    let unmatched_recon = (0..recon.len())
        .filter(|&r| !used_r[r] && significant[r])
        .collect();
    let artifacts = (0..recon.len())
        .filter(|&r| !used_r[r] && !significant[r])
        .collect();
    Matching {
        matches,
        unmatched_truth,
        unmatched_recon,
        artifacts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSummary {
    pub weight: f64,
    pub intensity: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub termination: String,
    pub iterations: usize,
    pub final_objective: f64,
    pub final_gap: f64,
    pub m0: f64,
    pub relative_residual: f64,
    pub atoms: Vec<AtomSummary>,
    pub matching: Option<Matching>,
    pub max_first_order_violation: f64,
    pub residual_below_gap_fraction: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: SolveReport,
    pub summary: Summary,
    pub output_dir: PathBuf,
}

/// Command-line overrides of configuration values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.output_dir {
            self.output_dir = Some(d.clone());
        }
        if let Some(s) = o.seed {
            self.solver.seed = s;
        }
        if let Some(m) = o.mode {
            self.solver.mode = m;
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        match &self.output_dir {
            Some(d) if d.is_absolute() => d.clone(),
            Some(d) => std::env::current_dir().unwrap_or_default().join(d),
            None => PathBuf::from("out").join(&self.name),
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Writes one backprojection raster per requested time.
pub fn write_backprojections(
    cfg: &ExperimentConfig,
    problem: &Problem,
    dir: &Path,
    times: &[usize],
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    times
        .iter()
        .map(|&i| {
            let r = backprojection_raster(
                problem.operator(),
                problem.data(),
                i,
                cfg.raster_resolution,
            )?;
            let path = dir.join(format!("backprojection_{i:04}.pgm"));
            r.write_pgm(&path)?;
            Ok(path)
        })
        .collect()
}

pub fn summarize(
    cfg: &ExperimentConfig,
    problem: &Problem,
    report: &SolveReport,
) -> Result<Summary> {
    let truth = cfg.ground_truth()?;
    let mu = &report.measure;
    Ok(Summary {
        name: cfg.name.clone(),
        termination: report.termination.as_str().to_string(),
        iterations: report.iterations(),
        final_objective: report.final_objective(),
        final_gap: report.final_gap(),
        m0: problem.m0(),
        relative_residual: problem.relative_residual(mu)?,
        atoms: mu
            .weights()
            .into_iter()
            .zip(mu.intensities())
            .map(|(weight, intensity)| AtomSummary { weight, intensity })
            .collect(),
        matching: truth.map(|t| match_curves(mu, &t)),
        max_first_order_violation: report.max_first_order_violation(),
        residual_below_gap_fraction: report.residual_below_gap_fraction(),
        wallclock_s: report.history.last().map_or(0.0, |h| h.wallclock_s),
    })
}

/// Synthesizes data, solves, and writes `recon.json`, `convergence.csv`,
/// `summary.json` and the requested backprojection rasters.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let problem = cfg.problem()?;
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir)?;
    write_backprojections(cfg, &problem, &dir, &cfg.backprojection_times)?;
    let report = solve(&problem, &cfg.solver)?;
    let recon: MeasureJson = report.measure.to_json();
    write_json(&dir.join("recon.json"), &recon)?;
    let mut csv = Vec::new();
    write_convergence_csv(&report.history, &mut csv)?;
    fs::write(dir.join("convergence.csv"), csv)?;
    let summary = summarize(cfg, &problem, &report)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(RunOutcome {
        report,
        summary,
        output_dir: dir,
    })
}

/// Writes `data.json` (and `ground_truth.json` when present) without solving.
pub fn synth(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir)?;
    let data = cfg.measurements()?;
    write_json(&dir.join("data.json"), &data)?;
    if let Some(t) = cfg.ground_truth()? {
        write_json(&dir.join("ground_truth.json"), &t.to_json())?;
    }
    Ok(dir)
}

/// Exit status for a finished run.
pub fn exit_code(t: Termination) -> i32 {
    t.exit_code()
}
