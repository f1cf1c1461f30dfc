//! Figure-grade tables: stage curves, robustness sweeps and magnitude heatmaps.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::calibration::{
    nmse_db, run_multistage, state_driven_monitor, CalibrationTrace, GradientSettings, MonitorLog, MonitorSettings,
    SimulatedPilots, SimulatedStream, StagePlan,
};
use crate::error::{Result, SimError};
use crate::geometry::{sample_errors, ErrorBounds};
use crate::matrix::ComplexMatrix;
use crate::propagation::PropagationSet;
use crate::scenario::{ErrorSpec, ScenarioFile};
use crate::seeds::{derive, Stream};

/// One row of the long-format stage curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCurveRow {
    pub seed: u64,
    pub stage: usize,
    pub matrix_name: String,
    pub nmse_db: f64,
    pub loss_final: f64,
    pub step_size: f64,
}

pub const STAGE_CURVE_HEADER: [&str; 6] = ["seed", "stage", "matrix_name", "nmse_db", "loss_final", "step_size"];

/// Stage-major, then matrix order. Stage 0 is the uncalibrated baseline.
pub fn stage_curve(trace: &CalibrationTrace, seed: u64) -> Vec<StageCurveRow> {
    let mut rows = Vec::with_capacity(trace.stages.len() * trace.matrix_names.len());
    for rec in &trace.stages {
        for (name, &nmse) in trace.matrix_names.iter().zip(&rec.nmse_db) {
            rows.push(StageCurveRow {
                seed,
                stage: rec.stage,
                matrix_name: name.clone(),
                nmse_db: nmse,
                loss_final: rec.loss_final,
                step_size: rec.step_size,
            });
        }
    }
    rows
}

fn csv_err(e: csv::Error) -> SimError {
    SimError::Io(e.to_string())
}

/// Shortest round-trip representation.
fn num(x: f64) -> String {
    format!("{x:e}")
}

pub fn write_stage_curve_csv<W: Write>(rows: &[StageCurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STAGE_CURVE_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.stage.to_string(),
            r.matrix_name.clone(),
            num(r.nmse_db),
            num(r.loss_final),
            num(r.step_size),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stage_curve_csv<R: Read>(input: R) -> Result<Vec<StageCurveRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(STAGE_CURVE_HEADER) {
        return Err(SimError::Parse(format!("unexpected stage curve header {header:?}")));
    }
    rdr.deserialize().map(|r| r.map_err(|e| SimError::Parse(e.to_string()))).collect()
}

/// Run metadata written next to a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub scenario: String,
    pub scenario_hash: String,
    pub master_seed: u64,
    pub error_seed: u64,
    pub plan: StagePlan,
    pub settings: GradientSettings,
    pub matrix_names: Vec<String>,
    /// Arithmetic mean over interlayer matrices of the per-matrix dB reduction.
    pub mean_interlayer_reduction_db: f64,
    /// Reduction of the mean (linear) interlayer NMSE ratio, in dB.
    pub interlayer_reduction_of_mean_db: f64,
    pub iterations_per_stage: Vec<usize>,
    pub diverged_stages: Vec<usize>,
}

impl TraceMetadata {
    pub fn new(trace: &CalibrationTrace, scenario: &ScenarioFile, master_seed: u64) -> Self {
        let idx = trace.interlayer_indices();
        let red = trace.reductions_db();
        let mean_db = mean(idx.iter().map(|&i| red[i]));
        let lin = |stage: usize| mean(idx.iter().map(|&i| 10f64.powf(trace.nmse(stage, i) / 10.0)));
        let last = trace.stages.len() - 1;
        Self {
            scenario: scenario.name.clone(),
            scenario_hash: scenario.hash(),
            master_seed,
            error_seed: derive(master_seed, Stream::Errors, 0),
            plan: trace.plan.clone(),
            settings: trace.settings.clone(),
            matrix_names: trace.matrix_names.clone(),
            mean_interlayer_reduction_db: mean_db,
            interlayer_reduction_of_mean_db: 10.0 * (lin(0) / lin(last)).log10(),
            iterations_per_stage: trace.stages.iter().map(|s| s.iterations).collect(),
            diverged_stages: trace.stages.iter().filter(|s| s.diverged).map(|s| s.stage).collect(),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Sorted-copy median (mean of the middle pair for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Calibrates one seed of a scenario with its own stage plan.
pub fn calibrate_seed(
    scenario: &ScenarioFile,
    seed: u64,
    mut on_stage: impl FnMut(&crate::calibration::StageRecord),
) -> Result<(CalibrationTrace, PropagationSet, PropagationSet)> {
    let model = scenario.model()?;
    let ideal = model.ideal_set()?;
    let practical = model.realize(&scenario.error_state(seed))?;
    let mut source = SimulatedPilots::new(practical.clone(), scenario.stack.clone(), seed).with_snr(scenario.pilots.snr_db);
    source.pilot_symbol = scenario.pilots.pilot_symbol;
    source.repeat_schedule = scenario.pilots.repeat_schedule;
    let trace = run_multistage(&ideal, &practical, &mut source, &scenario.stages, &scenario.gradient, &mut on_stage)?;
    Ok((trace, ideal, practical))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweptParameter {
    #[serde(rename = "e_i")]
    EI,
    #[serde(rename = "e_v")]
    EV,
    #[serde(rename = "e_p")]
    EP,
}

impl SweptParameter {
    pub fn name(self) -> &'static str {
        match self {
            Self::EI => "e_i",
            Self::EV => "e_v",
            Self::EP => "e_p",
        }
    }

    /// Bounds with only this parameter nonzero.
    pub fn bounds(self, value: f64) -> ErrorBounds {
        let mut b = ErrorBounds::default();
        match self {
            Self::EI => b.e_i = value,
            Self::EV => b.e_v = value,
            Self::EP => b.e_p = value,
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweptParameter,
    /// Bound values in SI units (meters or radians).
    pub grid: Vec<f64>,
    pub slots: usize,
    pub seeds_per_point: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(SimError::config("sweep.grid", "must not be empty"));
        }
        if self.grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SimError::config("sweep.grid", "values must be finite and >= 0"));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SimError::config("sweep.grid", "must be strictly increasing"));
        }
        if self.slots < 1 {
            return Err(SimError::config("sweep.slots", "must be >= 1"));
        }
        if self.seeds_per_point < 1 {
            return Err(SimError::config("sweep.seeds_per_point", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-seed outcome at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub grid_index: usize,
    pub bound: f64,
    pub seed: u64,
    pub matrix_names: Vec<String>,
    pub uncalibrated_db: Vec<f64>,
    pub calibrated_db: Vec<f64>,
    /// Means over the interlayer matrices.
    pub mean_uncalibrated_db: f64,
    pub mean_calibrated_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub bound: f64,
    pub mean_uncalibrated_db: f64,
    pub mean_calibrated_db: f64,
    pub min_calibrated_db: f64,
    pub median_calibrated_db: f64,
    pub max_calibrated_db: f64,
    pub min_uncalibrated_db: f64,
    pub median_uncalibrated_db: f64,
    pub max_uncalibrated_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub parameter: SweptParameter,
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
}

/// Seed of sweep run `(grid_index, k)`.
pub fn sweep_seed(master: u64, grid_index: usize, k: usize) -> u64 {
    derive(master, Stream::Sweep, ((grid_index as u64) << 20) | k as u64)
}

fn sweep_job(scenario: &ScenarioFile, spec: &SweepSpec, gi: usize, k: usize, master: u64) -> Result<SweepRow> {
    let bound = spec.grid[gi];
    let seed = sweep_seed(master, gi, k);
    let mut sc = scenario.clone();
    sc.errors = ErrorSpec::Bounds(spec.parameter.bounds(bound));
    sc.stages = StagePlan::single(spec.slots);
    let (trace, _, _) = calibrate_seed(&sc, seed, |_| {})?;
    let idx = trace.interlayer_indices();
    let first = trace.stages[0].nmse_db.clone();
    let last = trace.stages[trace.stages.len() - 1].nmse_db.clone();
    Ok(SweepRow {
        grid_index: gi,
        bound,
        seed,
        matrix_names: trace.matrix_names.clone(),
        mean_uncalibrated_db: mean(idx.iter().map(|&i| first[i])),
        mean_calibrated_db: mean(idx.iter().map(|&i| last[i])),
        uncalibrated_db: first,
        calibrated_db: last,
    })
}

/// Runs single-stage calibration at every grid point for `seeds_per_point` error
/// draws. Rows come back ordered by `(grid index, seed index)` whatever `workers` is.
pub fn robustness_sweep(
    spec: &SweepSpec,
    scenario: &ScenarioFile,
    master_seed: u64,
    workers: usize,
) -> Result<SweepTable> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.grid.len())
        .flat_map(|g| (0..spec.seeds_per_point).map(move |k| (g, k)))
        .collect();
    let rows = run_jobs(&jobs, workers, |&(g, k)| sweep_job(scenario, spec, g, k, master_seed))?;
    let points = spec
        .grid
        .iter()
        .enumerate()
        .map(|(g, &bound)| {
            let pre: Vec<f64> = rows.iter().filter(|r| r.grid_index == g).map(|r| r.mean_uncalibrated_db).collect();
            let post: Vec<f64> = rows.iter().filter(|r| r.grid_index == g).map(|r| r.mean_calibrated_db).collect();
            let fold = |v: &[f64], init: f64, f: fn(f64, f64) -> f64| v.iter().copied().fold(init, f);
            SweepPoint {
                bound,
                mean_uncalibrated_db: mean(pre.iter().copied()),
                mean_calibrated_db: mean(post.iter().copied()),
                min_calibrated_db: fold(&post, f64::INFINITY, f64::min),
                median_calibrated_db: median(&post),
                max_calibrated_db: fold(&post, f64::NEG_INFINITY, f64::max),
                min_uncalibrated_db: fold(&pre, f64::INFINITY, f64::min),
                median_uncalibrated_db: median(&pre),
                max_uncalibrated_db: fold(&pre, f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(SweepTable {
        parameter: spec.parameter,
        rows,
        points,
    })
}

/// Maps `f` over `jobs`, in parallel when enabled, returning results in job order.
pub fn run_jobs<J: Sync, T: Send>(
    jobs: &[J],
    workers: usize,
    f: impl Fn(&J) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        if workers > 1 {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| SimError::Io(e.to_string()))?;
            return pool.install(|| jobs.par_iter().map(&f).collect());
        }
    }
    let _ = workers;
    jobs.iter().map(f).collect()
}

/// Writes the per-seed sweep table.
pub fn write_sweep_rows_csv<W: Write>(table: &SweepTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let names = table.rows.first().map(|r| r.matrix_names.clone()).unwrap_or_default();
    let mut header = vec!["parameter".to_string(), "bound".into(), "seed".into()];
    header.extend(names.iter().map(|n| format!("uncalibrated_db_{n}")));
    header.extend(names.iter().map(|n| format!("calibrated_db_{n}")));
    header.push("mean_uncalibrated_db".into());
    header.push("mean_calibrated_db".into());
    w.write_record(&header).map_err(csv_err)?;
    for r in &table.rows {
        let mut rec = vec![table.parameter.name().to_string(), num(r.bound), r.seed.to_string()];
        rec.extend(r.uncalibrated_db.iter().map(|&v| num(v)));
        rec.extend(r.calibrated_db.iter().map(|&v| num(v)));
        rec.push(num(r.mean_uncalibrated_db));
        rec.push(num(r.mean_calibrated_db));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one summary row per grid point.
pub fn write_sweep_summary_csv<W: Write>(table: &SweepTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "parameter",
        "bound",
        "mean_uncalibrated_db",
        "mean_calibrated_db",
        "min_uncalibrated_db",
        "median_uncalibrated_db",
        "max_uncalibrated_db",
        "min_calibrated_db",
        "median_calibrated_db",
        "max_calibrated_db",
        "seeds",
    ])
    .map_err(csv_err)?;
    for (g, p) in table.points.iter().enumerate() {
        let seeds: Vec<String> = table
            .rows
            .iter()
            .filter(|r| r.grid_index == g)
            .map(|r| r.seed.to_string())
            .collect();
        w.write_record([
            table.parameter.name().to_string(),
            num(p.bound),
            num(p.mean_uncalibrated_db),
            num(p.mean_calibrated_db),
            num(p.min_uncalibrated_db),
            num(p.median_uncalibrated_db),
            num(p.max_uncalibrated_db),
            num(p.min_calibrated_db),
            num(p.median_calibrated_db),
            num(p.max_calibrated_db),
            seeds.join(" "),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Real, row-major matrix of magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealMatrix {
    pub fn magnitudes(m: &ComplexMatrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.entry_magnitudes(),
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    /// Space-separated rows, 12 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in 0..self.rows {
            let line: Vec<String> = self.data[r * self.cols..(r + 1) * self.cols]
                .iter()
                .map(|v| format!("{v:.11e}"))
                .collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        let mut cols = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| SimError::Parse(format!("{t}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if *cols.get_or_insert(vals.len()) != vals.len() {
                return Err(SimError::Parse("ragged matrix file".into()));
            }
            data.extend(vals);
            rows += 1;
        }
        Ok(Self {
            rows,
            cols: cols.unwrap_or(0),
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapBundle {
    /// Interlayer matrix index (0 = first).
    pub matrix_index: usize,
    pub matrix_name: String,
    pub ideal: RealMatrix,
    pub practical: RealMatrix,
    pub calibrated: RealMatrix,
    /// `|practical - calibrated|` entrywise.
    pub difference: RealMatrix,
    /// `||practical| - |calibrated||` entrywise.
    pub magnitude_difference: RealMatrix,
    /// `|practical - ideal|` entrywise, the uncalibrated counterpart of `difference`.
    pub uncalibrated_difference: RealMatrix,
}

impl HeatmapBundle {
    /// `max |practical - calibrated| / max |practical - ideal|`.
    pub fn residual_ratio(&self) -> f64 {
        self.difference.max() / self.uncalibrated_difference.max()
    }

    /// Same ratio for the magnitude-only difference.
    pub fn magnitude_residual_ratio(&self) -> f64 {
        let uncal = self
            .practical
            .data
            .iter()
            .zip(&self.ideal.data)
            .map(|(p, i)| (p - i).abs())
            .fold(0.0, f64::max);
        self.magnitude_difference.max() / uncal
    }

    pub fn panels(&self) -> [(&'static str, &RealMatrix); 6] {
        [
            ("ideal", &self.ideal),
            ("practical", &self.practical),
            ("calibrated", &self.calibrated),
            ("difference", &self.difference),
            ("magnitude_difference", &self.magnitude_difference),
            ("uncalibrated_difference", &self.uncalibrated_difference),
        ]
    }
}

/// Interlayer matrix with the largest uncalibrated NMSE.
pub fn worst_interlayer(ideal: &PropagationSet, practical: &PropagationSet) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, (a, b)) in ideal.interlayer.iter().zip(&practical.interlayer).enumerate() {
        let v = nmse_db(a, b)?;
        if v > best.1 {
            best = (i, v);
        }
    }
    Ok(best.0)
}

/// Magnitude panels of one interlayer matrix; `which = None` picks [`worst_interlayer`].
pub fn heatmap_bundle(
    ideal: &PropagationSet,
    practical: &PropagationSet,
    calibrated: &PropagationSet,
    which: Option<usize>,
) -> Result<HeatmapBundle> {
    let n = ideal.interlayer.len();
    let i = match which {
        Some(i) => i,
        None => worst_interlayer(ideal, practical)?,
    };
    if i >= n || practical.interlayer.len() != n || calibrated.interlayer.len() != n {
        return Err(SimError::IndexOutOfRange { index: i, len: n });
    }
    let (id, pr, ca) = (&ideal.interlayer[i], &practical.interlayer[i], &calibrated.interlayer[i]);
    let practical_mag = RealMatrix::magnitudes(pr);
    let calibrated_mag = RealMatrix::magnitudes(ca);
    let magnitude_difference = RealMatrix {
        rows: pr.rows(),
        cols: pr.cols(),
        data: practical_mag.data.iter().zip(&calibrated_mag.data).map(|(a, b)| (a - b).abs()).collect(),
    };
    Ok(HeatmapBundle {
        matrix_index: i,
        matrix_name: format!("W{}", i + 1),
        ideal: RealMatrix::magnitudes(id),
        practical: practical_mag,
        calibrated: calibrated_mag,
        difference: RealMatrix::magnitudes(&pr.sub(ca)?),
        magnitude_difference,
        uncalibrated_difference: RealMatrix::magnitudes(&pr.sub(id)?),
    })
}

/// Moves `estimate` along its exact per-atom gauge, `(D W_{l-1}, W_l D^-1)` at every
/// interface between estimated matrices, to sit as close as possible to `reference`
/// (relative Frobenius distance per matrix). The pilot response is unchanged; this is a
/// diagnostic for separating gauge freedom from genuine estimation error.
pub fn gauge_aligned(estimate: &PropagationSet, reference: &PropagationSet) -> PropagationSet {
    use crate::matrix::C64;
    let mut x = estimate.clone();
    let blocks = x.interlayer.len() + 1;
    fn get(s: &PropagationSet, b: usize) -> &ComplexMatrix {
        if b == 0 {
            &s.ue
        } else {
            &s.interlayer[b - 1]
        }
    }
    let weight: Vec<f64> = (0..blocks).map(|b| 1.0 / get(reference, b).norm_sqr().max(f64::MIN_POSITIVE)).collect();
    for _ in 0..8 {
        for k in 1..blocks {
            for a in 0..x.atoms_per_layer() {
                for _ in 0..4 {
                    // Gauss-Newton update of the scale d on row `a` of block k-1 and column `a` of block k.
                    let mut num = C64::new(0.0, 0.0);
                    let mut den = 0.0;
                    {
                        let (pa, pb) = (get(&x, k - 1), get(&x, k));
                        let (ta, tb) = (get(reference, k - 1), get(reference, k));
                        for j in 0..pa.cols() {
                            let r = pa[(a, j)];
                            num += weight[k - 1] * r.conj() * (r - ta[(a, j)]);
                            den += weight[k - 1] * r.norm_sqr();
                        }
                        for i in 0..pb.rows() {
                            let c = pb[(i, a)];
                            num -= weight[k] * c.conj() * (c - tb[(i, a)]);
                            den += weight[k] * c.norm_sqr();
                        }
                    }
                    if den == 0.0 {
                        break;
                    }
                    let d = C64::new(1.0, 0.0) - num / den;
                    if k == 1 {
                        x.ue[(a, 0)] *= d;
                    } else {
                        let w = &mut x.interlayer[k - 2];
                        for j in 0..w.cols() {
                            w[(a, j)] *= d;
                        }
                    }
                    let w = &mut x.interlayer[k - 1];
                    for i in 0..w.rows() {
                        w[(i, a)] /= d;
                    }
                }
            }
        }
    }
    x
}

/// Outcome of a scripted drift run: periodic calibration, then monitoring while the
/// hidden errors jump once.
#[derive(Debug, Clone)]
pub struct DriftRun {
    pub trace: CalibrationTrace,
    pub log: MonitorLog,
    pub change_at: Option<usize>,
    pub settings: MonitorSettings,
}

/// Index of the post-change error draw within the monitor stream.
const DRIFT_DRAW: u64 = 1 << 41;

pub fn drift_run(scenario: &ScenarioFile, seed: u64) -> Result<DriftRun> {
    let spec = scenario
        .monitor
        .as_ref()
        .ok_or_else(|| SimError::config("monitor", "scenario has no monitor section"))?;
    let model = scenario.model()?;
    let (trace, ideal, practical) = calibrate_seed(scenario, seed, |_| {})?;
    let mut stream = SimulatedStream::new(scenario.stack.clone(), practical, spec.known_slots, seed)
        .with_snr(scenario.pilots.snr_db);
    if let Some(at) = spec.change_at {
        let bounds = match (&spec.change_bounds, scenario.bounds()) {
            (Some(b), _) | (None, Some(b)) => *b,
            (None, None) => return Err(SimError::config("monitor.change_bounds", "required with explicit errors")),
        };
        let after = sample_errors(&bounds, scenario.stack.num_layers, derive(seed, Stream::Monitor, DRIFT_DRAW));
        stream = stream.with_change(at, model.realize(&after)?);
    }
    let log = state_driven_monitor(&trace.estimate, &mut stream, &ideal, &spec.settings, &scenario.gradient)?;
    Ok(DriftRun {
        trace,
        log,
        change_at: spec.change_at,
        settings: spec.settings.clone(),
    })
}

pub fn write_events_csv<W: Write>(log: &MonitorLog, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["known_slot", "slot", "indicator_before", "indicator_after", "recalibration_loss"])
        .map_err(csv_err)?;
    for e in &log.events {
        w.write_record([
            e.known_slot.to_string(),
            e.slot.to_string(),
            num(e.indicator_before),
            num(e.indicator_after),
            num(e.recalibration_loss),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_indicator_csv<W: Write>(log: &MonitorLog, data_per_known: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["known_slot", "slot", "indicator"]).map_err(csv_err)?;
    for (k, v) in log.indicator.iter().enumerate() {
        w.write_record([k.to_string(), (k * (data_per_known + 1)).to_string(), num(*v)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{StageRecord, NMSE_FLOOR_DB};
    use crate::matrix::C64;
    use crate::scenario::{desk_tiny, paper_fig5};
    use crate::seeds::splitmix64;

    fn fake_trace(stages: usize, names: &[&str]) -> CalibrationTrace {
        let s = desk_tiny();
        let ideal = s.model().unwrap().ideal_set().unwrap();
        let mut r = 5u64;
        let mut next = || {
            r = splitmix64(r);
            -((r >> 11) as f64 / (1u64 << 53) as f64) * 60.0
        };
        CalibrationTrace {
            matrix_names: names.iter().map(|n| n.to_string()).collect(),
            stages: (0..=stages)
                .map(|st| StageRecord {
                    stage: st,
                    nmse_db: names.iter().map(|_| next()).collect(),
                    loss_final: 10f64.powf(next() / 10.0),
                    step_size: 0.05 * 0.8f64.powi(st as i32),
                    iterations: st,
                    loss_history: vec![],
                    diverged: false,
                })
                .collect(),
            estimate: ideal,
            plan: StagePlan::multi(stages, 100),
            settings: GradientSettings::default(),
        }
    }

    #[test]
    fn ten_stages_four_matrices_is_44_rows() {
        let trace = fake_trace(10, &["h", "W1", "W2", "W3"]);
        let rows = stage_curve(&trace, 9);
        assert_eq!(rows.len(), 44);
        assert_eq!(rows[0].stage, 0);
        for r in &rows {
            let m = trace.matrix_names.iter().position(|n| *n == r.matrix_name).unwrap();
            assert_eq!(r.nmse_db, trace.nmse(r.stage, m));
            assert_eq!(r.seed, 9);
        }
    }

    #[test]
    fn stage_curve_csv_round_trip() {
        let rows = stage_curve(&fake_trace(10, &["h", "W1", "W2", "W3"]), 3);
        let mut buf = Vec::new();
        write_stage_curve_csv(&rows, &mut buf).unwrap();
        let back = read_stage_curve_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.matrix_name, b.matrix_name);
            assert!((a.nmse_db - b.nmse_db).abs() <= 1e-12 * a.nmse_db.abs());
            assert!((a.loss_final - b.loss_final).abs() <= 1e-12 * a.loss_final.abs());
        }
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("seed,stage,matrix_name,nmse_db,loss_final,step_size\n"));
        assert!(read_stage_curve_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn metadata_means() {
        let trace = fake_trace(2, &["h", "W1", "W2"]);
        let meta = TraceMetadata::new(&trace, &desk_tiny(), 4);
        let red = trace.reductions_db();
        assert!((meta.mean_interlayer_reduction_db - (red[1] + red[2]) / 2.0).abs() < 1e-12);
        assert_eq!(meta.scenario_hash.len(), 64);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn perfect_calibration_has_zero_difference() {
        let s = paper_fig5();
        let model = s.model().unwrap();
        let ideal = model.ideal_set().unwrap();
        let practical = model.realize(&s.error_state(1)).unwrap();
        let hb = heatmap_bundle(&ideal, &practical, &practical, None).unwrap();
        assert_eq!((hb.ideal.rows, hb.ideal.cols), (9, 9));
        assert!(hb.difference.data.iter().all(|&v| v == 0.0));
        assert!(hb.magnitude_difference.data.iter().all(|&v| v == 0.0));
        assert_eq!(hb.residual_ratio(), 0.0);
        assert_eq!(hb.matrix_index, worst_interlayer(&ideal, &practical).unwrap());
        let err = heatmap_bundle(&ideal, &practical, &practical, Some(3)).unwrap_err();
        assert_eq!(err, SimError::IndexOutOfRange { index: 3, len: 3 });
    }

    #[test]
    fn heatmap_text_keeps_twelve_digits() {
        let m = RealMatrix {
            rows: 2,
            cols: 2,
            data: vec![1.234567890123456e-3, 0.0, 7.0, 9.87654321098765e5],
        };
        let text = m.to_text();
        assert_eq!(text.lines().next().unwrap(), "1.23456789012e-3 0.00000000000e0");
        let back = RealMatrix::from_text(&text).unwrap();
        for (a, b) in m.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 5e-12 * a.abs());
        }
        assert!(RealMatrix::from_text("1 2\n3\n").is_err());
    }

    #[test]
    fn sweep_rows_are_ordered_and_worker_independent() {
        let mut s = desk_tiny();
        s.stages = StagePlan::single(40);
        let spec = SweepSpec {
            parameter: SweptParameter::EV,
            grid: vec![0.0, 1e-4, 4e-4],
            slots: 40,
            seeds_per_point: 2,
        };
        let a = robustness_sweep(&spec, &s, 3, 1).unwrap();
        let b = robustness_sweep(&spec, &s, 3, 3).unwrap();
        assert_eq!(a.rows, b.rows);
        let order: Vec<(usize, u64)> = a.rows.iter().map(|r| (r.grid_index, r.seed)).collect();
        let expect: Vec<(usize, u64)> = (0..3).flat_map(|g| (0..2).map(move |k| (g, sweep_seed(3, g, k)))).collect();
        assert_eq!(order, expect);
        assert_eq!(a.points[0].mean_uncalibrated_db, NMSE_FLOOR_DB);
        assert!(a.points[2].mean_uncalibrated_db > a.points[1].mean_uncalibrated_db);
        for p in &a.points[1..] {
            assert!(p.mean_calibrated_db < p.mean_uncalibrated_db);
            assert!(p.min_calibrated_db <= p.median_calibrated_db && p.median_calibrated_db <= p.max_calibrated_db);
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        write_sweep_rows_csv(&a, &mut x).unwrap();
        write_sweep_rows_csv(&b, &mut y).unwrap();
        assert_eq!(x, y);
        let mut summary = Vec::new();
        write_sweep_summary_csv(&a, &mut summary).unwrap();
        assert_eq!(String::from_utf8(summary).unwrap().lines().count(), 4);
    }

    #[test]
    fn sweep_spec_rules() {
        let ok = SweepSpec {
            parameter: SweptParameter::EP,
            grid: vec![0.0, 1.0],
            slots: 1,
            seeds_per_point: 1,
        };
        ok.validate().unwrap();
        for grid in [vec![], vec![1.0, 1.0], vec![-1.0, 0.0], vec![2.0, 1.0]] {
            assert!(SweepSpec { grid, ..ok.clone() }.validate().is_err());
        }
        assert_eq!(SweptParameter::EV.bounds(2.0), ErrorBounds { e_i: 0.0, e_v: 2.0, e_p: 0.0 });
    }

    #[test]
    fn gauge_alignment_undoes_a_known_gauge() {
        let s = desk_tiny();
        let model = s.model().unwrap();
        let truth = model.realize(&s.error_state(2)).unwrap();
        let mut moved = truth.clone();
        let d = [C64::from_polar(1.1, 0.3), C64::from_polar(0.9, -0.2), C64::from_polar(1.05, 1.0), C64::from_polar(0.97, 0.1)];
        for (a, &da) in d.iter().enumerate() {
            moved.ue[(a, 0)] *= da;
            for i in 0..4 {
                moved.interlayer[0][(i, a)] /= da;
            }
        }
        assert!(nmse_db(&moved.interlayer[0], &truth.interlayer[0]).unwrap() > -20.0);
        let back = gauge_aligned(&moved, &truth);
        assert!(nmse_db(&back.interlayer[0], &truth.interlayer[0]).unwrap() < -100.0);
        assert!(nmse_db(&back.ue, &truth.ue).unwrap() < -100.0);
    }
}
