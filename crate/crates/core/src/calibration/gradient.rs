//! Gradient calibration: one stage of descent and the multi-stage protocol.

use serde::{Deserialize, Serialize};

use super::objective::{nmse_db, PilotObjective, SetGradient};
use crate::error::{Result, SimError};
use crate::matrix::{ComplexMatrix, C64};
use crate::measurement::{generate_phase_schedule, measure, MeasurementSet, PilotPlan};
use crate::geometry::SimStackConfig;
use crate::propagation::PropagationSet;
use crate::seeds::{derive, Stream};

/// Loss growth (relative to the stage's starting loss) treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescentDirection {
    #[default]
    Steepest,
    /// Preconditioned Polak-Ribiere with automatic restart.
    ConjugateGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientSettings {
    /// Relative size of the first trial step of stage 1.
    pub step_size: f64,
    pub stage_decay: f64,
    pub max_iters_per_stage: usize,
    /// Tikhonov pull toward the ideal set, per matrix and relative to its norm.
    pub regularization_weight: f64,
    /// Stop once a step lowers the loss by less than this fraction.
    pub convergence_tol: f64,
    /// Backtracking (Armijo) search starting from the normalized step. Without it
    /// every iteration takes exactly the normalized step.
    pub line_search: bool,
    pub direction: DescentDirection,
    /// Also estimate the exit matrix instead of holding it at its ideal value.
    pub optimize_exit: bool,
}

impl Default for GradientSettings {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            stage_decay: 0.8,
            max_iters_per_stage: 200,
            regularization_weight: 0.0,
            convergence_tol: 1e-8,
            line_search: true,
            direction: DescentDirection::Steepest,
            optimize_exit: false,
        }
    }
}

impl GradientSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(SimError::config("gradient.step_size", "must be finite and > 0"));
        }
        if !(self.stage_decay > 0.0 && self.stage_decay <= 1.0) {
            return Err(SimError::config("gradient.stage_decay", "must lie in (0, 1]"));
        }
        if !(self.regularization_weight.is_finite() && self.regularization_weight >= 0.0) {
            return Err(SimError::config("gradient.regularization_weight", "must be finite and >= 0"));
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol > 0.0) {
            return Err(SimError::config("gradient.convergence_tol", "must be finite and > 0"));
        }
        Ok(())
    }

    /// Step size used by stage `stage` (1 based).
    pub fn stage_step(&self, stage: usize) -> f64 {
        self.step_size * self.stage_decay.powi(stage.saturating_sub(1) as i32)
    }
}

/// The matrices a stage is allowed to move, flattened into blocks:
/// `h`, `W_1..W_{L-1}`, and optionally `W_out`.
fn block_count(set: &PropagationSet, with_exit: bool) -> usize {
    set.interlayer.len() + 1 + usize::from(with_exit)
}

fn block(set: &PropagationSet, b: usize) -> &ComplexMatrix {
    let n = set.interlayer.len();
    match b {
        0 => &set.ue,
        _ if b <= n => &set.interlayer[b - 1],
        _ => &set.exit,
    }
}

fn block_mut(set: &mut PropagationSet, b: usize) -> &mut ComplexMatrix {
    let n = set.interlayer.len();
    match b {
        0 => &mut set.ue,
        _ if b <= n => &mut set.interlayer[b - 1],
        _ => &mut set.exit,
    }
}

fn gradient_blocks(g: SetGradient, with_exit: bool) -> Vec<ComplexMatrix> {
    let mut out = Vec::with_capacity(g.interlayer.len() + 2);
    out.push(g.ue);
    out.extend(g.interlayer);
    if with_exit {
        out.push(g.exit);
    }
    out
}

/// Loss (pilot residual plus optional pull toward `anchor`) over the selected blocks.
struct StageProblem<'a> {
    objective: PilotObjective,
    anchor: &'a PropagationSet,
    /// `||anchor block||^2`, used both for the pull and as the per-block preconditioner.
    scales: Vec<f64>,
    reg: f64,
    with_exit: bool,
}

impl<'a> StageProblem<'a> {
    fn new(
        start: &PropagationSet,
        anchor: &'a PropagationSet,
        measurements: &MeasurementSet,
        settings: &GradientSettings,
    ) -> Result<Self> {
        let objective = PilotObjective::new(start, measurements)?;
        let with_exit = settings.optimize_exit;
        if anchor.num_layers() != start.num_layers() {
            return Err(SimError::dimension("anchor layers", start.num_layers(), anchor.num_layers()));
        }
        let scales = (0..block_count(start, with_exit))
            .map(|b| {
                let s = block(anchor, b).norm_sqr();
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            objective,
            anchor,
            scales,
            reg: settings.regularization_weight,
            with_exit,
        })
    }

    fn penalty(&self, set: &PropagationSet) -> f64 {
        if self.reg == 0.0 {
            return 0.0;
        }
        (0..self.scales.len())
            .map(|b| {
                let d = block(set, b).sub(block(self.anchor, b)).expect("matching shapes");
                self.reg * d.norm_sqr() / self.scales[b]
            })
            .sum()
    }

    fn loss(&mut self, set: &PropagationSet) -> Result<f64> {
        Ok(self.objective.loss(set)? + self.penalty(set))
    }

    fn loss_and_gradient(&mut self, set: &PropagationSet) -> Result<(f64, Vec<ComplexMatrix>)> {
        let (data_loss, g) = self.objective.loss_and_gradient(set)?;
        let mut blocks = gradient_blocks(g, self.with_exit);
        if self.reg > 0.0 {
            for (b, gb) in blocks.iter_mut().enumerate() {
                let d = block(set, b).sub(block(self.anchor, b))?;
                gb.axpy_real(self.reg / self.scales[b], &d);
            }
        }
        Ok((data_loss + self.penalty(set), blocks))
    }

    fn precondition(&self, grad: &[ComplexMatrix]) -> Vec<ComplexMatrix> {
        grad.iter()
            .zip(&self.scales)
            .map(|(g, &s)| g.scaled(C64::new(-s, 0.0)))
            .collect()
    }

    /// Norm of a direction measured relative to each block's size.
    fn relative_norm(&self, dir: &[ComplexMatrix]) -> f64 {
        dir.iter()
            .zip(&self.scales)
            .map(|(d, &s)| d.norm_sqr() / s)
            .sum::<f64>()
            .sqrt()
    }

    fn step(&self, set: &PropagationSet, dir: &[ComplexMatrix], alpha: f64) -> PropagationSet {
        let mut next = set.clone();
        for (b, d) in dir.iter().enumerate() {
            block_mut(&mut next, b).axpy_real(alpha, d);
        }
        next
    }
}

/// `dL/dalpha` along `dir` for a conjugate gradient `grad`.
fn slope(grad: &[ComplexMatrix], dir: &[ComplexMatrix]) -> f64 {
    2.0 * grad.iter().zip(dir).map(|(g, d)| g.real_dot(d)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    /// Best iterate seen.
    pub estimate: PropagationSet,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Best-so-far loss after every iteration, starting with the initial loss.
    pub loss_history: Vec<f64>,
    pub iterations: usize,
    /// Relative step size the stage started from.
    pub step_size: f64,
    /// Set when the stage aborted because the loss blew up.
    pub divergence: Option<SimError>,
}

/// One gradient stage at the settings' base step, pulling toward `initial` when regularized.
pub fn run_gradient_stage(
    initial: &PropagationSet,
    measurements: &MeasurementSet,
    settings: &GradientSettings,
) -> Result<StageOutcome> {
    run_gradient_stage_with(initial, initial, measurements, settings, settings.step_size)
}

/// One gradient stage from `initial`, with `anchor` as the regularization target and
/// preconditioning reference, starting from relative step `step`.
pub fn run_gradient_stage_with(
    initial: &PropagationSet,
    anchor: &PropagationSet,
    measurements: &MeasurementSet,
    settings: &GradientSettings,
    step: f64,
) -> Result<StageOutcome> {
    settings.validate()?;
    if !(step.is_finite() && step > 0.0) {
        return Err(SimError::config("step", "must be finite and > 0"));
    }
    let mut problem = StageProblem::new(initial, anchor, measurements, settings)?;
    let mut x = initial.clone();
    let (mut loss, mut grad) = problem.loss_and_gradient(&x)?;
    let initial_loss = loss;
    let mut outcome = StageOutcome {
        estimate: x.clone(),
        initial_loss,
        final_loss: loss,
        loss_history: vec![loss],
        iterations: 0,
        step_size: step,
        divergence: None,
    };
    if !loss.is_finite() {
        outcome.divergence = Some(SimError::Diverged {
            loss,
            initial: initial_loss,
            iteration: 0,
        });
        return Ok(outcome);
    }
    let mut pgrad = problem.precondition(&grad);
    let mut dir = pgrad.clone();
    let mut alpha: Option<f64> = None;

    for it in 1..=settings.max_iters_per_stage {
        if loss == 0.0 {
            break;
        }
        let mut d_slope = slope(&grad, &dir);
        if !(d_slope < 0.0) {
            dir = pgrad.clone();
            d_slope = slope(&grad, &dir);
        }
        let dnorm = problem.relative_norm(&dir);
        if !(dnorm > 0.0 && dnorm.is_finite() && d_slope < 0.0) {
            break;
        }
        let base = *alpha.get_or_insert(step / dnorm);

        let (next, next_loss, a) = if settings.line_search {
            // Try twice the last accepted step, then halve until sufficient decrease.
            let mut a = if it == 1 { base } else { 2.0 * base };
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let cand = problem.step(&x, &dir, a);
                let l = problem.loss(&cand)?;
                if l.is_finite() && l <= loss + ARMIJO_C1 * a * d_slope {
                    accepted = Some((cand, l));
                    break;
                }
                a *= 0.5;
            }
            match accepted {
                Some((cand, l)) => (cand, l, a),
                None => break,
            }
        } else {
            let a = step / dnorm;
            let cand = problem.step(&x, &dir, a);
            let l = problem.loss(&cand)?;
            (cand, l, a)
        };

        if !next_loss.is_finite() || next_loss > DIVERGENCE_FACTOR * initial_loss {
            outcome.divergence = Some(SimError::Diverged {
                loss: next_loss,
                initial: initial_loss,
                iteration: it,
            });
            outcome.iterations = it;
            break;
        }
        if settings.line_search {
            alpha = Some(a);
        }
        let decrease = (loss - next_loss) / loss;
        let (l_new, g_new) = problem.loss_and_gradient(&next)?;
        let pg_new = problem.precondition(&g_new);
        dir = match settings.direction {
            DescentDirection::Steepest => pg_new.clone(),
            DescentDirection::ConjugateGradient => {
                // Preconditioned Polak-Ribiere, clipped at zero. `pgrad` holds -P g.
                let num: f64 = g_new
                    .iter()
                    .zip(pg_new.iter().zip(&pgrad))
                    .map(|(g, (pn, po))| -g.real_dot(&pn.sub(po).expect("same shape")))
                    .sum();
                let den: f64 = -grad.iter().zip(&pgrad).map(|(g, p)| g.real_dot(p)).sum::<f64>();
                let beta = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
                let mut d = pg_new.clone();
                for (di, old) in d.iter_mut().zip(&dir) {
                    di.axpy_real(beta, old);
                }
                d
            }
        };
        x = next;
        loss = l_new;
        grad = g_new;
        pgrad = pg_new;
        outcome.iterations = it;
        if loss < outcome.final_loss {
            outcome.final_loss = loss;
            outcome.estimate = x.clone();
        }
        outcome.loss_history.push(outcome.final_loss);
        if decrease.abs() < settings.convergence_tol {
            break;
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    SingleStage,
    #[default]
    MultiStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub num_stages: usize,
    pub slots_per_stage: usize,
    #[serde(default)]
    pub mode: StageMode,
}

impl StagePlan {
    pub fn single(slots: usize) -> Self {
        Self {
            num_stages: 1,
            slots_per_stage: slots,
            mode: StageMode::SingleStage,
        }
    }

    pub fn multi(num_stages: usize, slots_per_stage: usize) -> Self {
        Self {
            num_stages,
            slots_per_stage,
            mode: StageMode::MultiStage,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages < 1 {
            return Err(SimError::config("stages.num_stages", "must be >= 1"));
        }
        if self.slots_per_stage < 1 {
            return Err(SimError::config("stages.slots_per_stage", "must be >= 1"));
        }
        if self.mode == StageMode::SingleStage && self.num_stages != 1 {
            return Err(SimError::config("stages.num_stages", "single-stage mode requires exactly 1 stage"));
        }
        Ok(())
    }
}

/// Source of pilot measurements for calibration stages.
pub trait PilotSource {
    /// Fresh measurements for stage `stage` (1 based).
    fn acquire(&mut self, stage: usize, num_slots: usize) -> Result<MeasurementSet>;
}

/// Simulated pilots from a hidden practical system.
#[derive(Debug, Clone)]
pub struct SimulatedPilots {
    practical: PropagationSet,
    config: SimStackConfig,
    master_seed: u64,
    pub snr_db: Option<f64>,
    pub pilot_symbol: C64,
    /// Reuse stage 1's phase schedule in every stage.
    pub repeat_schedule: bool,
}

impl SimulatedPilots {
    pub fn new(practical: PropagationSet, config: SimStackConfig, master_seed: u64) -> Self {
        Self {
            practical,
            config,
            master_seed,
            snr_db: None,
            pilot_symbol: C64::new(1.0, 0.0),
            repeat_schedule: false,
        }
    }

    pub fn with_snr(mut self, snr_db: Option<f64>) -> Self {
        self.snr_db = snr_db;
        self
    }
}

impl PilotSource for SimulatedPilots {
    fn acquire(&mut self, stage: usize, num_slots: usize) -> Result<MeasurementSet> {
        let phase_index = if self.repeat_schedule { 1 } else { stage as u64 };
        let plan = PilotPlan {
            num_slots,
            phase_seed: derive(self.master_seed, Stream::Phases, phase_index as u64),
            pilot_symbol: self.pilot_symbol,
            snr_db: self.snr_db,
        };
        plan.validate()?;
        let schedule = generate_phase_schedule(&self.config, &plan);
        measure(
            &self.practical,
            &schedule,
            &plan,
            derive(self.master_seed, Stream::Noise, stage as u64),
        )
    }
}

/// Names of the tracked matrices, in block order.
pub fn matrix_names(num_layers: usize, with_exit: bool) -> Vec<String> {
    let mut names = vec!["h".to_string()];
    names.extend((1..num_layers).map(|l| format!("W{l}")));
    if with_exit {
        names.push("W_out".to_string());
    }
    names
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    /// NMSE in dB per tracked matrix, in `CalibrationTrace::matrix_names` order.
    pub nmse_db: Vec<f64>,
    /// Pilot loss at the end of the stage (stage 0: ideal set on stage-1 pilots).
    pub loss_final: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub loss_history: Vec<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTrace {
    pub matrix_names: Vec<String>,
    pub stages: Vec<StageRecord>,
    pub estimate: PropagationSet,
    pub plan: StagePlan,
    pub settings: GradientSettings,
}

impl CalibrationTrace {
    pub fn nmse(&self, stage: usize, matrix: usize) -> f64 {
        self.stages[stage].nmse_db[matrix]
    }

    /// Indices of the interlayer matrices among the tracked ones.
    pub fn interlayer_indices(&self) -> Vec<usize> {
        self.matrix_names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with('W') && n.as_str() != "W_out")
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-matrix NMSE drop from stage 0 to the final stage, in dB.
    pub fn reductions_db(&self) -> Vec<f64> {
        let first = &self.stages[0].nmse_db;
        let last = &self.stages[self.stages.len() - 1].nmse_db;
        first.iter().zip(last).map(|(a, b)| a - b).collect()
    }

    pub fn first_divergence(&self) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.diverged)
    }
}

fn tracked_nmse(estimate: &PropagationSet, truth: &PropagationSet, with_exit: bool) -> Result<Vec<f64>> {
    (0..block_count(estimate, with_exit))
        .map(|b| nmse_db(block(estimate, b), block(truth, b)))
        .collect()
}

/// Multi-stage protocol: stage `s` warm-starts from stage `s-1` (stage 1 from `ideal`)
/// on fresh pilots, with step `step_size * stage_decay^(s-1)`.
///
/// `metrics_truth` only feeds the NMSE columns of the trace; the optimizer sees
/// nothing but `source`.
pub fn run_multistage(
    ideal: &PropagationSet,
    metrics_truth: &PropagationSet,
    source: &mut dyn PilotSource,
    plan: &StagePlan,
    settings: &GradientSettings,
    mut on_stage: impl FnMut(&StageRecord),
) -> Result<CalibrationTrace> {
    plan.validate()?;
    settings.validate()?;
    let with_exit = settings.optimize_exit;
    let names = matrix_names(ideal.num_layers(), with_exit);
    let mut stages = Vec::with_capacity(plan.num_stages + 1);
    let mut estimate = ideal.clone();
    for s in 1..=plan.num_stages {
        let measurements = source.acquire(s, plan.slots_per_stage)?;
        let step = settings.stage_step(s);
        let outcome = run_gradient_stage_with(&estimate, ideal, &measurements, settings, step)?;
        if s == 1 {
            let rec = StageRecord {
                stage: 0,
                nmse_db: tracked_nmse(ideal, metrics_truth, with_exit)?,
                loss_final: outcome.initial_loss,
                step_size: 0.0,
                iterations: 0,
                loss_history: vec![outcome.initial_loss],
                diverged: false,
            };
            on_stage(&rec);
            stages.push(rec);
        }
        estimate = outcome.estimate;
        let rec = StageRecord {
            stage: s,
            nmse_db: tracked_nmse(&estimate, metrics_truth, with_exit)?,
            loss_final: outcome.final_loss,
            step_size: step,
            iterations: outcome.iterations,
            loss_history: outcome.loss_history,
            diverged: outcome.divergence.is_some(),
        };
        on_stage(&rec);
        stages.push(rec);
    }
    Ok(CalibrationTrace {
        matrix_names: names,
        stages,
        estimate,
        plan: plan.clone(),
        settings: settings.clone(),
    })
}
