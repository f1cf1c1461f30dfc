//! Coarse-to-fine search over parametric error candidates.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::objective::PilotObjective;
use crate::error::{Result, SimError};
use crate::geometry::{ErrorBounds, ErrorState, LayerError};
use crate::measurement::MeasurementSet;
use crate::propagation::{PropagationSet, StackModel};

/// Candidate values of one layer's three error parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerGrid {
    pub spacing: Vec<f64>,
    pub vertical: Vec<f64>,
    pub rotation: Vec<f64>,
}

impl LayerGrid {
    fn axes(&self) -> [&[f64]; 3] {
        [&self.spacing, &self.vertical, &self.rotation]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Codebook {
    pub layers: Vec<LayerGrid>,
    /// Fine grid pitch as a fraction of the coarse pitch.
    pub refinement_factor: f64,
    /// The fine grid spans `-half_width..=half_width` fine steps around the coarse pick.
    #[serde(default = "default_half_width")]
    pub refinement_half_width: usize,
    /// Upper bound on coordinate-descent sweeps per level.
    #[serde(default = "default_sweeps")]
    pub max_sweeps: usize,
    /// Levels whose full Cartesian product has at most this many candidates are
    /// searched exhaustively instead of by coordinate descent.
    #[serde(default = "default_joint_limit")]
    pub joint_limit: usize,
}

fn default_half_width() -> usize {
    2
}

fn default_sweeps() -> usize {
    4
}

fn default_joint_limit() -> usize {
    4096
}

fn linspace_sym(bound: f64, points: usize) -> Vec<f64> {
    if bound == 0.0 || points <= 1 {
        return vec![0.0];
    }
    let half = (points / 2) as i64;
    (-half..=half).map(|k| bound * k as f64 / half as f64).collect()
}

impl Codebook {
    /// Same symmetric `points`-per-axis grid on every layer; layer 1 has no spacing axis.
    pub fn uniform(num_layers: usize, bounds: &ErrorBounds, points: usize, refinement_factor: f64) -> Self {
        let layers = (0..num_layers)
            .map(|l| LayerGrid {
                spacing: if l == 0 { vec![0.0] } else { linspace_sym(bounds.e_i, points) },
                vertical: linspace_sym(bounds.e_v, points),
                rotation: linspace_sym(bounds.e_p, points),
            })
            .collect();
        Self {
            layers,
            refinement_factor,
            refinement_half_width: default_half_width(),
            max_sweeps: default_sweeps(),
            joint_limit: default_joint_limit(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(SimError::EmptyCodebook("no layers".into()));
        }
        for (l, grid) in self.layers.iter().enumerate() {
            for (axis, values) in ["spacing", "vertical", "rotation"].iter().zip(grid.axes()) {
                let at = || format!("layer {} {axis}", l + 1);
                if values.is_empty() {
                    return Err(SimError::EmptyCodebook(at()));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(SimError::config("codebook", format!("{}: non-finite value", at())));
                }
                if !values.contains(&0.0) {
                    return Err(SimError::config("codebook", format!("{}: grid must contain 0", at())));
                }
                let mut sorted = values.to_vec();
                sorted.sort_by(f64::total_cmp);
                let symmetric = sorted
                    .iter()
                    .zip(sorted.iter().rev())
                    .all(|(a, b)| (a + b).abs() <= 1e-12 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE));
                if !symmetric {
                    return Err(SimError::config("codebook", format!("{}: grid must be symmetric about 0", at())));
                }
            }
        }
        if !(self.refinement_factor > 0.0 && self.refinement_factor < 1.0) {
            return Err(SimError::config("codebook.refinement_factor", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookResult {
    pub errors: ErrorState,
    pub estimate: PropagationSet,
    pub loss: f64,
    /// Best candidate after the coarse level.
    pub coarse_errors: ErrorState,
    pub coarse_loss: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
struct Scored {
    errors: ErrorState,
    loss: f64,
    norm: f64,
    first_layer: usize,
}

/// Smallest strictly positive gap between grid values, per axis.
fn pitch(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min)
}

struct Search<'a> {
    model: &'a StackModel,
    objective: PilotObjective,
    /// Per-axis normalization of the parameter norm used for tie-breaks.
    axis_scale: [f64; 3],
    evaluations: usize,
}

impl Search<'_> {
    fn score(&mut self, errors: ErrorState) -> Result<Scored> {
        let set = self.model.realize(&errors)?;
        let loss = self.objective.loss(&set)?;
        self.evaluations += 1;
        let mut norm = 0.0;
        let mut first_layer = usize::MAX;
        for (l, e) in errors.layers.iter().enumerate() {
            let v = [e.delta_spacing, e.delta_vertical, e.delta_rotation];
            for (x, s) in v.iter().zip(self.axis_scale) {
                norm += (x / s).powi(2);
            }
            if first_layer == usize::MAX && v.iter().any(|x| *x != 0.0) {
                first_layer = l;
            }
        }
        Ok(Scored {
            errors,
            loss,
            norm,
            first_layer,
        })
    }

    /// Lower loss wins; near-ties go to the smaller parameter norm, then to the
    /// candidate whose first nonzero layer comes first.
    fn better(a: &Scored, b: &Scored) -> bool {
        let tie = (a.loss - b.loss).abs() <= 1e-12 * a.loss.max(b.loss);
        if !tie {
            return a.loss < b.loss;
        }
        match a.norm.partial_cmp(&b.norm).unwrap_or(Ordering::Equal) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => a.first_layer < b.first_layer,
        }
    }

    fn level(&mut self, start: Scored, grids: &[LayerGrid], codebook: &Codebook) -> Result<Scored> {
        let size = grids.iter().try_fold(1usize, |acc, g| {
            acc.checked_mul(g.spacing.len() * g.vertical.len() * g.rotation.len())
        });
        match size {
            Some(n) if n <= codebook.joint_limit => self.exhaustive(start, grids),
            _ => self.descend(start, grids, codebook.max_sweeps),
        }
    }

    /// Scores every combination of per-layer candidates.
    fn exhaustive(&mut self, start: Scored, grids: &[LayerGrid]) -> Result<Scored> {
        let per_layer: Vec<Vec<LayerError>> = grids
            .iter()
            .map(|g| {
                let mut v = Vec::new();
                for &s in &g.spacing {
                    for &vv in &g.vertical {
                        for &r in &g.rotation {
                            v.push(LayerError {
                                delta_spacing: s,
                                delta_vertical: vv,
                                delta_rotation: r,
                            });
                        }
                    }
                }
                v
            })
            .collect();
        let mut best = start;
        let mut idx = vec![0usize; grids.len()];
        loop {
            let errors = ErrorState {
                layers: idx.iter().zip(&per_layer).map(|(&i, c)| c[i]).collect(),
            };
            if errors != best.errors {
                let scored = self.score(errors)?;
                if Self::better(&scored, &best) {
                    best = scored;
                }
            }
            // Odometer increment, last layer fastest.
            let mut l = idx.len();
            loop {
                if l == 0 {
                    return Ok(best);
                }
                l -= 1;
                idx[l] += 1;
                if idx[l] < per_layer[l].len() {
                    break;
                }
                idx[l] = 0;
            }
        }
    }

    /// Layer-by-layer coordinate descent; each layer is searched jointly over its own grid.
    fn descend(&mut self, start: Scored, grids: &[LayerGrid], max_sweeps: usize) -> Result<Scored> {
        let mut best = start;
        for _ in 0..max_sweeps.max(1) {
            let mut changed = false;
            for (l, grid) in grids.iter().enumerate() {
                let current = best.errors.layers[l];
                for &s in &grid.spacing {
                    for &v in &grid.vertical {
                        for &r in &grid.rotation {
                            let cand = LayerError {
                                delta_spacing: s,
                                delta_vertical: v,
                                delta_rotation: r,
                            };
                            if cand == current {
                                continue;
                            }
                            let mut errors = best.errors.clone();
                            errors.layers[l] = cand;
                            let scored = self.score(errors)?;
                            if Self::better(&scored, &best) {
                                best = scored;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        Ok(best)
    }
}

/// Two-level codebook calibration. Level 1 searches the coarse per-layer grids from
/// the all-zero state (exhaustively when small enough, else by coordinate descent);
/// level 2 repeats it on shrunken grids centered on the level-1 pick.
pub fn codebook_search(
    model: &StackModel,
    measurements: &MeasurementSet,
    codebook: &Codebook,
) -> Result<CodebookResult> {
    codebook.validate()?;
    let l_count = model.num_layers();
    if codebook.layers.len() != l_count {
        return Err(SimError::dimension("codebook layers", l_count, codebook.layers.len()));
    }
    let template = model.ideal_set()?;
    let objective = PilotObjective::new(&template, measurements)?;
    let mut axis_scale = [0.0f64; 3];
    for grid in &codebook.layers {
        for (k, values) in grid.axes().iter().enumerate() {
            for v in values.iter() {
                axis_scale[k] = axis_scale[k].max(v.abs());
            }
        }
    }
    for s in &mut axis_scale {
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    let mut search = Search {
        model,
        objective,
        axis_scale,
        evaluations: 0,
    };

    let zero = search.score(ErrorState::zeros(l_count))?;
    let coarse = search.level(zero, &codebook.layers, codebook)?;

    let k = codebook.refinement_half_width as i64;
    let fine_grids: Vec<LayerGrid> = codebook
        .layers
        .iter()
        .zip(&coarse.errors.layers)
        .map(|(grid, picked)| {
            let local = |values: &[f64], center: f64| -> Vec<f64> {
                let p = pitch(values);
                if !p.is_finite() {
                    return vec![center];
                }
                let step = p * codebook.refinement_factor;
                (-k..=k).map(|i| center + step * i as f64).collect()
            };
            LayerGrid {
                spacing: local(&grid.spacing, picked.delta_spacing),
                vertical: local(&grid.vertical, picked.delta_vertical),
                rotation: local(&grid.rotation, picked.delta_rotation),
            }
        })
        .collect();
    let fine = search.level(coarse.clone(), &fine_grids, codebook)?;

    let estimate = model.realize(&fine.errors)?;
    Ok(CodebookResult {
        errors: fine.errors,
        estimate,
        loss: fine.loss,
        coarse_errors: coarse.errors,
        coarse_loss: coarse.loss,
        evaluations: search.evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{generate_phase_schedule, measure, PilotPlan};
    use crate::scenario::desk_tiny;
    use crate::seeds::{derive, splitmix64, Stream};

    fn pilots(model: &StackModel, errors: &ErrorState, seed: u64) -> MeasurementSet {
        let truth = model.realize(errors).unwrap();
        let plan = PilotPlan::noiseless(50, seed);
        measure(&truth, &generate_phase_schedule(&model.config, &plan), &plan, 0).unwrap()
    }

    fn on_grid(codebook: &Codebook, seed: u64) -> ErrorState {
        let mut r = seed;
        let mut pick = |v: &[f64]| {
            r = splitmix64(r);
            v[(r % v.len() as u64) as usize]
        };
        ErrorState {
            layers: codebook
                .layers
                .iter()
                .map(|g| LayerError {
                    delta_spacing: pick(&g.spacing),
                    delta_vertical: pick(&g.vertical),
                    delta_rotation: pick(&g.rotation),
                })
                .collect(),
        }
    }

    #[test]
    fn on_grid_truth_is_recovered_exactly() {
        let s = desk_tiny();
        let model = s.model().unwrap();
        let cb = s.codebook.clone().unwrap();
        for t in 0..10 {
            let truth = on_grid(&cb, derive(1, Stream::Trials, t));
            let res = codebook_search(&model, &pilots(&model, &truth, t), &cb).unwrap();
            assert_eq!(res.coarse_errors, truth);
            assert_eq!(res.errors, truth);
        }
    }

    #[test]
    fn zero_truth_returns_zero() {
        let s = desk_tiny();
        let model = s.model().unwrap();
        let cb = s.codebook.clone().unwrap();
        let res = codebook_search(&model, &pilots(&model, &ErrorState::zeros(2), 5), &cb).unwrap();
        assert!(res.errors.is_zero());
        assert_eq!(res.loss, 0.0);
    }

    #[test]
    fn search_dominates_the_zero_candidate() {
        let s = desk_tiny();
        let model = s.model().unwrap();
        let cb = s.codebook.clone().unwrap();
        let ideal = model.ideal_set().unwrap();
        for t in 0..5 {
            let meas = pilots(&model, &s.error_state(100 + t), t);
            let res = codebook_search(&model, &meas, &cb).unwrap();
            let zero = crate::calibration::pilot_loss(&ideal, &meas).unwrap();
            assert!(res.loss <= zero);
            assert!(res.loss <= res.coarse_loss);
        }
    }

    #[test]
    fn coordinate_descent_path_still_dominates() {
        let s = desk_tiny();
        let model = s.model().unwrap();
        let mut cb = s.codebook.clone().unwrap();
        cb.joint_limit = 0;
        let meas = pilots(&model, &s.error_state(7), 7);
        let res = codebook_search(&model, &meas, &cb).unwrap();
        let zero = crate::calibration::pilot_loss(&model.ideal_set().unwrap(), &meas).unwrap();
        assert!(res.loss <= res.coarse_loss && res.coarse_loss <= zero);
    }

    #[test]
    fn invalid_codebooks_are_rejected() {
        let s = desk_tiny();
        let model = s.model().unwrap();
        let meas = pilots(&model, &ErrorState::zeros(2), 1);
        let mut cb = s.codebook.clone().unwrap();
        cb.layers[1].vertical.clear();
        assert!(matches!(codebook_search(&model, &meas, &cb), Err(SimError::EmptyCodebook(_))));
        let empty = Codebook {
            layers: vec![],
            ..s.codebook.clone().unwrap()
        };
        assert!(matches!(empty.validate(), Err(SimError::EmptyCodebook(_))));
        let mut lopsided = s.codebook.clone().unwrap();
        lopsided.layers[0].rotation = vec![0.0, 1e-3];
        assert!(lopsided.validate().is_err());
        let mut wrong_len = s.codebook.clone().unwrap();
        wrong_len.layers.pop();
        assert!(codebook_search(&model, &meas, &wrong_len).is_err());
    }

    #[test]
    fn uniform_grid_shape() {
        let b = ErrorBounds {
            e_i: 1.0,
            e_v: 2.0,
            e_p: 0.0,
        };
        let cb = Codebook::uniform(3, &b, 5, 0.25);
        assert_eq!(cb.layers[0].spacing, vec![0.0]);
        assert_eq!(cb.layers[1].spacing, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(cb.layers[2].rotation, vec![0.0]);
        cb.validate().unwrap();
    }
}
