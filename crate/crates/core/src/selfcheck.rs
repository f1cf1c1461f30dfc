//! Invariant checks run by `validate` and the acceptance suite: adjoint gradient
//! vs. central differences, matrices and responses vs. brute-force path sums,
//! zero-error identity and bundled-scenario round trips.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::calibration::{pilot_loss, pilot_loss_gradient};
use crate::error::Result;
use crate::geometry::{apply_errors_with, build_ideal_geometry, sample_errors, ErrorBounds, LayerGeometry, SimStackConfig};
use crate::matrix::{ComplexMatrix, C64};
use crate::measurement::{generate_phase_schedule, measure, PilotPlan};
use crate::propagation::{
    cascade_response, ue_channel, exit_matrix, interlayer_matrix, PhaseConfig, PropagationModel, PropagationSet,
    SceneConfig,
};
use crate::scenario::{bundled_scenarios, ScenarioFile, SPEED_OF_LIGHT};
use crate::seeds::{derive, Stream};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub metric: f64,
    pub limit: f64,
    pub detail: String,
}

impl Check {
    fn bound(name: &str, metric: f64, limit: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: metric <= limit,
            metric,
            limit,
            detail,
        }
    }
}

pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const ORACLE_TOLERANCE: f64 = 1e-12;

fn blocks_mut(set: &mut PropagationSet) -> Vec<&mut ComplexMatrix> {
    let mut out = vec![&mut set.ue];
    out.extend(set.interlayer.iter_mut());
    out.push(&mut set.exit);
    out
}

/// Worst per-entry relative error between the adjoint gradient and central
/// differences of the pilot loss, over `trials` random (truth, candidate) pairs.
pub fn gradient_check(scenario: &ScenarioFile, trials: usize, seed: u64) -> Result<Check> {
    let model = scenario.model()?;
    let mut worst = 0.0f64;
    let mut entries = 0usize;
    for t in 0..trials as u64 {
        let truth = model.realize(&scenario.error_state(derive(seed, Stream::Trials, 3 * t)))?;
        let candidate = model.realize(&scenario.error_state(derive(seed, Stream::Trials, 3 * t + 1)))?;
        let plan = PilotPlan::noiseless(20, derive(seed, Stream::Trials, 3 * t + 2));
        let meas = measure(&truth, &generate_phase_schedule(&scenario.stack, &plan), &plan, 0)?;
        let grad = pilot_loss_gradient(&candidate, &meas)?;
        let mut analytic: Vec<C64> = grad.ue.as_slice().to_vec();
        for w in &grad.interlayer {
            analytic.extend_from_slice(w.as_slice());
        }
        analytic.extend_from_slice(grad.exit.as_slice());

        let mut probe = candidate.clone();
        let mut k = 0usize;
        let sizes: Vec<usize> = blocks_mut(&mut probe).iter().map(|b| b.as_slice().len()).collect();
        for (b, &len) in sizes.iter().enumerate() {
            for i in 0..len {
                let x0 = blocks_mut(&mut probe)[b].as_slice()[i];
                let h = x0.norm().max(f64::MIN_POSITIVE) * 1e-5;
                let mut at = |d: C64| -> Result<f64> {
                    blocks_mut(&mut probe)[b].as_mut_slice()[i] = x0 + d;
                    let v = pilot_loss(&probe, &meas);
                    blocks_mut(&mut probe)[b].as_mut_slice()[i] = x0;
                    v
                };
                let d_re = (at(C64::new(h, 0.0))? - at(C64::new(-h, 0.0))?) / (2.0 * h);
                let d_im = (at(C64::new(0.0, h))? - at(C64::new(0.0, -h))?) / (2.0 * h);
                // dL/dz* = (dL/dx + j dL/dy) / 2
                let fd = C64::new(d_re, d_im) * 0.5;
                let g = analytic[k];
                let rel = (fd - g).norm() / g.norm().max(fd.norm()).max(f64::MIN_POSITIVE);
                worst = worst.max(rel);
                k += 1;
                entries += 1;
            }
        }
    }
    Ok(Check::bound(
        "gradient_vs_finite_differences",
        worst,
        GRADIENT_TOLERANCE,
        format!("{trials} trials on {}, {entries} entries", scenario.name),
    ))
}

fn oracle_rs(p: crate::geometry::Point3, q: crate::geometry::Point3, lambda: f64, area: f64) -> C64 {
    let (dx, dy, dz) = (q.x - p.x, q.y - p.y, q.z - p.z);
    let d = (dx * dx + dy * dy + dz * dz).sqrt();
    let k = 2.0 * PI / lambda;
    let cos = dy / d;
    C64::new(area * cos / (2.0 * PI * d * d), -area * cos / (lambda * d)) * C64::new(0.0, k * d).exp()
}

fn oracle_radar(p: crate::geometry::Point3, q: crate::geometry::Point3, lambda: f64, area: f64) -> C64 {
    let (dx, dy, dz) = (q.x - p.x, q.y - p.y, q.z - p.z);
    let d = (dx * dx + dy * dy + dz * dz).sqrt();
    let g = if dy > 0.0 { 4.0 * dy / d } else { 0.0 };
    C64::new(0.0, 2.0 * PI * d / lambda).exp() * (g * g * area / (4.0 * PI * d * d)).sqrt()
}

fn rel_err(a: &[C64], b: &[C64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// Sum over every atom path through the stack, one receiver at a time.
pub fn path_sum_response(set: &PropagationSet, phases: &PhaseConfig) -> Vec<C64> {
    let layers = set.num_layers();
    let n = set.atoms_per_layer();
    let t: Vec<Vec<C64>> = (0..layers).map(|l| phases.transmission(l).collect()).collect();
    (0..set.num_rx())
        .map(|r| {
            let mut total = C64::new(0.0, 0.0);
            let mut path = vec![0usize; layers];
            'paths: loop {
                let mut v = set.ue[(path[0], 0)] * t[0][path[0]];
                for l in 1..layers {
                    v *= set.interlayer[l - 1][(path[l], path[l - 1])] * t[l][path[l]];
                }
                total += set.exit[(r, path[layers - 1])] * v;
                let mut l = layers;
                loop {
                    if l == 0 {
                        break 'paths;
                    }
                    l -= 1;
                    path[l] += 1;
                    if path[l] < n {
                        break;
                    }
                    path[l] = 0;
                }
            }
            total
        })
        .collect()
}

struct Instance {
    config: SimStackConfig,
    geometry: Vec<LayerGeometry>,
    scene: SceneConfig,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let lambda = SPEED_OF_LIGHT / rng.random_range(10e9..60e9);
    let layers = rng.random_range(2..=3usize);
    let side = rng.random_range(1..=3usize);
    let gap = lambda * rng.random_range(0.3..1.5);
    let config = SimStackConfig::with_defaults(layers, side, lambda, gap * (layers - 1) as f64);
    let bounds = ErrorBounds {
        e_i: 0.02 * lambda,
        e_v: 0.05 * lambda,
        e_p: 0.05,
    };
    let errors = sample_errors(&bounds, layers, rng.random());
    let geometry = apply_errors_with(&build_ideal_geometry(&config)?, &errors, Default::default())?;
    let back = geometry.last().map(|g| g.plane_y()).unwrap_or(0.0);
    let scene = SceneConfig {
        ue_position: crate::geometry::Point3::new(
            rng.random_range(-0.05..0.05),
            -rng.random_range(0.1..30.0),
            rng.random_range(-0.05..0.05),
        ),
        rx_positions: SceneConfig::rx_grid(2, lambda / 2.0, back, lambda * rng.random_range(0.5..5.0)),
        model: PropagationModel::RayleighSommerfeld,
        rx_mount: Default::default(),
    };
    Ok(Instance { config, geometry, scene })
}

/// Interlayer matrices (both models), UE channel, exit matrix and cascade response
/// against direct formula evaluation and path sums on random small stacks.
pub fn oracle_check(instances: usize, seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for i in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, Stream::Trials, i));
        let Instance { config, geometry, scene } = random_instance(&mut rng)?;
        let (lambda, area) = (config.wavelength, config.atom_area);
        for pair in geometry.windows(2) {
            for (model, f) in [
                (PropagationModel::RayleighSommerfeld, oracle_rs as fn(_, _, _, _) -> C64),
                (PropagationModel::GeometricRadar, oracle_radar),
            ] {
                let w = interlayer_matrix(&pair[0], &pair[1], model, lambda, area)?;
                let brute: Vec<C64> = pair[1]
                    .atom_positions
                    .iter()
                    .flat_map(|&q| pair[0].atom_positions.iter().map(move |&p| f(p, q, lambda, area)))
                    .collect();
                worst = worst.max(rel_err(w.as_slice(), &brute));
            }
        }
        let h = ue_channel(scene.ue_position, &geometry[0], lambda, area)?;
        let brute_h: Vec<C64> = geometry[0]
            .atom_positions
            .iter()
            .map(|&p| {
                let u = scene.ue_position;
                let d = ((p.x - u.x).powi(2) + (p.y - u.y).powi(2) + (p.z - u.z).powi(2)).sqrt();
                let cos = (p.y - u.y) / d;
                C64::new(0.0, 2.0 * PI * d / lambda).exp() * (lambda / (4.0 * PI * d) * (area * cos).sqrt())
            })
            .collect();
        worst = worst.max(rel_err(h.as_slice(), &brute_h));
        let last = geometry.last().expect("two layers");
        let exit = exit_matrix(last, &scene.rx_positions, lambda, area)?;
        let brute_exit: Vec<C64> = scene
            .rx_positions
            .iter()
            .flat_map(|&q| last.atom_positions.iter().map(move |&p| oracle_rs(p, q, lambda, area)))
            .collect();
        worst = worst.max(rel_err(exit.as_slice(), &brute_exit));

        let set = crate::propagation::build_propagation_set(&geometry, &scene, lambda, area, None)?;
        let n = config.atoms_per_layer();
        let phases = PhaseConfig {
            layers: (0..config.num_layers)
                .map(|_| (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect())
                .collect(),
        };
        let y = cascade_response(&set, &phases)?;
        worst = worst.max(rel_err(&y, &path_sum_response(&set, &phases)));
    }
    Ok(Check::bound(
        "propagation_vs_brute_force",
        worst,
        ORACLE_TOLERANCE,
        format!("{instances} random stacks with M <= 3, L <= 3"),
    ))
}

fn same_bits(a: &ComplexMatrix, b: &ComplexMatrix) -> bool {
    a.shape() == b.shape()
        && a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits())
}

/// Realizing the all-zero error state must reproduce the ideal matrices bit for bit.
pub fn zero_error_check(scenario: &ScenarioFile) -> Result<Check> {
    let model = scenario.model()?;
    let ideal = model.ideal_set()?;
    let zero = model.realize(&crate::geometry::ErrorState::zeros(model.num_layers()))?;
    let mut mismatched = 0usize;
    let pairs = std::iter::once((&ideal.ue, &zero.ue))
        .chain(ideal.interlayer.iter().zip(&zero.interlayer))
        .chain(std::iter::once((&ideal.exit, &zero.exit)));
    for (a, b) in pairs {
        if !same_bits(a, b) {
            mismatched += 1;
        }
    }
    Ok(Check::bound(
        "zero_error_identity",
        mismatched as f64,
        0.0,
        format!("{}: matrices differing from ideal", scenario.name),
    ))
}

/// Every bundled scenario validates and survives a JSON round trip unchanged.
pub fn schema_check() -> Check {
    let mut failures = Vec::new();
    for s in bundled_scenarios() {
        match ScenarioFile::from_json(&s.to_json()) {
            Ok(back) if back == s => {}
            Ok(_) => failures.push(format!("{}: round trip changed the scenario", s.name)),
            Err(e) => failures.push(format!("{}: {e}", s.name)),
        }
    }
    Check::bound(
        "bundled_scenarios_schema",
        failures.len() as f64,
        0.0,
        if failures.is_empty() {
            "all bundled scenarios valid".into()
        } else {
            failures.join("; ")
        },
    )
}

/// The suite behind `validate`, sized to finish in a few seconds.
pub fn run_all(scenario: &ScenarioFile, seed: u64) -> Result<Vec<Check>> {
    let tiny = crate::scenario::desk_tiny();
    Ok(vec![
        gradient_check(&tiny, 10, seed)?,
        oracle_check(50, seed)?,
        zero_error_check(scenario)?,
        schema_check(),
    ])
}
