//! Browser bindings. Every export returns a JSON string so the page needs no glue
//! beyond `JSON.parse`.

use serde_json::{json, Value};
use simcal::calibration::{nmse_db, StagePlan};
use simcal::geometry::ErrorBounds;
use simcal::reporting::{calibrate_seed, heatmap_bundle, RealMatrix};
use simcal::scenario::{paper_fig4a, paper_fig5, ErrorSpec, ReceiverLayout, ScenarioFile};
use simcal::SimError;
use wasm_bindgen::prelude::*;

fn fail(e: SimError) -> String {
    e.to_string()
}

/// Bounds from percentages of the wavelength and a rotation in degrees.
fn scaled_bounds(base: &ScenarioFile, e_i_pct: f64, e_v_pct: f64, e_p_deg: f64) -> ErrorBounds {
    let lambda = base.stack.wavelength;
    ErrorBounds {
        e_i: e_i_pct / 100.0 * lambda,
        e_v: e_v_pct / 100.0 * lambda,
        e_p: e_p_deg.to_radians(),
    }
}

fn shrink(mut s: ScenarioFile, side: usize) -> ScenarioFile {
    s.stack.atoms_per_side = side;
    if let ReceiverLayout::Grid { side: rx, .. } = &mut s.scene.receivers {
        *rx = side;
    }
    s
}

fn panel(m: &RealMatrix) -> Value {
    json!({ "rows": m.rows, "cols": m.cols, "data": m.data })
}

/// Heatmap bundle on an M = 3 stack; `scale` multiplies the default error bounds
/// (0.1% / 1% of lambda, 0.01 deg).
#[wasm_bindgen]
pub fn heatmap(scale: f64, stages: usize, slots: usize, seed: u32) -> Result<String, String> {
    let mut s = paper_fig5();
    let b = scaled_bounds(&s, 0.1 * scale, 1.0 * scale, 0.01 * scale);
    s.errors = ErrorSpec::Bounds(b);
    s.stages = StagePlan::multi(stages, slots);
    s.validate().map_err(fail)?;
    let (trace, ideal, practical) = calibrate_seed(&s, seed.into(), |_| {}).map_err(fail)?;
    let hb = heatmap_bundle(&ideal, &practical, &trace.estimate, None).map_err(fail)?;
    Ok(json!({
        "matrix": hb.matrix_name,
        "residual_ratio": hb.residual_ratio(),
        "magnitude_residual_ratio": hb.magnitude_residual_ratio(),
        "panels": hb.panels().iter().map(|(n, m)| (n.to_string(), panel(m))).collect::<serde_json::Map<_, _>>(),
    })
    .to_string())
}

/// Stage-wise NMSE (dB) per tracked matrix for a small stack.
#[wasm_bindgen]
pub fn stage_curves(atoms_per_side: usize, stages: usize, slots: usize, e_v_pct: f64, seed: u32) -> Result<String, String> {
    let mut s = shrink(paper_fig4a(), atoms_per_side);
    let b = scaled_bounds(&s, 0.1, e_v_pct, 0.01);
    s.errors = ErrorSpec::Bounds(b);
    s.stages = StagePlan::multi(stages, slots);
    s.validate().map_err(fail)?;
    let (trace, _, _) = calibrate_seed(&s, seed.into(), |_| {}).map_err(fail)?;
    let curves: serde_json::Map<_, _> = trace
        .matrix_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), json!(trace.stages.iter().map(|r| r.nmse_db[i]).collect::<Vec<_>>())))
        .collect();
    Ok(json!({ "stages": trace.stages.len(), "curves": curves }).to_string())
}

/// Uncalibrated NMSE (dB) of every interlayer matrix for one error draw, plus the
/// draw itself, without any calibration.
#[wasm_bindgen]
pub fn inject_errors(e_i_pct: f64, e_v_pct: f64, e_p_deg: f64, atoms_per_side: usize, seed: u32) -> Result<String, String> {
    let mut s = shrink(paper_fig4a(), atoms_per_side);
    s.errors = ErrorSpec::Bounds(scaled_bounds(&s, e_i_pct, e_v_pct, e_p_deg));
    s.validate().map_err(fail)?;
    let model = s.model().map_err(fail)?;
    let errors = s.error_state(seed.into());
    let ideal = model.ideal_set().map_err(fail)?;
    let practical = model.realize(&errors).map_err(fail)?;
    let nmse = ideal
        .interlayer
        .iter()
        .zip(&practical.interlayer)
        .map(|(i, p)| nmse_db(i, p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(fail)?;
    Ok(json!({ "errors": errors, "interlayer_nmse_db": nmse }).to_string())
}
