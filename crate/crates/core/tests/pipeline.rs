// End-to-end runs through the public API only.

use simcal::calibration::{codebook_search, nmse_db};
use simcal::measurement::{generate_phase_schedule, measure, read_measurements_csv, write_measurements_csv, write_schedule_csv, PilotPlan};
use simcal::reporting::{calibrate_seed, read_stage_curve_csv, stage_curve, write_stage_curve_csv, TraceMetadata};
use simcal::scenario::{bundled, desk_tiny, ScenarioFile};

#[test]
fn desk_tiny_calibration_beats_the_ideal_model() {
    let s = desk_tiny();
    let (trace, ideal, practical) = calibrate_seed(&s, 11, |_| {}).unwrap();
    assert_eq!(trace.stages.len(), s.stages.num_stages + 1);
    for (k, w) in trace.estimate.interlayer.iter().enumerate() {
        let before = nmse_db(&ideal.interlayer[k], &practical.interlayer[k]).unwrap();
        assert_eq!(before, trace.stages[0].nmse_db[trace.interlayer_indices()[k]]);
        // the pilot fit is exact; entrywise error is bounded by the gauge, not zero
        assert!(nmse_db(w, &practical.interlayer[k]).unwrap().is_finite());
    }
    assert!(trace.stages.last().unwrap().loss_final < 1e-6 * trace.stages[0].loss_final);
    let meta = TraceMetadata::new(&trace, &s, 11);
    assert_eq!(meta.scenario_hash, s.hash());
    assert!(meta.diverged_stages.is_empty());
}

#[test]
fn stage_curve_survives_csv() {
    let s = desk_tiny();
    let (trace, _, _) = calibrate_seed(&s, 2, |_| {}).unwrap();
    let rows = stage_curve(&trace, 2);
    let mut buf = Vec::new();
    write_stage_curve_csv(&rows, &mut buf).unwrap();
    assert_eq!(read_stage_curve_csv(buf.as_slice()).unwrap(), rows);
}

#[test]
fn recorded_pilots_feed_the_codebook_search() {
    let s = desk_tiny();
    let model = s.model().unwrap();
    let truth = model.realize(&s.error_state(5)).unwrap();
    let plan = PilotPlan::noiseless(60, 5);
    let m = measure(&truth, &generate_phase_schedule(&s.stack, &plan), &plan, 0).unwrap();
    let (mut rx, mut ph) = (Vec::new(), Vec::new());
    write_measurements_csv(&m, &mut rx).unwrap();
    write_schedule_csv(&m, &mut ph).unwrap();
    let back = read_measurements_csv(rx.as_slice(), ph.as_slice(), m.pilot_symbol).unwrap();
    let a = codebook_search(&model, &m, s.codebook.as_ref().unwrap()).unwrap();
    let b = codebook_search(&model, &back, s.codebook.as_ref().unwrap()).unwrap();
    assert_eq!(a.errors, b.errors);
    assert!(a.loss <= a.coarse_loss);
}

#[test]
fn overrides_reach_the_run() {
    let text = bundled("desk-tiny").unwrap().to_json();
    let s = ScenarioFile::from_json_with_overrides(&text, &["stages.num_stages=1".into(), "seed=4".into()]).unwrap();
    let (trace, _, _) = calibrate_seed(&s, s.seed, |_| {}).unwrap();
    assert_eq!(trace.stages.len(), 2);
    assert_eq!(s.seed, 4);
}
