use serde_json::Value;
use simcal_wasm::{heatmap, inject_errors, stage_curves};

#[test]
fn heatmap_panels_are_nine_by_nine() {
    let v: Value = serde_json::from_str(&heatmap(10.0, 2, 60, 1).unwrap()).unwrap();
    assert_eq!(v["panels"]["ideal"]["rows"], 9);
    assert_eq!(v["panels"]["difference"]["data"].as_array().unwrap().len(), 81);
    assert!(v["residual_ratio"].as_f64().unwrap() < 1.0);
}

#[test]
fn stage_curves_have_one_point_per_stage() {
    let v: Value = serde_json::from_str(&stage_curves(2, 3, 40, 1.0, 1).unwrap()).unwrap();
    assert_eq!(v["stages"], 4);
    assert_eq!(v["curves"]["W1"].as_array().unwrap().len(), 4);
}

#[test]
fn larger_errors_raise_uncalibrated_nmse() {
    let db = |pct: f64| -> f64 {
        let v: Value = serde_json::from_str(&inject_errors(0.0, pct, 0.0, 2, 3).unwrap()).unwrap();
        v["interlayer_nmse_db"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum()
    };
    assert!(db(4.0) > db(0.5));
    assert!(inject_errors(-1.0, 1.0, 0.0, 2, 1).is_err());
}
