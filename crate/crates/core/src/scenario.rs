//! JSON run descriptions, key=value overrides and the bundled scenarios.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::calibration::{Codebook, GradientSettings, MonitorSettings, StagePlan};
use crate::error::{Result, SimError};
use crate::geometry::{sample_errors, ErrorBounds, ErrorState, Point3, SimStackConfig, SpacingMode};
use crate::matrix::C64;
use crate::propagation::{PropagationModel, RxMount, SceneConfig, StackModel};
use crate::reporting::SweepSpec;
use crate::seeds::{derive, Stream};

/// Speed of light, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Error model of a scenario: random draws inside bounds, or one fixed state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ErrorSpec {
    Bounds(ErrorBounds),
    Explicit(ErrorState),
}

/// Receiver probe layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReceiverLayout {
    /// `side x side` grid at `pitch`, `distance` behind the last layer.
    Grid { side: usize, pitch: f64, distance: f64 },
    Positions(Vec<Point3>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub ue_position: Point3,
    pub receivers: ReceiverLayout,
    #[serde(default)]
    pub model: PropagationModel,
    #[serde(default)]
    pub rx_mount: RxMount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotSpec {
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default = "unit_pilot")]
    pub pilot_symbol: C64,
    /// Reuse the first stage's phase schedule in every stage.
    #[serde(default)]
    pub repeat_schedule: bool,
}

fn unit_pilot() -> C64 {
    C64::new(1.0, 0.0)
}

impl Default for PilotSpec {
    fn default() -> Self {
        Self {
            snr_db: None,
            pilot_symbol: unit_pilot(),
            repeat_schedule: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct HeatmapSpec {
    /// Interlayer matrix to plot (0 = first); default is the worst uncalibrated one.
    #[serde(default)]
    pub matrix: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSpec {
    pub settings: MonitorSettings,
    /// Known slots observed in total.
    pub known_slots: usize,
    /// Known slot at which the hidden errors jump; none for a static system.
    #[serde(default)]
    pub change_at: Option<usize>,
    /// Bounds the post-change errors are drawn from.
    #[serde(default)]
    pub change_bounds: Option<ErrorBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub stack: SimStackConfig,
    pub errors: ErrorSpec,
    #[serde(default)]
    pub spacing_mode: SpacingMode,
    pub scene: SceneSpec,
    #[serde(default)]
    pub pilots: PilotSpec,
    pub stages: StagePlan,
    #[serde(default)]
    pub gradient: GradientSettings,
    #[serde(default)]
    pub codebook: Option<Codebook>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub heatmap: Option<HeatmapSpec>,
    #[serde(default)]
    pub monitor: Option<MonitorSpec>,
    pub output_dir: String,
    pub seed: u64,
}

impl ScenarioFile {
    /// Parses and validates, reporting the JSON path of the first schema violation.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let scenario: ScenarioFile = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            SimError::config(path, e.into_inner().to_string())
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Applies `key.path=value` overrides on top of `text`. Values parse as JSON when
    /// possible and fall back to plain strings.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&compact))
    }

    pub fn validate(&self) -> Result<()> {
        within("stack", self.stack.validate())?;
        match &self.errors {
            ErrorSpec::Bounds(b) => within("errors.bounds", b.validate())?,
            ErrorSpec::Explicit(e) => {
                if e.num_layers() != self.stack.num_layers {
                    return Err(SimError::config(
                        "errors.explicit",
                        format!("{} layers given, stack has {}", e.num_layers(), self.stack.num_layers),
                    ));
                }
                if !e.is_finite() {
                    return Err(SimError::config("errors.explicit", "non-finite entry"));
                }
            }
        }
        if let ReceiverLayout::Grid { side, pitch, distance } = self.scene.receivers {
            if side < 1 || !(pitch > 0.0) || !(distance > 0.0) {
                return Err(SimError::config("scene.receivers.grid", "side >= 1, pitch > 0 and distance > 0 required"));
            }
        }
        self.stages.validate()?;
        self.gradient.validate()?;
        if let Some(cb) = &self.codebook {
            cb.validate()?;
            if cb.layers.len() != self.stack.num_layers {
                return Err(SimError::config("codebook.layers", "one grid per layer required"));
            }
        }
        if let Some(sw) = &self.sweep {
            sw.validate()?;
        }
        if let Some(m) = &self.monitor {
            m.settings.validate()?;
            if let Some(b) = &m.change_bounds {
                within("monitor.change_bounds", b.validate())?;
            }
        }
        if let Some(snr) = self.pilots.snr_db {
            if snr.is_nan() || snr == f64::NEG_INFINITY {
                return Err(SimError::config("pilots.snr_db", "must be finite or +inf"));
            }
        }
        self.model().map(|_| ())
    }

    pub fn scene_config(&self) -> SceneConfig {
        let last = self.stack.ideal_layer_y(self.stack.num_layers - 1);
        let rx_positions = match &self.scene.receivers {
            ReceiverLayout::Grid { side, pitch, distance } => SceneConfig::rx_grid(*side, *pitch, last, *distance),
            ReceiverLayout::Positions(p) => p.clone(),
        };
        SceneConfig {
            ue_position: self.scene.ue_position,
            rx_positions,
            model: self.scene.model,
            rx_mount: self.scene.rx_mount,
        }
    }

    pub fn model(&self) -> Result<StackModel> {
        StackModel::new(self.stack.clone(), self.scene_config(), self.spacing_mode)
    }

    /// Hidden error state of the run seeded by `seed`.
    pub fn error_state(&self, seed: u64) -> ErrorState {
        match &self.errors {
            ErrorSpec::Bounds(b) => sample_errors(b, self.stack.num_layers, derive(seed, Stream::Errors, 0)),
            ErrorSpec::Explicit(e) => e.clone(),
        }
    }

    pub fn bounds(&self) -> Option<&ErrorBounds> {
        match &self.errors {
            ErrorSpec::Bounds(b) => Some(b),
            ErrorSpec::Explicit(_) => None,
        }
    }
}

/// Qualifies a bare field name from a nested validator with its section path.
fn within<T>(section: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        SimError::Config { field, reason } if !field.starts_with(section) => SimError::Config {
            field: format!("{section}.{field}"),
            reason,
        },
        other => other,
    })
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| SimError::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(SimError::config(spec, "empty override key"));
    }
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), parsed);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| SimError::config(key, format!("`{part}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| SimError::config(key, format!("index {idx} out of range (len {len})")))?;
                if last {
                    *slot = parsed;
                    return Ok(());
                }
                slot
            }
            _ => return Err(SimError::config(key, format!("`{part}` is not inside an object"))),
        };
    }
    Ok(())
}

fn paper_stack(atoms_per_side: usize) -> SimStackConfig {
    SimStackConfig::with_defaults(4, atoms_per_side, SPEED_OF_LIGHT / 28e9, 0.01)
}

fn paper_bounds(wavelength: f64) -> ErrorBounds {
    ErrorBounds {
        e_i: 0.001 * wavelength,
        e_v: 0.01 * wavelength,
        e_p: 0.01f64.to_radians(),
    }
}

/// UE on the boresight 30 m in front, probes a `side x side` half-wavelength grid one
/// nominal layer gap behind the last layer, riding with it.
fn paper_scene(stack: &SimStackConfig, side: usize) -> SceneSpec {
    SceneSpec {
        ue_position: Point3::new(0.0, -30.0, 0.0),
        receivers: ReceiverLayout::Grid {
            side,
            pitch: stack.wavelength / 2.0,
            distance: stack.nominal_gap(),
        },
        model: PropagationModel::RayleighSommerfeld,
        rx_mount: RxMount::LastLayer,
    }
}

fn base(name: &str, stack: SimStackConfig, errors: ErrorSpec, stages: StagePlan, side: usize) -> ScenarioFile {
    let scene = paper_scene(&stack, side);
    ScenarioFile {
        name: name.to_string(),
        stack,
        errors,
        spacing_mode: SpacingMode::Cumulative,
        scene,
        pilots: PilotSpec::default(),
        stages,
        gradient: GradientSettings::default(),
        codebook: None,
        sweep: None,
        heatmap: None,
        monitor: None,
        output_dir: format!("out/{name}"),
        seed: 1,
    }
}

pub fn paper_fig4a() -> ScenarioFile {
    let stack = paper_stack(6);
    let b = paper_bounds(stack.wavelength);
    base("paper-fig4a", stack, ErrorSpec::Bounds(b), StagePlan::multi(10, 100), 6)
}

pub fn paper_fig4b() -> ScenarioFile {
    let stack = paper_stack(6);
    let lambda = stack.wavelength;
    let mut s = base(
        "paper-fig4b",
        stack,
        ErrorSpec::Bounds(ErrorBounds {
            e_i: 0.0,
            e_v: 0.01 * lambda,
            e_p: 0.0,
        }),
        StagePlan::single(1000),
        6,
    );
    s.sweep = Some(SweepSpec {
        parameter: crate::reporting::SweptParameter::EV,
        grid: [0.0025, 0.005, 0.01, 0.02, 0.04].iter().map(|f| f * lambda).collect(),
        slots: 1000,
        seeds_per_point: 5,
    });
    s
}

pub fn paper_fig5() -> ScenarioFile {
    let stack = paper_stack(3);
    let b = paper_bounds(stack.wavelength).scaled(10.0);
    let mut s = base("paper-fig5", stack, ErrorSpec::Bounds(b), StagePlan::multi(10, 100), 3);
    s.heatmap = Some(HeatmapSpec::default());
    s
}

pub fn desk_tiny() -> ScenarioFile {
    let lambda = SPEED_OF_LIGHT / 28e9;
    let stack = SimStackConfig::with_defaults(2, 2, lambda, 0.01 / 3.0);
    let b = paper_bounds(lambda).scaled(10.0);
    let mut s = base("desk-tiny", stack, ErrorSpec::Bounds(b), StagePlan::multi(3, 50), 2);
    s.codebook = Some(Codebook::uniform(2, &b, 3, 0.25));
    s.monitor = Some(MonitorSpec {
        settings: MonitorSettings {
            threshold: 1e-3,
            window: 5,
            data_per_known: 20,
            recalibration_slots: 50,
            stage_index: 3,
        },
        known_slots: 2000,
        change_at: Some(1000),
        change_bounds: Some(b.scaled(5.0)),
    });
    s
}

/// Every scenario shipped with the crate.
pub fn bundled_scenarios() -> Vec<ScenarioFile> {
    vec![paper_fig4a(), paper_fig4b(), paper_fig5(), desk_tiny()]
}

pub fn bundled(name: &str) -> Option<ScenarioFile> {
    bundled_scenarios().into_iter().find(|s| s.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig4a_values() {
        let s = paper_fig4a();
        assert!((s.stack.wavelength - 0.010707).abs() < 1e-6);
        assert_eq!((s.stack.num_layers, s.stack.atoms_per_side), (4, 6));
        assert_eq!((s.stages.num_stages, s.stages.slots_per_stage), (10, 100));
        assert_eq!(s.scene.ue_position.y, -30.0);
        let b = s.bounds().unwrap();
        assert!((b.e_i / s.stack.wavelength - 0.001).abs() < 1e-15);
        assert!((b.e_v / s.stack.wavelength - 0.01).abs() < 1e-15);
        assert!((b.e_p - 0.01f64.to_radians()).abs() < 1e-18);
    }

    #[test]
    fn bundle_has_the_four_scenarios() {
        let names: Vec<String> = bundled_scenarios().into_iter().map(|s| s.name).collect();
        assert_eq!(names, ["paper-fig4a", "paper-fig4b", "paper-fig5", "desk-tiny"]);
        assert!(bundled("desk-tiny").is_some());
        assert!(bundled("nope").is_none());
        for s in bundled_scenarios() {
            s.validate().unwrap();
        }
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let mut v: Value = serde_json::from_str(&desk_tiny().to_json()).unwrap();
        v["gradient"]["stepsize"] = Value::from(0.1);
        match ScenarioFile::from_value(v).unwrap_err() {
            SimError::Config { field, reason } => {
                assert_eq!(field, "gradient.stepsize");
                assert!(reason.contains("stepsize"), "{reason}");
            }
            e => panic!("{e}"),
        }
        let mut v: Value = serde_json::from_str(&desk_tiny().to_json()).unwrap();
        v["stack"]["num_layers"] = Value::from("four");
        match ScenarioFile::from_value(v).unwrap_err() {
            SimError::Config { field, .. } => assert_eq!(field, "stack.num_layers"),
            e => panic!("{e}"),
        }
        let mut s = desk_tiny();
        s.stack.num_layers = 1;
        assert!(matches!(s.validate(), Err(SimError::Config { ref field, .. }) if field == "stack.num_layers"));
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let text = desk_tiny().to_json();
        let err = ScenarioFile::from_json_with_overrides(&text, &["gradient.step_size=-1".into()]).unwrap_err();
        assert!(matches!(err, SimError::Config { ref field, .. } if field == "gradient.step_size"));
        let err = ScenarioFile::from_json_with_overrides(&text, &["stages.num_stages=0".into()]).unwrap_err();
        assert!(matches!(err, SimError::Config { ref field, .. } if field == "stages.num_stages"));
    }

    #[test]
    fn overrides_take_precedence() {
        let text = desk_tiny().to_json();
        let s = ScenarioFile::from_json_with_overrides(
            &text,
            &[
                "seed=7".into(),
                "stages.slots_per_stage=20".into(),
                "name=renamed".into(),
                "codebook.layers.1.vertical=[0.0]".into(),
                "pilots.snr_db=30".into(),
            ],
        )
        .unwrap();
        assert_eq!(s.seed, 7);
        assert_eq!(s.stages.slots_per_stage, 20);
        assert_eq!(s.name, "renamed");
        assert_eq!(s.codebook.unwrap().layers[1].vertical, vec![0.0]);
        assert_eq!(s.pilots.snr_db, Some(30.0));
        assert!(ScenarioFile::from_json_with_overrides(&text, &["seed".into()]).is_err());
        assert!(ScenarioFile::from_json_with_overrides(&text, &["codebook.layers.9.vertical=[0.0]".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = desk_tiny();
        let mut b = desk_tiny();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn error_state_is_seeded() {
        let s = paper_fig4a();
        assert_eq!(s.error_state(3), s.error_state(3));
        assert_ne!(s.error_state(3), s.error_state(4));
        assert!(s.bounds().unwrap().contains(&s.error_state(3)));
    }

    #[test]
    fn explicit_errors_must_match_layers() {
        let mut s = desk_tiny();
        s.errors = ErrorSpec::Explicit(ErrorState::zeros(3));
        assert!(s.validate().is_err());
    }
}
