//! Ideal stack geometry and rigid-layer fabrication errors.
//!
//! Axis convention: `y` is the propagation axis, `z` is the vertical in-plane
//! axis and `x` the lateral in-plane axis. Every layer lies in an x-z plane.

use std::ops::{Add, Mul, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Point3) -> f64 {
        (o - self).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Unit vector along the propagation axis.
pub const PROPAGATION_AXIS: Point3 = Point3::new(0.0, 1.0, 0.0);

/// Physical description of the metasurface stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimStackConfig {
    pub num_layers: usize,
    pub atoms_per_side: usize,
    /// Meters.
    pub wavelength: f64,
    /// Center-to-center spacing within a layer, meters.
    pub atom_pitch: f64,
    /// Distance from the first to the last layer, meters.
    pub stack_thickness: f64,
    /// Effective aperture of one meta-atom, square meters.
    pub atom_area: f64,
}

impl SimStackConfig {
    /// Stack with half-wavelength pitch and `(lambda/2)^2` atom area.
    pub fn with_defaults(
        num_layers: usize,
        atoms_per_side: usize,
        wavelength: f64,
        stack_thickness: f64,
    ) -> Self {
        let pitch = wavelength / 2.0;
        Self {
            num_layers,
            atoms_per_side,
            wavelength,
            atom_pitch: pitch,
            stack_thickness,
            atom_area: pitch * pitch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(SimError::config("num_layers", "must be >= 2"));
        }
        if self.atoms_per_side < 1 {
            return Err(SimError::config("atoms_per_side", "must be >= 1"));
        }
        for (name, v) in [
            ("wavelength", self.wavelength),
            ("atom_pitch", self.atom_pitch),
            ("stack_thickness", self.stack_thickness),
            ("atom_area", self.atom_area),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::config(name, format!("must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn atoms_per_layer(&self) -> usize {
        self.atoms_per_side * self.atoms_per_side
    }

    pub fn nominal_gap(&self) -> f64 {
        self.stack_thickness / (self.num_layers - 1) as f64
    }

    /// Ideal propagation-axis coordinate of layer `l` (zero based).
    pub fn ideal_layer_y(&self, l: usize) -> f64 {
        l as f64 * self.nominal_gap()
    }
}

/// Rigid errors of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerError {
    /// Deviation of the gap preceding this layer, meters. Always 0 on layer 1.
    pub delta_spacing: f64,
    /// Shift along the vertical in-plane axis, meters.
    pub delta_vertical: f64,
    /// In-plane rotation about the layer center, radians.
    pub delta_rotation: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ErrorState {
    pub layers: Vec<LayerError>,
}

impl ErrorState {
    pub fn zeros(num_layers: usize) -> Self {
        Self {
            layers: vec![LayerError::default(); num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|e| {
            e.delta_spacing.is_finite() && e.delta_vertical.is_finite() && e.delta_rotation.is_finite()
        })
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|e| *e == LayerError::default())
    }

    /// Flattened `(spacing, vertical, rotation)` per layer.
    pub fn to_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|e| [e.delta_spacing, e.delta_vertical, e.delta_rotation])
            .collect()
    }
}

/// Maximum magnitudes of the uniform error distributions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBounds {
    /// Spacing bound, meters.
    pub e_i: f64,
    /// Vertical bound, meters.
    pub e_v: f64,
    /// Rotation bound, radians.
    pub e_p: f64,
}

impl ErrorBounds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("e_i", self.e_i), ("e_v", self.e_v), ("e_p", self.e_p)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            e_i: self.e_i * factor,
            e_v: self.e_v * factor,
            e_p: self.e_p * factor,
        }
    }

    pub fn contains(&self, errors: &ErrorState) -> bool {
        errors.layers.iter().all(|e| {
            e.delta_spacing.abs() <= self.e_i
                && e.delta_vertical.abs() <= self.e_v
                && e.delta_rotation.abs() <= self.e_p
        })
    }
}

/// How spacing deviations act along the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpacingMode {
    /// A deviation moves its layer and every layer after it.
    #[default]
    Cumulative,
    /// A deviation moves only its own layer.
    PerGap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub layer_index: usize,
    /// Atom `n` sits at row `n / M` (vertical) and column `n % M` (lateral).
    pub atom_positions: Vec<Point3>,
    pub normal: Point3,
}

impl LayerGeometry {
    pub fn num_atoms(&self) -> usize {
        self.atom_positions.len()
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.atom_positions.len() as f64;
        let sum = self
            .atom_positions
            .iter()
            .fold(Point3::default(), |acc, &p| acc + p);
        sum * (1.0 / n)
    }

    /// Propagation-axis coordinate of the layer plane (taken from atom 0).
    pub fn plane_y(&self) -> f64 {
        self.atom_positions[0].y
    }
}

/// Centered `m x m` grid offsets at `pitch`, returned as `(x, z)` pairs in atom order.
pub fn grid_offsets(m: usize, pitch: f64) -> Vec<(f64, f64)> {
    let half = (m as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(m * m);
    for row in 0..m {
        for col in 0..m {
            out.push(((col as f64 - half) * pitch, (row as f64 - half) * pitch));
        }
    }
    out
}

pub fn build_ideal_geometry(config: &SimStackConfig) -> Result<Vec<LayerGeometry>> {
    config.validate()?;
    let offsets = grid_offsets(config.atoms_per_side, config.atom_pitch);
    Ok((0..config.num_layers)
        .map(|l| {
            let y = config.ideal_layer_y(l);
            LayerGeometry {
                layer_index: l,
                atom_positions: offsets.iter().map(|&(x, z)| Point3::new(x, y, z)).collect(),
                normal: PROPAGATION_AXIS,
            }
        })
        .collect())
}

/// Draws every error component independently from `U(-bound, bound)`.
pub fn sample_errors(bounds: &ErrorBounds, num_layers: usize, rng_seed: u64) -> ErrorState {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut draw = |b: f64| {
        if b > 0.0 {
            rng.random_range(-b..=b)
        } else {
            0.0
        }
    };
    let layers = (0..num_layers)
        .map(|l| {
            let spacing = draw(bounds.e_i);
            LayerError {
                delta_spacing: if l == 0 { 0.0 } else { spacing },
                delta_vertical: draw(bounds.e_v),
                delta_rotation: draw(bounds.e_p),
            }
        })
        .collect();
    ErrorState { layers }
}

pub fn apply_errors(ideal: &[LayerGeometry], errors: &ErrorState) -> Result<Vec<LayerGeometry>> {
    apply_errors_with(ideal, errors, SpacingMode::Cumulative)
}

/// Rigid motion of one layer: a translation followed by an in-plane rotation
/// about the translated layer center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub shift: Point3,
    pub center: Point3,
    pub angle: f64,
}

impl RigidTransform {
    pub fn apply(&self, p: Point3) -> Point3 {
        let q = Point3::new(p.x + self.shift.x, p.y + self.shift.y, p.z + self.shift.z);
        if self.angle == 0.0 {
            return q;
        }
        let (s, c) = self.angle.sin_cos();
        let dx = q.x - self.center.x;
        let dz = q.z - self.center.z;
        Point3::new(self.center.x + c * dx - s * dz, q.y, self.center.z + s * dx + c * dz)
    }
}

/// Per-layer rigid transforms implied by `errors`.
pub fn layer_transforms(
    ideal: &[LayerGeometry],
    errors: &ErrorState,
    mode: SpacingMode,
) -> Result<Vec<RigidTransform>> {
    if ideal.len() != errors.num_layers() {
        return Err(SimError::dimension(
            "apply_errors",
            format!("{} layers", ideal.len()),
            format!("{} layers", errors.num_layers()),
        ));
    }
    if !errors.is_finite() {
        return Err(SimError::config("errors", "non-finite entry"));
    }
    let mut axial_offset = 0.0;
    Ok(ideal
        .iter()
        .zip(&errors.layers)
        .enumerate()
        .map(|(l, (layer, err))| {
            // Layer 1 never carries a spacing deviation.
            let spacing = if l == 0 { 0.0 } else { err.delta_spacing };
            let axial = match mode {
                SpacingMode::Cumulative => {
                    axial_offset += spacing;
                    axial_offset
                }
                SpacingMode::PerGap => spacing,
            };
            let shift = Point3::new(0.0, axial, err.delta_vertical);
            RigidTransform {
                shift,
                center: layer.centroid() + shift,
                angle: err.delta_rotation,
            }
        })
        .collect())
}

/// Applies spacing, then vertical shift, then in-plane rotation to every layer.
pub fn apply_errors_with(
    ideal: &[LayerGeometry],
    errors: &ErrorState,
    mode: SpacingMode,
) -> Result<Vec<LayerGeometry>> {
    let transforms = layer_transforms(ideal, errors, mode)?;
    Ok(ideal
        .iter()
        .zip(&transforms)
        .map(|(layer, t)| LayerGeometry {
            layer_index: layer.layer_index,
            atom_positions: layer.atom_positions.iter().map(|&p| t.apply(p)).collect(),
            normal: layer.normal,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(l: usize, m: usize) -> SimStackConfig {
        SimStackConfig::with_defaults(l, m, 299_792_458.0 / 28e9, 0.01)
    }

    #[test]
    fn degenerate_two_single_atoms() {
        let g = build_ideal_geometry(&cfg(2, 1)).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].atom_positions, vec![Point3::new(0.0, 0.0, 0.0)]);
        assert_eq!(g[1].atom_positions, vec![Point3::new(0.0, 0.01, 0.0)]);
    }

    #[test]
    fn four_layer_gap() {
        let c = cfg(4, 6);
        assert!((c.nominal_gap() - 0.01 / 3.0).abs() < 1e-15);
        let g = build_ideal_geometry(&c).unwrap();
        for l in 1..4 {
            assert!((g[l].plane_y() - g[l - 1].plane_y() - 0.01 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn centered_three_by_three() {
        let mut c = cfg(2, 3);
        c.atom_pitch = 0.002;
        let g = build_ideal_geometry(&c).unwrap();
        let mut xs: Vec<f64> = g[0].atom_positions.iter().map(|p| p.x).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        assert_eq!(xs, vec![-0.002, 0.0, 0.002]);
        let mut zs: Vec<f64> = g[0].atom_positions.iter().map(|p| p.z).collect();
        zs.sort_by(f64::total_cmp);
        zs.dedup();
        assert_eq!(zs, vec![-0.002, 0.0, 0.002]);
        let centroid = g[0].centroid();
        assert!(centroid.x.abs() < 1e-18 && centroid.z.abs() < 1e-18);
    }

    #[test]
    fn even_grid_has_no_center_atom() {
        let g = build_ideal_geometry(&cfg(2, 4)).unwrap();
        assert!(g[0].atom_positions.iter().all(|p| p.x != 0.0 && p.z != 0.0));
    }

    #[test]
    fn invalid_config_names_field() {
        let mut c = cfg(1, 3);
        match build_ideal_geometry(&c) {
            Err(SimError::Config { field, .. }) => assert_eq!(field, "num_layers"),
            other => panic!("unexpected {other:?}"),
        }
        c.num_layers = 3;
        c.wavelength = -1.0;
        match build_ideal_geometry(&c) {
            Err(SimError::Config { field, .. }) => assert_eq!(field, "wavelength"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_bounds_give_zero_errors() {
        let e = sample_errors(&ErrorBounds::default(), 4, 11);
        assert!(e.is_zero());
    }

    #[test]
    fn sampling_is_deterministic() {
        let b = ErrorBounds { e_i: 1e-5, e_v: 1e-4, e_p: 1e-4 };
        assert_eq!(sample_errors(&b, 4, 99), sample_errors(&b, 4, 99));
        assert_ne!(sample_errors(&b, 4, 99), sample_errors(&b, 4, 100));
        assert_eq!(sample_errors(&b, 4, 99).layers[0].delta_spacing, 0.0);
    }

    #[test]
    fn vertical_samples_look_uniform() {
        let lambda = 299_792_458.0 / 28e9;
        let e_v = 0.01 * lambda;
        let b = ErrorBounds { e_i: 0.0, e_v, e_p: 0.0 };
        // 25 000 seeds x 4 layers = 10^5 draws.
        let draws: Vec<f64> = (0..25_000u64)
            .flat_map(|s| sample_errors(&b, 4, s).layers.into_iter().map(|e| e.delta_vertical))
            .collect();
        assert_eq!(draws.len(), 100_000);
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let std_err = e_v / 3f64.sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * std_err, "mean {mean} vs 3 se {}", 3.0 * std_err);
        assert!(draws.iter().all(|d| d.abs() <= e_v));
    }

    #[test]
    fn zero_errors_are_identity() {
        let ideal = build_ideal_geometry(&cfg(4, 6)).unwrap();
        let out = apply_errors(&ideal, &ErrorState::zeros(4)).unwrap();
        assert_eq!(out, ideal);
    }

    #[test]
    fn vertical_shift_moves_only_that_layer() {
        let ideal = build_ideal_geometry(&cfg(3, 3)).unwrap();
        let mut e = ErrorState::zeros(3);
        e.layers[1].delta_vertical = 1e-3;
        let out = apply_errors(&ideal, &e).unwrap();
        for (l, (a, b)) in ideal.iter().zip(&out).enumerate() {
            for (p, q) in a.atom_positions.iter().zip(&b.atom_positions) {
                assert_eq!(p.x, q.x);
                assert_eq!(p.y, q.y);
                if l == 1 {
                    assert_eq!(q.z, p.z + 1e-3);
                } else {
                    assert_eq!(p.z, q.z);
                }
            }
        }
    }

    #[test]
    fn quarter_turn_preserves_grid() {
        let ideal = build_ideal_geometry(&cfg(2, 3)).unwrap();
        let mut e = ErrorState::zeros(2);
        e.layers[1].delta_rotation = std::f64::consts::FRAC_PI_2;
        let out = apply_errors(&ideal, &e).unwrap();
        // Brute-force optimal matching: every rotated atom must coincide with a distinct ideal atom.
        let src = &ideal[1].atom_positions;
        let dst = &out[1].atom_positions;
        let mut used = vec![false; src.len()];
        for q in dst {
            let (j, d) = src
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .map(|(j, p)| (j, p.distance(*q)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!(d < 1e-12, "unmatched atom at distance {d}");
            used[j] = true;
        }
    }

    #[test]
    fn mismatched_layers_error() {
        let ideal = build_ideal_geometry(&cfg(3, 2)).unwrap();
        assert!(matches!(
            apply_errors(&ideal, &ErrorState::zeros(2)),
            Err(SimError::Dimension { .. })
        ));
    }

    #[test]
    fn per_gap_mode_does_not_accumulate() {
        let ideal = build_ideal_geometry(&cfg(4, 1)).unwrap();
        let mut e = ErrorState::zeros(4);
        e.layers[1].delta_spacing = 1e-4;
        let out = apply_errors_with(&ideal, &e, SpacingMode::PerGap).unwrap();
        assert_eq!(out[2].plane_y(), ideal[2].plane_y());
        let out = apply_errors_with(&ideal, &e, SpacingMode::Cumulative).unwrap();
        assert_eq!(out[2].plane_y(), ideal[2].plane_y() + 1e-4);
    }

    fn error_state_strategy(l: usize) -> impl Strategy<Value = ErrorState> {
        proptest::collection::vec((-1e-4..1e-4f64, -1e-3..1e-3f64, -0.5..0.5f64), l).prop_map(|v| ErrorState {
            layers: v
                .into_iter()
                .map(|(s, z, r)| LayerError { delta_spacing: s, delta_vertical: z, delta_rotation: r })
                .collect(),
        })
    }

    proptest! {
        #[test]
        fn spacing_accumulates_as_prefix_sum(errors in error_state_strategy(5)) {
            let ideal = build_ideal_geometry(&cfg(5, 3)).unwrap();
            let out = apply_errors(&ideal, &errors).unwrap();
            let mut prefix = 0.0;
            for l in 0..5 {
                if l > 0 { prefix += errors.layers[l].delta_spacing; }
                for p in &out[l].atom_positions {
                    prop_assert!((p.y - ideal[l].plane_y() - prefix).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn rotation_is_rigid(errors in error_state_strategy(3)) {
            let ideal = build_ideal_geometry(&cfg(3, 4)).unwrap();
            let out = apply_errors(&ideal, &errors).unwrap();
            for l in 0..3 {
                let a = &ideal[l].atom_positions;
                let b = &out[l].atom_positions;
                let expected_centroid = ideal[l].centroid()
                    + Point3::new(0.0, out[l].plane_y() - ideal[l].plane_y(), errors.layers[l].delta_vertical);
                prop_assert!(out[l].centroid().distance(expected_centroid) < 1e-12);
                for i in 0..a.len() {
                    for j in 0..a.len() {
                        prop_assert!((a[i].distance(a[j]) - b[i].distance(b[j])).abs() < 1e-12);
                    }
                }
                let y0 = b[0].y;
                prop_assert!(b.iter().all(|p| (p.y - y0).abs() < 1e-12));
            }
        }

        #[test]
        fn samples_stay_inside_bounds(seed in any::<u64>(), ei in 0.0..1e-3f64, ev in 0.0..1e-2f64, ep in 0.0..1e-2f64) {
            let b = ErrorBounds { e_i: ei, e_v: ev, e_p: ep };
            prop_assert!(b.contains(&sample_errors(&b, 6, seed)));
        }
    }
}
