//! Interlayer propagation coefficients and the cascaded end-to-end response.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::geometry::{
    apply_errors_with, build_ideal_geometry, layer_transforms, ErrorState, LayerGeometry, Point3, RigidTransform,
    SimStackConfig, SpacingMode,
};
use crate::matrix::{ComplexMatrix, C64};

/// Pairs closer than `wavelength / MIN_DISTANCE_DIVISOR` are rejected.
pub const MIN_DISTANCE_DIVISOR: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationModel {
    #[default]
    RayleighSommerfeld,
    GeometricRadar,
}

fn guarded_distance(src: Point3, dst: Point3, wavelength: f64) -> Result<(Point3, f64)> {
    let delta = dst - src;
    let d = delta.norm();
    let guard = wavelength / MIN_DISTANCE_DIVISOR;
    if !(d >= guard) {
        return Err(SimError::Singularity { distance: d, guard });
    }
    Ok((delta, d))
}

#[inline]
fn propagation_phase(d: f64, wavelength: f64) -> C64 {
    C64::from_polar(1.0, 2.0 * PI * d / wavelength)
}

/// Rayleigh-Sommerfeld point-source coefficient
/// `A cos(chi) / d * (1 / (2 pi d) - j / lambda) * exp(j 2 pi d / lambda)`,
/// with `chi` measured from the source normal.
pub fn rs_coefficient(
    src_pos: Point3,
    dst_pos: Point3,
    src_normal: Point3,
    wavelength: f64,
    atom_area: f64,
) -> Result<C64> {
    let (delta, d) = guarded_distance(src_pos, dst_pos, wavelength)?;
    let cos_chi = delta.dot(src_normal) / d;
    let amplitude = atom_area * cos_chi / d;
    let prefactor = C64::new(1.0 / (2.0 * PI * d), -1.0 / wavelength);
    Ok(prefactor * amplitude * propagation_phase(d, wavelength))
}

/// Cosine element pattern `G(chi) = 4 cos(chi)`, zero outside the front hemisphere.
pub fn cosine_gain(cos_chi: f64) -> f64 {
    if cos_chi > 0.0 {
        4.0 * cos_chi
    } else {
        0.0
    }
}

/// Radar-equation coefficient `sqrt(G_t G_r A / (4 pi d^2)) exp(j 2 pi d / lambda)`.
///
/// Both normals point along the propagation direction, so the receive angle is
/// measured between the arrival direction and `dst_normal`.
pub fn radar_coefficient(
    src_pos: Point3,
    dst_pos: Point3,
    src_normal: Point3,
    dst_normal: Point3,
    wavelength: f64,
    atom_area: f64,
) -> Result<C64> {
    let (delta, d) = guarded_distance(src_pos, dst_pos, wavelength)?;
    let g_t = cosine_gain(delta.dot(src_normal) / d);
    let g_r = cosine_gain(delta.dot(dst_normal) / d);
    let magnitude = (g_t * g_r * atom_area / (4.0 * PI * d * d)).sqrt();
    Ok(propagation_phase(d, wavelength) * magnitude)
}

fn pair_coefficient(
    model: PropagationModel,
    src: Point3,
    dst: Point3,
    src_normal: Point3,
    dst_normal: Point3,
    wavelength: f64,
    atom_area: f64,
) -> Result<C64> {
    match model {
        PropagationModel::RayleighSommerfeld => rs_coefficient(src, dst, src_normal, wavelength, atom_area),
        PropagationModel::GeometricRadar => {
            radar_coefficient(src, dst, src_normal, dst_normal, wavelength, atom_area)
        }
    }
}

/// Entry `(m, n)` couples atom `n` of `src` into atom `m` of `dst`.
pub fn interlayer_matrix(
    src: &LayerGeometry,
    dst: &LayerGeometry,
    model: PropagationModel,
    wavelength: f64,
    atom_area: f64,
) -> Result<ComplexMatrix> {
    let min_dst = dst.atom_positions.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_src = src.atom_positions.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    if !(min_dst > max_src) {
        return Err(SimError::Singularity {
            distance: min_dst - max_src,
            guard: wavelength / MIN_DISTANCE_DIVISOR,
        });
    }
    let mut out = ComplexMatrix::zeros(dst.num_atoms(), src.num_atoms());
    for (m, &q) in dst.atom_positions.iter().enumerate() {
        for (n, &p) in src.atom_positions.iter().enumerate() {
            out[(m, n)] = pair_coefficient(model, p, q, src.normal, dst.normal, wavelength, atom_area)?;
        }
    }
    Ok(out)
}

/// Free-space spherical-wave channel from the UE to every atom of the first layer:
/// `lambda / (4 pi d) * sqrt(A cos(chi)) * exp(j 2 pi d / lambda)`.
pub fn ue_channel(
    ue_position: Point3,
    layer1: &LayerGeometry,
    wavelength: f64,
    atom_area: f64,
) -> Result<ComplexMatrix> {
    let mut h = Vec::with_capacity(layer1.num_atoms());
    for &atom in &layer1.atom_positions {
        let (delta, d) = guarded_distance(ue_position, atom, wavelength)?;
        let cos_chi = delta.dot(layer1.normal) / d;
        if cos_chi <= 0.0 {
            return Err(SimError::config(
                "scene.ue_position",
                "UE must lie in front of the first layer",
            ));
        }
        let amp = wavelength / (4.0 * PI * d) * (atom_area * cos_chi).sqrt();
        h.push(propagation_phase(d, wavelength) * amp);
    }
    Ok(ComplexMatrix::column(&h))
}

/// Rayleigh-Sommerfeld coupling from the last layer to each receive probe (`N_rx x M^2`).
pub fn exit_matrix(
    layer_last: &LayerGeometry,
    rx_positions: &[Point3],
    wavelength: f64,
    atom_area: f64,
) -> Result<ComplexMatrix> {
    let plane = layer_last.atom_positions.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    if let Some(bad) = rx_positions.iter().find(|r| !(r.y > plane)) {
        return Err(SimError::config(
            "scene.rx_positions",
            format!("receiver at y={} is not behind the last layer (y={plane})", bad.y),
        ));
    }
    let mut out = ComplexMatrix::zeros(rx_positions.len(), layer_last.num_atoms());
    for (r, &q) in rx_positions.iter().enumerate() {
        for (n, &p) in layer_last.atom_positions.iter().enumerate() {
            out[(r, n)] = rs_coefficient(p, q, layer_last.normal, wavelength, atom_area)?;
        }
    }
    Ok(out)
}

/// Phase shifts (radians) of every meta-atom, one vector per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub layers: Vec<Vec<f64>>,
}

impl PhaseConfig {
    pub fn zeros(num_layers: usize, atoms_per_layer: usize) -> Self {
        Self {
            layers: vec![vec![0.0; atoms_per_layer]; num_layers],
        }
    }

    /// Unit-modulus transmission coefficients of layer `l`.
    pub fn transmission(&self, l: usize) -> impl Iterator<Item = C64> + '_ {
        self.layers[l].iter().map(|&theta| C64::from_polar(1.0, theta))
    }
}

/// The matrices of one realization of the system: UE channel, interlayer
/// matrices in stack order, and the exit matrix to the receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationSet {
    /// `M^2 x 1`.
    pub ue: ComplexMatrix,
    /// `W_1 .. W_{L-1}`.
    pub interlayer: Vec<ComplexMatrix>,
    /// `N_rx x M^2`.
    pub exit: ComplexMatrix,
}

impl PropagationSet {
    pub fn num_layers(&self) -> usize {
        self.interlayer.len() + 1
    }

    pub fn atoms_per_layer(&self) -> usize {
        self.ue.rows()
    }

    pub fn num_rx(&self) -> usize {
        self.exit.rows()
    }

    /// Checks that every stage chains into the next.
    pub fn check_dimensions(&self) -> Result<()> {
        if self.ue.cols() != 1 {
            return Err(SimError::dimension("ue channel", "1 column", self.ue.cols()));
        }
        let mut width = self.ue.rows();
        for (i, w) in self.interlayer.iter().enumerate() {
            if w.cols() != width {
                return Err(SimError::dimension(format!("interlayer W_{}", i + 1), width, w.cols()));
            }
            width = w.rows();
        }
        if self.exit.cols() != width {
            return Err(SimError::dimension("exit matrix", width, self.exit.cols()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.ue.is_finite() && self.interlayer.iter().all(|w| w.is_finite()) && self.exit.is_finite()
    }
}

/// `W_out Phi_L W_{L-1} ... W_1 Phi_1 h`, evaluated right to left.
pub fn cascade_response(set: &PropagationSet, phases: &PhaseConfig) -> Result<Vec<C64>> {
    let layers = set.num_layers();
    if phases.layers.len() != layers {
        return Err(SimError::dimension("phase config", format!("{layers} layers"), phases.layers.len()));
    }
    let mut v = set.ue.col_vec(0);
    for l in 0..layers {
        if phases.layers[l].len() != v.len() {
            return Err(SimError::dimension(format!("phases of layer {}", l + 1), v.len(), phases.layers[l].len()));
        }
        for (x, t) in v.iter_mut().zip(phases.transmission(l)) {
            *x *= t;
        }
        let (name, w) = if l + 1 < layers {
            (format!("interlayer W_{}", l + 1), &set.interlayer[l])
        } else {
            ("exit matrix".to_string(), &set.exit)
        };
        if w.cols() != v.len() {
            return Err(SimError::dimension(name, v.len(), w.cols()));
        }
        v = w.matvec(&v)?;
    }
    Ok(v)
}

/// How the receive probes are attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RxMount {
    /// Probes move rigidly with the last layer.
    #[default]
    LastLayer,
    /// Probes stay at their nominal positions.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub ue_position: Point3,
    /// Nominal probe positions.
    pub rx_positions: Vec<Point3>,
    pub model: PropagationModel,
    pub rx_mount: RxMount,
}

impl SceneConfig {
    /// `side x side` probe grid at `pitch`, centered on the axis, `distance` behind `last_plane_y`.
    pub fn rx_grid(side: usize, pitch: f64, last_plane_y: f64, distance: f64) -> Vec<Point3> {
        crate::geometry::grid_offsets(side, pitch)
            .into_iter()
            .map(|(x, z)| Point3::new(x, last_plane_y + distance, z))
            .collect()
    }
}

/// Builds every matrix for the given (ideal or perturbed) geometry. `last_layer_motion`
/// is applied to the probes when they are mounted on the last layer.
pub fn build_propagation_set(
    geometry: &[LayerGeometry],
    scene: &SceneConfig,
    wavelength: f64,
    atom_area: f64,
    last_layer_motion: Option<&RigidTransform>,
) -> Result<PropagationSet> {
    let ue = ue_channel(scene.ue_position, &geometry[0], wavelength, atom_area)?;
    let interlayer = geometry
        .windows(2)
        .map(|pair| interlayer_matrix(&pair[0], &pair[1], scene.model, wavelength, atom_area))
        .collect::<Result<Vec<_>>>()?;
    let rx: Vec<Point3> = match (scene.rx_mount, last_layer_motion) {
        (RxMount::LastLayer, Some(t)) => scene.rx_positions.iter().map(|&p| t.apply(p)).collect(),
        _ => scene.rx_positions.clone(),
    };
    let last = geometry.last().expect("at least two layers");
    let exit = exit_matrix(last, &rx, wavelength, atom_area)?;
    Ok(PropagationSet { ue, interlayer, exit })
}

/// Everything needed to turn an error state into a propagation set.
#[derive(Debug, Clone, PartialEq)]
pub struct StackModel {
    pub config: SimStackConfig,
    pub scene: SceneConfig,
    pub spacing_mode: SpacingMode,
    ideal_geometry: Vec<LayerGeometry>,
}

impl StackModel {
    pub fn new(config: SimStackConfig, scene: SceneConfig, spacing_mode: SpacingMode) -> Result<Self> {
        let ideal_geometry = build_ideal_geometry(&config)?;
        let front = ideal_geometry[0].plane_y();
        if !(scene.ue_position.y < front) {
            return Err(SimError::config("scene.ue_position", "must lie in front of layer 1"));
        }
        let back = ideal_geometry[config.num_layers - 1].plane_y();
        if scene.rx_positions.is_empty() {
            return Err(SimError::config("scene.rx_positions", "at least one probe required"));
        }
        if scene.rx_positions.iter().any(|p| !(p.y > back)) {
            return Err(SimError::config("scene.rx_positions", "every probe must lie behind the last layer"));
        }
        Ok(Self {
            config,
            scene,
            spacing_mode,
            ideal_geometry,
        })
    }

    pub fn ideal_geometry(&self) -> &[LayerGeometry] {
        &self.ideal_geometry
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn ideal_set(&self) -> Result<PropagationSet> {
        build_propagation_set(
            &self.ideal_geometry,
            &self.scene,
            self.config.wavelength,
            self.config.atom_area,
            None,
        )
    }

    /// Propagation set of the stack deformed by `errors`.
    pub fn realize(&self, errors: &ErrorState) -> Result<PropagationSet> {
        let transforms = layer_transforms(&self.ideal_geometry, errors, self.spacing_mode)?;
        let geometry = apply_errors_with(&self.ideal_geometry, errors, self.spacing_mode)?;
        build_propagation_set(
            &geometry,
            &self.scene,
            self.config.wavelength,
            self.config.atom_area,
            transforms.last(),
        )
    }
}
