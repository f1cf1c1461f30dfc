//! Pilot-residual loss, its adjoint gradient, and the NMSE metric.

use crate::error::{Result, SimError};
use crate::matrix::{adjoint_matmul_into, matmul_adjoint_into, matmul_into, ComplexMatrix, C64};
use crate::measurement::MeasurementSet;
use crate::propagation::{cascade_response, PropagationSet};

/// NMSE floor reported for an exact match.
pub const NMSE_FLOOR_DB: f64 = -300.0;

/// `10 log10(||estimate - truth||_F^2 / ||truth||_F^2)`, clamped at [`NMSE_FLOOR_DB`].
pub fn nmse_db(estimate: &ComplexMatrix, truth: &ComplexMatrix) -> Result<f64> {
    let reference = truth.norm_sqr();
    if reference == 0.0 {
        return Err(SimError::ZeroReference);
    }
    let residual = estimate.sub(truth)?.norm_sqr();
    Ok(ratio_db(residual / reference))
}

pub(crate) fn ratio_db(ratio: f64) -> f64 {
    if ratio <= 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * ratio.log10()).max(NMSE_FLOOR_DB)
    }
}

/// `sum_t ||y_t - cascade(candidate, phi_t) x||^2 / sum_t ||y_t||^2`, evaluated slot by slot.
pub fn pilot_loss(candidate: &PropagationSet, measurements: &MeasurementSet) -> Result<f64> {
    if measurements.is_empty() {
        return Err(SimError::EmptyMeasurements);
    }
    let mut residual = 0.0;
    let mut energy = 0.0;
    for slot in &measurements.slots {
        let model = cascade_response(candidate, &slot.phases)?;
        if model.len() != slot.received.len() {
            return Err(SimError::dimension("received vector", model.len(), slot.received.len()));
        }
        for (y, m) in slot.received.iter().zip(model) {
            residual += (y - m * measurements.pilot_symbol).norm_sqr();
            energy += y.norm_sqr();
        }
    }
    Ok(if energy > 0.0 { residual / energy } else { residual })
}

/// Conjugate (Wirtinger) gradient `dL/dX*` for every matrix of a propagation set.
#[derive(Debug, Clone, PartialEq)]
pub struct SetGradient {
    pub ue: ComplexMatrix,
    pub interlayer: Vec<ComplexMatrix>,
    pub exit: ComplexMatrix,
}

impl SetGradient {
    pub fn norm_sqr(&self) -> f64 {
        self.ue.norm_sqr() + self.interlayer.iter().map(|w| w.norm_sqr()).sum::<f64>() + self.exit.norm_sqr()
    }
}

/// Measurements laid out column-per-slot for batched evaluation.
#[derive(Debug, Clone)]
pub struct SlotBatch {
    /// `exp(j theta)` per layer, `M^2 x T`.
    transmissions: Vec<ComplexMatrix>,
    /// `y_t / x`, `N_rx x T`.
    targets: ComplexMatrix,
    /// `|x|^2 / sum ||y_t||^2`.
    scale: f64,
}

impl SlotBatch {
    pub fn new(measurements: &MeasurementSet) -> Result<Self> {
        let first = measurements.slots.first().ok_or(SimError::EmptyMeasurements)?;
        let t_count = measurements.len();
        let layers = first.phases.layers.len();
        let atoms = first.phases.layers.first().map_or(0, Vec::len);
        let n_rx = first.received.len();
        let mut transmissions = vec![ComplexMatrix::zeros(atoms, t_count); layers];
        let mut targets = ComplexMatrix::zeros(n_rx, t_count);
        let x_inv = 1.0 / measurements.pilot_symbol;
        let mut energy = 0.0;
        for (t, slot) in measurements.slots.iter().enumerate() {
            if slot.phases.layers.len() != layers || slot.received.len() != n_rx {
                return Err(SimError::dimension(format!("slot {t}"), "consistent shapes", "ragged"));
            }
            for (l, phases) in slot.phases.layers.iter().enumerate() {
                if phases.len() != atoms {
                    return Err(SimError::dimension(format!("slot {t} layer {}", l + 1), atoms, phases.len()));
                }
                for (n, &theta) in phases.iter().enumerate() {
                    transmissions[l][(n, t)] = C64::from_polar(1.0, theta);
                }
            }
            for (r, y) in slot.received.iter().enumerate() {
                targets[(r, t)] = y * x_inv;
                energy += y.norm_sqr();
            }
        }
        let scale = if energy > 0.0 {
            measurements.pilot_symbol.norm_sqr() / energy
        } else {
            measurements.pilot_symbol.norm_sqr()
        };
        Ok(Self {
            transmissions,
            targets,
            scale,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.targets.cols()
    }

    pub fn num_layers(&self) -> usize {
        self.transmissions.len()
    }

    fn check(&self, set: &PropagationSet) -> Result<()> {
        set.check_dimensions()?;
        if set.num_layers() != self.num_layers() {
            return Err(SimError::dimension("phase layers", set.num_layers(), self.num_layers()));
        }
        if set.atoms_per_layer() != self.transmissions[0].rows() {
            return Err(SimError::dimension(
                "atoms per layer",
                set.atoms_per_layer(),
                self.transmissions[0].rows(),
            ));
        }
        if set.num_rx() != self.targets.rows() {
            return Err(SimError::dimension("receivers", set.num_rx(), self.targets.rows()));
        }
        Ok(())
    }
}

/// Scratch buffers reused across evaluations of the same problem size.
#[derive(Debug, Clone)]
pub struct Workspace {
    /// Field entering each interlayer matrix (and the exit matrix, last).
    activations: Vec<ComplexMatrix>,
    output: ComplexMatrix,
    back: ComplexMatrix,
    back_next: ComplexMatrix,
}

impl Workspace {
    pub fn new(set: &PropagationSet, slots: usize) -> Self {
        let n = set.atoms_per_layer();
        Self {
            activations: vec![ComplexMatrix::zeros(n, slots); set.num_layers()],
            output: ComplexMatrix::zeros(set.num_rx(), slots),
            back: ComplexMatrix::zeros(n, slots),
            back_next: ComplexMatrix::zeros(n, slots),
        }
    }

    fn fits(&self, set: &PropagationSet, slots: usize) -> bool {
        self.activations.len() == set.num_layers()
            && self.output.shape() == (set.num_rx(), slots)
            && self.back.shape() == (set.atoms_per_layer(), slots)
    }
}

/// Batched loss and adjoint gradient over one measurement set.
#[derive(Debug, Clone)]
pub struct PilotObjective {
    batch: SlotBatch,
    ws: Workspace,
}

impl PilotObjective {
    pub fn new(template: &PropagationSet, measurements: &MeasurementSet) -> Result<Self> {
        let batch = SlotBatch::new(measurements)?;
        batch.check(template)?;
        let ws = Workspace::new(template, batch.num_slots());
        Ok(Self { batch, ws })
    }

    fn forward(&mut self, set: &PropagationSet) -> Result<f64> {
        self.batch.check(set)?;
        if !self.ws.fits(set, self.batch.num_slots()) {
            self.ws = Workspace::new(set, self.batch.num_slots());
        }
        let layers = set.num_layers();
        let b = &self.batch;
        let ws = &mut self.ws;
        {
            let a0 = &mut ws.activations[0];
            let t_count = b.num_slots();
            for n in 0..a0.rows() {
                let h = set.ue[(n, 0)];
                let phase = b.transmissions[0].row(n);
                for (dst, p) in a0.row_mut(n).iter_mut().zip(phase) {
                    *dst = h * p;
                }
                debug_assert_eq!(phase.len(), t_count);
            }
        }
        for l in 1..layers {
            let (done, rest) = ws.activations.split_at_mut(l);
            matmul_into(&set.interlayer[l - 1], &done[l - 1], &mut rest[0]);
            rest[0].hadamard_assign(&b.transmissions[l]);
        }
        matmul_into(&set.exit, &ws.activations[layers - 1], &mut ws.output);
        let mut residual = 0.0;
        for (o, y) in ws.output.as_mut_slice().iter_mut().zip(b.targets.as_slice()) {
            // Output buffer now holds the residual y - y_hat.
            *o = y - *o;
            residual += o.norm_sqr();
        }
        Ok(residual * b.scale)
    }

    pub fn loss(&mut self, set: &PropagationSet) -> Result<f64> {
        self.forward(set)
    }

    /// Loss and `dL/dX*` via one forward and one adjoint sweep.
    pub fn loss_and_gradient(&mut self, set: &PropagationSet) -> Result<(f64, SetGradient)> {
        let loss = self.forward(set)?;
        let layers = set.num_layers();
        let scale = self.batch.scale;
        let ws = &mut self.ws;
        // dL/dy_hat* = -scale * e.
        ws.output.scale(C64::new(-scale, 0.0));
        let mut exit = ComplexMatrix::zeros(set.exit.rows(), set.exit.cols());
        matmul_adjoint_into(&ws.output, &ws.activations[layers - 1], &mut exit);
        adjoint_matmul_into(&set.exit, &ws.output, &mut ws.back);
        let mut interlayer = Vec::with_capacity(layers - 1);
        for l in (1..layers).rev() {
            // Gradient w.r.t. the output of W_l.
            ws.back.hadamard_conj_assign(&self.batch.transmissions[l]);
            let w = &set.interlayer[l - 1];
            let mut g = ComplexMatrix::zeros(w.rows(), w.cols());
            matmul_adjoint_into(&ws.back, &ws.activations[l - 1], &mut g);
            interlayer.push(g);
            adjoint_matmul_into(w, &ws.back, &mut ws.back_next);
            std::mem::swap(&mut ws.back, &mut ws.back_next);
        }
        interlayer.reverse();
        ws.back.hadamard_conj_assign(&self.batch.transmissions[0]);
        let ue_grad: Vec<C64> = (0..ws.back.rows())
            .map(|n| ws.back.row(n).iter().fold(C64::new(0.0, 0.0), |acc, v| acc + v))
            .collect();
        Ok((
            loss,
            SetGradient {
                ue: ComplexMatrix::column(&ue_grad),
                interlayer,
                exit,
            },
        ))
    }
}

/// Conjugate gradient of [`pilot_loss`] with respect to every matrix in `candidate`.
pub fn pilot_loss_gradient(candidate: &PropagationSet, measurements: &MeasurementSet) -> Result<SetGradient> {
    let mut obj = PilotObjective::new(candidate, measurements)?;
    Ok(obj.loss_and_gradient(candidate)?.1)
}
