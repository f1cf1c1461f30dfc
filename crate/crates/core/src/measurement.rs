//! Pilot observations of the practical system.
//!
//! Only the end-to-end receiver outputs and the phase configurations that
//! produced them leave this module; intermediate layer fields are never stored.

use std::f64::consts::TAU;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::geometry::SimStackConfig;
use crate::matrix::C64;
use crate::propagation::{cascade_response, PhaseConfig, PropagationSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotPlan {
    pub num_slots: usize,
    pub phase_seed: u64,
    #[serde(default = "default_pilot")]
    pub pilot_symbol: C64,
    /// `None` (or `+inf`) means noiseless.
    #[serde(default)]
    pub snr_db: Option<f64>,
}

fn default_pilot() -> C64 {
    C64::new(1.0, 0.0)
}

impl PilotPlan {
    pub fn noiseless(num_slots: usize, phase_seed: u64) -> Self {
        Self {
            num_slots,
            phase_seed,
            pilot_symbol: default_pilot(),
            snr_db: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_slots < 1 {
            return Err(SimError::config("pilot.num_slots", "must be >= 1"));
        }
        if let Some(snr) = self.snr_db {
            if snr.is_nan() || snr == f64::NEG_INFINITY {
                return Err(SimError::config("pilot.snr_db", "must be finite or +inf"));
            }
        }
        if self.pilot_symbol.norm() == 0.0 || !self.pilot_symbol.is_finite() {
            return Err(SimError::config("pilot.pilot_symbol", "must be finite and nonzero"));
        }
        Ok(())
    }

    fn noise_ratio(&self) -> Option<f64> {
        match self.snr_db {
            Some(snr) if snr.is_finite() => Some(10f64.powf(-snr / 10.0)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub phases: PhaseConfig,
    pub received: Vec<C64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub pilot_symbol: C64,
    pub slots: Vec<SlotRecord>,
}

impl MeasurementSet {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_rx(&self) -> usize {
        self.slots.first().map_or(0, |s| s.received.len())
    }

    pub fn received_power(&self) -> f64 {
        self.slots.iter().flat_map(|s| &s.received).map(|y| y.norm_sqr()).sum()
    }
}

/// `T` phase configurations, each entry i.i.d. uniform on `[0, 2 pi)`.
/// Slot `t` draws from ChaCha stream `t` of `phase_seed`, so slots are independent.
pub fn generate_phase_schedule(config: &SimStackConfig, plan: &PilotPlan) -> Vec<PhaseConfig> {
    let n = config.atoms_per_layer();
    (0..plan.num_slots)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(plan.phase_seed);
            rng.set_stream(t as u64);
            PhaseConfig {
                layers: (0..config.num_layers)
                    .map(|_| (0..n).map(|_| rng.random::<f64>() * TAU).collect())
                    .collect(),
            }
        })
        .collect()
}

/// Simulates `y_t = cascade(practical, phi_t) * pilot + n_t`. The noise variance is
/// set from the schedule-average received signal power.
pub fn measure(
    practical: &PropagationSet,
    schedule: &[PhaseConfig],
    plan: &PilotPlan,
    noise_seed: u64,
) -> Result<MeasurementSet> {
    plan.validate()?;
    practical.check_dimensions()?;
    let clean: Vec<Vec<C64>> = schedule
        .iter()
        .map(|phi| {
            cascade_response(practical, phi).map(|y| y.into_iter().map(|v| v * plan.pilot_symbol).collect())
        })
        .collect::<Result<_>>()?;

    let noise_var = plan.noise_ratio().map(|ratio| {
        let count: usize = clean.iter().map(Vec::len).sum();
        let power: f64 = clean.iter().flatten().map(|y| y.norm_sqr()).sum::<f64>() / count.max(1) as f64;
        power * ratio
    });

    let slots = schedule
        .iter()
        .zip(clean)
        .enumerate()
        .map(|(t, (phi, mut y))| {
            if let Some(var) = noise_var {
                let sigma = (var / 2.0).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
                rng.set_stream(t as u64);
                for v in &mut y {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    *v += C64::new(re * sigma, im * sigma);
                }
            }
            SlotRecord {
                phases: phi.clone(),
                received: y,
            }
        })
        .collect();
    Ok(MeasurementSet {
        pilot_symbol: plan.pilot_symbol,
        slots,
    })
}

/// Writes `slot,rx_index,re,im`.
pub fn write_measurements_csv<W: Write>(set: &MeasurementSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["slot", "rx_index", "re", "im"]).map_err(csv_err)?;
    for (t, s) in set.slots.iter().enumerate() {
        for (r, y) in s.received.iter().enumerate() {
            w.write_record([t.to_string(), r.to_string(), format!("{:e}", y.re), format!("{:e}", y.im)])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `slot,layer,atom,phase_radians`.
pub fn write_schedule_csv<W: Write>(set: &MeasurementSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["slot", "layer", "atom", "phase_radians"]).map_err(csv_err)?;
    for (t, s) in set.slots.iter().enumerate() {
        for (l, layer) in s.phases.layers.iter().enumerate() {
            for (n, theta) in layer.iter().enumerate() {
                w.write_record([t.to_string(), l.to_string(), n.to_string(), format!("{theta:e}")])
                    .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the pair written by [`write_measurements_csv`] and [`write_schedule_csv`].
pub fn read_measurements_csv<R: Read, S: Read>(
    received: R,
    schedule: S,
    pilot_symbol: C64,
) -> Result<MeasurementSet> {
    let mut slots: Vec<SlotRecord> = Vec::new();
    let mut rdr = csv::Reader::from_reader(schedule);
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let t: usize = parse(&rec, 0)?;
        let l: usize = parse(&rec, 1)?;
        let n: usize = parse(&rec, 2)?;
        let theta: f64 = parse(&rec, 3)?;
        while slots.len() <= t {
            slots.push(SlotRecord {
                phases: PhaseConfig { layers: Vec::new() },
                received: Vec::new(),
            });
        }
        let layers = &mut slots[t].phases.layers;
        while layers.len() <= l {
            layers.push(Vec::new());
        }
        if layers[l].len() != n {
            return Err(SimError::Parse(format!("schedule row out of order at slot {t} layer {l} atom {n}")));
        }
        layers[l].push(theta);
    }
    let mut rdr = csv::Reader::from_reader(received);
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let t: usize = parse(&rec, 0)?;
        let r: usize = parse(&rec, 1)?;
        let re: f64 = parse(&rec, 2)?;
        let im: f64 = parse(&rec, 3)?;
        let slot = slots
            .get_mut(t)
            .ok_or_else(|| SimError::Parse(format!("received slot {t} has no phase schedule")))?;
        if slot.received.len() != r {
            return Err(SimError::Parse(format!("received row out of order at slot {t} rx {r}")));
        }
        slot.received.push(C64::new(re, im));
    }
    Ok(MeasurementSet { pilot_symbol, slots })
}

fn parse<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| SimError::Parse(format!("bad field {i} in record {rec:?}")))
}

fn csv_err(e: csv::Error) -> SimError {
    SimError::Io(e.to_string())
}
