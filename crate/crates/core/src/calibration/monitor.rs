//! State-driven recalibration: watch a windowed pilot residual during data
//! transmission and recalibrate when it crosses a threshold.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::gradient::{run_gradient_stage_with, GradientSettings};
use super::objective::pilot_loss;
use crate::error::{Result, SimError};
use crate::geometry::SimStackConfig;
use crate::matrix::C64;
use crate::measurement::{generate_phase_schedule, measure, MeasurementSet, PilotPlan, SlotRecord};
use crate::propagation::PropagationSet;
use crate::seeds::{derive, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSettings {
    /// Windowed mean pilot loss that triggers recalibration.
    pub threshold: f64,
    /// Number of known slots in the moving window.
    pub window: usize,
    /// Data slots between consecutive known slots.
    #[serde(default = "default_data_per_known")]
    pub data_per_known: usize,
    /// Pilot slots allocated to each recalibration.
    pub recalibration_slots: usize,
    /// Stage index whose step size recalibration reuses.
    #[serde(default = "default_stage_index")]
    pub stage_index: usize,
}

fn default_data_per_known() -> usize {
    20
}

fn default_stage_index() -> usize {
    1
}

impl MonitorSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(SimError::config("monitor.settings.threshold", "must be > 0"));
        }
        if self.window < 1 {
            return Err(SimError::config("monitor.settings.window", "must be >= 1"));
        }
        if self.recalibration_slots < 1 {
            return Err(SimError::config("monitor.settings.recalibration_slots", "must be >= 1"));
        }
        Ok(())
    }
}

/// Live system seen through known-symbol slots.
pub trait SlotStream {
    /// Next embedded known slot, or `None` when the stream ends.
    fn next_known(&mut self) -> Result<Option<SlotRecord>>;
    /// Pilot symbol of every slot this stream produces.
    fn pilot_symbol(&self) -> C64;
    /// A fresh block of calibration pilots from the current state of the system.
    fn calibration_block(&mut self, num_slots: usize) -> Result<MeasurementSet>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerEvent {
    /// Index of the known slot that crossed the threshold (0 based).
    pub known_slot: usize,
    /// Same instant counted in all slots (known and data).
    pub slot: usize,
    pub indicator_before: f64,
    /// Indicator of the updated estimate on the recalibration pilots.
    pub indicator_after: f64,
    pub recalibration_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorLog {
    pub events: Vec<TriggerEvent>,
    /// Windowed indicator after every known slot.
    pub indicator: Vec<f64>,
    pub estimate: PropagationSet,
    pub known_slots: usize,
}

/// Runs the monitor until the stream ends.
pub fn state_driven_monitor(
    current_estimate: &PropagationSet,
    stream: &mut dyn SlotStream,
    anchor: &PropagationSet,
    monitor: &MonitorSettings,
    settings: &GradientSettings,
) -> Result<MonitorLog> {
    monitor.validate()?;
    settings.validate()?;
    let mut estimate = current_estimate.clone();
    let mut window: VecDeque<f64> = VecDeque::with_capacity(monitor.window);
    let mut log = MonitorLog {
        events: Vec::new(),
        indicator: Vec::new(),
        estimate: estimate.clone(),
        known_slots: 0,
    };
    let pilot = stream.pilot_symbol();
    let stride = monitor.data_per_known + 1;
    let mut k = 0usize;
    while let Some(slot) = stream.next_known()? {
        let single = MeasurementSet {
            pilot_symbol: pilot,
            slots: vec![slot],
        };
        let loss = pilot_loss(&estimate, &single)?;
        if window.len() == monitor.window {
            window.pop_front();
        }
        window.push_back(loss);
        let indicator = window.iter().sum::<f64>() / window.len() as f64;
        log.indicator.push(indicator);
        if indicator > monitor.threshold {
            let block = stream.calibration_block(monitor.recalibration_slots)?;
            let step = settings.stage_step(monitor.stage_index);
            let outcome = run_gradient_stage_with(&estimate, anchor, &block, settings, step)?;
            estimate = outcome.estimate;
            log.events.push(TriggerEvent {
                known_slot: k,
                slot: k * stride,
                indicator_before: indicator,
                indicator_after: pilot_loss(&estimate, &block)?,
                recalibration_loss: outcome.final_loss,
            });
            // Losses of the stale estimate no longer describe the system.
            window.clear();
        }
        k += 1;
    }
    log.known_slots = k;
    log.estimate = estimate;
    Ok(log)
}

/// Simulated system whose hidden state may switch once, at a given known slot.
#[derive(Debug, Clone)]
pub struct SimulatedStream {
    config: SimStackConfig,
    before: PropagationSet,
    change: Option<(usize, PropagationSet)>,
    total_known: usize,
    seed: u64,
    snr_db: Option<f64>,
    next: usize,
    blocks: u64,
}

impl SimulatedStream {
    pub fn new(config: SimStackConfig, system: PropagationSet, total_known: usize, seed: u64) -> Self {
        Self {
            config,
            before: system,
            change: None,
            total_known,
            seed,
            snr_db: None,
            next: 0,
            blocks: 0,
        }
    }

    /// From known slot `at` onward the system is `after`.
    pub fn with_change(mut self, at: usize, after: PropagationSet) -> Self {
        self.change = Some((at, after));
        self
    }

    pub fn with_snr(mut self, snr_db: Option<f64>) -> Self {
        self.snr_db = snr_db;
        self
    }

    fn current(&self) -> &PropagationSet {
        match &self.change {
            Some((at, after)) if self.next >= *at => after,
            _ => &self.before,
        }
    }

    fn draw(&self, index: u64, num_slots: usize) -> Result<MeasurementSet> {
        let plan = PilotPlan {
            num_slots,
            phase_seed: derive(self.seed, Stream::Monitor, 2 * index),
            pilot_symbol: C64::new(1.0, 0.0),
            snr_db: self.snr_db,
        };
        let schedule = generate_phase_schedule(&self.config, &plan);
        measure(self.current(), &schedule, &plan, derive(self.seed, Stream::Monitor, 2 * index + 1))
    }
}

impl SlotStream for SimulatedStream {
    fn next_known(&mut self) -> Result<Option<SlotRecord>> {
        if self.next >= self.total_known {
            return Ok(None);
        }
        let mut set = self.draw(self.next as u64, 1)?;
        self.next += 1;
        Ok(set.slots.pop())
    }

    fn pilot_symbol(&self) -> C64 {
        C64::new(1.0, 0.0)
    }

    fn calibration_block(&mut self, num_slots: usize) -> Result<MeasurementSet> {
        // Calibration blocks use indices far above any known-slot index.
        self.blocks += 1;
        self.draw((1u64 << 40) + self.blocks, num_slots)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_errors;
    use crate::reporting::calibrate_seed;
    use crate::scenario::desk_tiny;

    fn setup(seed: u64) -> (SimStackConfig, PropagationSet, PropagationSet, PropagationSet, PropagationSet) {
        let s = desk_tiny();
        let (trace, ideal, practical) = calibrate_seed(&s, seed, |_| {}).unwrap();
        let bounds = s.monitor.as_ref().unwrap().change_bounds.unwrap();
        let after = s
            .model()
            .unwrap()
            .realize(&sample_errors(&bounds, 2, seed + 77))
            .unwrap();
        (s.stack, ideal, practical, trace.estimate, after)
    }

    fn settings(threshold: f64) -> MonitorSettings {
        MonitorSettings {
            threshold,
            window: 5,
            data_per_known: 20,
            recalibration_slots: 50,
            stage_index: 1,
        }
    }

    #[test]
    fn static_system_never_triggers() {
        let (config, ideal, practical, estimate, _) = setup(1);
        let mut stream = SimulatedStream::new(config, practical, 1000, 3);
        let log = state_driven_monitor(&estimate, &mut stream, &ideal, &settings(0.1), &GradientSettings::default()).unwrap();
        assert!(log.events.is_empty());
        assert_eq!(log.known_slots, 1000);
        assert_eq!(log.indicator.len(), 1000);
    }

    #[test]
    fn step_change_triggers_once() {
        let (config, ideal, practical, estimate, after) = setup(2);
        let m = settings(1e-3);
        let mut stream = SimulatedStream::new(config, practical, 600, 9).with_change(300, after);
        let log = state_driven_monitor(&estimate, &mut stream, &ideal, &m, &GradientSettings::default()).unwrap();
        assert_eq!(log.events.len(), 1, "{:?}", log.events);
        let e = &log.events[0];
        assert!(e.known_slot >= 300 && e.known_slot < 300 + m.window);
        assert_eq!(e.slot, e.known_slot * 21);
        assert!(e.indicator_after < m.threshold);
        assert!(log.indicator[e.known_slot + 1..].iter().all(|&v| v < m.threshold));
    }

    #[test]
    fn infinite_threshold_never_triggers() {
        let (config, ideal, practical, estimate, after) = setup(3);
        let mut stream = SimulatedStream::new(config, practical, 200, 1).with_change(50, after);
        let log = state_driven_monitor(&estimate, &mut stream, &ideal, &settings(f64::INFINITY), &GradientSettings::default())
            .unwrap();
        assert!(log.events.is_empty());
        assert_eq!(log.estimate, estimate);
    }

    #[test]
    fn settings_are_checked() {
        assert!(settings(0.0).validate().is_err());
        assert!(MonitorSettings { window: 0, ..settings(1.0) }.validate().is_err());
    }
}
