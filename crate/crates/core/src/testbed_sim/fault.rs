use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::engine::{dependent_outputs, integrate_states, read_sensors};
use super::SimulationRun;

/// Where in the simulation pipeline a fault is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Site {
    Actuator,
    State,
    Sensor,
}

impl Site {
    pub fn num_channels(self) -> usize {
        match self {
            Site::Actuator => 5,
            Site::State => 13,
            Site::Sensor => 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FaultShape {
    Abrupt,
    Pulse,
    Drift,
    Periodic,
    Stuck,
    Gain,
}

impl FaultShape {
    /// Shapes that may stay active until the end of the run.
    pub fn allows_unbounded(self) -> bool {
        matches!(
            self,
            FaultShape::Abrupt | FaultShape::Stuck | FaultShape::Gain | FaultShape::Drift
        )
    }
}

/// Period of the square wave used by [`FaultShape::Periodic`].
pub const PERIODIC_PERIOD_S: f64 = 20.0;

/// A fault to inject into one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub fault_id: u8,
    pub site: Site,
    pub channel: usize,
    pub shape: FaultShape,
    pub onset_s: f64,
    /// `None` means active until the end of the run.
    pub duration_s: Option<f64>,
    /// In units of the clean channel's standard deviation (except `Gain`, a
    /// relative factor, and `Stuck`, a blend that saturates at 1).
    pub magnitude: f64,
}

impl FaultSpec {
    pub fn validate(&self, run_duration_s: f64) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(1..=11).contains(&self.fault_id) {
            return bad(format!("fault_id {} not in 1..=11", self.fault_id));
        }
        if self.channel >= self.site.num_channels() {
            return bad(format!(
                "channel {} invalid for {:?} site (0..{})",
                self.channel,
                self.site,
                self.site.num_channels()
            ));
        }
        if !(self.onset_s >= 0.0 && self.onset_s < run_duration_s) {
            return bad(format!(
                "onset {} s outside [0, {run_duration_s})",
                self.onset_s
            ));
        }
        match self.duration_s {
            None if !self.shape.allows_unbounded() => {
                return bad(format!("{:?} faults need a finite duration", self.shape))
            }
            Some(d) if !(d > 0.0 && d.is_finite()) => {
                return bad(format!("duration {d} s must be positive"))
            }
            _ => {}
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return bad(format!(
                "magnitude {} must be finite and non-negative",
                self.magnitude
            ));
        }
        Ok(())
    }

    /// Exclusive end of the active window.
    pub fn end_s(&self) -> f64 {
        match self.duration_s {
            Some(d) => self.onset_s + d,
            None => f64::INFINITY,
        }
    }
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Apply `spec`'s shape to one channel sampled at `times`.
fn apply_shape(values: &mut [f64], times: &[f64], spec: &FaultSpec, run_duration_s: f64) {
    let sigma = population_std(values);
    let onset = spec.onset_s;
    let end = spec.end_s();
    let ramp_len = end.min(run_duration_s) - onset;
    let offset = spec.magnitude * sigma;
    let mut frozen = None;
    for (x, &t) in values.iter_mut().zip(times) {
        if t < onset || t >= end {
            continue;
        }
        match spec.shape {
            FaultShape::Abrupt | FaultShape::Pulse => *x += offset,
            FaultShape::Gain => *x *= 1.0 + spec.magnitude,
            FaultShape::Drift => *x += offset * ((t - onset) / ramp_len).min(1.0),
            FaultShape::Periodic => {
                let phase = ((t - onset) / PERIODIC_PERIOD_S).fract();
                *x += if phase < 0.5 { offset } else { -offset };
            }
            FaultShape::Stuck => {
                let held = *frozen.get_or_insert(*x);
                *x += spec.magnitude.min(1.0) * (held - *x);
            }
        }
    }
}

/// Return a copy of a fault-free `run` with `spec` injected. Actuator faults
/// propagate through the states and sensors, state faults through the sensors
/// that read them; sensor faults touch only their own channel.
pub fn inject_fault(run: &SimulationRun, spec: &FaultSpec) -> Result<SimulationRun> {
    spec.validate(run.duration_s)?;
    if run.fault.is_some() {
        return Err(Error::InvalidArgument("run already carries a fault".into()));
    }
    let mut out = run.clone();
    out.fault = Some(*spec);
    if spec.magnitude == 0.0 {
        return Ok(out);
    }
    let dt = 1.0 / run.sample_rate_hz;
    let n_out = out.output_signal.len();
    let duration = run.duration_s;
    match spec.site {
        Site::Actuator => {
            let times = out.input_signal.times.clone();
            apply_shape(
                &mut out.input_signal.values[spec.channel],
                &times,
                spec,
                duration,
            );
            out.states_signal.values = integrate_states(&out.input_signal.values, dt);
            out.output_signal.values =
                read_sensors(&out.states_signal.values, &run.readout_noise, n_out);
        }
        Site::State => {
            let times = out.states_signal.times.clone();
            apply_shape(
                &mut out.states_signal.values[spec.channel],
                &times,
                spec,
                duration,
            );
            let fresh = read_sensors(&out.states_signal.values, &run.readout_noise, n_out);
            for c in dependent_outputs(spec.channel) {
                out.output_signal.values[c] = fresh[c].clone();
            }
        }
        Site::Sensor => {
            let times = out.output_signal.times.clone();
            apply_shape(
                &mut out.output_signal.values[spec.channel],
                &times,
                spec,
                duration,
            );
        }
    }
    Ok(out)
}

/// A fault class: everything in a [`FaultSpec`] except the onset, which the
/// corpus generator draws per run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultTemplate {
    pub fault_id: u8,
    pub site: Site,
    pub channel: usize,
    pub shape: FaultShape,
    pub duration_s: Option<f64>,
    pub magnitude: f64,
}

impl FaultTemplate {
    pub fn at(&self, onset_s: f64) -> FaultSpec {
        FaultSpec {
            fault_id: self.fault_id,
            site: self.site,
            channel: self.channel,
            shape: self.shape,
            onset_s,
            duration_s: self.duration_s,
            magnitude: self.magnitude,
        }
    }
}

pub const DEFAULT_MAGNITUDE: f64 = 2.0;

/// The eleven stand-in fault classes: four actuator, three state and four
/// sensor faults, together covering every shape.
pub fn default_templates() -> Vec<FaultTemplate> {
    use FaultShape::*;
    use Site::*;
    let t = |fault_id, site, channel, shape, duration_s| FaultTemplate {
        fault_id,
        site,
        channel,
        shape,
        duration_s,
        magnitude: DEFAULT_MAGNITUDE,
    };
    vec![
        t(1, Actuator, 0, Abrupt, None),
        t(2, Actuator, 1, Gain, None),
        t(3, Actuator, 2, Stuck, None),
        t(4, Actuator, 0, Pulse, Some(30.0)),
        t(5, State, 7, Drift, None),
        t(6, State, 9, Abrupt, None),
        t(7, State, 12, Periodic, Some(150.0)),
        t(8, Sensor, 0, Abrupt, None),
        t(9, Sensor, 5, Gain, None),
        t(10, Sensor, 7, Pulse, Some(30.0)),
        t(11, Sensor, 8, Stuck, None),
    ]
}
