//! First-order lag stand-in for the engine: inputs are smooth functions of the
//! driving cycle, the 13 states relax towards input-dependent targets, and the 9
//! sensors read selected states with additive noise.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::stream;

use super::{DrivingCycle, FaultSpec};

pub const OMEGA_CHANNEL: &str = "omega_rpm";
pub const TORQUE_CHANNEL: &str = "torque_nm";

pub const INPUT_CHANNELS: [&str; 5] = [
    "throttle_area",
    "wastegate",
    "engine_speed",
    "ambient_temp",
    "ambient_pressure",
];

pub const OUTPUT_CHANNELS: [&str; 9] = [
    "compressor_temp",
    "intercooler_temp",
    "intake_manifold_temp",
    "compressor_pressure",
    "intercooler_pressure",
    "intake_manifold_pressure",
    "exhaust_manifold_pressure",
    "air_filter_mass_flow",
    "engine_torque",
];

pub const STATE_CHANNELS: [&str; 13] = [
    "air_filter_temp",
    "air_filter_pressure",
    "compressor_temp",
    "compressor_pressure",
    "intercooler_temp",
    "intercooler_pressure",
    "intake_manifold_temp",
    "intake_manifold_pressure",
    "exhaust_manifold_temp",
    "exhaust_manifold_pressure",
    "turbine_temp",
    "turbine_pressure",
    "turbine_speed",
];

const INPUT_NOISE: [f64; 5] = [0.01, 0.01, 15.0, 0.05, 0.02];
const OUTPUT_NOISE: [f64; 9] = [0.3, 0.2, 0.2, 0.3, 0.3, 0.3, 0.3, 0.002, 1.0];
const TIME_CONSTANTS_S: [f64; 13] = [
    5.0, 1.0, 2.0, 0.5, 6.0, 0.8, 4.0, 0.3, 3.0, 0.4, 3.5, 0.6, 1.5,
];

/// One recorded signal file: a time column plus named channels (channel-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub channels: Vec<String>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(channels: &[&str], times: Vec<f64>, values: Vec<Vec<f64>>) -> Self {
        Self {
            channels: channels.iter().map(|s| s.to_string()).collect(),
            times,
            values,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Sample rate of the input, output and state tables.
    pub sample_rate_hz: f64,
    /// Multiplier on every channel's noise amplitude (0 = noiseless).
    pub noise_level: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 2.0,
            noise_level: 1.0,
        }
    }
}

/// A simulated engine run: the five recorded tables plus fault metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun {
    pub omega: Table,
    pub torque: Table,
    pub input_signal: Table,
    pub output_signal: Table,
    pub states_signal: Table,
    pub fault: Option<FaultSpec>,
    pub seed: u64,
    pub duration_s: f64,
    pub(crate) sample_rate_hz: f64,
    // additive sensor noise, kept so faults upstream of the sensors can be
    // re-read with the same noise realization
    pub(crate) readout_noise: Vec<Vec<f64>>,
}

impl SimulationRun {
    pub fn tables(&self) -> [(&'static str, &Table); 5] {
        [
            ("omega", &self.omega),
            ("torque", &self.torque),
            ("input_signal", &self.input_signal),
            ("output_signal", &self.output_signal),
            ("states_signal", &self.states_signal),
        ]
    }
}

fn state_targets(u: &[f64; 5]) -> [f64; 13] {
    let [thr, wg, rpm, t_amb, p_amb] = *u;
    let load = thr * (0.4 + 0.6 * rpm / 3500.0);
    let boost = load * (1.0 - 0.6 * wg);
    [
        t_amb + 1.0,
        p_amb - 2.5 * load,
        t_amb + 10.0 + 90.0 * boost,
        p_amb + 120.0 * boost,
        t_amb + 5.0 + 35.0 * boost,
        p_amb + 110.0 * boost,
        t_amb + 8.0 + 30.0 * boost,
        p_amb * (0.3 + 0.7 * thr) + 100.0 * boost,
        600.0 + 350.0 * load + 0.05 * (rpm - 800.0),
        p_amb + 20.0 + 130.0 * load,
        550.0 + 300.0 * load,
        p_amb + 5.0 + 60.0 * load,
        20_000.0 + 110_000.0 * boost,
    ]
}

fn readout(s: &[f64; 13]) -> [f64; 9] {
    [
        s[2],
        s[4],
        s[6],
        s[3],
        s[5],
        s[7],
        s[9],
        0.35 * (s[7] / s[6]) * (0.5 + s[12] / 120_000.0),
        1.6 * (s[7] - 95.0) + 0.4 * (s[7] - s[9]) + 60.0,
    ]
}

/// Output channels that read state channel `state`.
pub(crate) fn dependent_outputs(state: usize) -> Vec<usize> {
    match state {
        2 => vec![0],
        3 => vec![3],
        4 => vec![1],
        5 => vec![4],
        6 => vec![2, 7],
        7 => vec![5, 7, 8],
        9 => vec![6, 8],
        12 => vec![7],
        _ => Vec::new(),
    }
}

fn row<const N: usize>(cols: &[Vec<f64>], i: usize) -> [f64; N] {
    std::array::from_fn(|c| cols[c][i])
}

/// Integrate the state lag filters over an input table; starts at equilibrium.
pub(crate) fn integrate_states(inputs: &[Vec<f64>], dt: f64) -> Vec<Vec<f64>> {
    let n = inputs[0].len();
    let mut out = vec![vec![0.0; n]; 13];
    let mut s = state_targets(&row(inputs, 0));
    for i in 0..n {
        if i > 0 {
            let target = state_targets(&row(inputs, i));
            for c in 0..13 {
                let alpha = (dt / TIME_CONSTANTS_S[c]).min(1.0);
                s[c] += alpha * (target[c] - s[c]);
            }
        }
        for c in 0..13 {
            out[c][i] = s[c];
        }
    }
    out
}

/// Sensor readouts of `states` over the first `n` samples, plus `noise`.
pub(crate) fn read_sensors(states: &[Vec<f64>], noise: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; n]; 9];
    for i in 0..n {
        let r = readout(&row(states, i));
        for c in 0..9 {
            out[c][i] = r[c] + noise[c][i];
        }
    }
    out
}

fn noise_matrix(seed: u64, tag: u64, scales: &[f64], n: usize, level: f64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, &[tag]);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    scales
        .iter()
        .map(|&s| {
            (0..n)
                .map(|_| {
                    let z: f64 = unit.sample(&mut rng);
                    if level == 0.0 {
                        0.0
                    } else {
                        z * s * level
                    }
                })
                .collect()
        })
        .collect()
}

/// Simulate a fault-free run driven by `cycle`.
pub fn simulate_run(cycle: &DrivingCycle, seed: u64, cfg: &SimConfig) -> SimulationRun {
    let duration = cycle.duration_s as f64;
    let rate = cfg.sample_rate_hz;
    let n = (duration * rate).floor() as usize + 1;
    let times: Vec<f64> = (0..n).map(|i| i as f64 / rate).collect();

    let mut rng = stream(seed, &[1]);
    let ambient_phase = rng.random_range(0.0..TAU);
    let ambient_period = duration * rng.random_range(1.1..1.6);
    let input_noise = noise_matrix(seed, 2, &INPUT_NOISE, n, cfg.noise_level);
    let readout_noise = noise_matrix(seed, 3, &OUTPUT_NOISE, n, cfg.noise_level);

    let mut inputs = vec![vec![0.0; n]; 5];
    for (i, &t) in times.iter().enumerate() {
        let (rpm, torque) = cycle.at(t);
        // ambient drift counts as environmental noise
        let slow = cfg.noise_level * (TAU * t / ambient_period + ambient_phase).sin();
        let clean = [
            (0.08 + 0.85 * (torque.max(0.0) / 180.0).tanh()).clamp(0.02, 1.0),
            0.15 + 0.7 / (1.0 + (-(rpm - 2400.0) / 350.0).exp()),
            rpm,
            293.0 + 4.0 * slow,
            101.3 + 0.4 * slow,
        ];
        for c in 0..5 {
            inputs[c][i] = clean[c] + input_noise[c][i];
        }
    }
    let states = integrate_states(&inputs, 1.0 / rate);
    // the sensor log stops one sample short of the other tables
    let n_out = n - 1;
    let outputs = read_sensors(&states, &readout_noise, n_out);

    let ref_times: Vec<f64> = cycle.speed_ref.iter().map(|p| p.0).collect();
    SimulationRun {
        omega: Table::new(
            &[OMEGA_CHANNEL],
            ref_times.clone(),
            vec![cycle.speed_ref.iter().map(|p| p.1).collect()],
        ),
        torque: Table::new(
            &[TORQUE_CHANNEL],
            ref_times,
            vec![cycle.torque_ref.iter().map(|p| p.1).collect()],
        ),
        input_signal: Table::new(&INPUT_CHANNELS, times.clone(), inputs),
        output_signal: Table::new(&OUTPUT_CHANNELS, times[..n_out].to_vec(), outputs),
        states_signal: Table::new(&STATE_CHANNELS, times, states),
        fault: None,
        seed,
        duration_s: duration,
        sample_rate_hz: rate,
        readout_noise,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testbed_sim::generate_cycle;

    fn constant_cycle(rpm: f64, torque: f64, duration: u32) -> DrivingCycle {
        DrivingCycle {
            duration_s: duration,
            speed_ref: (0..=duration).map(|t| (t as f64, rpm)).collect(),
            torque_ref: (0..=duration).map(|t| (t as f64, torque)).collect(),
        }
    }

    #[test]
    fn channel_counts() {
        let run = simulate_run(&generate_cycle(3, 120).unwrap(), 9, &SimConfig::default());
        let counts: Vec<usize> = run.tables().iter().map(|(_, t)| t.num_channels()).collect();
        assert_eq!(counts, vec![1, 1, 5, 9, 13]);
        for (_, t) in run.tables() {
            assert!(t.times.windows(2).all(|w| w[1] > w[0]));
            assert!(t.values.iter().all(|c| c.len() == t.len()));
        }
        assert_eq!(run.omega.len(), 121);
        assert_eq!(run.input_signal.len(), 241);
        assert_eq!(run.output_signal.len(), 240);
    }

    #[test]
    fn noiseless_constant_cycle_settles() {
        let cfg = SimConfig {
            noise_level: 0.0,
            ..SimConfig::default()
        };
        let run = simulate_run(&constant_cycle(1800.0, 90.0, 60), 1, &cfg);
        for col in &run.states_signal.values {
            let last = *col.last().unwrap();
            assert!(col
                .iter()
                .all(|&v| (v - last).abs() <= 1e-9 * last.abs().max(1.0)));
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let cycle = generate_cycle(4, 90).unwrap();
        let cfg = SimConfig::default();
        assert_eq!(simulate_run(&cycle, 5, &cfg), simulate_run(&cycle, 5, &cfg));
        assert_ne!(
            simulate_run(&cycle, 5, &cfg).input_signal,
            simulate_run(&cycle, 6, &cfg).input_signal
        );
    }
}
