use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::stream;

pub const IDLE_RPM: f64 = 800.0;

/// Reference speed and torque at 1 Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingCycle {
    pub duration_s: u32,
    /// `(time_s, rpm)` for `t = 0, 1, …, duration_s`.
    pub speed_ref: Vec<(f64, f64)>,
    /// `(time_s, N·m)` on the same grid.
    pub torque_ref: Vec<(f64, f64)>,
}

impl DrivingCycle {
    /// Linear interpolation of `(rpm, torque)` at `t`, clamped to the cycle span.
    pub fn at(&self, t: f64) -> (f64, f64) {
        let last = self.speed_ref.len() - 1;
        let t = t.clamp(0.0, last as f64);
        let i = (t.floor() as usize).min(last.saturating_sub(1));
        let frac = t - i as f64;
        let lerp = |s: &[(f64, f64)]| {
            if last == 0 {
                s[0].1
            } else {
                s[i].1 + (s[i + 1].1 - s[i].1) * frac
            }
        };
        (lerp(&self.speed_ref), lerp(&self.torque_ref))
    }
}

/// WLTP-like stand-in: seeded idle / accelerate / cruise / decelerate segments,
/// sampled at 1 Hz, with torque derived from speed and its rate of change.
pub fn generate_cycle(seed: u64, duration_s: u32) -> Result<DrivingCycle> {
    if duration_s < 10 {
        return Err(Error::InvalidArgument(format!(
            "cycle duration must be at least 10 s, got {duration_s}"
        )));
    }
    let mut rng = stream(seed, &[0xC1C1E]);
    let end = duration_s as f64;

    // breakpoints of the piecewise-linear speed profile, plus cruise ripple spans
    let mut knots = vec![(0.0, IDLE_RPM)];
    let mut ripple: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut t = rng.random_range(2.0..6.0);
    knots.push((t, IDLE_RPM));
    let mut rpm = IDLE_RPM;
    while t < end {
        let roll: f64 = rng.random();
        let (dt, target) = if rpm < 1100.0 || roll < 0.35 {
            (
                rng.random_range(4.0..14.0),
                rng.random_range(1300.0..3600.0),
            )
        } else if roll < 0.65 {
            let dt = rng.random_range(5.0..20.0);
            ripple.push((
                t,
                t + dt,
                rng.random_range(0.02..0.06),
                rng.random_range(4.0..9.0),
            ));
            (dt, rpm)
        } else if roll < 0.9 {
            (rng.random_range(4.0..12.0), rng.random_range(IDLE_RPM..rpm))
        } else {
            (rng.random_range(3.0..8.0), IDLE_RPM)
        };
        t += dt;
        rpm = target;
        knots.push((t, rpm));
    }

    let speed_at = |x: f64| -> f64 {
        let j = knots
            .partition_point(|k| k.0 <= x)
            .clamp(1, knots.len() - 1);
        let (t0, r0) = knots[j - 1];
        let (t1, r1) = knots[j];
        let base = r0 + (r1 - r0) * ((x - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let wobble: f64 = ripple
            .iter()
            .filter(|r| x >= r.0 && x < r.1)
            .map(|r| r.2 * (std::f64::consts::TAU * (x - r.0) / r.3).sin())
            .sum();
        (base * (1.0 + wobble)).max(0.0)
    };

    let n = duration_s as usize + 1;
    let speed: Vec<f64> = (0..n).map(|i| speed_at(i as f64)).collect();
    let accel: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            (speed[hi] - speed[lo]) / (hi - lo).max(1) as f64
        })
        .collect();
    let raw: Vec<f64> = (0..n)
        .map(|i| 30.0 + 0.045 * (speed[i] - IDLE_RPM) + 1.1 * accel[i])
        .collect();
    // 3-point moving average keeps the torque reference smooth
    let torque: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            (raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64).max(-40.0)
        })
        .collect();

    Ok(DrivingCycle {
        duration_s,
        speed_ref: speed
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as f64, v))
            .collect(),
        torque_ref: torque
            .iter()
            .enumerate()
            .map(|(i, &v)| (i as f64, v))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_minute_cycle_has_1801_points() {
        let c = generate_cycle(7, 1800).unwrap();
        assert_eq!(c.speed_ref.len(), 1801);
        assert_eq!(c.torque_ref.len(), 1801);
        assert_eq!(c.speed_ref.last().unwrap().0, 1800.0);
        assert!(c.speed_ref.windows(2).all(|w| w[1].0 - w[0].0 == 1.0));
    }

    #[test]
    fn cycles_are_deterministic() {
        assert_eq!(
            generate_cycle(7, 1800).unwrap(),
            generate_cycle(7, 1800).unwrap()
        );
        assert_ne!(
            generate_cycle(7, 300).unwrap(),
            generate_cycle(8, 300).unwrap()
        );
    }

    #[test]
    fn rpm_is_never_negative() {
        for seed in 0..50 {
            let c = generate_cycle(seed, 60).unwrap();
            assert!(c.speed_ref.iter().all(|&(_, r)| r >= 0.0));
        }
    }

    #[test]
    fn short_durations_are_rejected() {
        assert!(matches!(
            generate_cycle(1, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            generate_cycle(1, 9),
            Err(Error::InvalidArgument(_))
        ));
    }
}
