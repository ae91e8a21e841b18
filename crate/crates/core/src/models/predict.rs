//! Per-step predictions, run-level verdicts and detection latency.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{argmax, row_probabilities, Model};
use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::par::{self, Execution};
use crate::preprocess::window_count;
use crate::{NUM_CHANNELS, NUM_CLASSES};

/// How a sequence of per-step classes becomes one verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AggregationRule {
    LastStep,
    Majority,
    /// First non-zero class predicted on `k` consecutive steps.
    FirstPersistent(usize),
}

impl fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationRule::LastStep => f.write_str("last_step"),
            AggregationRule::Majority => f.write_str("majority"),
            AggregationRule::FirstPersistent(k) => write!(f, "first_persistent({k})"),
        }
    }
}

impl FromStr for AggregationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let invalid = || {
            Error::config(
                "aggregation",
                format!("unknown rule `{s}`; expected last_step, majority or first_persistent(k)"),
            )
        };
        match lower.as_str() {
            "last_step" => Ok(AggregationRule::LastStep),
            "majority" => Ok(AggregationRule::Majority),
            _ => {
                let k = lower
                    .strip_prefix("first_persistent(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(invalid)?
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| invalid())?;
                AggregationRule::FirstPersistent(k).validated()
            }
        }
    }
}

impl TryFrom<String> for AggregationRule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AggregationRule> for String {
    fn from(r: AggregationRule) -> String {
        r.to_string()
    }
}

impl AggregationRule {
    pub fn validated(self) -> Result<Self> {
        match self {
            AggregationRule::FirstPersistent(0) => {
                Err(Error::config("aggregation", "first_persistent needs k ≥ 1"))
            }
            r => Ok(r),
        }
    }
}

/// Class probabilities and argmax classes for every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTrace {
    /// `steps × 12`, row-major.
    pub probs: Vec<f64>,
    pub classes: Vec<u8>,
}

impl PredictionTrace {
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if !probs.len().is_multiple_of(NUM_CLASSES) {
            return Err(Error::Shape(format!(
                "{} probabilities is not a multiple of {NUM_CLASSES}",
                probs.len()
            )));
        }
        let classes = probs.chunks(NUM_CLASSES).map(|r| argmax(r) as u8).collect();
        Ok(Self { probs, classes })
    }

    pub fn from_classes(classes: Vec<u8>) -> Self {
        let probs = classes
            .iter()
            .flat_map(|&c| (0..NUM_CLASSES).map(move |k| if k == c as usize { 1.0 } else { 0.0 }))
            .collect();
        Self { probs, classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn verdict(&self, rule: AggregationRule) -> Result<u8> {
        aggregate_prediction(self, rule)
    }
}

fn prefix_majorities(classes: &[u8]) -> Vec<u8> {
    let mut counts = [0usize; 256];
    let mut best = 0u8;
    classes
        .iter()
        .map(|&c| {
            counts[c as usize] += 1;
            let (bc, cc) = (counts[best as usize], counts[c as usize]);
            if cc > bc || (cc == bc && c < best) || counts[best as usize] == 0 {
                best = c;
            }
            best
        })
        .collect()
}

/// Reduce a trace to one class. Majority ties go to the lowest class.
pub fn aggregate_prediction(trace: &PredictionTrace, rule: AggregationRule) -> Result<u8> {
    let rule = rule.validated()?;
    let classes = &trace.classes;
    let Some(&last) = classes.last() else {
        return Err(Error::InvalidArgument(
            "cannot aggregate an empty trace".into(),
        ));
    };
    Ok(match rule {
        AggregationRule::LastStep => last,
        AggregationRule::Majority => *prefix_majorities(classes).last().unwrap(),
        AggregationRule::FirstPersistent(k) => {
            let mut run = 0;
            for (t, &c) in classes.iter().enumerate() {
                run = if t > 0 && classes[t - 1] == c {
                    run + 1
                } else {
                    1
                };
                if c != 0 && run >= k {
                    return Ok(c);
                }
            }
            0
        }
    })
}

/// Outcome of scanning a trace for the first firing of the true class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Latency {
    /// Steps from onset to the first firing at or after onset.
    Detected(usize),
    /// The rule fired this many steps before onset.
    FalseEarly(usize),
    NotDetected,
}

impl Latency {
    /// Signed latency in steps, or `None` when never detected.
    pub fn steps(&self) -> Option<i64> {
        match *self {
            Latency::Detected(s) => Some(s as i64),
            Latency::FalseEarly(s) => Some(-(s as i64)),
            Latency::NotDetected => None,
        }
    }
}

/// Steps at which `rule`, evaluated on the trace prefix ending there, returns
/// `class`.
fn firings(classes: &[u8], class: u8, rule: AggregationRule) -> Vec<bool> {
    match rule {
        AggregationRule::LastStep => classes.iter().map(|&c| c == class).collect(),
        AggregationRule::Majority => prefix_majorities(classes)
            .into_iter()
            .map(|c| c == class)
            .collect(),
        AggregationRule::FirstPersistent(k) => {
            let mut run = 0;
            classes
                .iter()
                .map(|&c| {
                    run = if c == class { run + 1 } else { 0 };
                    run >= k
                })
                .collect()
        }
    }
}

/// Latency of the first step where `rule` fires with `true_class`, relative
/// to `onset_step`.
pub fn detection_latency(
    trace: &PredictionTrace,
    onset_step: usize,
    true_class: u8,
    rule: AggregationRule,
) -> Result<Latency> {
    let rule = rule.validated()?;
    if onset_step >= trace.len() {
        return Err(Error::InvalidArgument(format!(
            "onset step {onset_step} outside a trace of {} steps",
            trace.len()
        )));
    }
    Ok(
        match firings(&trace.classes, true_class, rule)
            .iter()
            .position(|&f| f)
        {
            Some(t) if t < onset_step => Latency::FalseEarly(onset_step - t),
            Some(t) => Latency::Detected(t - onset_step),
            None => Latency::NotDetected,
        },
    )
}

/// A window used for a run trace: its start and the steps `[from, to)` it
/// supplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StitchWindow {
    pub start: usize,
    pub from: usize,
    pub to: usize,
}

/// Windows covering `0..len`: the first window supplies all its steps, every
/// later one only its last `stride` steps, so each step is predicted with at
/// least `window − stride` steps of history (or from the run start). A final
/// window aligned to the end covers any remainder.
pub fn stitch_plan(len: usize, window: usize, stride: usize) -> Result<Vec<StitchWindow>> {
    if window == 0 || stride == 0 || stride > window || window > len {
        return Err(Error::InvalidArgument(format!(
            "cannot tile {len} steps with window {window} and stride {stride}"
        )));
    }
    let n = window_count(len, window, stride);
    let mut plan = vec![StitchWindow {
        start: 0,
        from: 0,
        to: window,
    }];
    for k in 1..n {
        let start = k * stride;
        plan.push(StitchWindow {
            start,
            from: start + window - stride,
            to: start + window,
        });
    }
    let covered = plan.last().unwrap().to;
    if covered < len {
        plan.push(StitchWindow {
            start: len - window,
            from: covered,
            to: len,
        });
    }
    Ok(plan)
}

/// Per-step trace over a whole merged run (`len × 27` raw values).
pub fn predict_run<T: Scalar>(
    model: &Model<T>,
    values: &[f32],
    window: usize,
    stride: usize,
    exec: Execution,
) -> Result<PredictionTrace> {
    if !values.len().is_multiple_of(NUM_CHANNELS) {
        return Err(Error::Shape(format!(
            "run of {} values is not T×{NUM_CHANNELS}",
            values.len()
        )));
    }
    let plan = stitch_plan(values.len() / NUM_CHANNELS, window, stride)?;
    let parts = par::map(exec, &plan, |w| -> Result<Vec<f64>> {
        let logits =
            model.logits(&values[w.start * NUM_CHANNELS..(w.start + window) * NUM_CHANNELS])?;
        let probs = row_probabilities(&logits);
        Ok(probs[(w.from - w.start) * NUM_CLASSES..(w.to - w.start) * NUM_CLASSES].to_vec())
    });
    let mut probs = Vec::with_capacity(values.len() / NUM_CHANNELS * NUM_CLASSES);
    for p in parts {
        probs.extend(p?);
    }
    PredictionTrace::from_probs(probs)
}
