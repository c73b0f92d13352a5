//! Exhaustive search for small instances and step-by-step trace checking.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descent::DescentTrace;
use crate::error::{Error, Result};
use crate::quant::{self, ChannelProblem, CodeVector};

/// Largest `bits · d_in` the exhaustive search accepts.
pub const MAX_ENUMERATION_BITS: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub codes: CodeVector,
    /// `(q − z)ᵀH(q − z)`.
    pub scaled_objective: f64,
    /// `eᵀHe` in weight space.
    pub objective: f64,
    pub enumeration_count: u64,
}

/// Evaluates the loss of consecutive trailing-digit runs incrementally,
/// starting each run from an exact evaluation.
struct Sweep<'a> {
    h: &'a [f64],
    d: usize,
    q: Vec<u8>,
    hr: Vec<f64>,
    loss: f64,
}

impl<'a> Sweep<'a> {
    fn new(h: &'a [f64], d: usize, z: &'a [f64], q: Vec<u8>) -> Self {
        let r: Vec<f64> = q.iter().zip(z).map(|(&c, &t)| c as f64 - t).collect();
        let hr: Vec<f64> = (0..d)
            .map(|i| h[i * d..(i + 1) * d].iter().zip(&r).map(|(a, b)| a * b).sum())
            .collect();
        let loss = r.iter().zip(&hr).map(|(a, b)| a * b).sum();
        Sweep { h, d, q, hr, loss }
    }

    fn set(&mut self, i: usize, value: u8) {
        let delta = value as f64 - self.q[i] as f64;
        let col = &self.h[i * self.d..(i + 1) * self.d];
        self.loss += delta * (2.0 * self.hr[i] + delta * col[i]);
        for (x, &hv) in self.hr.iter_mut().zip(col) {
            *x += delta * hv;
        }
        self.q[i] = value;
    }
}

fn digits(mut index: u64, levels: u64, d: usize) -> Vec<u8> {
    let mut q = vec![0u8; d];
    for slot in q.iter_mut().rev() {
        *slot = (index % levels) as u8;
        index /= levels;
    }
    q
}

/// Minimizes the channel objective over all `2^(c·d_in)` code vectors.
/// Ties go to the lexicographically smallest code vector.
pub fn brute_force(prob: &ChannelProblem<'_>) -> Result<OracleResult> {
    let d = prob.dim();
    let bits = prob.params().bits;
    let width = bits.get() as usize * d;
    if width > MAX_ENUMERATION_BITS {
        return Err(Error::Guard {
            what: "bits * d_in",
            value: width,
            limit: MAX_ENUMERATION_BITS,
        });
    }
    let levels = bits.levels() as u64;
    let total = levels.pow(d as u32);
    let Some(z) = prob.target() else {
        // Zero scale: every code vector dequantizes to the same constant.
        let codes = CodeVector::zeros(d);
        let objective = prob.objective(&codes)?;
        return Ok(OracleResult {
            codes,
            scaled_objective: 0.0,
            objective,
            enumeration_count: total,
        });
    };
    let h = prob.hessian().as_slice();

    // Each run fixes the leading digits and sweeps the trailing `tail` ones.
    let tail = (12 / bits.get() as usize).clamp(1, d);
    let run_len = levels.pow(tail as u32);
    let runs = total / run_len;
    let best = (0..runs)
        .into_par_iter()
        .map(|run| {
            let first = run * run_len;
            let mut sweep = Sweep::new(h, d, z, digits(first, levels, d));
            let mut best = (sweep.loss, first);
            for offset in 1..run_len {
                // odometer increment, last digit fastest
                let mut i = d - 1;
                loop {
                    let next = sweep.q[i] as u64 + 1;
                    if next < levels {
                        sweep.set(i, next as u8);
                        break;
                    }
                    sweep.set(i, 0);
                    i -= 1;
                }
                if sweep.loss < best.0 {
                    best = (sweep.loss, first + offset);
                }
            }
            best
        })
        .reduce(
            || (f64::INFINITY, u64::MAX),
            |a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a },
        );
    let codes = CodeVector::new(digits(best.1, levels, d));
    let scaled_objective = quant::scaled_loss(prob.hessian(), &codes, z);
    let objective = prob.objective(&codes)?;
    Ok(OracleResult {
        codes,
        scaled_objective,
        objective,
        enumeration_count: total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Recomputed loss change disagrees with the predicted one.
    DeltaMismatch,
    /// The recomputed loss went up.
    LossIncrease,
    /// The loss stored in the record disagrees with recomputation.
    RecordedLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub kind: ViolationKind,
    pub expected: f64,
    pub found: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub steps_checked: usize,
    pub violations: Vec<Violation>,
    pub final_loss: f64,
}

impl TraceReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn flagged_steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = self.violations.iter().map(|v| v.step).collect();
        steps.dedup();
        steps
    }
}

/// Relative tolerance for step checks, against the larger of the losses
/// and the predicted change involved.
pub const TRACE_REL_TOL: f64 = 1e-9;

/// Replays `trace` from `q0`, recomputing the scaled loss from scratch after
/// every step.
pub fn verify_trace(prob: &ChannelProblem<'_>, q0: &CodeVector, trace: &DescentTrace) -> Result<TraceReport> {
    let d = prob.dim();
    let bits = prob.params().bits;
    let z = prob.target().ok_or(Error::DegenerateScale)?;
    if q0.len() != d {
        return Err(Error::Shape(format!("q0 has {} entries, expected {d}", q0.len())));
    }
    q0.validate(bits)?;
    let h = prob.hessian();
    let mut q = q0.clone();
    let initial = quant::scaled_loss(h, &q, z);
    let mut prev = initial;
    let mut violations = Vec::new();
    for (n, rec) in trace.records.iter().enumerate() {
        if rec.coords.len() != rec.values.len() {
            return Err(Error::TraceMismatch(format!(
                "step {n}: {} coordinates but {} values",
                rec.coords.len(),
                rec.values.len()
            )));
        }
        for (&i, &v) in rec.coords.iter().zip(&rec.values) {
            if i >= d {
                return Err(Error::TraceMismatch(format!("step {n}: coordinate {i} out of range for d_in {d}")));
            }
            if v > bits.max_code() {
                return Err(Error::TraceMismatch(format!("step {n}: code {v} out of range for {} bits", bits.get())));
            }
            if rec.applied {
                q.as_mut_slice()[i] = v;
            }
        }
        let now = quant::scaled_loss(h, &q, z);
        let change = now - prev;
        let scale = rec.predicted_delta.abs().max(prev.abs()).max(now.abs());
        if (change - rec.predicted_delta).abs() > TRACE_REL_TOL * scale {
            violations.push(Violation {
                step: n,
                kind: ViolationKind::DeltaMismatch,
                expected: change,
                found: rec.predicted_delta,
            });
        }
        if change > TRACE_REL_TOL * prev.abs().max(now.abs()) {
            violations.push(Violation {
                step: n,
                kind: ViolationKind::LossIncrease,
                expected: prev,
                found: now,
            });
        }
        if (rec.loss - now).abs() > TRACE_REL_TOL * now.abs().max(initial.abs()) {
            violations.push(Violation {
                step: n,
                kind: ViolationKind::RecordedLoss,
                expected: now,
                found: rec.loss,
            });
        }
        prev = now;
    }
    Ok(TraceReport {
        steps_checked: trace.records.len(),
        violations,
        final_loss: prev,
    })
}
