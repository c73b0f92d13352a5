//! Coordinate descent engines over integer codes.
//!
//! All engines minimize the scaled loss `L̃(q) = (q − z)ᵀH(q − z)` with
//! `z = (w − b)/a`, maintaining the gradient `g = 2H(q − z)`. Changing
//! coordinate `i` by `δ` changes the loss by `δ²H_ii + δ·g_i`; a block move
//! `δ` over coordinates `B` by `δᵀH_BBδ + δᵀg_B`.
//!
//! Ties between equally good moves resolve to the lexicographically smallest
//! `(coordinates, values)`. A step whose best move does not strictly lower
//! the loss leaves the codes untouched.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{Bits, ChannelProblem, CodeVector};
use crate::rng;

/// Upper bound on `block_size · bits`, i.e. `2^20` candidates per block.
pub const MAX_BLOCK_BITS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentConfig {
    /// Steps per epoch; `None` means `d_in`.
    pub steps: Option<usize>,
    pub epochs: usize,
    pub block_size: usize,
    pub seed: u64,
    /// Greedy CD only: stop once no move lowers the loss.
    pub early_stop: bool,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            steps: None,
            epochs: 1,
            block_size: 1,
            seed: 0,
            early_stop: true,
        }
    }
}

impl DescentConfig {
    pub fn total_steps(&self, d_in: usize) -> usize {
        self.steps.unwrap_or(d_in).saturating_mul(self.epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn check_block(&self, bits: Bits) -> Result<()> {
        let width = self.block_size * bits.get() as usize;
        if width > MAX_BLOCK_BITS {
            return Err(Error::Guard {
                what: "block_size * bits",
                value: width,
                limit: MAX_BLOCK_BITS,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Coordinates changed by this step, ascending; empty for a no-op.
    pub coords: Vec<usize>,
    /// New codes for `coords`.
    pub values: Vec<u8>,
    pub predicted_delta: f64,
    /// Scaled loss after the step, `½(q − z)ᵀg` from the maintained gradient.
    pub loss: f64,
    pub applied: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DescentTrace {
    pub records: Vec<StepRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_true_loss: f64,
    pub scale_sq: f64,
    /// Maintained gradient at exit.
    pub final_gradient: Vec<f64>,
}

impl DescentTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn applied_steps(&self) -> usize {
        self.records.iter().filter(|r| r.applied).count()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }
}

/// Codes plus the gradient `2H(q − z)` kept in sync with them.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientState {
    pub q: CodeVector,
    pub g: Vec<f64>,
}

impl GradientState {
    pub fn from_scratch(h: &[f64], d: usize, q: CodeVector, z: &[f64]) -> Self {
        let r: Vec<f64> = q.iter().zip(z).map(|(&c, &t)| c as f64 - t).collect();
        let g = (0..d)
            .map(|i| {
                let col = &h[i * d..(i + 1) * d];
                2.0 * col.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        GradientState { q, g }
    }

    /// Sets `q[i] = value`, updating `g` by `2δ·H[:, i]`.
    #[inline]
    fn set(&mut self, h: &[f64], d: usize, i: usize, value: u8) {
        let delta = value as f64 - self.q[i] as f64;
        if delta == 0.0 {
            return;
        }
        let s = 2.0 * delta;
        let col = &h[i * d..(i + 1) * d];
        for (g, &hv) in self.g.iter_mut().zip(col) {
            *g += s * hv;
        }
        self.q.as_mut_slice()[i] = value;
    }

    fn loss(&self, z: &[f64]) -> f64 {
        0.5 * self
            .q
            .iter()
            .zip(z)
            .zip(&self.g)
            .map(|((&c, &t), &g)| (c as f64 - t) * g)
            .sum::<f64>()
    }
}

/// `δ²H_ii + δ·g_i`, shared by every engine so equal moves score bitwise equal.
#[inline(always)]
fn unary_delta(delta: f64, hii: f64, gi: f64) -> f64 {
    delta * delta * hii + delta * gi
}

struct Engine<'p> {
    h: &'p [f64],
    d: usize,
    z: &'p [f64],
    levels: usize,
    scale_sq: f64,
    state: GradientState,
    records: Vec<StepRecord>,
    initial_loss: f64,
}

impl<'p> Engine<'p> {
    fn new(prob: &'p ChannelProblem<'_>, q0: &CodeVector) -> Result<Self> {
        let z = prob.target().ok_or(Error::DegenerateScale)?;
        let d = prob.dim();
        if q0.len() != d {
            return Err(Error::Shape(format!("q0 has {} entries, expected {d}", q0.len())));
        }
        let bits = prob.params().bits;
        q0.validate(bits)?;
        let h = prob.hessian().as_slice();
        let state = GradientState::from_scratch(h, d, q0.clone(), z);
        let initial_loss = state.loss(z);
        Ok(Engine {
            h,
            d,
            z,
            levels: bits.levels(),
            scale_sq: prob.params().scale * prob.params().scale,
            state,
            records: Vec::new(),
            initial_loss,
        })
    }

    #[inline]
    fn hii(&self, i: usize) -> f64 {
        self.h[i * self.d + i]
    }

    /// Best strictly improving single-coordinate move over `coords`.
    fn best_single(&self, coords: impl Iterator<Item = usize>) -> Option<(usize, u8, f64)> {
        let mut best: Option<(usize, u8, f64)> = None;
        let mut best_delta = 0.0;
        for i in coords {
            let hii = self.hii(i);
            let gi = self.state.g[i];
            let qi = self.state.q[i] as f64;
            for r in 0..self.levels {
                let delta = unary_delta(r as f64 - qi, hii, gi);
                if delta < best_delta {
                    best_delta = delta;
                    best = Some((i, r as u8, delta));
                }
            }
        }
        best
    }

    fn record(&mut self, coords: Vec<usize>, values: Vec<u8>, predicted_delta: f64) {
        let applied = !coords.is_empty();
        for (&i, &v) in coords.iter().zip(&values) {
            self.state.set(self.h, self.d, i, v);
        }
        let loss = self.state.loss(self.z);
        self.records.push(StepRecord {
            step: self.records.len(),
            coords,
            values,
            predicted_delta,
            loss,
            applied,
        });
    }

    fn noop(&mut self) {
        self.record(Vec::new(), Vec::new(), 0.0);
    }

    fn finish(self) -> (CodeVector, DescentTrace) {
        let final_loss = self.state.loss(self.z);
        let trace = DescentTrace {
            records: self.records,
            initial_loss: self.initial_loss,
            final_loss,
            final_true_loss: self.scale_sq * final_loss,
            scale_sq: self.scale_sq,
            final_gradient: self.state.g,
        };
        (self.state.q, trace)
    }
}

/// Greedy coordinate descent: each step applies the single `(i, r)` with the
/// largest loss reduction over all `d_in × 2^c` candidates.
pub fn cd_quantize(prob: &ChannelProblem<'_>, q0: &CodeVector, cfg: &DescentConfig) -> Result<(CodeVector, DescentTrace)> {
    cfg.validate()?;
    let mut eng = Engine::new(prob, q0)?;
    let total = cfg.total_steps(eng.d);
    let mut stalled = false;
    for _ in 0..total {
        if stalled {
            // A fixed point stays one: every later scan would find nothing.
            eng.noop();
            continue;
        }
        match eng.best_single(0..eng.d) {
            Some((i, r, delta)) => eng.record(vec![i], vec![r], delta),
            None if cfg.early_stop => break,
            None => {
                stalled = true;
                eng.noop();
            }
        }
    }
    Ok(eng.finish())
}

/// Cyclic coordinate descent: visits `0..d_in` in order for each epoch and
/// moves each coordinate to its best value. `steps` is ignored.
pub fn cyclic_cd_quantize(
    prob: &ChannelProblem<'_>,
    q0: &CodeVector,
    cfg: &DescentConfig,
) -> Result<(CodeVector, DescentTrace)> {
    cfg.validate()?;
    let mut eng = Engine::new(prob, q0)?;
    for _ in 0..cfg.epochs {
        for i in 0..eng.d {
            match eng.best_single(std::iter::once(i)) {
                Some((i, r, delta)) => eng.record(vec![i], vec![r], delta),
                None => eng.noop(),
            }
        }
    }
    Ok(eng.finish())
}

/// Random partition of `0..d` into consecutive chunks of a shuffled order.
/// Each block is sorted and blocks are ordered by their first coordinate.
fn random_partition(rng: &mut rand_chacha::ChaCha8Rng, d: usize, k: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..d).collect();
    rng::shuffle(rng, &mut idx);
    let mut blocks: Vec<Vec<usize>> = idx
        .chunks(k)
        .map(|c| {
            let mut b = c.to_vec();
            b.sort_unstable();
            b
        })
        .collect();
    blocks.sort_unstable_by_key(|b| b[0]);
    blocks
}

impl Engine<'_> {
    /// Best strictly improving joint move over one block, enumerating all
    /// `2^{kc}` value tuples in lexicographic order.
    fn best_block(&self, block: &[usize], incumbent: f64, unary: &mut Vec<f64>, digits: &mut Vec<usize>) -> Option<(Vec<u8>, f64)> {
        let k = block.len();
        let levels = self.levels;
        unary.clear();
        for &i in block {
            let hii = self.hii(i);
            let gi = self.state.g[i];
            let qi = self.state.q[i] as f64;
            unary.extend((0..levels).map(|r| unary_delta(r as f64 - qi, hii, gi)));
        }
        let mut pair = Vec::with_capacity(k * (k - 1) / 2);
        for a in 0..k {
            for b in (a + 1)..k {
                pair.push(2.0 * self.h[block[a] * self.d + block[b]]);
            }
        }
        let current: Vec<f64> = block.iter().map(|&i| self.state.q[i] as f64).collect();

        digits.clear();
        digits.resize(k, 0);
        let mut best_delta = incumbent;
        let mut best: Option<Vec<u8>> = None;
        loop {
            let mut delta = unary[digits[0]];
            for a in 1..k {
                delta += unary[a * levels + digits[a]];
            }
            let mut p = 0;
            for a in 0..k {
                let da = digits[a] as f64 - current[a];
                for b in (a + 1)..k {
                    let db = digits[b] as f64 - current[b];
                    delta += pair[p] * da * db;
                    p += 1;
                }
            }
            if delta < best_delta {
                best_delta = delta;
                best = Some(digits.iter().map(|&r| r as u8).collect());
            }
            // odometer, last digit fastest
            let mut pos = k;
            loop {
                if pos == 0 {
                    return best.map(|v| (v, best_delta));
                }
                pos -= 1;
                digits[pos] += 1;
                if digits[pos] < levels {
                    break;
                }
                digits[pos] = 0;
            }
        }
    }
}

/// Randomized block coordinate descent: each step draws a fresh random
/// partition into blocks of `block_size` and applies the best joint update
/// of any one block. Never stops early.
pub fn bcd_quantize(prob: &ChannelProblem<'_>, q0: &CodeVector, cfg: &DescentConfig) -> Result<(CodeVector, DescentTrace)> {
    cfg.validate()?;
    if prob.dim() % cfg.block_size != 0 {
        return Err(Error::InvalidConfig(format!(
            "block_size {} does not divide d_in {}",
            cfg.block_size,
            prob.dim()
        )));
    }
    bcd_quantize_uneven(prob, q0, cfg)
}

/// BCD allowing a final short block when `block_size` does not divide the dimension.
pub fn bcd_quantize_uneven(prob: &ChannelProblem<'_>, q0: &CodeVector, cfg: &DescentConfig) -> Result<(CodeVector, DescentTrace)> {
    cfg.validate()?;
    cfg.check_block(prob.params().bits)?;
    let mut eng = Engine::new(prob, q0)?;
    let total = cfg.total_steps(eng.d);
    let mut rng = rng::stream(cfg.seed);
    let k = cfg.block_size.min(eng.d.max(1));
    let mut unary = Vec::new();
    let mut digits = Vec::new();
    for _ in 0..total {
        let blocks = random_partition(&mut rng, eng.d, k);
        let mut best: Option<(usize, Vec<u8>, f64)> = None;
        for (bi, block) in blocks.iter().enumerate() {
            let incumbent = best.as_ref().map_or(0.0, |b| b.2);
            if let Some((values, delta)) = eng.best_block(block, incumbent, &mut unary, &mut digits) {
                best = Some((bi, values, delta));
            }
        }
        match best {
            Some((bi, values, delta)) => {
                let block = &blocks[bi];
                let (coords, values): (Vec<usize>, Vec<u8>) = block
                    .iter()
                    .zip(values)
                    .filter(|&(&i, v)| eng.state.q[i] != v)
                    .map(|(&i, v)| (i, v))
                    .unzip();
                eng.record(coords, values, delta);
            }
            None => eng.noop(),
        }
    }
    Ok(eng.finish())
}
