//! Whole-layer quantization: every output channel independently.
//!
//! Per channel, codes start from clipping search (MinMax for `rtn`). `cd`
//! and `cyclic` descend from there; `bcd` runs `cd` first and continues
//! from its result. With groups, the start is the per-group clipping search
//! refined by greedy clipping descent, and the engines run on the rescaled
//! problem.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::Hessian;
use crate::descent::{DescentConfig, DescentTrace};
use crate::error::{Error, Result};
use crate::group::{self, ClipStep, GroupScheme};
use crate::layer::{Provenance, QuantizedLayer};
use crate::quant::{self, Bits, CodeVector};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rtn,
    Owc,
    Cyclic,
    Cd,
    Bcd,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Rtn, Method::Owc, Method::Cyclic, Method::Cd, Method::Bcd];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Rtn => "rtn",
            Method::Owc => "owc",
            Method::Cyclic => "cyclic",
            Method::Cd => "cd",
            Method::Bcd => "bcd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?} (expected rtn, owc, cyclic, cd or bcd)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub method: Method,
    pub bits: Bits,
    /// 0 for one scale per output channel.
    pub group_size: usize,
    pub descent: DescentConfig,
    pub grid_size: usize,
    /// Clipping-descent steps with groups; `None` means `d_in / group_size`.
    pub clip_steps: Option<usize>,
    pub keep_traces: bool,
}

impl PipelineConfig {
    pub fn new(method: Method, bits: Bits) -> Self {
        PipelineConfig {
            method,
            bits,
            group_size: 0,
            descent: DescentConfig::default(),
            grid_size: 50,
            clip_steps: None,
            keep_traces: false,
        }
    }

    pub fn validate(&self, d_in: usize) -> Result<()> {
        self.descent.validate()?;
        quant::gamma_grid(self.grid_size)?;
        if self.group_size != 0 {
            group::check_group_size(d_in, self.group_size)?;
        }
        if self.method == Method::Bcd {
            self.descent.check_block(self.bits)?;
            if d_in % self.descent.block_size != 0 {
                return Err(Error::InvalidConfig(format!(
                    "block_size {} does not divide d_in {d_in}",
                    self.descent.block_size
                )));
            }
        } else if self.descent.block_size != 1 {
            return Err(Error::InvalidConfig(format!(
                "block_size applies only to bcd (got {} with {})",
                self.descent.block_size, self.method
            )));
        }
        Ok(())
    }

    pub fn provenance(&self, lambda_rel: f64, clip_fraction: f64) -> Provenance {
        Provenance {
            method: self.method.to_string(),
            lambda_rel,
            clip_fraction,
            seed: self.descent.seed,
            block_size: self.descent.block_size,
            epochs: self.descent.epochs,
            steps: self.descent.steps,
            grid_size: self.grid_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelOutcome {
    pub column: usize,
    pub init_objective: f64,
    pub objective: f64,
    /// `None` when `wᵀHw = 0`.
    pub relative_objective: Option<f64>,
    /// Descent steps executed, across stages.
    pub steps: usize,
    pub clip_steps: Vec<ClipStep>,
    /// One trace per descent stage (`bcd` has the `cd` stage first); empty
    /// unless traces were requested.
    pub traces: Vec<DescentTrace>,
    pub wall_millis: f64,
}

#[derive(Clone, Debug)]
pub struct LayerQuantization {
    pub layer: QuantizedLayer,
    pub channels: Vec<ChannelOutcome>,
}

struct ChannelResult {
    scheme: GroupScheme,
    codes: CodeVector,
    outcome: ChannelOutcome,
}

fn stage_configs(cfg: &PipelineConfig, column: usize) -> (DescentConfig, DescentConfig) {
    let greedy = DescentConfig {
        block_size: 1,
        early_stop: true,
        ..cfg.descent.clone()
    };
    let block = DescentConfig {
        seed: rng::mix(cfg.descent.seed, column as u64),
        early_stop: false,
        ..cfg.descent.clone()
    };
    (greedy, block)
}

fn quantize_channel(w: &[f64], h: &Hessian, cfg: &PipelineConfig, column: usize) -> Result<ChannelResult> {
    let start = Instant::now();
    let (greedy, block) = stage_configs(cfg, column);
    let mut traces = Vec::new();
    let mut clip_steps = Vec::new();

    let (scheme, init) = if cfg.group_size == 0 {
        let (p, q) = match cfg.method {
            Method::Rtn => quant::minmax_quantize(w, cfg.bits)?,
            _ => quant::owc_quantize(w, h, cfg.bits, cfg.grid_size)?,
        };
        (
            GroupScheme {
                group_size: w.len(),
                params: vec![p],
            },
            q,
        )
    } else if cfg.method == Method::Rtn {
        group::minmax_group(w, cfg.bits, cfg.group_size)?
    } else {
        let res = group::owc_cd(w, h, cfg.bits, cfg.group_size, cfg.grid_size, cfg.clip_steps)?;
        clip_steps = res.steps;
        (res.scheme, res.codes)
    };

    let mut q = init.clone();
    match cfg.method {
        Method::Rtn | Method::Owc => {}
        Method::Cyclic => {
            let (next, t) = group::group_cyclic_cd_quantize(w, h, &scheme, &q, &greedy)?;
            q = next;
            traces.push(t);
        }
        Method::Cd | Method::Bcd => {
            let (next, t) = group::group_cd_quantize(w, h, &scheme, &q, &greedy)?;
            q = next;
            traces.push(t);
            if cfg.method == Method::Bcd {
                let (next, t) = group::group_bcd_quantize(w, h, &scheme, &q, &block)?;
                q = next;
                traces.push(t);
            }
        }
    }

    let init_objective = group::group_objective(w, &init, &scheme, h)?;
    let objective = group::group_objective(w, &q, &scheme, h)?;
    let relative_objective = match quant::relative_to_zero(objective, w, h) {
        Ok(r) => Some(r),
        Err(Error::ZeroDenominator) => None,
        Err(e) => return Err(e),
    };
    let steps = traces.iter().map(DescentTrace::len).sum();
    if !cfg.keep_traces {
        traces.clear();
    }
    Ok(ChannelResult {
        scheme,
        codes: q,
        outcome: ChannelOutcome {
            column,
            init_objective,
            objective,
            relative_objective,
            steps,
            clip_steps,
            traces,
            wall_millis: start.elapsed().as_secs_f64() * 1e3,
        },
    })
}

/// Quantizes every column of the `d_in × d_out` matrix `w`. Channels run in
/// parallel on the current rayon pool; the result does not depend on the
/// pool size.
pub fn quantize_matrix(w: &DMatrix<f64>, h: &Hessian, cfg: &PipelineConfig, provenance: Provenance) -> Result<LayerQuantization> {
    let (d_in, d_out) = w.shape();
    if d_in != h.dim() {
        return Err(Error::Shape(format!("weights have d_in = {d_in}, H is {}x{}", h.dim(), h.dim())));
    }
    if d_in == 0 {
        return Err(Error::Shape("weights have d_in = 0".into()));
    }
    cfg.validate(d_in)?;
    let results = (0..d_out)
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = w.column(j).iter().copied().collect();
            quantize_channel(&col, h, cfg, j)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut params = Vec::with_capacity(d_out);
    let mut codes = Vec::with_capacity(d_out);
    let mut channels = Vec::with_capacity(d_out);
    for r in results {
        params.extend(r.scheme.params);
        codes.push(r.codes);
        channels.push(r.outcome);
    }
    let layer = QuantizedLayer {
        d_in,
        d_out,
        bits: cfg.bits,
        group_size: cfg.group_size,
        params,
        codes,
        provenance,
    };
    Ok(LayerQuantization { layer, channels })
}

/// Convenience wrapper for per-channel descent on a single column.
pub fn quantize_column(w: &[f64], h: &Hessian, cfg: &PipelineConfig) -> Result<(GroupScheme, CodeVector, ChannelOutcome)> {
    cfg.validate(w.len())?;
    if w.len() != h.dim() {
        return Err(Error::Shape(format!("w has {} entries, H is {}x{}", w.len(), h.dim(), h.dim())));
    }
    let r = quantize_channel(w, h, cfg, 0)?;
    Ok((r.scheme, r.codes, r.outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{build_hessian, gen_calibration, synth_weights, SynthSpec};

    fn instance(d_in: usize, d_out: usize, seed: u64) -> (DMatrix<f64>, Hessian) {
        let synth = SynthSpec {
            d_in,
            n: 4 * d_in,
            spectrum_exponent: 1.0,
            outlier_directions: 0,
            outlier_gain: 1.0,
            seed,
        };
        let h = build_hessian(&gen_calibration(&synth).unwrap(), 0.01).unwrap();
        (synth_weights(d_in, d_out, seed), h)
    }

    fn cfg(method: Method, c: u32) -> PipelineConfig {
        PipelineConfig::new(method, Bits::new(c).unwrap())
    }

    fn run(w: &DMatrix<f64>, h: &Hessian, cfg: &PipelineConfig) -> LayerQuantization {
        quantize_matrix(w, h, cfg, cfg.provenance(0.01, 0.0)).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("gptq".parse::<Method>().is_err());
    }

    #[test]
    fn rtn_on_representable_weights_is_exact() {
        let (_, h) = instance(8, 1, 3);
        let w = DMatrix::from_fn(8, 3, |i, j| ((i + j) % 4) as f64 * 0.5 - 1.0);
        let out = run(&w, &h, &cfg(Method::Rtn, 2));
        for ch in &out.channels {
            assert_eq!(ch.objective, 0.0);
            assert_eq!(ch.relative_objective, Some(0.0));
        }
    }

    #[test]
    fn descent_never_worse_than_its_start() {
        let (w, h) = instance(32, 6, 11);
        for c in [2, 3] {
            let owc = run(&w, &h, &cfg(Method::Owc, c));
            let cd = run(&w, &h, &cfg(Method::Cd, c));
            let mut bcd_cfg = cfg(Method::Bcd, c);
            bcd_cfg.descent.block_size = 2;
            let bcd = run(&w, &h, &bcd_cfg);
            for j in 0..6 {
                assert_eq!(cd.channels[j].init_objective, owc.channels[j].objective);
                assert!(cd.channels[j].objective <= owc.channels[j].objective);
                assert!(bcd.channels[j].objective <= cd.channels[j].objective);
            }
        }
    }

    #[test]
    fn parallel_matches_serial() {
        let (w, h) = instance(16, 3, 5);
        let mut c = cfg(Method::Bcd, 2);
        c.descent.block_size = 2;
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| run(&w, &h, &c));
        let parallel = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| run(&w, &h, &c));
        assert_eq!(serial.layer, parallel.layer);
    }

    #[test]
    fn full_width_group_matches_per_channel() {
        let (w, h) = instance(16, 4, 21);
        for m in [Method::Owc, Method::Cyclic, Method::Cd, Method::Bcd] {
            let mut a = cfg(m, 3);
            if m == Method::Bcd {
                a.descent.block_size = 2;
            }
            let mut b = a.clone();
            b.group_size = 16;
            let pa = run(&w, &h, &a);
            let pb = run(&w, &h, &b);
            assert_eq!(pa.layer.params, pb.layer.params);
            assert_eq!(pa.layer.codes, pb.layer.codes);
            for (x, y) in pa.channels.iter().zip(&pb.channels) {
                assert_eq!(x.objective.to_bits(), y.objective.to_bits());
            }
        }
    }

    #[test]
    fn grouped_pipeline_is_monotone() {
        let (w, h) = instance(16, 4, 8);
        let mut c = cfg(Method::Bcd, 2);
        c.group_size = 4;
        c.descent.block_size = 2;
        let out = run(&w, &h, &c);
        assert_eq!(out.layer.params.len(), 16);
        for ch in &out.channels {
            assert!(ch.objective <= ch.init_objective);
        }
    }

    #[test]
    fn zero_column_has_no_relative_objective() {
        let (mut w, h) = instance(8, 2, 4);
        w.column_mut(1).fill(0.0);
        let out = run(&w, &h, &cfg(Method::Cd, 2));
        assert_eq!(out.channels[1].relative_objective, None);
        assert_eq!(out.channels[1].objective, 0.0);
        assert_eq!(out.channels[1].steps, 0);
    }

    #[test]
    fn config_errors() {
        let (w, h) = instance(8, 1, 4);
        let mut c = cfg(Method::Bcd, 8);
        c.descent.block_size = 3;
        assert!(matches!(
            quantize_matrix(&w, &h, &c, Provenance::default()),
            Err(Error::Guard { value: 24, .. })
        ));
        let mut c = cfg(Method::Cd, 2);
        c.descent.block_size = 2;
        assert!(quantize_matrix(&w, &h, &c, Provenance::default()).is_err());
        let mut c = cfg(Method::Cd, 2);
        c.group_size = 3;
        assert!(quantize_matrix(&w, &h, &c, Provenance::default()).is_err());
        let (w2, _) = instance(4, 1, 4);
        assert!(matches!(quantize_matrix(&w2, &h, &cfg(Method::Cd, 2), Provenance::default()), Err(Error::Shape(_))));
    }
}
