//! Method comparison on synthetic layers.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::{self, build_hessian, clip_hessian_eigenvalues, Hessian, SynthSpec};
use crate::descent::{cd_quantize, cyclic_cd_quantize, DescentConfig};
use crate::error::{Error, Result};
use crate::pipeline::{quantize_matrix, Method, PipelineConfig};
use crate::quant::{self, Bits, ChannelProblem, CodeVector, QuantParams};
use crate::tensorio::BenchRecord;

pub const CANONICAL_INSTANCE: &str = "canonical-2d";

/// A flat benchmark description; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub n: usize,
    pub bits: Vec<u32>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub block_size: usize,
    pub epochs: usize,
    pub grid_size: usize,
    pub group_size: usize,
    pub lambda_rel: f64,
    pub clip_fraction: f64,
    pub spectrum_exponent: f64,
    pub outlier_directions: usize,
    pub outlier_gain: f64,
    pub include_canonical: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            d_in: 128,
            d_out: 64,
            n: 512,
            bits: vec![2, 3, 4],
            seeds: (0..10).collect(),
            methods: vec![Method::Owc, Method::Cyclic, Method::Cd, Method::Bcd],
            block_size: 2,
            epochs: 1,
            grid_size: 50,
            group_size: 0,
            lambda_rel: 0.01,
            clip_fraction: 0.0,
            spectrum_exponent: 1.0,
            outlier_directions: 4,
            outlier_gain: 10.0,
            include_canonical: true,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("suite lists no methods".into()));
        }
        if self.bits.is_empty() {
            return Err(Error::InvalidConfig("suite lists no bit widths".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("suite lists no seeds".into()));
        }
        for &c in &self.bits {
            Bits::new(c)?;
        }
        Ok(())
    }

    pub fn synth_spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            d_in: self.d_in,
            n: self.n,
            spectrum_exponent: self.spectrum_exponent,
            outlier_directions: self.outlier_directions,
            outlier_gain: self.outlier_gain,
            seed,
        }
    }

    pub fn pipeline(&self, method: Method, bits: Bits, seed: u64) -> PipelineConfig {
        let mut cfg = PipelineConfig::new(method, bits);
        cfg.group_size = self.group_size;
        cfg.grid_size = self.grid_size;
        cfg.descent.epochs = self.epochs;
        cfg.descent.seed = seed;
        if method == Method::Bcd {
            cfg.descent.block_size = self.block_size;
        }
        cfg
    }
}

pub fn instance_name(seed: u64) -> String {
    format!("synth-{seed}")
}

/// The synthetic instance for one seed: weights and the (possibly clipped) Hessian.
pub fn suite_instance(cfg: &SuiteConfig, seed: u64) -> Result<(DMatrix<f64>, Hessian)> {
    let x = calibration::gen_calibration(&cfg.synth_spec(seed))?;
    let mut h = build_hessian(&x, cfg.lambda_rel)?;
    if cfg.clip_fraction > 0.0 {
        h = clip_hessian_eigenvalues(&h, cfg.clip_fraction)?;
    }
    Ok((calibration::synth_weights(cfg.d_in, cfg.d_out, seed), h))
}

/// Records for every (seed, bits, method, column), plus the fixed
/// regression rows when enabled.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut records = Vec::new();
    if cfg.include_canonical {
        records.extend(canonical_records()?);
    }
    for &seed in &cfg.seeds {
        let (w, h) = suite_instance(cfg, seed)?;
        for &c in &cfg.bits {
            let bits = Bits::new(c)?;
            for &method in &cfg.methods {
                let pc = cfg.pipeline(method, bits, seed);
                let out = quantize_matrix(&w, &h, &pc, pc.provenance(cfg.lambda_rel, cfg.clip_fraction))?;
                for ch in out.channels {
                    records.push(BenchRecord {
                        instance: instance_name(seed),
                        method: method.to_string(),
                        bits: bits.get(),
                        group_size: cfg.group_size,
                        block_size: pc.descent.block_size,
                        epochs: pc.descent.epochs,
                        column: ch.column,
                        objective: ch.objective,
                        relative_objective: ch.relative_objective.unwrap_or(f64::NAN),
                        steps: ch.steps,
                        wall_millis: ch.wall_millis,
                    });
                }
            }
        }
    }
    Ok(records)
}

/// `H = [[2, 1], [1, 2]]`, target `[0.4, 0.6]`, one bit, start `[0, 0]`.
pub fn canonical_problem(h: &Hessian) -> Result<ChannelProblem<'_>> {
    ChannelProblem::new(vec![0.4, 0.6], h, QuantParams::unit(Bits::new(1)?))
}

pub fn canonical_hessian() -> Hessian {
    Hessian::from_matrix(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).expect("symmetric constant")
}

/// Greedy and cyclic descent on the fixed two-coordinate instance.
pub fn canonical_records() -> Result<Vec<BenchRecord>> {
    let h = canonical_hessian();
    let prob = canonical_problem(&h)?;
    let q0 = CodeVector::zeros(2);
    let cfg = DescentConfig::default();
    let runs = [
        (Method::Cd, cd_quantize(&prob, &q0, &cfg)?),
        (Method::Cyclic, cyclic_cd_quantize(&prob, &q0, &cfg)?),
    ];
    runs.into_iter()
        .map(|(method, (q, trace))| {
            let objective = prob.objective(&q)?;
            Ok(BenchRecord {
                instance: CANONICAL_INSTANCE.into(),
                method: method.to_string(),
                bits: 1,
                group_size: 0,
                block_size: 1,
                epochs: 1,
                column: 0,
                objective,
                relative_objective: quant::relative_to_zero(objective, prob.w(), &h)?,
                steps: trace.len(),
                wall_millis: 0.0,
            })
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub bits: u8,
    pub group_size: usize,
    pub block_size: usize,
    pub epochs: usize,
    pub channels: usize,
    pub median_relative_objective: f64,
    pub mean_relative_objective: f64,
    pub median_wall_millis: f64,
    pub mean_wall_millis: f64,
}

/// Median and mean per method and configuration over all synthetic
/// instances. Columns without a relative objective are left out.
pub fn aggregate(records: &[BenchRecord]) -> Vec<AggregateRow> {
    type Key = (String, u8, usize, usize, usize);
    let mut cells: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.instance != CANONICAL_INSTANCE) {
        let e = cells
            .entry((r.method.clone(), r.bits, r.group_size, r.block_size, r.epochs))
            .or_default();
        if r.relative_objective.is_finite() {
            e.0.push(r.relative_objective);
        }
        e.1.push(r.wall_millis);
    }
    cells
        .into_iter()
        .map(|((method, bits, group_size, block_size, epochs), (mut rel, mut wall))| AggregateRow {
            method,
            bits,
            group_size,
            block_size,
            epochs,
            channels: wall.len(),
            mean_relative_objective: mean(&rel),
            median_relative_objective: median(&mut rel),
            mean_wall_millis: mean(&wall),
            median_wall_millis: median(&mut wall),
        })
        .collect()
}

/// Median relative objective per (instance, bits, method) cell.
pub fn cell_medians(records: &[BenchRecord]) -> BTreeMap<(String, u8, String), f64> {
    let mut cells: BTreeMap<(String, u8, String), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.relative_objective.is_finite()) {
        cells
            .entry((r.instance.clone(), r.bits, r.method.clone()))
            .or_default()
            .push(r.relative_objective);
    }
    cells.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect()
}
