//! A quantized `d_in × d_out` weight matrix and its on-disk directory form.
//!
//! Directory layout:
//!
//! - `meta.json`: dimensions, bit width, group size and provenance
//! - `scale.bin`, `bias.bin`, `gamma.bin`: f64 containers of shape `[d_out, groups]`
//! - `codes.bin`: bit-packed codes of the row-major `d_in × d_out` code matrix,
//!   or `codes.u8.bin`, a u8 container of shape `[d_in, d_out]`, when unpacked

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::Hessian;
use crate::error::{Error, Result};
use crate::group::{group_objective, GroupScheme};
use crate::quant::{Bits, CodeVector, QuantParams};
use crate::tensorio::{self, TensorContainer};

pub const LAYER_FORMAT_VERSION: u32 = 1;

/// How a layer was produced, enough for `eval` to rebuild the same `H`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub lambda_rel: f64,
    pub clip_fraction: f64,
    pub seed: u64,
    pub block_size: usize,
    pub epochs: usize,
    pub steps: Option<usize>,
    pub grid_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerMeta {
    format_version: u32,
    d_in: usize,
    d_out: usize,
    bits: Bits,
    group_size: usize,
    groups: usize,
    packed: bool,
    provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub bits: Bits,
    /// 0 for one scale per output channel.
    pub group_size: usize,
    /// Channel-major: `params[j * groups + i]` is group `i` of channel `j`.
    pub params: Vec<QuantParams>,
    /// One code vector per output channel.
    pub codes: Vec<CodeVector>,
    pub provenance: Provenance,
}

impl QuantizedLayer {
    pub fn groups(&self) -> usize {
        if self.group_size == 0 {
            1
        } else {
            self.d_in / self.group_size
        }
    }

    pub fn effective_group_size(&self) -> usize {
        if self.group_size == 0 {
            self.d_in
        } else {
            self.group_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(Error::Shape("layer has d_in = 0".into()));
        }
        if self.group_size != 0 && self.d_in % self.group_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "group size {} does not divide d_in {}",
                self.group_size, self.d_in
            )));
        }
        if self.params.len() != self.d_out * self.groups() {
            return Err(Error::Shape(format!(
                "{} parameter sets, expected {}",
                self.params.len(),
                self.d_out * self.groups()
            )));
        }
        if self.codes.len() != self.d_out {
            return Err(Error::Shape(format!("{} code vectors for {} channels", self.codes.len(), self.d_out)));
        }
        for q in &self.codes {
            if q.len() != self.d_in {
                return Err(Error::Shape(format!("code vector of length {}, expected {}", q.len(), self.d_in)));
            }
            q.validate(self.bits)?;
        }
        Ok(())
    }

    pub fn channel_codes(&self, j: usize) -> &CodeVector {
        &self.codes[j]
    }

    pub fn channel_params(&self, j: usize) -> &[QuantParams] {
        let g = self.groups();
        &self.params[j * g..(j + 1) * g]
    }

    pub fn channel_scheme(&self, j: usize) -> GroupScheme {
        GroupScheme {
            group_size: self.effective_group_size(),
            params: self.channel_params(j).to_vec(),
        }
    }

    pub fn dequantize_channel(&self, j: usize) -> Result<Vec<f64>> {
        self.channel_scheme(j).dequantize(&self.codes[j])
    }

    /// `eᵀHe` for channel `j` against original weights `w`.
    pub fn channel_objective(&self, j: usize, w: &[f64], h: &Hessian) -> Result<f64> {
        group_objective(w, &self.codes[j], &self.channel_scheme(j), h)
    }

    fn row_major_codes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.d_in * self.d_out];
        for (j, q) in self.codes.iter().enumerate() {
            for (i, &c) in q.iter().enumerate() {
                out[i * self.d_out + j] = c;
            }
        }
        out
    }

    fn param_container(&self, f: impl Fn(&QuantParams) -> f64) -> Result<TensorContainer> {
        let values: Vec<f64> = self.params.iter().map(f).collect();
        TensorContainer::from_f64(vec![self.d_out, self.groups()], &values)
    }

    pub fn save(&self, dir: impl AsRef<Path>, packed: bool) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = LayerMeta {
            format_version: LAYER_FORMAT_VERSION,
            d_in: self.d_in,
            d_out: self.d_out,
            bits: self.bits,
            group_size: self.group_size,
            groups: self.groups(),
            packed,
            provenance: self.provenance.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&meta)?;
        json.push(b'\n');
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
        tensorio::write_container(dir.join("scale.bin"), &self.param_container(|p| p.scale)?)?;
        tensorio::write_container(dir.join("bias.bin"), &self.param_container(|p| p.bias)?)?;
        tensorio::write_container(dir.join("gamma.bin"), &self.param_container(|p| p.gamma)?)?;
        let codes = self.row_major_codes();
        if packed {
            tensorio::write_packed(dir.join("codes.bin"), &tensorio::pack_codes(&codes, self.bits)?)
        } else {
            tensorio::write_container(
                dir.join("codes.u8.bin"),
                &TensorContainer::from_u8(vec![self.d_in, self.d_out], &codes)?,
            )
        }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: LayerMeta = serde_json::from_slice(&bytes)?;
        if meta.format_version != LAYER_FORMAT_VERSION {
            return Err(Error::MalformedHeader(format!(
                "unsupported layer format version {}",
                meta.format_version
            )));
        }
        let expected_groups = if meta.group_size == 0 { 1 } else { meta.d_in / meta.group_size.max(1) };
        if meta.groups != expected_groups {
            return Err(Error::Shape(format!("meta lists {} groups, expected {expected_groups}", meta.groups)));
        }
        let read_params = |name: &str| -> Result<Vec<f64>> {
            let c = tensorio::read_container(dir.join(name))?;
            if c.shape != [meta.d_out, meta.groups] {
                return Err(Error::Shape(format!("{name} has shape {:?}", c.shape)));
            }
            c.to_f64_vec()
        };
        let scale = read_params("scale.bin")?;
        let bias = read_params("bias.bin")?;
        let gamma = read_params("gamma.bin")?;
        let params = scale
            .iter()
            .zip(&bias)
            .zip(&gamma)
            .map(|((&scale, &bias), &gamma)| QuantParams {
                scale,
                bias,
                bits: meta.bits,
                gamma,
            })
            .collect();
        let flat = if meta.packed {
            let p = tensorio::read_packed(dir.join("codes.bin"))?;
            if p.bits != meta.bits || p.count != meta.d_in * meta.d_out {
                return Err(Error::Shape(format!(
                    "packed codes hold {} {}-bit values, expected {} {}-bit",
                    p.count,
                    p.bits.get(),
                    meta.d_in * meta.d_out,
                    meta.bits.get()
                )));
            }
            tensorio::unpack_codes(&p)?.into_vec()
        } else {
            let c = tensorio::read_container(dir.join("codes.u8.bin"))?;
            if c.shape != [meta.d_in, meta.d_out] {
                return Err(Error::Shape(format!("codes have shape {:?}", c.shape)));
            }
            c.to_u8_vec()?
        };
        let codes = (0..meta.d_out)
            .map(|j| CodeVector::new((0..meta.d_in).map(|i| flat[i * meta.d_out + j]).collect()))
            .collect();
        let layer = QuantizedLayer {
            d_in: meta.d_in,
            d_out: meta.d_out,
            bits: meta.bits,
            group_size: meta.group_size,
            params,
            codes,
            provenance: meta.provenance,
        };
        layer.validate()?;
        Ok(layer)
    }
}
