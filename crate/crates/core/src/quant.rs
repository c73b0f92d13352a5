//! Quantization parameters, dequantization, the layer-wise objective and the
//! MinMax / Optimal Weight Clipping initializers.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::calibration::Hessian;
use crate::error::{Error, Result};

/// Bit width `c` in `1..=8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Bits(u8);

impl Bits {
    pub fn new(c: u32) -> Result<Self> {
        if (1..=8).contains(&c) {
            Ok(Bits(c as u8))
        } else {
            Err(Error::InvalidBits(c))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Number of representable codes, `2^c`.
    pub fn levels(self) -> usize {
        1usize << self.0
    }

    pub fn max_code(self) -> u8 {
        (self.levels() - 1) as u8
    }
}

impl TryFrom<u32> for Bits {
    type Error = Error;
    fn try_from(c: u32) -> Result<Self> {
        Bits::new(c)
    }
}

impl From<Bits> for u32 {
    fn from(b: Bits) -> u32 {
        b.0 as u32
    }
}

/// Integer codes for one output channel.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CodeVector(Vec<u8>);

impl CodeVector {
    pub fn new(codes: Vec<u8>) -> Self {
        CodeVector(codes)
    }

    pub fn zeros(len: usize) -> Self {
        CodeVector(vec![0; len])
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.0
    }

    pub fn validate(&self, bits: Bits) -> Result<()> {
        match self.0.iter().position(|&q| q > bits.max_code()) {
            Some(position) => Err(Error::CodeOutOfRange {
                code: self.0[position] as u32,
                position,
                bits: bits.get(),
            }),
            None => Ok(()),
        }
    }
}

impl Deref for CodeVector {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        &self.0
    }
}

impl From<Vec<u8>> for CodeVector {
    fn from(v: Vec<u8>) -> Self {
        CodeVector(v)
    }
}

/// Scale `a`, bias `b`, bit width `c` and the clipping strength `γ` that produced `a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub bias: f64,
    pub bits: Bits,
    pub gamma: f64,
}

impl QuantParams {
    /// Unit scale and zero bias, for problems already expressed in code units.
    pub fn unit(bits: Bits) -> Self {
        QuantParams {
            scale: 1.0,
            bias: 0.0,
            bits,
            gamma: 1.0,
        }
    }

    /// Clipped min-max parameters: `a = γ(max − min)/(2^c − 1)`, `b = min`.
    pub fn for_gamma(w: &[f64], bits: Bits, gamma: f64) -> Result<Self> {
        let (lo, hi) = min_max(w)?;
        Ok(QuantParams {
            scale: gamma * (hi - lo) / bits.max_code() as f64,
            bias: lo,
            bits,
            gamma,
        })
    }

    #[inline]
    pub fn dequantize_code(&self, q: u8) -> f64 {
        self.scale * q as f64 + self.bias
    }

    /// `clamp(round((w − b)/a), 0, 2^c − 1)`, ties away from zero; all zeros when `a = 0`.
    pub fn quantize(&self, w: &[f64]) -> CodeVector {
        if self.scale == 0.0 {
            return CodeVector::zeros(w.len());
        }
        let top = self.bits.max_code() as f64;
        CodeVector(
            w.iter()
                .map(|&x| ((x - self.bias) / self.scale).round().clamp(0.0, top) as u8)
                .collect(),
        )
    }
}

fn min_max(w: &[f64]) -> Result<(f64, f64)> {
    if w.is_empty() {
        return Err(Error::Shape("empty weight vector".into()));
    }
    if let Some(index) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

pub fn dequantize(q: &CodeVector, params: &QuantParams) -> Result<Vec<f64>> {
    q.validate(params.bits)?;
    Ok(q.iter().map(|&c| params.dequantize_code(c)).collect())
}

/// `eᵀ H_bb e` for the diagonal block of `h` starting at `start` with `e.len()` rows.
pub fn quad_form_block(h: &Hessian, e: &[f64], start: usize) -> f64 {
    let d = h.dim();
    let hs = h.as_slice();
    let mut total = 0.0;
    for (a, &ea) in e.iter().enumerate() {
        let col = &hs[(start + a) * d + start..(start + a) * d + start + e.len()];
        let mut acc = 0.0;
        for (&hv, &eb) in col.iter().zip(e) {
            acc += hv * eb;
        }
        total += ea * acc;
    }
    total
}

/// `eᵀ H e`.
pub fn quad_form(h: &Hessian, e: &[f64]) -> f64 {
    quad_form_block(h, e, 0)
}

pub(crate) fn residual(w: &[f64], q: &[u8], params: &QuantParams) -> Vec<f64> {
    w.iter()
        .zip(q)
        .map(|(&x, &c)| x - params.dequantize_code(c))
        .collect()
}

/// Layer-wise loss `eᵀHe` with `e = w − (a·q + b)`.
pub fn objective(w: &[f64], q: &CodeVector, params: &QuantParams, h: &Hessian) -> Result<f64> {
    if w.len() != q.len() || w.len() != h.dim() {
        return Err(Error::Shape(format!(
            "w has {} entries, q has {}, H is {}x{}",
            w.len(),
            q.len(),
            h.dim(),
            h.dim()
        )));
    }
    q.validate(params.bits)?;
    Ok(quad_form(h, &residual(w, q, params)))
}

/// Objective divided by the loss of the all-zero reconstruction, `wᵀHw`.
pub fn relative_objective(w: &[f64], q: &CodeVector, params: &QuantParams, h: &Hessian) -> Result<f64> {
    let num = objective(w, q, params, h)?;
    relative_to_zero(num, w, h)
}

pub fn relative_to_zero(num: f64, w: &[f64], h: &Hessian) -> Result<f64> {
    let den = quad_form(h, w);
    if den <= 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(num / den)
}

/// MinMax quantization, the `γ = 1` member of the clipping family.
pub fn minmax_quantize(w: &[f64], bits: Bits) -> Result<(QuantParams, CodeVector)> {
    let params = QuantParams::for_gamma(w, bits, 1.0)?;
    let q = params.quantize(w);
    Ok((params, q))
}

/// Clipping strengths `{j / grid_size : j = 1..=grid_size}` in ascending order.
pub fn gamma_grid(grid_size: usize) -> Result<Vec<f64>> {
    if grid_size == 0 {
        return Err(Error::InvalidConfig("grid_size must be at least 1".into()));
    }
    Ok((1..=grid_size).map(|j| j as f64 / grid_size as f64).collect())
}

/// Grid search over `γ` scoring each candidate residual with `score`.
/// Candidates are visited from the largest `γ` down and only a strictly
/// smaller score replaces the incumbent, so ties keep the larger `γ`.
pub(crate) fn clip_search(
    w: &[f64],
    bits: Bits,
    grid_size: usize,
    mut score: impl FnMut(&[f64]) -> f64,
) -> Result<(QuantParams, CodeVector, f64)> {
    let grid = gamma_grid(grid_size)?;
    let mut best: Option<(QuantParams, CodeVector, f64)> = None;
    for &gamma in grid.iter().rev() {
        let params = QuantParams::for_gamma(w, bits, gamma)?;
        let q = params.quantize(w);
        let loss = score(&residual(w, &q, &params));
        if best.as_ref().is_none_or(|(_, _, b)| loss < *b) {
            best = Some((params, q, loss));
        }
    }
    Ok(best.expect("grid is nonempty"))
}

/// Optimal Weight Clipping: the grid `γ` minimizing the layer-wise loss.
pub fn owc_quantize(w: &[f64], h: &Hessian, bits: Bits, grid_size: usize) -> Result<(QuantParams, CodeVector)> {
    if w.len() != h.dim() {
        return Err(Error::Shape(format!("w has {} entries, H is {}x{}", w.len(), h.dim(), h.dim())));
    }
    let (params, q, _) = clip_search(w, bits, grid_size, |e| quad_form(h, e))?;
    Ok((params, q))
}

/// One output channel's quantization problem with its cached target `z = (w − b)/a`.
#[derive(Clone, Debug)]
pub struct ChannelProblem<'a> {
    w: Vec<f64>,
    hessian: &'a Hessian,
    params: QuantParams,
    target: Option<Vec<f64>>,
}

impl<'a> ChannelProblem<'a> {
    pub fn new(w: Vec<f64>, hessian: &'a Hessian, params: QuantParams) -> Result<Self> {
        if w.len() != hessian.dim() {
            return Err(Error::Shape(format!(
                "w has {} entries, H is {}x{}",
                w.len(),
                hessian.dim(),
                hessian.dim()
            )));
        }
        if let Some(index) = w.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let target = (params.scale != 0.0).then(|| compute_target(&w, &params));
        Ok(ChannelProblem {
            w,
            hessian,
            params,
            target,
        })
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn hessian(&self) -> &'a Hessian {
        self.hessian
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// `None` for a degenerate (zero-scale) channel.
    pub fn target(&self) -> Option<&[f64]> {
        self.target.as_deref()
    }

    pub fn objective(&self, q: &CodeVector) -> Result<f64> {
        objective(&self.w, q, &self.params, self.hessian)
    }

    /// Scaled loss `(q − z)ᵀH(q − z)`; the true loss is `a²` times this.
    pub fn scaled_loss(&self, q: &[u8]) -> Result<f64> {
        let z = self.target().ok_or(Error::DegenerateScale)?;
        Ok(scaled_loss(self.hessian, q, z))
    }
}

pub(crate) fn compute_target(w: &[f64], params: &QuantParams) -> Vec<f64> {
    w.iter().map(|&x| (x - params.bias) / params.scale).collect()
}

pub(crate) fn scaled_loss(h: &Hessian, q: &[u8], z: &[f64]) -> f64 {
    let r: Vec<f64> = q.iter().zip(z).map(|(&c, &t)| c as f64 - t).collect();
    quad_form(h, &r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn bits(c: u32) -> Bits {
        Bits::new(c).unwrap()
    }

    fn eye(d: usize) -> Hessian {
        Hessian::from_matrix(DMatrix::identity(d, d)).unwrap()
    }

    fn p(scale: f64, bias: f64, c: u32) -> QuantParams {
        QuantParams {
            scale,
            bias,
            bits: bits(c),
            gamma: 1.0,
        }
    }

    #[test]
    fn bits_range() {
        assert!(Bits::new(0).is_err());
        assert!(Bits::new(9).is_err());
        assert_eq!(bits(3).levels(), 8);
        assert_eq!(bits(8).max_code(), 255);
    }

    #[test]
    fn dequantize_examples() {
        let q = CodeVector::new(vec![0, 1, 2, 3]);
        assert_eq!(dequantize(&q, &p(1.0, 0.0, 2)).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(dequantize(&CodeVector::zeros(2), &p(0.0, 5.0, 2)).unwrap(), vec![5.0, 5.0]);
        assert_eq!(dequantize(&CodeVector::new(vec![1, 3]), &p(0.5, -1.0, 2)).unwrap(), vec![-0.5, 0.5]);
        assert!(dequantize(&CodeVector::new(vec![4]), &p(1.0, 0.0, 2)).is_err());
    }

    #[test]
    fn objective_examples() {
        let exact = objective(&[0.0, 1.0], &CodeVector::new(vec![0, 1]), &p(1.0, 0.0, 1), &eye(2)).unwrap();
        assert_eq!(exact, 0.0);

        // e = w − q = [0.4, −0.4]
        let o = objective(&[0.4, 0.6], &CodeVector::new(vec![0, 1]), &p(1.0, 0.0, 1), &eye(2)).unwrap();
        assert!((o - 0.32).abs() < 1e-15);

        let h = Hessian::from_matrix(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        // e = [0.4, 0.6]: 2·0.16 + 2·0.24 + 2·0.36 = 1.52
        let o = objective(&[0.4, 0.6], &CodeVector::zeros(2), &p(1.0, 0.0, 1), &h).unwrap();
        assert!((o - 1.52).abs() < 1e-12);
        assert!(objective(&[0.0], &CodeVector::zeros(2), &p(1.0, 0.0, 1), &h).is_err());
    }

    #[test]
    fn minmax_examples() {
        let (pa, q) = minmax_quantize(&[0.0, 1.0, 2.0, 3.0], bits(2)).unwrap();
        assert_eq!((pa.scale, pa.bias), (1.0, 0.0));
        assert_eq!(q.as_slice(), &[0, 1, 2, 3]);

        let (pa, q) = minmax_quantize(&[-1.0, 0.0, 1.0], bits(1)).unwrap();
        assert_eq!((pa.scale, pa.bias), (2.0, -1.0));
        assert_eq!(q.as_slice(), &[0, 1, 1]);

        let (pa, q) = minmax_quantize(&[5.0, 5.0], bits(3)).unwrap();
        assert_eq!((pa.scale, pa.bias), (0.0, 5.0));
        assert_eq!(q.as_slice(), &[0, 0]);
        assert_eq!(dequantize(&q, &pa).unwrap(), vec![5.0, 5.0]);

        assert!(minmax_quantize(&[], bits(2)).is_err());
        assert!(minmax_quantize(&[f64::NAN], bits(2)).is_err());
    }

    #[test]
    fn owc_on_grid_weights_picks_unit_gamma() {
        let w = [0.0, 1.0, 2.0, 3.0];
        let (pa, q) = owc_quantize(&w, &eye(4), bits(2), 50).unwrap();
        assert_eq!(pa.gamma, 1.0);
        assert_eq!(objective(&w, &q, &pa, &eye(4)).unwrap(), 0.0);
    }

    #[test]
    fn owc_single_point_grid_is_minmax() {
        let w = [0.3, -1.2, 2.5, 0.7];
        let h = Hessian::from_matrix(DMatrix::from_row_slice(
            4,
            4,
            &[2.0, 0.5, 0.0, 0.1, 0.5, 1.0, 0.2, 0.0, 0.0, 0.2, 3.0, 0.4, 0.1, 0.0, 0.4, 1.5],
        ))
        .unwrap();
        let (po, qo) = owc_quantize(&w, &h, bits(3), 1).unwrap();
        let (pm, qm) = minmax_quantize(&w, bits(3)).unwrap();
        assert_eq!(po, pm);
        assert_eq!(qo, qm);
    }

    #[test]
    fn owc_matches_independent_grid_evaluation() {
        let w = [0.0, 1.0, 1.1, 10.0];
        let h = eye(4);
        let (pa, q) = owc_quantize(&w, &h, bits(2), 50).unwrap();
        let got = objective(&w, &q, &pa, &h).unwrap();

        // oracle: score every γ directly with explicit sums of squares
        let (mut best_g, mut best) = (0.0, f64::INFINITY);
        for j in (1..=50).rev() {
            let g = j as f64 / 50.0;
            let a = g * 10.0 / 3.0;
            let loss: f64 = w
                .iter()
                .map(|&x| {
                    let c = (x / a).round().clamp(0.0, 3.0);
                    (x - a * c).powi(2)
                })
                .sum();
            if loss < best {
                best = loss;
                best_g = g;
            }
        }
        assert_eq!(pa.gamma, best_g);
        assert!((got - best).abs() <= 1e-12 * best.max(1.0));
        let minmax = {
            let (pm, qm) = minmax_quantize(&w, bits(2)).unwrap();
            objective(&w, &qm, &pm, &h).unwrap()
        };
        assert!(got <= minmax);
    }

    #[test]
    fn relative_objective_examples() {
        let h = eye(2);
        let pa = p(1.0, 0.0, 2);
        assert_eq!(relative_objective(&[1.0, 2.0], &CodeVector::new(vec![1, 2]), &pa, &h).unwrap(), 0.0);
        assert_eq!(relative_objective(&[1.0, 2.0], &CodeVector::zeros(2), &pa, &h).unwrap(), 1.0);
        assert!(matches!(
            relative_objective(&[0.0, 0.0], &CodeVector::zeros(2), &pa, &h),
            Err(Error::ZeroDenominator)
        ));

        let h2 = Hessian::from_matrix(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        let r = relative_objective(&[0.4, 0.6], &CodeVector::new(vec![0, 1]), &p(1.0, 0.0, 1), &h2).unwrap();
        assert!((r - 0.32 / 1.52).abs() < 1e-12);
    }

    #[test]
    fn channel_problem_target() {
        let h = eye(3);
        let prob = ChannelProblem::new(vec![1.0, 2.0, 4.0], &h, p(0.5, 1.0, 3)).unwrap();
        assert_eq!(prob.target().unwrap(), &[0.0, 2.0, 6.0]);
        let degenerate = ChannelProblem::new(vec![1.0, 1.0, 1.0], &h, p(0.0, 1.0, 3)).unwrap();
        assert!(degenerate.target().is_none());
        assert!(ChannelProblem::new(vec![1.0], &h, p(1.0, 0.0, 1)).is_err());
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, u32)> {
        (2usize..8).prop_flat_map(|d| {
            (
                proptest::collection::vec(-2.0f64..2.0, d),
                proptest::collection::vec(-1.0f64..1.0, (d + 1) * d),
                1u32..=4,
            )
        })
    }

    fn hessian_from(raw: &[f64], d: usize) -> Hessian {
        let x = DMatrix::from_row_slice(d + 1, d, raw);
        let cal = crate::calibration::CalibrationMatrix::new(x).unwrap();
        crate::calibration::build_hessian(&cal, 0.01).unwrap()
    }

    proptest! {
        #[test]
        fn owc_never_worse_than_minmax((w, raw, c) in arb_instance()) {
            let h = hessian_from(&raw, w.len());
            let (po, qo) = owc_quantize(&w, &h, bits(c), 50).unwrap();
            let (pm, qm) = minmax_quantize(&w, bits(c)).unwrap();
            prop_assert!(objective(&w, &qo, &po, &h).unwrap() <= objective(&w, &qm, &pm, &h).unwrap());
            prop_assert!(objective(&w, &qo, &po, &h).unwrap() >= 0.0);
        }

        #[test]
        fn requantizing_dequantized_weights_is_stable((w, _raw, c) in arb_instance()) {
            let (pa, q) = minmax_quantize(&w, bits(c)).unwrap();
            let back = dequantize(&q, &pa).unwrap();
            prop_assert_eq!(pa.quantize(&back), q);
        }

        #[test]
        fn objective_matches_explicit_residual_norm((w, raw, c) in arb_instance()) {
            let d = w.len();
            let x = DMatrix::from_row_slice(d + 1, d, &raw);
            let cal = crate::calibration::CalibrationMatrix::new(x.clone()).unwrap();
            let h = crate::calibration::build_hessian(&cal, 0.01).unwrap();
            let (pa, q) = minmax_quantize(&w, bits(c)).unwrap();
            let e = nalgebra::DVector::from_vec(residual(&w, &q, &pa));
            let explicit = (&x * &e).norm_squared() + h.damping() * e.norm_squared();
            let via_h = objective(&w, &q, &pa, &h).unwrap();
            prop_assert!((via_h - explicit).abs() <= 1e-9 * explicit.max(1e-300));
        }
    }
}
