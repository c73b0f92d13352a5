//! Sub-channel (group) quantization.
//!
//! With one scale per group, `w ≈ a ⊙ q + b` where `a` and `b` are constant
//! within each group. Substituting `H̃ = D_a H D_a` and `z̃ = D_a⁻¹(w − b)`
//! turns the group objective into `(q − z̃)ᵀH̃(q − z̃)`, which the per-channel
//! engines minimize unchanged with unit scale. Groups whose weights are
//! constant have `a = 0`; they quantize exactly to code 0 and are left out
//! of the reduced problem.

use serde::{Deserialize, Serialize};

use crate::calibration::Hessian;
use crate::descent::{self, DescentConfig, DescentTrace};
use crate::error::{Error, Result};
use crate::quant::{self, Bits, ChannelProblem, CodeVector, QuantParams};

/// Per-group parameters for one output channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScheme {
    pub group_size: usize,
    pub params: Vec<QuantParams>,
}

pub fn check_group_size(d_in: usize, group_size: usize) -> Result<()> {
    if group_size == 0 || d_in % group_size != 0 {
        return Err(Error::InvalidConfig(format!(
            "group size {group_size} does not divide d_in {d_in}"
        )));
    }
    Ok(())
}

impl GroupScheme {
    pub fn groups(&self) -> usize {
        self.params.len()
    }

    pub fn bits(&self) -> Bits {
        self.params[0].bits
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.gamma).collect()
    }

    pub fn validate(&self, d_in: usize) -> Result<()> {
        check_group_size(d_in, self.group_size)?;
        if self.params.len() != d_in / self.group_size {
            return Err(Error::Shape(format!(
                "{} group parameter sets for {} groups",
                self.params.len(),
                d_in / self.group_size
            )));
        }
        Ok(())
    }

    /// Group parameters for coordinate `j`.
    #[inline]
    pub fn params_for(&self, j: usize) -> &QuantParams {
        &self.params[j / self.group_size]
    }

    pub fn quantize(&self, w: &[f64]) -> CodeVector {
        let mut out = Vec::with_capacity(w.len());
        for (chunk, p) in w.chunks(self.group_size).zip(&self.params) {
            out.extend_from_slice(p.quantize(chunk).as_slice());
        }
        CodeVector::new(out)
    }

    pub fn dequantize(&self, q: &CodeVector) -> Result<Vec<f64>> {
        self.validate(q.len())?;
        q.validate(self.bits())?;
        Ok(q.iter().enumerate().map(|(j, &c)| self.params_for(j).dequantize_code(c)).collect())
    }

    fn residual(&self, w: &[f64], q: &[u8]) -> Vec<f64> {
        w.iter()
            .zip(q)
            .enumerate()
            .map(|(j, (&x, &c))| x - self.params_for(j).dequantize_code(c))
            .collect()
    }
}

/// The group objective `eᵀHe` with `e = w − (a ⊙ q + b)`.
pub fn group_objective(w: &[f64], q: &CodeVector, scheme: &GroupScheme, h: &Hessian) -> Result<f64> {
    if w.len() != q.len() || w.len() != h.dim() {
        return Err(Error::Shape(format!(
            "w has {} entries, q has {}, H is {}x{}",
            w.len(),
            q.len(),
            h.dim(),
            h.dim()
        )));
    }
    scheme.validate(w.len())?;
    q.validate(scheme.bits())?;
    Ok(quant::quad_form(h, &scheme.residual(w, q)))
}

/// The rescaled problem on the coordinates of non-degenerate groups.
#[derive(Clone, Debug)]
pub struct TildeProblem {
    pub hessian: Hessian,
    pub target: Vec<f64>,
    /// Original coordinate of each reduced coordinate.
    pub active: Vec<usize>,
    pub bits: Bits,
}

impl TildeProblem {
    pub fn channel_problem(&self) -> Result<ChannelProblem<'_>> {
        ChannelProblem::new(self.target.clone(), &self.hessian, QuantParams::unit(self.bits))
    }

    pub fn restrict(&self, q: &CodeVector) -> CodeVector {
        CodeVector::new(self.active.iter().map(|&j| q[j]).collect())
    }

    pub fn scatter(&self, reduced: &CodeVector, into: &mut CodeVector) {
        for (&j, &c) in self.active.iter().zip(reduced.iter()) {
            into.as_mut_slice()[j] = c;
        }
    }
}

/// `H̃_jk = a_j H_jk a_k`, `z̃_j = (w_j − b_j)/a_j`. Fails on any zero group scale.
pub fn tilde_transform(w: &[f64], h: &Hessian, scheme: &GroupScheme) -> Result<TildeProblem> {
    if scheme.params.iter().any(|p| p.scale == 0.0) {
        return Err(Error::DegenerateScale);
    }
    reduced_tilde(w, h, scheme)
}

fn reduced_tilde(w: &[f64], h: &Hessian, scheme: &GroupScheme) -> Result<TildeProblem> {
    let d = w.len();
    if d != h.dim() {
        return Err(Error::Shape(format!("w has {d} entries, H is {}x{}", h.dim(), h.dim())));
    }
    scheme.validate(d)?;
    let active: Vec<usize> = (0..d).filter(|&j| scheme.params_for(j).scale != 0.0).collect();
    let n = active.len();
    let scales: Vec<f64> = active.iter().map(|&j| scheme.params_for(j).scale).collect();
    let hm = h.matrix();
    let mut ht = nalgebra::DMatrix::<f64>::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let v = scales[a] * hm[(active[a], active[b])] * scales[b];
            ht[(a, b)] = v;
            ht[(b, a)] = v;
        }
    }
    let target = active
        .iter()
        .map(|&j| {
            let p = scheme.params_for(j);
            (w[j] - p.bias) / p.scale
        })
        .collect();
    Ok(TildeProblem {
        hessian: Hessian::from_parts(ht, h.damping(), h.clip_fraction()),
        target,
        active,
        bits: scheme.bits(),
    })
}

type Engine = fn(&ChannelProblem<'_>, &CodeVector, &DescentConfig) -> Result<(CodeVector, DescentTrace)>;

fn run_group(
    w: &[f64],
    h: &Hessian,
    scheme: &GroupScheme,
    q0: &CodeVector,
    cfg: &DescentConfig,
    engine: Engine,
) -> Result<(CodeVector, DescentTrace)> {
    if q0.len() != w.len() {
        return Err(Error::Shape(format!("q0 has {} entries, expected {}", q0.len(), w.len())));
    }
    q0.validate(scheme.bits())?;
    // An epoch stays d_in steps even when degenerate groups shrink the problem.
    let cfg = DescentConfig {
        steps: Some(cfg.steps.unwrap_or(w.len())),
        ..cfg.clone()
    };
    if scheme.groups() == 1 {
        if scheme.params[0].scale == 0.0 {
            return Ok((q0.clone(), DescentTrace::default()));
        }
        let prob = ChannelProblem::new(w.to_vec(), h, scheme.params[0])?;
        return engine(&prob, q0, &cfg);
    }
    let tilde = reduced_tilde(w, h, scheme)?;
    let mut q = q0.clone();
    if tilde.active.is_empty() {
        return Ok((q, DescentTrace::default()));
    }
    let prob = tilde.channel_problem()?;
    let (reduced, trace) = engine(&prob, &tilde.restrict(q0), &cfg)?;
    tilde.scatter(&reduced, &mut q);
    Ok((q, trace))
}

/// Greedy CD on the rescaled problem. Trace coordinates index the active
/// (non-degenerate) coordinates in ascending order; losses are true losses.
/// A single group runs the per-channel engine directly.
pub fn group_cd_quantize(
    w: &[f64],
    h: &Hessian,
    scheme: &GroupScheme,
    q0: &CodeVector,
    cfg: &DescentConfig,
) -> Result<(CodeVector, DescentTrace)> {
    run_group(w, h, scheme, q0, cfg, descent::cd_quantize)
}

/// Randomized BCD on the rescaled problem. When degenerate groups leave an
/// active count not divisible by the block size, the last block is short.
pub fn group_bcd_quantize(
    w: &[f64],
    h: &Hessian,
    scheme: &GroupScheme,
    q0: &CodeVector,
    cfg: &DescentConfig,
) -> Result<(CodeVector, DescentTrace)> {
    if w.len() % cfg.block_size.max(1) != 0 {
        return Err(Error::InvalidConfig(format!(
            "block_size {} does not divide d_in {}",
            cfg.block_size,
            w.len()
        )));
    }
    run_group(w, h, scheme, q0, cfg, descent::bcd_quantize_uneven)
}

pub fn group_cyclic_cd_quantize(
    w: &[f64],
    h: &Hessian,
    scheme: &GroupScheme,
    q0: &CodeVector,
    cfg: &DescentConfig,
) -> Result<(CodeVector, DescentTrace)> {
    run_group(w, h, scheme, q0, cfg, descent::cyclic_cd_quantize)
}

/// Residuals `Δ(i, β) = w⁽ⁱ⁾ − a⁽ⁱ⁾(β)q⁽ⁱ⁾(β) − b⁽ⁱ⁾` for every group and grid value.
#[derive(Clone, Debug)]
pub struct ResidualTable {
    pub group_size: usize,
    pub grid: Vec<f64>,
    /// `[group][grid index]`
    pub params: Vec<Vec<QuantParams>>,
    pub codes: Vec<Vec<CodeVector>>,
    pub residuals: Vec<Vec<Vec<f64>>>,
}

impl ResidualTable {
    pub fn build(w: &[f64], bits: Bits, group_size: usize, grid_size: usize) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Shape("empty weight vector".into()));
        }
        check_group_size(w.len(), group_size)?;
        let grid = quant::gamma_grid(grid_size)?;
        let groups = w.len() / group_size;
        let mut params = Vec::with_capacity(groups);
        let mut codes = Vec::with_capacity(groups);
        let mut residuals = Vec::with_capacity(groups);
        for chunk in w.chunks(group_size) {
            let mut ps = Vec::with_capacity(grid.len());
            let mut cs = Vec::with_capacity(grid.len());
            let mut rs = Vec::with_capacity(grid.len());
            for &gamma in &grid {
                let p = QuantParams::for_gamma(chunk, bits, gamma)?;
                let q = p.quantize(chunk);
                rs.push(quant::residual(chunk, &q, &p));
                ps.push(p);
                cs.push(q);
            }
            params.push(ps);
            codes.push(cs);
            residuals.push(rs);
        }
        Ok(ResidualTable {
            group_size,
            grid,
            params,
            codes,
            residuals,
        })
    }

    pub fn groups(&self) -> usize {
        self.params.len()
    }

    /// Per-group grid index minimizing the group-local loss `Δᵀ H_ii Δ`,
    /// ties toward larger `γ`.
    fn local_best(&self, h: &Hessian) -> Vec<usize> {
        (0..self.groups())
            .map(|i| {
                let start = i * self.group_size;
                let mut best = (usize::MAX, f64::INFINITY);
                for t in (0..self.grid.len()).rev() {
                    let loss = quant::quad_form_block(h, &self.residuals[i][t], start);
                    if loss < best.1 {
                        best = (t, loss);
                    }
                }
                best.0
            })
            .collect()
    }

    fn assemble(&self, choice: &[usize]) -> (GroupScheme, CodeVector) {
        let params = choice.iter().enumerate().map(|(i, &t)| self.params[i][t]).collect();
        let mut q = Vec::with_capacity(self.groups() * self.group_size);
        for (i, &t) in choice.iter().enumerate() {
            q.extend_from_slice(self.codes[i][t].as_slice());
        }
        (
            GroupScheme {
                group_size: self.group_size,
                params,
            },
            CodeVector::new(q),
        )
    }

    fn residual_vector(&self, choice: &[usize]) -> Vec<f64> {
        choice
            .iter()
            .enumerate()
            .flat_map(|(i, &t)| self.residuals[i][t].iter().copied())
            .collect()
    }
}

/// Per-group MinMax parameters and codes.
pub fn minmax_group(w: &[f64], bits: Bits, group_size: usize) -> Result<(GroupScheme, CodeVector)> {
    check_group_size(w.len(), group_size)?;
    let mut params = Vec::with_capacity(w.len() / group_size);
    for chunk in w.chunks(group_size) {
        params.push(QuantParams::for_gamma(chunk, bits, 1.0)?);
    }
    let scheme = GroupScheme { group_size, params };
    let q = scheme.quantize(w);
    Ok((scheme, q))
}

/// Independent clipping grid search per group against the group's diagonal
/// block of `H` (cross-group terms ignored).
pub fn owc_group_init(
    w: &[f64],
    h: &Hessian,
    bits: Bits,
    group_size: usize,
    grid_size: usize,
) -> Result<(GroupScheme, CodeVector)> {
    if w.len() != h.dim() {
        return Err(Error::Shape(format!("w has {} entries, H is {}x{}", w.len(), h.dim(), h.dim())));
    }
    let table = ResidualTable::build(w, bits, group_size, grid_size)?;
    let choice = table.local_best(h);
    Ok(table.assemble(&choice))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipStep {
    pub step: usize,
    pub group: usize,
    pub gamma: f64,
    pub predicted_delta: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct OwcCdResult {
    pub scheme: GroupScheme,
    pub codes: CodeVector,
    /// `−2He` for the final residual `e`.
    pub v: Vec<f64>,
    pub initial_loss: f64,
    pub loss: f64,
    pub steps: Vec<ClipStep>,
}

/// Moves below this fraction of the current loss are treated as round-off.
const CLIP_REL_TOL: f64 = 1e-12;

/// Greedy coordinate descent over per-group clipping strengths, started from
/// [`owc_group_init`]. Each step swaps one group's residual for the grid
/// value with the largest exact loss reduction; stops after `steps`
/// (default `d_in / group_size`) or when no swap helps.
pub fn owc_cd(
    w: &[f64],
    h: &Hessian,
    bits: Bits,
    group_size: usize,
    grid_size: usize,
    steps: Option<usize>,
) -> Result<OwcCdResult> {
    let d = w.len();
    if d != h.dim() {
        return Err(Error::Shape(format!("w has {d} entries, H is {}x{}", h.dim(), h.dim())));
    }
    let table = ResidualTable::build(w, bits, group_size, grid_size)?;
    // One group has nothing to coordinate: its local search is already exact.
    let total = if table.groups() == 1 { 0 } else { steps.unwrap_or(d / group_size) };
    let mut choice = table.local_best(h);
    let mut e = table.residual_vector(&choice);
    let hs = h.as_slice();
    let mut v: Vec<f64> = (0..d)
        .map(|m| -2.0 * hs[m * d..(m + 1) * d].iter().zip(&e).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let initial_loss = quant::quad_form(h, &e);
    let mut loss = initial_loss;
    let mut trace = Vec::new();
    let g = group_size;
    let mut u = vec![0.0; g];

    for step in 0..total {
        if loss <= 0.0 {
            break;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        let mut best_change = -CLIP_REL_TOL * loss;
        for i in 0..table.groups() {
            let start = i * g;
            let old = &table.residuals[i][choice[i]];
            let vi = &v[start..start + g];
            for t in (0..table.grid.len()).rev() {
                if t == choice[i] {
                    continue;
                }
                for ((ux, &o), &n) in u.iter_mut().zip(old).zip(&table.residuals[i][t]) {
                    *ux = o - n;
                }
                let change = quant::quad_form_block(h, &u, start) + vi.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
                if change < best_change {
                    best_change = change;
                    best = Some((i, t, change));
                }
            }
        }
        let Some((i, t, change)) = best else { break };
        let start = i * g;
        for (a, (&o, &n)) in table.residuals[i][choice[i]].iter().zip(&table.residuals[i][t]).enumerate() {
            let ua = o - n;
            if ua != 0.0 {
                let col = &hs[(start + a) * d..(start + a + 1) * d];
                for (vm, &hv) in v.iter_mut().zip(col) {
                    *vm += 2.0 * ua * hv;
                }
            }
        }
        choice[i] = t;
        e[start..start + g].copy_from_slice(&table.residuals[i][t]);
        loss += change;
        debug_assert!({
            let scratch = quant::quad_form(h, &e);
            (scratch - loss).abs() <= 1e-9 * scratch.abs().max(initial_loss)
        });
        trace.push(ClipStep {
            step,
            group: i,
            gamma: table.grid[t],
            predicted_delta: change,
            loss,
        });
    }
    let (scheme, codes) = table.assemble(&choice);
    Ok(OwcCdResult {
        scheme,
        codes,
        v,
        initial_loss,
        loss,
        steps: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{build_hessian, CalibrationMatrix};
    use crate::descent::cd_quantize;
    use crate::quant::{minmax_quantize, owc_quantize, quad_form};
    use crate::rng;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn bits(c: u32) -> Bits {
        Bits::new(c).unwrap()
    }

    fn random_instance(d: usize, n: usize, seed: u64) -> (Hessian, Vec<f64>, DMatrix<f64>) {
        let mut r = rng::stream(seed);
        let x = DMatrix::from_fn(n, d, |_, _| r.random_range(-1.0..1.0));
        let h = build_hessian(&CalibrationMatrix::new(x.clone()).unwrap(), 0.01).unwrap();
        let w = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        (h, w, x)
    }

    fn block_diagonal(d: usize, g: usize, seed: u64) -> Hessian {
        let (h, _, _) = random_instance(d, 2 * d, seed);
        let mut m = h.matrix().clone();
        for a in 0..d {
            for b in 0..d {
                if a / g != b / g {
                    m[(a, b)] = 0.0;
                }
            }
        }
        Hessian::from_matrix(m).unwrap()
    }

    #[test]
    fn unit_scales_leave_problem_unchanged() {
        let (h, w, _) = random_instance(4, 8, 1);
        let scheme = GroupScheme {
            group_size: 2,
            params: vec![QuantParams::unit(bits(2)); 2],
        };
        let t = tilde_transform(&w, &h, &scheme).unwrap();
        assert_eq!(t.hessian.matrix(), h.matrix());
        assert_eq!(t.target, w);
    }

    #[test]
    fn zero_scale_rejected_by_transform() {
        let (h, w, _) = random_instance(4, 8, 1);
        let mut scheme = GroupScheme {
            group_size: 2,
            params: vec![QuantParams::unit(bits(2)); 2],
        };
        scheme.params[1].scale = 0.0;
        assert!(matches!(tilde_transform(&w, &h, &scheme), Err(Error::DegenerateScale)));
    }

    #[test]
    fn uniform_scale_matches_per_channel_trajectory() {
        for seed in 0..20 {
            let (h, w, _) = random_instance(8, 12, 10 + seed);
            let (p, q0) = minmax_quantize(&w, bits(3)).unwrap();
            let scheme = GroupScheme {
                group_size: 2,
                params: vec![p; 4],
            };
            let prob = ChannelProblem::new(w.clone(), &h, p).unwrap();
            let (qa, ta) = cd_quantize(&prob, &q0, &DescentConfig::default()).unwrap();
            let (qb, tb) = group_cd_quantize(&w, &h, &scheme, &q0, &DescentConfig::default()).unwrap();
            assert_eq!(qa, qb);
            let moves = |t: &DescentTrace| t.records.iter().map(|r| (r.coords.clone(), r.values.clone())).collect::<Vec<_>>();
            assert_eq!(moves(&ta), moves(&tb));
            assert!((ta.final_true_loss - tb.final_true_loss).abs() <= 1e-9 * ta.final_true_loss.max(1e-12));
        }
    }

    #[test]
    fn tilde_loss_matches_explicit_group_objective() {
        for seed in 0..20 {
            let (h, w, x) = random_instance(8, 10, 40 + seed);
            let (scheme, q) = owc_group_init(&w, &h, bits(2), 4, 20).unwrap();
            let t = tilde_transform(&w, &h, &scheme).unwrap();
            let r: Vec<f64> = q.iter().zip(&t.target).map(|(&c, &z)| c as f64 - z).collect();
            let via_tilde = quad_form(&t.hessian, &r);
            // oracle: ‖Σ X⁽ⁱ⁾ e⁽ⁱ⁾‖² + λ‖e‖² straight from X
            let deq = scheme.dequantize(&q).unwrap();
            let e = nalgebra::DVector::from_iterator(8, w.iter().zip(&deq).map(|(a, b)| a - b));
            let explicit = (&x * &e).norm_squared() + h.damping() * e.norm_squared();
            assert!((via_tilde - explicit).abs() <= 1e-9 * explicit);
        }
    }

    #[test]
    fn single_group_init_is_per_channel_owc() {
        for seed in 0..20 {
            let (h, w, _) = random_instance(6, 9, 70 + seed);
            let (scheme, q) = owc_group_init(&w, &h, bits(2), 6, 50).unwrap();
            let (p, qc) = owc_quantize(&w, &h, bits(2), 50).unwrap();
            assert_eq!(scheme.params, vec![p]);
            assert_eq!(q, qc);
            let res = owc_cd(&w, &h, bits(2), 6, 50, None).unwrap();
            assert!(res.steps.is_empty());
            assert_eq!(res.scheme.params, vec![p]);
        }
    }

    #[test]
    fn grid_of_one_is_per_group_minmax() {
        let (h, w, _) = random_instance(8, 12, 3);
        let (a, qa) = owc_group_init(&w, &h, bits(3), 4, 1).unwrap();
        let (b, qb) = minmax_group(&w, bits(3), 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(qa, qb);
    }

    #[test]
    fn local_objective_never_worse_than_minmax() {
        for seed in 0..20 {
            let (h, w, _) = random_instance(8, 12, 100 + seed);
            let (scheme, q) = owc_group_init(&w, &h, bits(2), 2, 50).unwrap();
            let (mm, qm) = minmax_group(&w, bits(2), 2).unwrap();
            for i in 0..4 {
                let s = i * 2;
                let e_owc = scheme.residual(&w, &q)[s..s + 2].to_vec();
                let e_mm = mm.residual(&w, &qm)[s..s + 2].to_vec();
                assert!(quant::quad_form_block(&h, &e_owc, s) <= quant::quad_form_block(&h, &e_mm, s));
            }
        }
    }

    #[test]
    fn block_diagonal_hessian_needs_no_clip_moves() {
        for seed in 0..10 {
            let h = block_diagonal(8, 2, 200 + seed);
            let (_, w, _) = random_instance(8, 8, 300 + seed);
            let init = owc_group_init(&w, &h, bits(2), 2, 50).unwrap();
            let res = owc_cd(&w, &h, bits(2), 2, 50, Some(100)).unwrap();
            assert!(res.steps.is_empty());
            assert_eq!(res.scheme, init.0);
        }
    }

    #[test]
    fn block_diagonal_groups_decouple_in_cd() {
        for seed in 0..10 {
            let h = block_diagonal(8, 4, 400 + seed);
            let (_, w, _) = random_instance(8, 8, 500 + seed);
            let (scheme, q0) = minmax_group(&w, bits(2), 4).unwrap();
            let cfg = DescentConfig {
                steps: Some(64),
                ..DescentConfig::default()
            };
            let (q, _) = group_cd_quantize(&w, &h, &scheme, &q0, &cfg).unwrap();
            for i in 0..2 {
                let s = i * 4;
                let sub = Hessian::from_matrix(h.matrix().view((s, s), (4, 4)).into_owned()).unwrap();
                let p = scheme.params[i];
                let prob = ChannelProblem::new(w[s..s + 4].to_vec(), &sub, p).unwrap();
                let q0i = CodeVector::new(q0[s..s + 4].to_vec());
                let (qi, _) = cd_quantize(&prob, &q0i, &cfg).unwrap();
                assert_eq!(&q[s..s + 4], qi.as_slice());
            }
        }
    }

    #[test]
    fn owc_cd_is_monotone_and_tracks_v() {
        for seed in 0..30 {
            let (h, w, _) = random_instance(16, 20, 600 + seed);
            let res = owc_cd(&w, &h, bits(2), 4, 50, Some(12)).unwrap();
            let mut prev = res.initial_loss;
            for s in &res.steps {
                assert!(s.loss < prev);
                prev = s.loss;
            }
            let e: Vec<f64> = {
                let deq = res.scheme.dequantize(&res.codes).unwrap();
                w.iter().zip(&deq).map(|(a, b)| a - b).collect()
            };
            let scratch_loss = quad_form(&h, &e);
            assert!((scratch_loss - res.loss).abs() <= 1e-9 * scratch_loss);
            for m in 0..16 {
                let fresh: f64 = -2.0 * (0..16).map(|j| h.matrix()[(m, j)] * e[j]).sum::<f64>();
                assert!((fresh - res.v[m]).abs() <= 1e-6);
            }
            assert!(res.loss <= res.initial_loss);
        }
    }

    #[test]
    fn owc_cd_against_exhaustive_pairs() {
        let grid = 4;
        for seed in 0..30 {
            let (h, w, _) = random_instance(4, 6, 700 + seed);
            let res = owc_cd(&w, &h, bits(2), 2, grid, Some(50)).unwrap();
            let table = ResidualTable::build(&w, bits(2), 2, grid).unwrap();
            let joint = |a: usize, b: usize| quad_form(&h, &table.residual_vector(&[a, b]));
            let final_choice: Vec<usize> = res
                .scheme
                .gammas()
                .iter()
                .map(|g| table.grid.iter().position(|x| x == g).unwrap())
                .collect();
            let fin = joint(final_choice[0], final_choice[1]);
            let global = (0..grid)
                .flat_map(|a| (0..grid).map(move |b| (a, b)))
                .map(|(a, b)| joint(a, b))
                .fold(f64::INFINITY, f64::min);
            assert!(global <= fin + 1e-12);
            // converged: no single-group swap from the final point helps
            for t in 0..grid {
                assert!(fin <= joint(t, final_choice[1]) + 1e-12 * fin);
                assert!(fin <= joint(final_choice[0], t) + 1e-12 * fin);
            }
            assert!((fin - res.loss).abs() <= 1e-9 * fin.max(1e-300));
        }
    }

    #[test]
    fn degenerate_group_stays_exact() {
        let (h, mut w, _) = random_instance(6, 9, 9);
        w[2] = 0.7;
        w[3] = 0.7;
        let (scheme, q0) = owc_group_init(&w, &h, bits(2), 2, 10).unwrap();
        assert_eq!(scheme.params[1].scale, 0.0);
        let cfg = DescentConfig {
            block_size: 2,
            ..DescentConfig::default()
        };
        for (q, _) in [
            group_cd_quantize(&w, &h, &scheme, &q0, &cfg).unwrap(),
            group_bcd_quantize(&w, &h, &scheme, &q0, &cfg).unwrap(),
        ] {
            assert_eq!(&q[2..4], &[0, 0]);
            let deq = scheme.dequantize(&q).unwrap();
            assert_eq!(deq[2], 0.7);
            assert!(group_objective(&w, &q, &scheme, &h).unwrap() <= group_objective(&w, &q0, &scheme, &h).unwrap());
        }
    }

    #[test]
    fn bad_group_size_rejected() {
        let (h, w, _) = random_instance(6, 9, 9);
        assert!(owc_group_init(&w, &h, bits(2), 4, 10).is_err());
        assert!(owc_group_init(&w, &h, bits(2), 0, 10).is_err());
        assert!(owc_cd(&w, &h, bits(2), 3, 0, None).is_err());
    }
}
