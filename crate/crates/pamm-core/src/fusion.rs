//! Fusion of retrieved memory into the edge input: assembly of the
//! augmented edge feature, the bounded scalar gate, per-layer affine
//! modulation of the edge state, and the parameter-matched generic MLP
//! branch used as a control.
//!
//! Everything here is a tape builder: functions take node ids and append
//! the computation so gradients (including the second-order ones needed by
//! the force loss) flow through automatically.

use crate::tape::{NodeId, Tape};
use crate::{Error, Result};

/// Widths of the fixed-layout edge input
/// `[φ_r; φ_s; φ_t; e_pair; e_tri]`. The memory slots keep their width in
/// every variant (zero-filled when a source is disabled) so downstream
/// weight shapes never change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeInputLayout {
    pub n_rb: usize,
    pub d_sp: usize,
    pub d_mem: usize,
}

impl EdgeInputLayout {
    pub fn width(&self) -> usize {
        self.n_rb + 2 * self.d_sp + 2 * self.d_mem
    }

    /// Column where the memory slots start.
    pub fn mem_offset(&self) -> usize {
        self.n_rb + 2 * self.d_sp
    }
}

/// Base (memory-free) per-edge features, already on the tape.
#[derive(Clone, Copy, Debug)]
pub struct EdgeBaseFeatures {
    /// radial basis of r_ij, E×N_rb
    pub phi_r: NodeId,
    /// source-species embedding rows, E×d_sp
    pub phi_s: NodeId,
    /// target-species embedding rows, E×d_sp
    pub phi_t: NodeId,
}

/// Concatenate base features and the two memory slots in fixed order.
/// `e_pair`/`e_tri` are E×d_mem (zero constants when the source is off).
pub fn assemble_edge_input(
    tape: &mut Tape,
    base: EdgeBaseFeatures,
    e_pair: NodeId,
    e_tri: NodeId,
    layout: EdgeInputLayout,
) -> NodeId {
    for (id, want) in [
        (base.phi_r, layout.n_rb),
        (base.phi_s, layout.d_sp),
        (base.phi_t, layout.d_sp),
        (e_pair, layout.d_mem),
        (e_tri, layout.d_mem),
    ] {
        assert_eq!(tape.value(id).cols, want, "edge input slot width mismatch");
    }
    tape.concat_cols(&[base.phi_r, base.phi_s, base.phi_t, e_pair, e_tri])
}

/// Variant where a generic branch output (E×2·d_mem) replaces both memory
/// slots; the layout and total width are unchanged.
pub fn assemble_edge_input_with_branch(
    tape: &mut Tape,
    base: EdgeBaseFeatures,
    branch: NodeId,
    layout: EdgeInputLayout,
) -> NodeId {
    assert_eq!(tape.value(branch).cols, 2 * layout.d_mem, "branch width mismatch");
    tape.concat_cols(&[base.phi_r, base.phi_s, base.phi_t, branch])
}

/// Hyperparameters of the bounded edge gate
/// g = clip(1 + λ·SiLU(clip(α⟨W_q x, W_k x⟩, −c, c)), g_min, g_max),
/// with α = 1/√d_gate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig {
    pub d_gate: usize,
    pub lambda: f64,
    pub g_min: f64,
    pub g_max: f64,
    pub clip_c: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { d_gate: 16, lambda: 0.5, g_min: 0.5, g_max: 1.5, clip_c: 10.0 }
    }
}

impl GateConfig {
    pub fn alpha(&self) -> f64 {
        1.0 / (self.d_gate as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_gate == 0 {
            return Err(Error::Config("gate dimension must be ≥ 1".into()));
        }
        if !(self.g_min > 0.0 && self.g_min <= 1.0 && self.g_max >= 1.0) {
            return Err(Error::Config(format!(
                "gate bounds must satisfy 0 < g_min ≤ 1 ≤ g_max, got [{}, {}]",
                self.g_min, self.g_max
            )));
        }
        if !(self.clip_c > 0.0) {
            return Err(Error::Config(format!("gate clip bound must be > 0, got {}", self.clip_c)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("gate strength must be ≥ 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

pub struct GateOutput {
    /// x_edge scaled row-wise by g, same shape as the input
    pub gated: NodeId,
    /// per-edge gate values, E×1, always within [g_min, g_max]
    pub g: NodeId,
}

/// Apply the bounded scalar gate to the assembled edge input (E×F).
/// `wq`/`wk` are d_gate×F projection matrices.
pub fn apply_gate(
    tape: &mut Tape,
    x_edge: NodeId,
    wq: NodeId,
    wk: NodeId,
    cfg: &GateConfig,
) -> GateOutput {
    let f = tape.value(x_edge).cols;
    assert_eq!(tape.value(wq).cols, f, "W_q width mismatch");
    assert_eq!(tape.value(wk).cols, f, "W_k width mismatch");
    assert_eq!(tape.value(wq).rows, cfg.d_gate, "W_q gate dimension mismatch");
    assert_eq!(tape.value(wk).rows, cfg.d_gate, "W_k gate dimension mismatch");

    let wq_t = tape.transpose(wq);
    let wk_t = tape.transpose(wk);
    let q = tape.matmul(x_edge, wq_t);
    let k = tape.matmul(x_edge, wk_t);
    let qk = tape.mul(q, k);
    let s = tape.row_sum(qk);
    let scaled = tape.mul_scalar(s, cfg.alpha());
    let s_hat = tape.clip(scaled, -cfg.clip_c, cfg.clip_c);
    let a = tape.silu(s_hat);
    let lam_a = tape.mul_scalar(a, cfg.lambda);
    let unclipped = tape.add_scalar(lam_a, 1.0);
    let g = tape.clip(unclipped, cfg.g_min, cfg.g_max);
    let g_wide = tape.broadcast_col(g, f);
    let gated = tape.mul(x_edge, g_wide);
    GateOutput { gated, g }
}

/// Hyperparameters of the per-layer affine modulation
/// e ← e ⊙ (1 + α_aff·tanh(Δg)) + β_aff·Δb.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineConfig {
    pub alpha_aff: f64,
    pub beta_aff: f64,
    pub hidden: usize,
    /// reuse one modulation MLP for every layer instead of separate ones
    pub shared: bool,
}

impl Default for AffineConfig {
    fn default() -> Self {
        AffineConfig { alpha_aff: 0.1, beta_aff: 0.1, hidden: 32, shared: false }
    }
}

impl AffineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_aff >= 0.0 && self.beta_aff >= 0.0) {
            return Err(Error::Config(format!(
                "affine scales must be ≥ 0, got α={} β={}",
                self.alpha_aff, self.beta_aff
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("affine hidden width must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One layer's modulation MLP parameters, on the tape.
/// Heads `wg`/`wb` are zero-initialized so the update starts as identity.
#[derive(Clone, Copy, Debug)]
pub struct AffineNodes {
    /// hidden×2d
    pub w1: NodeId,
    /// 1×hidden
    pub b1: NodeId,
    /// d_e×hidden, zero at init
    pub wg: NodeId,
    /// d_e×hidden, zero at init
    pub wb: NodeId,
}

/// Modulate the layer edge state `e` (E×d_e) by the memory vector
/// `mem` = [e_pair; e_tri] (E×2d).
pub fn apply_affine(
    tape: &mut Tape,
    e: NodeId,
    mem: NodeId,
    params: &AffineNodes,
    cfg: &AffineConfig,
) -> NodeId {
    let rows = tape.value(e).rows;
    let d_e = tape.value(e).cols;
    assert_eq!(tape.value(params.wg).rows, d_e, "Δg head width mismatch");
    assert_eq!(tape.value(params.wb).rows, d_e, "Δb head width mismatch");

    let w1_t = tape.transpose(params.w1);
    let pre = tape.matmul(mem, w1_t);
    let b1_wide = tape.broadcast_row(params.b1, rows);
    let pre_b = tape.add(pre, b1_wide);
    let h = tape.silu(pre_b);
    let wg_t = tape.transpose(params.wg);
    let wb_t = tape.transpose(params.wb);
    let dg = tape.matmul(h, wg_t);
    let db = tape.matmul(h, wb_t);
    let t = tape.tanh(dg);
    let scale_delta = tape.mul_scalar(t, cfg.alpha_aff);
    let scale = tape.add_scalar(scale_delta, 1.0);
    let e_scaled = tape.mul(e, scale);
    let shift = tape.mul_scalar(db, cfg.beta_aff);
    tape.add(e_scaled, shift)
}

/// Exact parameter count of the control branch in_dim → w → out_dim with
/// biases on both layers.
pub fn mlp_branch_param_count(in_dim: usize, out_dim: usize, w: usize) -> usize {
    w * (in_dim + 1) + out_dim * (w + 1)
}

/// Largest hidden width whose parameter count does not exceed `target`,
/// with the achieved count. The count lands within 1% of the target for
/// realistic table sizes; for tiny targets it is the closest achievable
/// below.
pub fn match_mlp_params(in_dim: usize, out_dim: usize, target: usize) -> Result<(usize, usize)> {
    if mlp_branch_param_count(in_dim, out_dim, 1) > target {
        return Err(Error::Config(format!(
            "parameter target {target} is below the smallest branch ({} params at width 1)",
            mlp_branch_param_count(in_dim, out_dim, 1)
        )));
    }
    // count is affine in w: w·(in+1) + out·w + out
    let per_unit = in_dim + 1 + out_dim;
    let mut w = (target - out_dim) / per_unit;
    while mlp_branch_param_count(in_dim, out_dim, w + 1) <= target {
        w += 1;
    }
    while w > 1 && mlp_branch_param_count(in_dim, out_dim, w) > target {
        w -= 1;
    }
    Ok((w, mlp_branch_param_count(in_dim, out_dim, w)))
}

/// Control branch parameters, on the tape.
#[derive(Clone, Copy, Debug)]
pub struct MlpControlNodes {
    /// w×in_dim
    pub w1: NodeId,
    /// 1×w
    pub b1: NodeId,
    /// out_dim×w
    pub w2: NodeId,
    /// 1×out_dim
    pub b2: NodeId,
}

/// Generic branch (Z_src one-hot, Z_tgt one-hot, φ_r) → 2d replacing the
/// structured memory slots. One-hots are constants; gradients flow through
/// φ_r and the weights.
pub fn apply_mlp_control(
    tape: &mut Tape,
    onehot_src: NodeId,
    onehot_tgt: NodeId,
    phi_r: NodeId,
    params: &MlpControlNodes,
) -> NodeId {
    let input = tape.concat_cols(&[onehot_src, onehot_tgt, phi_r]);
    let rows = tape.value(input).rows;
    assert_eq!(tape.value(params.w1).cols, tape.value(input).cols, "branch input width mismatch");
    let w1_t = tape.transpose(params.w1);
    let pre = tape.matmul(input, w1_t);
    let b1_wide = tape.broadcast_row(params.b1, rows);
    let pre_b = tape.add(pre, b1_wide);
    let h = tape.silu(pre_b);
    let w2_t = tape.transpose(params.w2);
    let out = tape.matmul(h, w2_t);
    let b2_wide = tape.broadcast_row(params.b2, rows);
    tape.add(out, b2_wide)
}

/// One-hot rows over the 118 supported species, Z ∈ 1..=118 mapping to
/// column Z−1.
pub fn species_one_hot(zs: &[u32]) -> crate::tape::Tensor {
    let mut data = vec![0.0; zs.len() * 118];
    for (r, &z) in zs.iter().enumerate() {
        assert!((1..=118).contains(&z), "species {z} out of range");
        data[r * 118 + (z as usize - 1)] = 1.0;
    }
    crate::tape::Tensor::from_vec(zs.len(), 118, data)
}
