//! Multi-scale large-kernel attention blocks over video lattices `[B, C, T, H, W]`
//! (3-D convolutions) and audio lattices `[B, C, T, F]` (2-D convolutions).
//!
//! A large kernel K with dilation d is decomposed into a depthwise
//! `(2d−1)`-wide convolution, a depthwise dilated convolution of width
//! `ceil(K/d)` (rounded up to odd) and a pointwise channel mix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{ConvSpec, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MslkaConfig {
    pub channels: usize,
    pub n_groups: usize,
    /// (K, d) per group, cycled when there are more groups than entries.
    pub scales: Vec<(usize, usize)>,
    /// Width of the depthwise gate convolutions.
    pub gate_kernel: usize,
    pub depth: usize,
    /// Permit odd depths.
    pub allow_odd_depth: bool,
}

impl Default for MslkaConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            n_groups: 2,
            scales: vec![(5, 2), (7, 2), (9, 3)],
            gate_kernel: 3,
            depth: 2,
            allow_odd_depth: false,
        }
    }
}

impl MslkaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("mslka: {m}")));
        if self.n_groups == 0 || !self.channels.is_multiple_of(self.n_groups) {
            return bad(format!("{} channels not divisible into {} groups", self.channels, self.n_groups));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&(k, d)| k == 0 || d == 0) {
            return bad("scales need K >= 1 and d >= 1".into());
        }
        if self.gate_kernel.is_multiple_of(2) {
            return bad("gate kernel must be odd".into());
        }
        if self.depth % 2 == 1 && !self.allow_odd_depth {
            return bad(format!("depth {} is odd; set allow_odd_depth to override", self.depth));
        }
        Ok(())
    }

    pub fn scale(&self, group: usize) -> (usize, usize) {
        self.scales[group % self.scales.len()]
    }
}

/// Kernel widths (depthwise, dilated depthwise) for a large kernel `k` at dilation `d`.
pub fn kernel_sizes(k: usize, d: usize) -> (usize, usize) {
    let dw = 2 * d - 1;
    let mut dwd = k.div_ceil(d);
    if dwd.is_multiple_of(2) {
        dwd += 1;
    }
    (dw, dwd)
}

fn init_kernel<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, shape: &[usize], rng: &mut R) {
    let fan_in: usize = shape[1..].iter().product();
    let fan_out: usize = shape[0] * shape[2..].iter().product::<usize>();
    p.xavier(name, shape, fan_in, fan_out, rng);
}

fn kshape(cout: usize, cin: usize, k: usize, rank: usize) -> Vec<usize> {
    let mut s = vec![cout, cin];
    s.extend(std::iter::repeat_n(k, rank));
    s
}

fn init_pointwise<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, c: usize, rank: usize, bias: bool, rng: &mut R) {
    init_kernel(p, &format!("{name}.w"), &kshape(c, c, 1, rank), rng);
    if bias {
        p.insert(format!("{name}.b"), Tensor::zeros(&[c]));
    }
}

/// Creates one block's parameters under `name`, for `rank` spatial axes.
pub fn init_block<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, cfg: &MslkaConfig, rank: usize, rng: &mut R) {
    let c = cfg.channels;
    let cg = c / cfg.n_groups;
    nn::init_layer_norm(p, &format!("{name}.ln1"), c);
    nn::init_layer_norm(p, &format!("{name}.ln2"), c);
    for f in 1..=6 {
        init_pointwise(p, &format!("{name}.f{f}"), c, rank, true, rng);
    }
    for i in 0..cfg.n_groups {
        let (k, d) = cfg.scale(i);
        let (dw, dwd) = kernel_sizes(k, d);
        let gname = format!("{name}.group{i}");
        init_kernel(p, &format!("{gname}.dw"), &kshape(cg, 1, dw, rank), rng);
        init_kernel(p, &format!("{gname}.dwd"), &kshape(cg, 1, dwd, rank), rng);
        init_pointwise(p, &format!("{gname}.pw"), cg, rank, false, rng);
        init_kernel(p, &format!("{gname}.gate.w"), &kshape(cg, 1, cfg.gate_kernel, rank), rng);
        p.insert(format!("{gname}.gate.b"), Tensor::zeros(&[cg]));
    }
    init_kernel(p, &format!("{name}.gsau.w"), &kshape(c, 1, cfg.gate_kernel, rank), rng);
    p.insert(format!("{name}.gsau.b"), Tensor::zeros(&[c]));
    p.insert(format!("{name}.lambda1"), Tensor::scalar(0.0));
    p.insert(format!("{name}.lambda2"), Tensor::scalar(0.0));
}

fn spatial_rank(g: &Graph, x: Var) -> Result<usize> {
    let r = g.shape(x).len();
    if !(3..=5).contains(&r) {
        return Err(Error::shape("mslka", format!("expected [B, C, 1-3 spatial axes], got {:?}", g.shape(x))));
    }
    Ok(r - 2)
}

/// Adds a per-channel bias `[C]` to `x: [B, C, ...]`.
fn add_channel_bias(g: &mut Graph, x: Var, b: Var) -> Result<Var> {
    let r = g.shape(x).len();
    let c = g.shape(b)[0];
    let mut shape = vec![c];
    shape.extend(std::iter::repeat_n(1, r - 2));
    let b = g.reshape(b, &shape)?;
    g.add(x, b)
}

/// Pointwise convolution, with bias when `{name}.b` exists.
pub fn pointwise(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let rank = spatial_rank(g, x)?;
    let w = g.param(p, &format!("{name}.w"))?;
    let y = g.conv(x, w, &ConvSpec::valid(rank, 1))?;
    let bname = format!("{name}.b");
    if p.contains(&bname) {
        let b = g.param(p, &bname)?;
        add_channel_bias(g, y, b)
    } else {
        Ok(y)
    }
}

/// Same-padded depthwise convolution of `x` with kernel `w: [C, 1, k, ...]`.
pub fn depthwise(g: &mut Graph, x: Var, w: Var, dilation: usize) -> Result<Var> {
    let ws = g.shape(w).to_vec();
    let rank = ws.len() - 2;
    let spec = ConvSpec::same(&ws[2..], &vec![dilation; rank], ws[0])?;
    g.conv(x, w, &spec)
}

/// Layer norm over the channel axis of `[B, C, ...]` with a per-channel affine map.
pub fn channel_norm(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let r = g.shape(x).len();
    let mut to_last: Vec<usize> = vec![0];
    to_last.extend(2..r);
    to_last.push(1);
    let mut back = vec![0, r - 1];
    back.extend(1..r - 1);
    let t = g.permute(x, &to_last)?;
    let n = nn::layer_norm(g, p, name, t)?;
    g.permute(n, &back)
}

/// `PW(DWD(DW(x)))`: depthwise `dw`, depthwise `dwd` dilated by `dilation`,
/// then the bias-free pointwise `pw`. Shape-preserving.
pub fn stlka(g: &mut Graph, x: Var, dw: Var, dwd: Var, pw: Var, dilation: usize) -> Result<Var> {
    let rank = spatial_rank(g, x)?;
    let a = depthwise(g, x, dw, 1)?;
    let b = depthwise(g, a, dwd, dilation)?;
    g.conv(b, pw, &ConvSpec::valid(rank, 1))
}

/// Group `i` of the multi-scale attention: `G_i(x_i) ∘ STLKA_i(x_i)`.
pub fn group_attention(g: &mut Graph, p: &ParamStore, name: &str, cfg: &MslkaConfig, i: usize, x: Var) -> Result<Var> {
    let gname = format!("{name}.group{i}");
    let (_, d) = cfg.scale(i);
    let dw = g.param(p, &format!("{gname}.dw"))?;
    let dwd = g.param(p, &format!("{gname}.dwd"))?;
    let pw = g.param(p, &format!("{gname}.pw.w"))?;
    let att = stlka(g, x, dw, dwd, pw, d)?;
    let gw = g.param(p, &format!("{gname}.gate.w"))?;
    let gb = g.param(p, &format!("{gname}.gate.b"))?;
    let gate = depthwise(g, x, gw, 1)?;
    let gate = add_channel_bias(g, gate, gb)?;
    g.mul(gate, att)
}

/// Splits channels into groups, applies each group's gated attention, concatenates.
pub fn mstlka(g: &mut Graph, p: &ParamStore, name: &str, cfg: &MslkaConfig, x: Var) -> Result<Var> {
    let c = g.shape(x)[1];
    if !c.is_multiple_of(cfg.n_groups) {
        return Err(Error::shape("mstlka", format!("{c} channels into {} groups", cfg.n_groups)));
    }
    let cg = c / cfg.n_groups;
    let mut outs = Vec::with_capacity(cfg.n_groups);
    for i in 0..cfg.n_groups {
        let xi = if cfg.n_groups == 1 { x } else { g.slice(x, 1, i * cg, (i + 1) * cg)? };
        outs.push(group_attention(g, p, name, cfg, i, xi)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 1)
    }
}

/// Gated unit: `DWConv(a) ∘ b`.
pub fn gsau(g: &mut Graph, p: &ParamStore, name: &str, a: Var, b: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.gsau.w"))?;
    let bias = g.param(p, &format!("{name}.gsau.b"))?;
    let gate = depthwise(g, a, w, 1)?;
    let gate = add_channel_bias(g, gate, bias)?;
    g.mul(gate, b)
}

/// One residual block:
///
/// ```text
/// H ← H + λ1 f3(MSTLKA(f1(LN H)) ∘ f2(LN H))
/// H ← H + λ2 f6(GSAU(f4(LN H), f5(LN H)))
/// ```
///
/// The same code serves 3-D video and 2-D audio lattices.
pub fn block(g: &mut Graph, p: &ParamStore, name: &str, cfg: &MslkaConfig, h: Var) -> Result<Var> {
    if g.shape(h)[1] != cfg.channels {
        return Err(Error::shape("mslka_block", format!("{:?} with {} channels", g.shape(h), cfg.channels)));
    }
    let n = channel_norm(g, p, &format!("{name}.ln1"), h)?;
    let a = pointwise(g, p, &format!("{name}.f1"), n)?;
    let a = mstlka(g, p, name, cfg, a)?;
    let b = pointwise(g, p, &format!("{name}.f2"), n)?;
    let ab = g.mul(a, b)?;
    let u = pointwise(g, p, &format!("{name}.f3"), ab)?;
    let l1 = g.param(p, &format!("{name}.lambda1"))?;
    let u = g.mul(u, l1)?;
    let h = g.add(h, u)?;
    let n = channel_norm(g, p, &format!("{name}.ln2"), h)?;
    let a = pointwise(g, p, &format!("{name}.f4"), n)?;
    let b = pointwise(g, p, &format!("{name}.f5"), n)?;
    let s = gsau(g, p, name, a, b)?;
    let v = pointwise(g, p, &format!("{name}.f6"), s)?;
    let l2 = g.param(p, &format!("{name}.lambda2"))?;
    let v = g.mul(v, l2)?;
    g.add(h, v)
}

/// Block names of a stack with the given prefix.
pub fn block_names(prefix: &str, depth: usize) -> Vec<String> {
    (0..depth).map(|i| format!("{prefix}.block{i}")).collect()
}

/// Applies `depth` blocks, calling `after(g, i, output)` after block `i` so the
/// caller can modulate the result; depth 0 returns the input.
pub fn deep_stack(
    g: &mut Graph,
    p: &ParamStore,
    prefix: &str,
    cfg: &MslkaConfig,
    h0: Var,
    mut after: impl FnMut(&mut Graph, usize, Var) -> Result<Var>,
) -> Result<Var> {
    let mut h = h0;
    for (i, name) in block_names(prefix, cfg.depth).iter().enumerate() {
        let out = block(g, p, name, cfg, h)?;
        h = after(g, i, out)?;
    }
    Ok(h)
}
