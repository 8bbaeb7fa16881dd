//! Layer building blocks composed from graph primitives.
//!
//! Parameters live in a [`ParamStore`] under dotted names; `init_*` functions
//! create them and the matching forward functions look them up by the same prefix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Epsilon inside layer norms. Small enough that normalized rows have unit
/// variance to well within 1e-6 for activations of ordinary scale.
pub const LN_EPS: f64 = 1e-9;

/// Probability clamp applied before every log in binary cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut R,
) {
    store.xavier(&format!("{name}.w"), &[fan_in, fan_out], fan_in, fan_out, rng);
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }
}

/// `x W (+ b)` over the last axis of `x`. The bias is used when present.
pub fn linear(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let y = g.matmul(x, w)?;
    let bname = format!("{name}.b");
    if p.contains(&bname) {
        let b = g.param(p, &bname)?;
        g.add(y, b)
    } else {
        Ok(y)
    }
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, width: usize) {
    store.insert(format!("{name}.gain"), Tensor::ones(&[width]));
    store.insert(format!("{name}.shift"), Tensor::zeros(&[width]));
}

/// Layer norm over the last axis followed by a learned per-feature affine map.
pub fn layer_norm(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS)?;
    let gain = g.param(p, &format!("{name}.gain"))?;
    let shift = g.param(p, &format!("{name}.shift"))?;
    let y = g.mul(n, gain)?;
    g.add(y, shift)
}

pub fn init_mha<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) {
    for m in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{name}.{m}"), d, d, false, rng);
    }
}

/// Multi-head self-attention over token axis 1 of `x: [B, N, d]`.
///
/// Returns the output `[B, N, d]` and the attention weights `[B, heads, N, N]`.
pub fn mha(
    g: &mut Graph,
    p: &ParamStore,
    name: &str,
    x: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || !s[2].is_multiple_of(heads) {
        return Err(Error::shape(
            "mha",
            format!("input {s:?} with {heads} heads"),
        ));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let split = |g: &mut Graph, v: Var| -> Result<Var> {
        let r = g.reshape(v, &[b, n, heads, dh])?;
        g.permute(r, &[0, 2, 1, 3])
    };
    let q = linear(g, p, &format!("{name}.q"), x)?;
    let k = linear(g, p, &format!("{name}.k"), x)?;
    let v = linear(g, p, &format!("{name}.v"), x)?;
    let q = split(g, q)?;
    let v = split(g, v)?;
    let kr = g.reshape(k, &[b, n, heads, dh])?;
    let kt = g.permute(kr, &[0, 2, 3, 1])?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax(scores)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, n, d])?;
    let out = linear(g, p, &format!("{name}.o"), ctx)?;
    Ok((out, attn))
}

/// Running statistics of a batch norm, kept outside the differentiable parameters.
pub const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

pub fn init_batch_norm(store: &mut ParamStore, buffers: &mut ParamStore, name: &str, width: usize) {
    init_layer_norm(store, name, width);
    buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[width]));
    buffers.insert(format!("{name}.running_var"), Tensor::ones(&[width]));
}

/// Batch norm over axis 0 of `x: [B, n]`. In training mode batch statistics are
/// used and the running statistics in `buffers` are updated; otherwise the
/// running statistics are used as constants.
pub fn batch_norm(
    g: &mut Graph,
    p: &ParamStore,
    buffers: Option<&mut ParamStore>,
    name: &str,
    x: Var,
    train: bool,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("batch_norm", format!("expected [B, n], got {s:?}")));
    }
    let (mean_name, var_name) = (format!("{name}.running_mean"), format!("{name}.running_var"));
    let normalized = if train && s[0] > 1 {
        let mean = g.mean_axis(x, 0)?;
        let var = g.var_axis(x, 0)?;
        if let Some(buf) = buffers {
            let (bm, bv) = (g.value(mean).clone(), g.value(var).clone());
            let unbiased = s[0] as f64 / (s[0] as f64 - 1.0);
            for (key, batch, scale) in [(&mean_name, bm, 1.0), (&var_name, bv, unbiased)] {
                let r = buf
                    .get_mut(key)
                    .ok_or_else(|| Error::invalid(format!("missing buffer `{key}`")))?;
                for (rv, bv) in r.data_mut().iter_mut().zip(batch.data()) {
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * scale * bv;
                }
            }
        }
        let centered = g.sub(x, mean)?;
        let std = sqrt(g, var, BN_EPS)?;
        g.div(centered, std)?
    } else {
        let buf = buffers
            .map(|b| &*b)
            .ok_or_else(|| Error::invalid("batch norm in eval mode needs running statistics"))?;
        let get = |key: &str| {
            buf.get(key)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("missing buffer `{key}`")))
        };
        let mean = get(&mean_name)?;
        let inv = get(&var_name)?.map(|v| 1.0 / (v + BN_EPS).sqrt());
        let mean = g.constant(mean);
        let inv = g.constant(inv);
        let centered = g.sub(x, mean)?;
        g.mul(centered, inv)?
    };
    let gain = g.param(p, &format!("{name}.gain"))?;
    let shift = g.param(p, &format!("{name}.shift"))?;
    let y = g.mul(normalized, gain)?;
    g.add(y, shift)
}

/// Inverted dropout. Identity when `rate` is zero or outside training.
pub fn dropout<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    if !train || rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let mask = Tensor::uniform(&shape, 0.0, 1.0, rng).map(|u| if u < keep { 1.0 / keep } else { 0.0 });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// `sqrt(x + eps)` built from exp and log.
pub fn sqrt(g: &mut Graph, x: Var, eps: f64) -> Result<Var> {
    let shifted = g.offset(x, eps)?;
    let l = g.log(shifted)?;
    let h = g.scale(l, 0.5)?;
    g.exp(h)
}

/// `|x| = relu(x) + relu(-x)`
pub fn abs(g: &mut Graph, x: Var) -> Result<Var> {
    let pos = g.relu(x)?;
    let n = g.neg(x)?;
    let neg = g.relu(n)?;
    g.add(pos, neg)
}

/// `x` clamped to `[lo, hi]`, as `x ∘ inside + (lo ∘ below + hi ∘ above)` with
/// masks read off the forward value. Exact in the value and with the same
/// subgradient as the relu composition, which loses `lo` to cancellation once
/// `x` swamps `hi - lo`.
pub fn clamp(g: &mut Graph, x: Var, lo: f64, hi: f64) -> Result<Var> {
    let v = g.value(x).clone();
    let inside = v.map(|t| if (lo..=hi).contains(&t) { 1.0 } else { 0.0 });
    let outside = v.map(|t| if t < lo { lo } else if t > hi { hi } else { 0.0 });
    let inside = g.constant(inside);
    let outside = g.constant(outside);
    let kept = g.mul(x, inside)?;
    g.add(kept, outside)
}

/// Sum over `axis` keeping it as a length-1 axis.
pub fn sum_keep(g: &mut Graph, x: Var, axis: usize) -> Result<Var> {
    let mut shape = g.shape(x).to_vec();
    let s = g.sum_axis(x, axis)?;
    shape[axis] = 1;
    g.reshape(s, &shape)
}

/// Mean over `axis` keeping it as a length-1 axis.
pub fn mean_keep(g: &mut Graph, x: Var, axis: usize) -> Result<Var> {
    let mut shape = g.shape(x).to_vec();
    let s = g.mean_axis(x, axis)?;
    shape[axis] = 1;
    g.reshape(s, &shape)
}

/// Rows of `x` (last axis) scaled to unit Euclidean norm.
pub fn l2_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let last = g.shape(x).len() - 1;
    let sq = g.mul(x, x)?;
    let ss = sum_keep(g, sq, last)?;
    let n = sqrt(g, ss, 1e-12)?;
    g.div(x, n)
}

/// Mean binary cross-entropy between probabilities `prob` and 0/1 `target`
/// of the same shape, with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(g: &mut Graph, prob: Var, target: Var) -> Result<Var> {
    let p = clamp(g, prob, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let lp = g.log(p)?;
    let one_minus = g.scale(p, -1.0)?;
    let one_minus = g.offset(one_minus, 1.0)?;
    let lq = g.log(one_minus)?;
    let t_lp = g.mul(target, lp)?;
    let nt = g.scale(target, -1.0)?;
    let nt = g.offset(nt, 1.0)?;
    let nt_lq = g.mul(nt, lq)?;
    let s = g.add(t_lp, nt_lq)?;
    let m = g.mean(s)?;
    g.neg(m)
}

/// Scalar BCE used by oracles and metrics.
pub fn bce_scalar(prob: f64, target: f64) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = seeded(3);
        let mut p = ParamStore::new();
        init_mha(&mut p, "att", 8, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[2, 5, 8], &mut rng));
        let (out, attn) = mha(&mut g, &p, "att", x, 2).unwrap();
        assert_eq!(g.shape(out), &[2, 5, 8]);
        for row in g.value(attn).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_matches_scalar_loop() {
        let probs = [0.5, 0.9, 0.1, 1.0, 0.0];
        let ys = [1.0, 0.0, 0.0, 1.0, 0.0];
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(probs.to_vec()));
        let y = g.constant(Tensor::from_vec(ys.to_vec()));
        let l = bce(&mut g, p, y).unwrap();
        let expect = probs.iter().zip(&ys).map(|(&p, &y)| bce_scalar(p, y)).sum::<f64>() / 5.0;
        assert!((g.item(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn clamp_and_abs_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![-2.0, 0.5, 3.0]));
        let c = clamp(&mut g, x, 0.0, 1.0).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 0.5, 1.0]);
        let a = abs(&mut g, x).unwrap();
        assert_eq!(g.value(a).data(), &[2.0, 0.5, 3.0]);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut p = ParamStore::new();
        let mut buf = ParamStore::new();
        init_batch_norm(&mut p, &mut buf, "bn", 2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let y = batch_norm(&mut g, &p, Some(&mut buf), "bn", x, true).unwrap();
        // batch stats give ±1 per column
        for (v, e) in g.value(y).data().iter().zip([-1.0, -1.0, 1.0, 1.0]) {
            assert!((v - e).abs() < 1e-5);
        }
        assert!((buf.get("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-12);
        let z = batch_norm(&mut g, &p, Some(&mut buf), "bn", x, false).unwrap();
        let z2 = batch_norm(&mut g, &p, Some(&mut buf), "bn", x, false).unwrap();
        assert_eq!(g.value(z), g.value(z2));
    }
}
