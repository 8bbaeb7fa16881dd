//! Raw loops behind the graph ops. Everything here works on flat slices.

use super::tensor::{numel, strides};

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
pub(crate) fn for_each_broadcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if a == out && b == out {
        for i in 0..total {
            f(i, i, i);
        }
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let mut base_a = 0usize;
    let mut base_b = 0usize;
    let mut o = 0usize;
    loop {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += ia_step;
            ib += ib_step;
        }
        // advance the odometer over the outer axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            counter[axis] += 1;
            base_a += sa[axis];
            base_b += sb[axis];
            if counter[axis] < out[axis] {
                break;
            }
            base_a -= sa[axis] * out[axis];
            base_b -= sb[axis] * out[axis];
            counter[axis] = 0;
        }
    }
}

/// c[m,n] (+)= a[m,k] · b[k,n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// c[m,k] += a[m,n] · b[k,n]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * k + p] += acc;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// Geometry of a stride-1 convolution over up to three spatial axes, normalized to 3-D.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Output positions `o` along `axis` whose input `o - pad + k*dil` is in range.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize, isize) {
        let shift = (k * self.dilation[axis]) as isize - self.padding[axis] as isize;
        let lo = (-shift).max(0) as usize;
        let hi = ((self.input[axis] as isize - shift).max(0) as usize).min(self.output[axis]);
        (lo, hi.max(lo), shift)
    }
}

/// Enumerates (weight index, x row offset, out row offset, row length) runs.
fn conv_runs(g: &ConvGeom, mut visit: impl FnMut(usize, usize, usize, usize)) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let [kd, kh, kw] = g.kernel;
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_plane = id * ih * iw;
    let out_plane = od * oh * ow;
    let ksize = kd * kh * kw;
    for b in 0..g.batch {
        for co in 0..g.cout {
            let grp = co / cout_g;
            let out_base = (b * g.cout + co) * out_plane;
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let in_base = (b * g.cin + ci) * in_plane;
                let w_base = (co * cin_g + cl) * ksize;
                for kz in 0..kd {
                    let (z0, z1, sz) = g.valid(0, kz);
                    for ky in 0..kh {
                        let (y0, y1, sy) = g.valid(1, ky);
                        for kx in 0..kw {
                            let (x0, x1, sx) = g.valid(2, kx);
                            if x1 <= x0 {
                                continue;
                            }
                            let widx = w_base + (kz * kh + ky) * kw + kx;
                            for oz in z0..z1 {
                                let iz = (oz as isize + sz) as usize;
                                for oy in y0..y1 {
                                    let iy = (oy as isize + sy) as usize;
                                    let ix = (x0 as isize + sx) as usize;
                                    let xoff = in_base + (iz * ih + iy) * iw + ix;
                                    let ooff = out_base + (oz * oh + oy) * ow + x0;
                                    visit(widx, xoff, ooff, x1 - x0);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], out: &mut [f64]) {
    conv_runs(g, |widx, xoff, ooff, len| {
        let wv = w[widx];
        let xs = &x[xoff..xoff + len];
        let os = &mut out[ooff..ooff + len];
        for (o, &xv) in os.iter_mut().zip(xs) {
            *o += wv * xv;
        }
    });
}

pub(crate) fn conv_backward_input(g: &ConvGeom, dy: &[f64], w: &[f64], dx: &mut [f64]) {
    conv_runs(g, |widx, xoff, ooff, len| {
        let wv = w[widx];
        let ds = &dy[ooff..ooff + len];
        let xs = &mut dx[xoff..xoff + len];
        for (xv, &d) in xs.iter_mut().zip(ds) {
            *xv += wv * d;
        }
    });
}

pub(crate) fn conv_backward_weight(g: &ConvGeom, dy: &[f64], x: &[f64], dw: &mut [f64]) {
    conv_runs(g, |widx, xoff, ooff, len| {
        let ds = &dy[ooff..ooff + len];
        let xs = &x[xoff..xoff + len];
        let mut acc = 0.0;
        for (&d, &xv) in ds.iter().zip(xs) {
            acc += d * xv;
        }
        dw[widx] += acc;
    });
}
