//! A small reverse-mode autodiff tape over [`Tensor`] values.
//!
//! Only the operators the stereo pipeline needs are provided. Spatial operators
//! act on the last two axes and treat every leading axis as an independent plane.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a (2D or 3D) convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvSpec {
    pub fn same2d(kernel: usize, stride: usize) -> Self {
        ConvSpec {
            stride: [1, stride, stride],
            pad: [0, kernel / 2, kernel / 2],
        }
    }

    pub fn same3d(kernel: usize) -> Self {
        ConvSpec {
            stride: [1, 1, 1],
            pad: [kernel / 2; 3],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    din: usize,
    hin: usize,
    win: usize,
    cout: usize,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    dout: usize,
    hout: usize,
    wout: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Self {
        let (cin, din, hin, win) = match x.len() {
            3 => (x[0], 1, x[1], x[2]),
            4 => (x[0], x[1], x[2], x[3]),
            _ => panic!("conv input must be rank 3 or 4, got {:?}", x),
        };
        let (cout, k) = match w.len() {
            4 => (w[0], [1, w[2], w[3]]),
            5 => (w[0], [w[2], w[3], w[4]]),
            _ => panic!("conv weight must be rank 4 or 5, got {:?}", w),
        };
        assert_eq!(w[1], cin, "conv weight expects {} input channels, got {}", w[1], cin);
        let out = |n: usize, k: usize, s: usize, p: usize| {
            assert!(n + 2 * p >= k, "conv kernel larger than padded input");
            (n + 2 * p - k) / s + 1
        };
        ConvGeom {
            cin,
            din,
            hin,
            win,
            cout,
            k,
            stride: spec.stride,
            pad: spec.pad,
            dout: out(din, k[0], spec.stride[0], spec.pad[0]),
            hout: out(hin, k[1], spec.stride[1], spec.pad[1]),
            wout: out(win, k[2], spec.stride[2], spec.pad[2]),
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k[0] * self.k[1] * self.k[2]
    }

    fn cols(&self) -> usize {
        self.dout * self.hout * self.wout
    }

    fn out_shape(&self, rank: usize) -> Vec<usize> {
        if rank == 3 {
            vec![self.cout, self.hout, self.wout]
        } else {
            vec![self.cout, self.dout, self.hout, self.wout]
        }
    }

    /// Calls `f(row, col, input_index)` for every in-bounds im2col entry.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.cols();
        let [kd, kh, kw] = self.k;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        for ci in 0..self.cin {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let row = ((ci * kd + kz) * kh + ky) * kw + kx;
                        let row_base = row * n;
                        // valid output x range: 0 <= ox*sw + kx - pw < win
                        let ox_lo = if kx >= pw { 0 } else { (pw - kx).div_ceil(sw) };
                        let ox_hi = if self.win + pw > kx {
                            ((self.win + pw - kx - 1) / sw + 1).min(self.wout)
                        } else {
                            0
                        };
                        for oz in 0..self.dout {
                            let iz = (oz * sd + kz) as isize - pd as isize;
                            if iz < 0 || iz >= self.din as isize {
                                continue;
                            }
                            for oy in 0..self.hout {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                if iy < 0 || iy >= self.hin as isize {
                                    continue;
                                }
                                let in_base = ((ci * self.din + iz as usize) * self.hin
                                    + iy as usize)
                                    * self.win;
                                let col_base = (oz * self.hout + oy) * self.wout;
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * sw + kx - pw;
                                    f(row_base, col_base + ox, in_base + ix);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.cols()];
        self.for_each_tap(|row_base, col, idx| cols[row_base + col] = x[idx]);
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        self.for_each_tap(|row_base, col, idx| dx[idx] += cols[row_base + col]);
    }
}

/// `c[m×n] = beta*c + a[m×k]·b[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    // SAFETY: the strides index within `a`, `b` and `c`, whose lengths the
    // callers size as m*k, k*n and m*n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Linear interpolation taps for half-pixel-centred resampling by an integer factor.
fn upsample_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = (src.floor() as usize).min(n_in.saturating_sub(2));
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Abs(Var),
    Sum(Var),
    AvgPool {
        x: Var,
        window: usize,
    },
    CostVolume {
        left: Var,
        right: Var,
        levels: usize,
    },
    SoftArgmin {
        score: Var,
        stride: f64,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Warp {
        src: Var,
        disp: Var,
        mask: Vec<bool>,
    },
    DiffX(Var),
    DiffY(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is computed by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// In-bounds mask recorded by a [`Graph::warp`] node.
    pub fn warp_mask(&self, v: Var) -> Option<&[bool]> {
        match &self.nodes[v.0].op {
            Op::Warp { mask, .. } => Some(mask),
            _ => None,
        }
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let xs = self.value(x).shape().to_vec();
        let geom = ConvGeom::new(&xs, self.value(w).shape(), spec);
        let cols = geom.im2col(self.value(x).data());
        let n = geom.cols();
        let k = geom.rows();
        let mut out = Tensor::zeros(&geom.out_shape(xs.len()));
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (co, row) in out.data_mut().chunks_mut(n).enumerate() {
                row.fill(bias[co]);
            }
        }
        gemm(
            geom.cout,
            k,
            n,
            self.value(w).data(),
            (k as isize, 1),
            &cols,
            (n as isize, 1),
            if b.is_some() { 1.0 } else { 0.0 },
            out.data_mut(),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv { x, w, b, geom }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    /// Group normalization of `x: [C, ...]` followed by a per-channel affine map
    /// with `gamma, beta: [C]`. Statistics run over each group of `C / groups`
    /// channels and all remaining axes.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels do not split into {groups} groups");
        assert!(self.value(gamma).len() == c && self.value(beta).len() == c, "group_norm: affine size mismatch");
        let n = xv.len() / groups;
        let per_c = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(groups);
        for (src, dst) in xv.data().chunks(n).zip(xhat.chunks_mut(n)) {
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (d, v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let data = xhat.iter().enumerate().map(|(i, h)| h * gv[i / per_c] + bv[i / per_c]).collect();
        let out = Tensor::from_vec(xv.shape(), data).expect("shape preserved");
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_vec(va.shape(), data).expect("shape preserved");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = f(*v);
        }
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Box filter over the last two axes with reflect padding; output keeps the input size.
    pub fn avg_pool(&mut self, x: Var, window: usize) -> Var {
        assert!(window % 2 == 1, "pool window must be odd");
        let xv = self.value(x);
        let (p, h, w) = xv.planes();
        let r = (window / 2) as isize;
        assert!(h > r as usize && w > r as usize, "pool window larger than input");
        let norm = 1.0 / (window * window) as f64;
        let src = xv.data();
        let mut out = Tensor::zeros(xv.shape());
        let od = out.data_mut();
        for plane in 0..p {
            let base = plane * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for dy in -r..=r {
                        let yy = reflect(y as isize + dy, h);
                        for dx in -r..=r {
                            acc += src[base + yy * w + reflect(xx as isize + dx, w)];
                        }
                    }
                    od[base + y * w + xx] = acc * norm;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::AvgPool { x, window }, rg)
    }

    /// Concatenation cost volume: `[2C, levels, h, w]`, slice `d` holding
    /// `left[:, y, x]` over `right[:, y, max(x - d, 0)]`.
    pub fn cost_volume(&mut self, left: Var, right: Var, levels: usize) -> Var {
        let (l, r) = (self.value(left), self.value(right));
        assert_eq!(l.shape(), r.shape(), "cost volume feature shapes differ");
        assert_eq!(l.shape().len(), 3);
        let (c, h, w) = (l.shape()[0], l.shape()[1], l.shape()[2]);
        let mut out = Tensor::zeros(&[2 * c, levels, h, w]);
        let od = out.data_mut();
        let plane = h * w;
        for ch in 0..c {
            let lsrc = &l.data()[ch * plane..(ch + 1) * plane];
            let rsrc = &r.data()[ch * plane..(ch + 1) * plane];
            for d in 0..levels {
                let lo = (ch * levels + d) * plane;
                od[lo..lo + plane].copy_from_slice(lsrc);
                let ro = ((c + ch) * levels + d) * plane;
                for y in 0..h {
                    for x in 0..w {
                        od[ro + y * w + x] = rsrc[y * w + x.saturating_sub(d)];
                    }
                }
            }
        }
        let rg = self.rg(left) || self.rg(right);
        self.push(out, Op::CostVolume { left, right, levels }, rg)
    }

    /// Expected hypothesis index under `softmax(-score)` along the depth axis,
    /// multiplied by `stride`. `score` is `[1, D, h, w]` or `[D, h, w]`; output `[h, w]`.
    pub fn soft_argmin(&mut self, score: Var, stride: f64) -> Var {
        let sv = self.value(score);
        let r = sv.shape().len();
        let (h, w) = (sv.shape()[r - 2], sv.shape()[r - 1]);
        let d = sv.shape()[r - 3];
        assert_eq!(sv.len(), d * h * w, "soft_argmin expects a single score channel");
        let plane = h * w;
        let s = sv.data();
        let mut out = Tensor::zeros(&[h, w]);
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let m = (0..d).map(|k| -s[k * plane + i]).fold(f64::NEG_INFINITY, f64::max);
            let (mut z, mut e) = (0.0, 0.0);
            for k in 0..d {
                let p = (-s[k * plane + i] - m).exp();
                z += p;
                e += k as f64 * p;
            }
            *o = stride * e / z;
        }
        let rg = self.rg(score);
        self.push(out, Op::SoftArgmin { score, stride }, rg)
    }

    /// Bilinear upsampling by an integer factor, half-pixel centres, edge clamped.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let (p, h, w) = xv.planes();
        let mut shape = xv.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h * factor;
        shape[r - 1] = w * factor;
        let (ty, tx) = (upsample_taps(h, factor), upsample_taps(w, factor));
        let (oh, ow) = (h * factor, w * factor);
        let src = xv.data();
        let mut out = Tensor::zeros(&shape);
        let od = out.data_mut();
        for plane in 0..p {
            let sb = plane * h * w;
            let ob = plane * oh * ow;
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = (1.0 - fx) * src[sb + y0 * w + x0] + fx * src[sb + y0 * w + x1];
                    let bot = (1.0 - fx) * src[sb + y1 * w + x0] + fx * src[sb + y1 * w + x1];
                    od[ob + oy * ow + ox] = (1.0 - fy) * top + fy * bot;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample { x, factor }, rg)
    }

    /// Horizontal bilinear warp: `out[.., y, x] = src[.., y, x - disp[y, x]]`.
    /// Source coordinates outside the row are clamped and flagged in the mask.
    pub fn warp(&mut self, src: Var, disp: Var) -> Var {
        let sv = self.value(src);
        let (p, h, w) = sv.planes();
        let dv = self.value(disp);
        assert_eq!(dv.len(), h * w, "warp: disparity and source sizes differ");
        let plane = h * w;
        let s = sv.data();
        let mut out = Tensor::zeros(sv.shape());
        let mut mask = vec![true; plane];
        let od = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (x0, t, inside) = warp_tap(x, dv.data()[i], w);
                mask[i] = inside;
                let x1 = (x0 + 1).min(w - 1);
                for c in 0..p {
                    let row = c * plane + y * w;
                    od[c * plane + i] = (1.0 - t) * s[row + x0] + t * s[row + x1];
                }
            }
        }
        let rg = self.rg(src) || self.rg(disp);
        self.push(out, Op::Warp { src, disp, mask }, rg)
    }

    /// Forward difference along x: `[.., h, w-1]`.
    pub fn diff_x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (p, h, w) = xv.planes();
        let mut shape = xv.shape().to_vec();
        let r = shape.len();
        shape[r - 1] = w - 1;
        let s = xv.data();
        let mut out = Tensor::zeros(&shape);
        let od = out.data_mut();
        for row in 0..p * h {
            for x in 0..w - 1 {
                od[row * (w - 1) + x] = s[row * w + x + 1] - s[row * w + x];
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::DiffX(x), rg)
    }

    /// Forward difference along y: `[.., h-1, w]`.
    pub fn diff_y(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (p, h, w) = xv.planes();
        let mut shape = xv.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h - 1;
        let s = xv.data();
        let mut out = Tensor::zeros(&shape);
        let od = out.data_mut();
        for plane in 0..p {
            for y in 0..h - 1 {
                for x in 0..w {
                    od[(plane * (h - 1) + y) * w + x] =
                        s[(plane * h + y + 1) * w + x] - s[(plane * h + y) * w + x];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::DiffY(x), rg)
    }

    /// Back-propagates from the scalar `target`. Gradients of every node that
    /// requires one are then available through [`Graph::grad`].
    pub fn backward(&mut self, target: Var) {
        assert_eq!(self.value(target).len(), 1, "backward target must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[target.0] = Some(Tensor::full(self.value(target).shape(), 1.0));
        for i in (0..=target.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("just set").data_mut());
    }

    fn map_grad(&self, v: Var, g: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let data = g.data().iter().enumerate().map(|(i, gi)| f(i, *gi)).collect();
        Tensor::from_vec(self.value(v).shape(), data).expect("grad shape")
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (k, n) = (geom.rows(), geom.cols());
                let wv = self.value(*w).data();
                if self.rg(*w) {
                    let cols = geom.im2col(self.value(*x).data());
                    self.accumulate_with(grads, *w, |dw| {
                        gemm(
                            geom.cout,
                            n,
                            k,
                            gd,
                            (n as isize, 1),
                            &cols,
                            (1, n as isize),
                            1.0,
                            dw,
                        )
                    });
                }
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, |db| {
                        for (co, row) in gd.chunks(n).enumerate() {
                            db[co] += row.iter().sum::<f64>();
                        }
                    });
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; k * n];
                    gemm(
                        k,
                        geom.cout,
                        n,
                        wv,
                        (1, k as isize),
                        gd,
                        (n as isize, 1),
                        0.0,
                        &mut dcols,
                    );
                    self.accumulate_with(grads, *x, |dx| geom.col2im(&dcols, dx));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let t = self.map_grad(*x, g, |j, gi| if xv[j] < 0.0 { gi * slope } else { gi });
                self.accumulate(grads, *x, t);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let t = self.map_grad(*b, g, |_, gi| -gi);
                self.accumulate(grads, *b, t);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ta = self.map_grad(*a, g, |j, gi| gi * bv[j]);
                let tb = self.map_grad(*b, g, |j, gi| gi * av[j]);
                self.accumulate(grads, *a, ta);
                self.accumulate(grads, *b, tb);
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ta = self.map_grad(*a, g, |j, gi| gi / bv[j]);
                let tb = self.map_grad(*b, g, |j, gi| -gi * av[j] / (bv[j] * bv[j]));
                self.accumulate(grads, *a, ta);
                self.accumulate(grads, *b, tb);
            }
            Op::GroupNorm { x, gamma, beta, xhat, inv_std } => {
                let c = self.value(*gamma).len();
                let per_c = gd.len() / c;
                let gv = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let (mut dg, mut db) = (vec![0.0; c], vec![0.0; c]);
                    for (i, (gi, h)) in gd.iter().zip(xhat).enumerate() {
                        dg[i / per_c] += gi * h;
                        db[i / per_c] += gi;
                    }
                    self.accumulate(grads, *gamma, Tensor::from_vec(&[c], dg).expect("gamma shape"));
                    self.accumulate(grads, *beta, Tensor::from_vec(&[c], db).expect("beta shape"));
                }
                if self.rg(*x) {
                    let n = gd.len() / inv_std.len();
                    let dh: Vec<f64> = gd.iter().enumerate().map(|(i, gi)| gi * gv[i / per_c]).collect();
                    let mut dx = vec![0.0; gd.len()];
                    for (k, is) in inv_std.iter().enumerate() {
                        let r = k * n..(k + 1) * n;
                        let (dh, h) = (&dh[r.clone()], &xhat[r.clone()]);
                        let s1 = dh.iter().sum::<f64>() / n as f64;
                        let s2 = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((d, a), b) in dx[r].iter_mut().zip(dh).zip(h) {
                            *d = is * (a - s1 - b * s2);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx).expect("grad shape"));
                }
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Scale(x, c) => {
                let t = self.map_grad(*x, g, |_, gi| gi * c);
                self.accumulate(grads, *x, t);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let t = self.map_grad(*x, g, |j, gi| {
                    if xv[j] > 0.0 {
                        gi
                    } else if xv[j] < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, t);
            }
            Op::Sum(x) => {
                let t = Tensor::full(self.value(*x).shape(), gd[0]);
                self.accumulate(grads, *x, t);
            }
            Op::AvgPool { x, window } => {
                let (p, h, w) = self.value(*x).planes();
                let r = (*window / 2) as isize;
                let norm = 1.0 / (window * window) as f64;
                self.accumulate_with(grads, *x, |dx| {
                    for plane in 0..p {
                        let base = plane * h * w;
                        for y in 0..h {
                            for xx in 0..w {
                                let gi = gd[base + y * w + xx] * norm;
                                for dy in -r..=r {
                                    let yy = reflect(y as isize + dy, h);
                                    for ddx in -r..=r {
                                        dx[base + yy * w + reflect(xx as isize + ddx, w)] += gi;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::CostVolume {
                left,
                right,
                levels,
            } => {
                let shape = self.value(*left).shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let plane = h * w;
                self.accumulate_with(grads, *left, |dl| {
                    for ch in 0..c {
                        for d in 0..*levels {
                            let lo = (ch * levels + d) * plane;
                            for j in 0..plane {
                                dl[ch * plane + j] += gd[lo + j];
                            }
                        }
                    }
                });
                self.accumulate_with(grads, *right, |dr| {
                    for ch in 0..c {
                        for d in 0..*levels {
                            let ro = ((c + ch) * levels + d) * plane;
                            for y in 0..h {
                                for x in 0..w {
                                    dr[ch * plane + y * w + x.saturating_sub(d)] +=
                                        gd[ro + y * w + x];
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftArgmin { score, stride } => {
                let sv = self.value(*score);
                let r = sv.shape().len();
                let (h, w, d) = (sv.shape()[r - 2], sv.shape()[r - 1], sv.shape()[r - 3]);
                let plane = h * w;
                let s = sv.data();
                let out = self.nodes[i].value.data();
                self.accumulate_with(grads, *score, |ds| {
                    let mut p = vec![0.0; d];
                    for j in 0..plane {
                        let m = (0..d).map(|k| -s[k * plane + j]).fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for (k, pk) in p.iter_mut().enumerate() {
                            *pk = (-s[k * plane + j] - m).exp();
                            z += *pk;
                        }
                        let mean = out[j] / stride;
                        for (k, pk) in p.iter().enumerate() {
                            ds[k * plane + j] += -gd[j] * stride * (pk / z) * (k as f64 - mean);
                        }
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let (p, h, w) = self.value(*x).planes();
                let (ty, tx) = (upsample_taps(h, *factor), upsample_taps(w, *factor));
                let (oh, ow) = (h * factor, w * factor);
                self.accumulate_with(grads, *x, |dx| {
                    for plane in 0..p {
                        let sb = plane * h * w;
                        let ob = plane * oh * ow;
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gi = gd[ob + oy * ow + ox];
                                dx[sb + y0 * w + x0] += gi * (1.0 - fy) * (1.0 - fx);
                                dx[sb + y0 * w + x1] += gi * (1.0 - fy) * fx;
                                dx[sb + y1 * w + x0] += gi * fy * (1.0 - fx);
                                dx[sb + y1 * w + x1] += gi * fy * fx;
                            }
                        }
                    }
                });
            }
            Op::Warp { src, disp, mask } => {
                let sv = self.value(*src);
                let (p, h, w) = sv.planes();
                let plane = h * w;
                let s = sv.data();
                let dv = self.value(*disp).data();
                let taps: Vec<(usize, f64)> = (0..plane)
                    .map(|j| {
                        let (x0, t, _) = warp_tap(j % w, dv[j], w);
                        (x0, t)
                    })
                    .collect();
                self.accumulate_with(grads, *src, |ds| {
                    for c in 0..p {
                        for (j, &(x0, t)) in taps.iter().enumerate() {
                            let row = c * plane + (j / w) * w;
                            let gi = gd[c * plane + j];
                            ds[row + x0] += (1.0 - t) * gi;
                            ds[row + (x0 + 1).min(w - 1)] += t * gi;
                        }
                    }
                });
                self.accumulate_with(grads, *disp, |dd| {
                    for (j, &(x0, _)) in taps.iter().enumerate() {
                        if !mask[j] {
                            continue;
                        }
                        let row = (j / w) * w;
                        let x1 = (x0 + 1).min(w - 1);
                        let mut acc = 0.0;
                        for c in 0..p {
                            acc += gd[c * plane + j] * (s[c * plane + row + x1] - s[c * plane + row + x0]);
                        }
                        // d(x - d)/dd = -1
                        dd[j] -= acc;
                    }
                });
            }
            Op::DiffX(x) => {
                let (p, h, w) = self.value(*x).planes();
                self.accumulate_with(grads, *x, |dx| {
                    for row in 0..p * h {
                        for xx in 0..w - 1 {
                            let gi = gd[row * (w - 1) + xx];
                            dx[row * w + xx + 1] += gi;
                            dx[row * w + xx] -= gi;
                        }
                    }
                });
            }
            Op::DiffY(x) => {
                let (p, h, w) = self.value(*x).planes();
                self.accumulate_with(grads, *x, |dx| {
                    for plane in 0..p {
                        for y in 0..h - 1 {
                            for xx in 0..w {
                                let gi = gd[(plane * (h - 1) + y) * w + xx];
                                dx[(plane * h + y + 1) * w + xx] += gi;
                                dx[(plane * h + y) * w + xx] -= gi;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Left tap, interpolation weight and in-bounds flag for sampling column `x - d`.
#[inline]
pub(crate) fn warp_tap(x: usize, d: f64, w: usize) -> (usize, f64, bool) {
    let xs = x as f64 - d;
    let max = (w - 1) as f64;
    let inside = (0.0..=max).contains(&xs);
    let xs = xs.clamp(0.0, max);
    let x0 = (xs.floor() as usize).min(w.saturating_sub(2));
    (x0, xs - x0 as f64, inside)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution with zero padding.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[cout, ho, wo]);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                    * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = random(&[3, 9, 11], &mut rng);
            let w = random(&[4, 3, 3, 3], &mut rng);
            let b = random(&[4], &mut rng);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv(
                xv,
                wv,
                Some(bv),
                ConvSpec {
                    stride: [1, stride, stride],
                    pad: [0, pad, pad],
                },
            );
            let expect = naive_conv(&x, &w, b.data(), stride, pad);
            assert_eq!(g.value(y).shape(), expect.shape());
            assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
        }
    }

    /// Central finite differences of `f` at every entry of `x` (or a sample of them).
    fn check_grad(
        x: &Tensor,
        build: &dyn Fn(&mut Graph, Var) -> Var,
        entries: &[usize],
        tol: f64,
    ) {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let y = build(&mut g, xv);
        g.backward(y);
        let analytic = g.grad(xv).unwrap().clone();
        let h = 1e-6;
        for &i in entries {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let v = g.constant(xp);
                let y = build(&mut g, v);
                g.value(y).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-4);
            assert!(err < tol, "entry {i}: analytic {a} vs fd {fd}");
        }
    }

    fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wts = random(g.value(v).shape(), &mut rng);
        let c = g.constant(wts);
        let m = g.mul(v, c);
        g.sum(m)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 6, 7], &mut rng);
        let w = random(&[3, 2, 3, 3, 3], &mut rng);
        let wc = w.clone();
        let by_input = move |g: &mut Graph, v: Var| {
            let wv = g.constant(wc.clone());
            let y = g.conv(v, wv, None, ConvSpec::same3d(3));
            weighted_sum(g, y, 9)
        };
        check_grad(&x, &by_input, &(0..x.len()).step_by(7).collect::<Vec<_>>(), 1e-6);
        let xc = x.clone();
        let by_weight = move |g: &mut Graph, v: Var| {
            let xv = g.constant(xc.clone());
            let y = g.conv(xv, v, None, ConvSpec::same3d(3));
            weighted_sum(g, y, 9)
        };
        check_grad(&w, &by_weight, &(0..w.len()).step_by(5).collect::<Vec<_>>(), 1e-6);

        let x2 = random(&[2, 8, 8], &mut rng);
        let w2 = random(&[3, 2, 3, 3], &mut rng);
        let strided = move |g: &mut Graph, v: Var| {
            let wv = g.constant(w2.clone());
            let y = g.conv(v, wv, None, ConvSpec::same2d(3, 2));
            weighted_sum(g, y, 4)
        };
        check_grad(&x2, &strided, &(0..x2.len()).collect::<Vec<_>>(), 1e-6);
    }

    #[test]
    fn group_norm_forward_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&[4, 3, 5], &mut rng);
        let gamma = random(&[4], &mut rng);
        let beta = random(&[4], &mut rng);

        let mut g = Graph::new();
        let (xv, one, zero) = (g.constant(x.clone()), g.constant(Tensor::full(&[4], 1.0)), g.constant(Tensor::zeros(&[4])));
        let y = g.group_norm(xv, one, zero, 2, 0.0);
        for group in g.value(y).data().chunks(30) {
            let mean = group.iter().sum::<f64>() / 30.0;
            let var = group.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 30.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-10);
        }

        let (gc, bc) = (gamma.clone(), beta.clone());
        let by_input = move |g: &mut Graph, v: Var| {
            let (gm, bt) = (g.constant(gc.clone()), g.constant(bc.clone()));
            let y = g.group_norm(v, gm, bt, 2, 1e-5);
            weighted_sum(g, y, 8)
        };
        check_grad(&x, &by_input, &(0..x.len()).collect::<Vec<_>>(), 1e-5);
        let (xc, bc) = (x.clone(), beta.clone());
        let by_gamma = move |g: &mut Graph, v: Var| {
            let (xv, bt) = (g.constant(xc.clone()), g.constant(bc.clone()));
            let y = g.group_norm(xv, v, bt, 4, 1e-5);
            weighted_sum(g, y, 8)
        };
        check_grad(&gamma, &by_gamma, &[0, 1, 2, 3], 1e-6);
        let by_beta = move |g: &mut Graph, v: Var| {
            let (xv, gm) = (g.constant(x.clone()), g.constant(gamma.clone()));
            let y = g.group_norm(xv, gm, v, 1, 1e-5);
            weighted_sum(g, y, 8)
        };
        check_grad(&beta, &by_beta, &[0, 1, 2, 3], 1e-6);
    }

    #[test]
    fn spatial_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 5, 6], &mut rng);
        let all: Vec<usize> = (0..x.len()).collect();
        check_grad(&x, &|g, v| { let y = g.avg_pool(v, 3); weighted_sum(g, y, 1) }, &all, 1e-6);
        check_grad(&x, &|g, v| { let y = g.upsample(v, 4); weighted_sum(g, y, 2) }, &all, 1e-6);
        check_grad(&x, &|g, v| { let y = g.diff_x(v); weighted_sum(g, y, 3) }, &all, 1e-6);
        check_grad(&x, &|g, v| { let y = g.diff_y(v); weighted_sum(g, y, 4) }, &all, 1e-6);
        check_grad(&x, &|g, v| { let y = g.leaky_relu(v, 0.1); weighted_sum(g, y, 5) }, &all, 1e-6);

        let score = random(&[1, 6, 3, 4], &mut rng);
        let s_all: Vec<usize> = (0..score.len()).collect();
        check_grad(&score, &|g, v| { let y = g.soft_argmin(v, 4.0); weighted_sum(g, y, 6) }, &s_all, 1e-6);

        let fl = random(&[2, 3, 5], &mut rng);
        let fr = random(&[2, 3, 5], &mut rng);
        let fr2 = fr.clone();
        check_grad(&fl, &move |g, v| {
            let r = g.constant(fr2.clone());
            let y = g.cost_volume(v, r, 3);
            weighted_sum(g, y, 7)
        }, &(0..fl.len()).collect::<Vec<_>>(), 1e-6);
        check_grad(&fr, &move |g, v| {
            let l = g.constant(fl.clone());
            let y = g.cost_volume(l, v, 3);
            weighted_sum(g, y, 7)
        }, &(0..fr.len()).collect::<Vec<_>>(), 1e-6);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random(&[3, 4], &mut rng);
        let b = Tensor::from_vec(&[3, 4], (0..12).map(|i| 1.5 + i as f64 * 0.1).collect()).unwrap();
        let all: Vec<usize> = (0..a.len()).collect();
        let bb = b.clone();
        check_grad(&a, &move |g, v| {
            let c = g.constant(bb.clone());
            let m = g.mul(v, v);
            let d = g.div(m, c);
            let s = g.sub(d, v);
            let t = g.abs(s);
            let u = g.add_scalar(t, 2.0);
            let w = g.scale(u, 0.5);
            let z = g.add(w, v);
            weighted_sum(g, z, 8)
        }, &all, 1e-6);
        let aa = a.clone();
        check_grad(&b, &move |g, v| {
            let c = g.constant(aa.clone());
            let d = g.div(c, v);
            weighted_sum(g, d, 9)
        }, &all, 1e-6);
    }

    #[test]
    fn warp_tap_edges() {
        assert_eq!(warp_tap(0, 0.0, 5), (0, 0.0, true));
        assert_eq!(warp_tap(4, 0.0, 5), (3, 1.0, true));
        assert_eq!(warp_tap(3, 1.0, 5), (2, 0.0, true));
        let (x0, t, inside) = warp_tap(1, 2.5, 5);
        assert_eq!((x0, t, inside), (0, 0.0, false));
    }
}
