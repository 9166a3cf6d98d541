use super::conv::{conv_backward, conv_forward, ConvGeom};
use super::{gemm, MatRef, Scalar};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// `[channels, height, width]`; vectors are `[n, 1, 1]`, scalars `[1, 1, 1]`.
pub type Shape = [usize; 3];

enum Op<T> {
    Input,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    AddChannel {
        x: Var,
        v: Var,
    },
    Silu(Var),
    Sigmoid(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Upsample2x(Var),
    Concat(Var, Var),
    Scale(Var, T),
    /// Scalar with precomputed partial derivatives w.r.t. each input.
    Fused(Vec<(Var, Vec<T>)>),
}

struct Node<T> {
    value: Vec<T>,
    shape: Shape,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of operations for one forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that skips the caches only backward needs.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<T>, shape: Shape, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            requires_grad: requires_grad && self.record,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Vec<T>, shape: Shape) -> Var {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "input shape");
        self.push(value, shape, Op::Input, false)
    }

    pub fn param(&mut self, id: usize, value: &[T]) -> Var {
        self.push(value.to_vec(), [value.len(), 1, 1], Op::Param(id), true)
    }

    /// 2-D convolution of a `[C, H, W]` input; `w` is `[out, C, k, k]` flattened.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize, pad: usize) -> Var {
        let [in_c, in_h, in_w] = self.shape(x);
        let out_c = self.value(b).len();
        assert_eq!(self.value(w).len(), out_c * in_c * k * k, "conv weight size");
        let geom = ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            k,
            stride,
            pad,
        };
        let keep = self.record && (self.rg(w) || self.rg(x));
        let (out, cols) = conv_forward(self.value(x), self.value(w), self.value(b), &geom, keep);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            out,
            [out_c, geom.out_h(), geom.out_w()],
            Op::Conv {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        )
    }

    /// `w @ x + b` with `w` row-major `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let n_in = self.value(x).len();
        let n_out = self.value(b).len();
        assert_eq!(self.value(w).len(), n_in * n_out, "linear weight size");
        let mut out = self.value(b).to_vec();
        gemm(
            MatRef::new(self.value(w), n_out, n_in),
            MatRef::new(self.value(x), n_in, 1),
            T::one(),
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, [n_out, 1, 1], Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| p + q)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(out, self.shape(a), Op::Add(a, b), rg)
    }

    /// Adds `v[c]` to every pixel of channel `c`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let [c, h, w] = self.shape(x);
        assert_eq!(self.value(v).len(), c, "per-channel vector length");
        let plane = h * w;
        let vv = self.value(v);
        let out = self
            .value(x)
            .chunks(plane)
            .zip(vv)
            .flat_map(|(row, &b)| row.iter().map(move |&p| p + b))
            .collect();
        let rg = self.rg(x) || self.rg(v);
        self.push(out, [c, h, w], Op::AddChannel { x, v }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x), Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x), Op::Sigmoid(x), rg)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * k).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x), Op::Scale(x, k), rg)
    }

    /// Group normalization with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let [c, h, w] = self.shape(x);
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let eps = T::of(1e-5);
        let per = (c / groups) * h * w;
        let n = T::of(per as f64);
        let xs = self.value(x);
        let (g, bta) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); groups];
        for gi in 0..groups {
            let seg = &xs[gi * per..(gi + 1) * per];
            let mean = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd[gi] = r;
            for (o, &v) in xhat[gi * per..(gi + 1) * per].iter_mut().zip(seg) {
                *o = (v - mean) * r;
            }
        }
        let plane = h * w;
        let out = xhat
            .chunks(plane)
            .enumerate()
            .flat_map(|(ch, row)| {
                let (gm, bt) = (g[ch], bta[ch]);
                row.iter().map(move |&v| v * gm + bt)
            })
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let (xhat, rstd) = if self.record && rg {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            out,
            [c, h, w],
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let [c, h, w] = self.shape(x);
        let xs = self.value(x);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let src = &xs[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                let dst = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, [c, oh, ow], Op::Upsample2x(x), rg)
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let [ca, h, w] = self.shape(a);
        let [cb, hb, wb] = self.shape(b);
        assert_eq!((h, w), (hb, wb), "concat spatial dims");
        let mut out = Vec::with_capacity((ca + cb) * h * w);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, [ca + cb, h, w], Op::Concat(a, b), rg)
    }

    /// A scalar whose gradient w.r.t. each input was computed alongside it.
    pub fn fused_scalar(&mut self, value: T, parts: Vec<(Var, Vec<T>)>) -> Var {
        for (v, g) in &parts {
            assert_eq!(self.value(*v).len(), g.len(), "fused partial size");
        }
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        let parts = if self.record { parts } else { Vec::new() };
        self.push(vec![value], [1, 1, 1], Op::Fused(parts), rg)
    }

    /// Reverse pass from scalar `root`; parameter gradients are added into
    /// `param_grads[id]`.
    pub fn backward_into(&self, root: Var, param_grads: &mut [Vec<T>]) {
        assert!(self.record, "backward on an inference graph");
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    for (d, s) in param_grads[*id].iter_mut().zip(&g) {
                        *d += *s;
                    }
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let mut dw = self.take_grad(&mut grads, *w);
                    let mut db = self.take_grad(&mut grads, *b);
                    let mut dx = self.rg(*x).then(|| self.take_grad(&mut grads, *x));
                    conv_backward(
                        self.value(*x),
                        cols,
                        self.value(*w),
                        &g,
                        geom,
                        dx.as_deref_mut(),
                        &mut dw,
                        &mut db,
                    );
                    grads[w.0] = Some(dw);
                    grads[b.0] = Some(db);
                    if let Some(dx) = dx {
                        grads[x.0] = Some(dx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let n_in = self.value(*x).len();
                    let n_out = g.len();
                    self.accumulate(&mut grads, *b, |db| add_into(db, &g));
                    self.accumulate(&mut grads, *w, |dw| {
                        gemm(
                            MatRef::new(&g, n_out, 1),
                            MatRef::new(self.value(*x), 1, n_in),
                            T::one(),
                            dw,
                        )
                    });
                    self.accumulate(&mut grads, *x, |dx| {
                        gemm(
                            MatRef::new(self.value(*w), n_out, n_in).t(),
                            MatRef::new(&g, n_out, 1),
                            T::one(),
                            dx,
                        )
                    });
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |d| add_into(d, &g));
                    self.accumulate(&mut grads, *b, |d| add_into(d, &g));
                }
                Op::AddChannel { x, v } => {
                    let plane = node.shape[1] * node.shape[2];
                    self.accumulate(&mut grads, *x, |d| add_into(d, &g));
                    self.accumulate(&mut grads, *v, |d| {
                        for (dc, row) in d.iter_mut().zip(g.chunks(plane)) {
                            *dc += row.iter().copied().sum::<T>();
                        }
                    });
                }
                Op::Silu(x) => {
                    let xs = self.value(*x);
                    self.accumulate(&mut grads, *x, |d| {
                        for ((d, &gv), &v) in d.iter_mut().zip(&g).zip(xs) {
                            let s = sigmoid(v);
                            *d += gv * s * (T::one() + v * (T::one() - s));
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let ys = &node.value;
                    self.accumulate(&mut grads, *x, |d| {
                        for ((d, &gv), &y) in d.iter_mut().zip(&g).zip(ys) {
                            *d += gv * y * (T::one() - y);
                        }
                    });
                }
                Op::Scale(x, k) => {
                    self.accumulate(&mut grads, *x, |d| {
                        for (d, &gv) in d.iter_mut().zip(&g) {
                            *d += gv * *k;
                        }
                    });
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    rstd,
                } => {
                    let [c, h, w] = node.shape;
                    let plane = h * w;
                    self.accumulate(&mut grads, *beta, |d| {
                        for (dc, row) in d.iter_mut().zip(g.chunks(plane)) {
                            *dc += row.iter().copied().sum::<T>();
                        }
                    });
                    self.accumulate(&mut grads, *gamma, |d| {
                        for ((dc, row), xr) in d.iter_mut().zip(g.chunks(plane)).zip(xhat.chunks(plane)) {
                            *dc += row.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    });
                    let gm = self.value(*gamma);
                    self.accumulate(&mut grads, *x, |d| {
                        let per = (c / groups) * plane;
                        let n = T::of(per as f64);
                        for gi in 0..*groups {
                            let range = gi * per..(gi + 1) * per;
                            let mut dxhat = Vec::with_capacity(per);
                            for (j, &gv) in g[range.clone()].iter().enumerate() {
                                dxhat.push(gv * gm[(gi * per + j) / plane]);
                            }
                            let xh = &xhat[range.clone()];
                            let sum_d: T = dxhat.iter().copied().sum();
                            let sum_dx: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                            let r = rstd[gi] / n;
                            for ((o, &dh), &xv) in d[range].iter_mut().zip(&dxhat).zip(xh) {
                                *o += r * (n * dh - sum_d - xv * sum_dx);
                            }
                        }
                    });
                }
                Op::Upsample2x(x) => {
                    let [c, oh, ow] = node.shape;
                    let (h, w) = (oh / 2, ow / 2);
                    self.accumulate(&mut grads, *x, |d| {
                        for ch in 0..c {
                            for y in 0..oh {
                                let src = &g[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                                let dst = &mut d[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                                for (xo, &v) in src.iter().enumerate() {
                                    dst[xo / 2] += v;
                                }
                            }
                        }
                    });
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    self.accumulate(&mut grads, *a, |d| add_into(d, &g[..na]));
                    self.accumulate(&mut grads, *b, |d| add_into(d, &g[na..]));
                }
                Op::Fused(parts) => {
                    let up = g[0];
                    for (v, partial) in parts {
                        self.accumulate(&mut grads, *v, |d| {
                            for (d, &p) in d.iter_mut().zip(partial) {
                                *d += up * p;
                            }
                        });
                    }
                }
            }
        }
    }

    fn take_grad(&self, grads: &mut [Option<Vec<T>>], v: Var) -> Vec<T> {
        grads[v.0]
            .take()
            .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.len()])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(buf);
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (d, &s) in d.iter_mut().zip(g) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize, scale: f64, shift: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (((i + shift) * 7919 % 29) as f64 - 14.0) * scale)
            .collect()
    }

    /// Builds a small graph touching every op and returns the scalar output.
    fn build(g: &mut Graph<f64>, params: &[Vec<f64>]) -> Var {
        let x = g.input(seq(2 * 4 * 4, 0.05, 3), [2, 4, 4]);
        let w1 = g.param(0, &params[0]);
        let b1 = g.param(1, &params[1]);
        let gm = g.param(2, &params[2]);
        let bt = g.param(3, &params[3]);
        let lw = g.param(4, &params[4]);
        let lb = g.param(5, &params[5]);
        let w2 = g.param(6, &params[6]);
        let b2 = g.param(7, &params[7]);
        let h = g.conv2d(x, w1, b1, 3, 1, 1); // [4,4,4]
        let h = g.group_norm(h, gm, bt, 2);
        let h = g.silu(h);
        let t = g.input(vec![0.3, -0.7], [2, 1, 1]);
        let t = g.linear(t, lw, lb); // [4]
        let h = g.add_channel(h, t);
        let d = g.conv2d(h, w2, b2, 3, 2, 1); // [4,2,2]
        let u = g.upsample2x(d);
        let s = g.add(u, h);
        let cat = g.concat(s, x);
        let y = g.sigmoid(cat);
        let y = g.scale(y, 0.5);
        // weighted sum as a fused scalar
        let wts = seq(g.value(y).len(), 0.1, 11);
        let val = g.value(y).iter().zip(&wts).map(|(a, b)| a * b).sum();
        g.fused_scalar(val, vec![(y, wts)])
    }

    #[test]
    fn gradients_match_finite_differences() {
        let sizes = [4 * 2 * 9, 4, 4, 4, 4 * 2, 4, 4 * 4 * 9, 4];
        let mut params: Vec<Vec<f64>> = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| seq(n, 0.04, i * 5))
            .collect();
        params[2].iter_mut().for_each(|v| *v += 1.0);
        let mut g = Graph::new();
        let out = build(&mut g, &params);
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        g.backward_into(out, &mut grads);
        let h = 1e-6;
        for p in 0..params.len() {
            for j in 0..params[p].len() {
                let orig = params[p][j];
                params[p][j] = orig + h;
                let mut gp = Graph::new();
                let root = build(&mut gp, &params);
                let up = gp.scalar(root);
                params[p][j] = orig - h;
                let mut gm = Graph::new();
                let root = build(&mut gm, &params);
                let dn = gm.scalar(root);
                params[p][j] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grads[p][j];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                    "param {p}[{j}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
