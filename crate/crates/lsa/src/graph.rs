//! Minimal reverse-mode autodiff tape over f64 tensors.
//!
//! The networks in this crate are small enough that a hand-rolled tape with
//! exactly the ops they need (conv, nearest upsample, depthwise temporal
//! conv, FiLM, reductions) beats pulling in a framework. Everything is f64
//! so finite-difference gradient checks can run at tight tolerances.

use ndarray::{ArrayD, IxDyn};

/// Handle into a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// y = a + b (same shape)
    Add(Var, Var),
    /// y = k * x
    Scale(Var, f64),
    /// y = a * x + c, c a constant tensor of x's shape (c only affects the
    /// forward value)
    AffineConst { x: Var, a: f64 },
    /// y = x ⊙ m, m a constant tensor of x's shape
    MulConst { x: Var, m: ArrayD<f64> },
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    /// mean over all elements, 0-dim output
    MeanAll(Var),
    /// x: [B,Cin,H,W], w: [Cout,Cin,k,k]
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    /// per-channel bias over [B,C,H,W]; b: [C]
    BiasC { x: Var, b: Var },
    /// per-channel scale over [B,C,H,W]; s: [C]
    ChanScale { x: Var, s: Var },
    /// nearest-neighbour 2x upsample of [B,C,H,W]
    Upsample2x(Var),
    /// concat along the channel axis of [B,C,H,W]
    ConcatC(Var, Var),
    /// depthwise conv across the frame axis of [N,C,H,W]; w: [C,3], zero pad
    TemporalConv { x: Var, w: Var },
    /// y = W x + b; x: [in], w: [out,in], b: [out]
    Linear { x: Var, w: Var, b: Var },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Build forward with the op methods, then call
/// [`Graph::backward`] once on a scalar output.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-dim (or single-element) node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        val.iter().copied().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: ArrayD<f64>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        let ng = self.needs(x);
        self.push(value, Op::Scale(x, k), ng)
    }

    /// y = a * x + c
    pub fn affine_const(&mut self, x: Var, a: f64, c: ArrayD<f64>) -> Var {
        assert_eq!(self.value(x).shape(), c.shape(), "affine_const shape");
        let value = self.value(x) * a + &c;
        let ng = self.needs(x);
        self.push(value, Op::AffineConst { x, a }, ng)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let c = ArrayD::from_elem(IxDyn(self.value(x).shape()), k);
        self.affine_const(x, 1.0, c)
    }

    pub fn mul_const(&mut self, x: Var, m: ArrayD<f64>) -> Var {
        assert_eq!(self.value(x).shape(), m.shape(), "mul_const shape");
        let value = self.value(x) * &m;
        let ng = self.needs(x);
        self.push(value, Op::MulConst { x, m }, ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let ng = self.needs(x);
        self.push(value, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.needs(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        let ng = self.needs(x);
        self.push(value, Op::Square(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let mean = self.value(x).iter().sum::<f64>() / self.value(x).len() as f64;
        let value = ArrayD::from_elem(IxDyn(&[]), mean);
        let ng = self.needs(x);
        self.push(value, Op::MeanAll(x), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let value = conv2d_fwd(self.value(x), self.value(w), stride, pad);
        let ng = self.needs(x) || self.needs(w);
        self.push(value, Op::Conv2d { x, w, stride, pad }, ng)
    }

    pub fn bias_c(&mut self, x: Var, b: Var) -> Var {
        let (xs, bs) = (self.value(x), self.value(b));
        assert_eq!(xs.shape()[1], bs.shape()[0], "bias_c channels");
        let mut value = xs.clone();
        let c = bs.shape()[0];
        let plane = xs.len() / (xs.shape()[0] * c);
        let bsl: Vec<f64> = bs.iter().copied().collect();
        for (i, v) in value.iter_mut().enumerate() {
            *v += bsl[(i / plane) % c];
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(value, Op::BiasC { x, b }, ng)
    }

    pub fn chan_scale(&mut self, x: Var, s: Var) -> Var {
        let (xs, ss) = (self.value(x), self.value(s));
        assert_eq!(xs.shape()[1], ss.shape()[0], "chan_scale channels");
        let mut value = xs.clone();
        let c = ss.shape()[0];
        let plane = xs.len() / (xs.shape()[0] * c);
        let ssl: Vec<f64> = ss.iter().copied().collect();
        for (i, v) in value.iter_mut().enumerate() {
            *v *= ssl[(i / plane) % c];
        }
        let ng = self.needs(x) || self.needs(s);
        self.push(value, Op::ChanScale { x, s }, ng)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let sh = xs.shape();
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let mut value = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xs[[bi, ci, i, j]];
                        value[[bi, ci, 2 * i, 2 * j]] = v;
                        value[[bi, ci, 2 * i + 1, 2 * j]] = v;
                        value[[bi, ci, 2 * i, 2 * j + 1]] = v;
                        value[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::Upsample2x(x), ng)
    }

    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        assert_eq!((sa[0], sa[2], sa[3]), (sb[0], sb[2], sb[3]), "concat_c dims");
        let value = ndarray::concatenate(
            ndarray::Axis(1),
            &[av.view(), bv.view()],
        )
        .expect("concat_c")
        .as_standard_layout()
        .into_owned();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatC(a, b), ng)
    }

    pub fn temporal_conv(&mut self, x: Var, w: Var) -> Var {
        let (xs, ws) = (self.value(x), self.value(w));
        let sh = xs.shape();
        let (n, c, h, wd) = (sh[0], sh[1], sh[2], sh[3]);
        assert_eq!(ws.shape(), [c, 3], "temporal_conv kernel");
        let mut value = ArrayD::zeros(IxDyn(&[n, c, h, wd]));
        for ni in 0..n {
            for k in 0..3usize {
                let src = ni as isize + k as isize - 1;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let src = src as usize;
                for ci in 0..c {
                    let wk = ws[[ci, k]];
                    for i in 0..h {
                        for j in 0..wd {
                            value[[ni, ci, i, j]] += wk * xs[[src, ci, i, j]];
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(value, Op::TemporalConv { x, w }, ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (out, inp) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.len(), inp, "linear input dim");
        assert_eq!(bv.len(), out, "linear bias dim");
        let mut value = ArrayD::zeros(IxDyn(&[out]));
        for o in 0..out {
            let mut acc = bv[[o]];
            for i in 0..inp {
                acc += wv[[o, i]] * xv[[i]];
            }
            value[[o]] = acc;
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Linear { x, w, b }, ng)
    }

    /// Reverse pass from a scalar node. Returns per-var gradients; vars that
    /// do not require grad (and everything upstream of only those) are `None`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(
            IxDyn(self.nodes[loss.0].value.shape()),
            1.0,
        ));

        for idx in (0..=loss.0).rev() {
            let gy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let accum = |grads: &mut Vec<Option<ArrayD<f64>>>, v: Var, g: ArrayD<f64>| {
                if !self.needs(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(gy); // keep leaf gradient for the caller
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, gy.clone());
                    accum(&mut grads, *b, gy);
                }
                Op::Scale(x, k) => accum(&mut grads, *x, gy * *k),
                Op::AffineConst { x, a } => accum(&mut grads, *x, gy * *a),
                Op::MulConst { x, m } => accum(&mut grads, *x, gy * m),
                Op::Tanh(x) => {
                    let y = &self.nodes[idx].value;
                    accum(&mut grads, *x, &gy * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[idx].value;
                    accum(&mut grads, *x, &gy * &y.mapv(|v| v * (1.0 - v)));
                }
                Op::Square(x) => {
                    let xv = self.value(*x);
                    accum(&mut grads, *x, &gy * &(xv * 2.0));
                }
                Op::MeanAll(x) => {
                    let xv = self.value(*x);
                    let g = gy.iter().copied().next().unwrap() / xv.len() as f64;
                    accum(&mut grads, *x, ArrayD::from_elem(IxDyn(xv.shape()), g));
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (gx, gw) = conv2d_bwd(
                        self.value(*x),
                        self.value(*w),
                        &gy,
                        *stride,
                        *pad,
                        self.needs(*x),
                        self.needs(*w),
                    );
                    if let Some(gx) = gx {
                        accum(&mut grads, *x, gx);
                    }
                    if let Some(gw) = gw {
                        accum(&mut grads, *w, gw);
                    }
                }
                Op::BiasC { x, b } => {
                    if self.needs(*b) {
                        let sh = gy.shape();
                        let (bn, c) = (sh[0], sh[1]);
                        let plane = gy.len() / (bn * c);
                        let mut gb = ArrayD::zeros(IxDyn(&[c]));
                        for (i, g) in gy.iter().enumerate() {
                            gb[[(i / plane) % c]] += g;
                        }
                        accum(&mut grads, *b, gb);
                    }
                    accum(&mut grads, *x, gy);
                }
                Op::ChanScale { x, s } => {
                    let sh = gy.shape().to_vec();
                    let (bn, c) = (sh[0], sh[1]);
                    let plane = gy.len() / (bn * c);
                    if self.needs(*s) {
                        let xv = self.value(*x);
                        let mut gs = ArrayD::zeros(IxDyn(&[c]));
                        for (i, (g, xval)) in gy.iter().zip(xv.iter()).enumerate() {
                            gs[[(i / plane) % c]] += g * xval;
                        }
                        accum(&mut grads, *s, gs);
                    }
                    if self.needs(*x) {
                        let sv = self.value(*s);
                        let ssl: Vec<f64> = sv.iter().copied().collect();
                        let mut gx = gy.clone();
                        for (i, g) in gx.iter_mut().enumerate() {
                            *g *= ssl[(i / plane) % c];
                        }
                        accum(&mut grads, *x, gx);
                    }
                }
                Op::Upsample2x(x) => {
                    let xsh = self.value(*x).shape().to_vec();
                    let (b, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
                    let mut gx = ArrayD::zeros(IxDyn(&xsh));
                    for bi in 0..b {
                        for ci in 0..c {
                            for i in 0..h {
                                for j in 0..w {
                                    gx[[bi, ci, i, j]] = gy[[bi, ci, 2 * i, 2 * j]]
                                        + gy[[bi, ci, 2 * i + 1, 2 * j]]
                                        + gy[[bi, ci, 2 * i, 2 * j + 1]]
                                        + gy[[bi, ci, 2 * i + 1, 2 * j + 1]];
                                }
                            }
                        }
                    }
                    accum(&mut grads, *x, gx);
                }
                Op::ConcatC(a, b) => {
                    let ca = self.value(*a).shape()[1];
                    let ga = gy
                        .slice_axis(ndarray::Axis(1), (0..ca).into())
                        .to_owned()
                        .as_standard_layout()
                        .into_owned();
                    let gb = gy
                        .slice_axis(ndarray::Axis(1), (ca..gy.shape()[1]).into())
                        .to_owned()
                        .as_standard_layout()
                        .into_owned();
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::TemporalConv { x, w } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let sh = xv.shape().to_vec();
                    let (n, c, h, wd) = (sh[0], sh[1], sh[2], sh[3]);
                    if self.needs(*x) {
                        let mut gx = ArrayD::zeros(IxDyn(&sh));
                        for ni in 0..n {
                            for k in 0..3usize {
                                let src = ni as isize + k as isize - 1;
                                if src < 0 || src >= n as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for ci in 0..c {
                                    let wk = wv[[ci, k]];
                                    for i in 0..h {
                                        for j in 0..wd {
                                            gx[[src, ci, i, j]] += wk * gy[[ni, ci, i, j]];
                                        }
                                    }
                                }
                            }
                        }
                        accum(&mut grads, *x, gx);
                    }
                    if self.needs(*w) {
                        let mut gw = ArrayD::zeros(IxDyn(&[c, 3]));
                        for ni in 0..n {
                            for k in 0..3usize {
                                let src = ni as isize + k as isize - 1;
                                if src < 0 || src >= n as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for ci in 0..c {
                                    let mut acc = 0.0;
                                    for i in 0..h {
                                        for j in 0..wd {
                                            acc += xv[[src, ci, i, j]] * gy[[ni, ci, i, j]];
                                        }
                                    }
                                    gw[[ci, k]] += acc;
                                }
                            }
                        }
                        accum(&mut grads, *w, gw);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (out, inp) = (wv.shape()[0], wv.shape()[1]);
                    if self.needs(*x) {
                        let mut gx = ArrayD::zeros(IxDyn(&[inp]));
                        for o in 0..out {
                            for i in 0..inp {
                                gx[[i]] += wv[[o, i]] * gy[[o]];
                            }
                        }
                        accum(&mut grads, *x, gx);
                    }
                    if self.needs(*w) {
                        let mut gw = ArrayD::zeros(IxDyn(&[out, inp]));
                        for o in 0..out {
                            for i in 0..inp {
                                gw[[o, i]] = gy[[o]] * xv[[i]];
                            }
                        }
                        accum(&mut grads, *w, gw);
                    }
                    if self.needs(*b) {
                        accum(&mut grads, *b, gy.clone());
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn conv2d_fwd(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cin_w, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(cin, cin_w, "conv2d input channels");
    assert_eq!(ws[3], k, "conv2d square kernel");
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel fits");
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;

    let xd = x.as_slice().expect("standard layout");
    let wdt = w.as_slice().expect("standard layout");
    let mut y = vec![0.0; b * cout * ho * wo];
    for bi in 0..b {
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for kh in 0..k {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let row = ((bi * cin + ci) * h + ih as usize) * wd;
                            let wrow = ((co * cin + ci) * k + kh) * k;
                            for kw in 0..k {
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                acc += xd[row + iw as usize] * wdt[wrow + kw];
                            }
                        }
                    }
                    y[((bi * cout + co) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, cout, ho, wo]), y).unwrap()
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gy: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    need_gx: bool,
    need_gw: bool,
) -> (Option<ArrayD<f64>>, Option<ArrayD<f64>>) {
    let xs = x.shape();
    let ws = w.shape();
    let gs = gy.shape();
    let (b, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, _, k) = (ws[0], ws[1], ws[2]);
    let (ho, wo) = (gs[2], gs[3]);

    let xd = x.as_slice().expect("standard layout");
    let wdt = w.as_slice().expect("standard layout");
    let gyd = gy.as_slice().expect("standard layout");
    let mut gx = if need_gx { vec![0.0; x.len()] } else { vec![] };
    let mut gw = if need_gw { vec![0.0; w.len()] } else { vec![] };

    for bi in 0..b {
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = gyd[((bi * cout + co) * ho + oh) * wo + ow];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..cin {
                        for kh in 0..k {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let row = ((bi * cin + ci) * h + ih as usize) * wd;
                            let wrow = ((co * cin + ci) * k + kh) * k;
                            for kw in 0..k {
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                if need_gx {
                                    gx[row + iw as usize] += g * wdt[wrow + kw];
                                }
                                if need_gw {
                                    gw[wrow + kw] += g * xd[row + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        need_gx.then(|| ArrayD::from_shape_vec(IxDyn(xs), gx).unwrap()),
        need_gw.then(|| ArrayD::from_shape_vec(IxDyn(ws), gw).unwrap()),
    )
}
