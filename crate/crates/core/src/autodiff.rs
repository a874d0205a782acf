//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] records every operation in execution order, which is already
//! a topological order, so the backward pass is a single reverse sweep.
//! Ops are pure functions of their inputs plus an explicit [`RngState`];
//! a graph is confined to one thread, tensors move between threads freely.
//!
//! Repeated `backward` calls accumulate into existing gradients; callers
//! that want fresh gradients build a fresh graph.

use crate::rng::RngState;
use crate::tensor::{nchw_index, Element, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, TensorError>;

/// Train enables the stochastic layers; Eval turns them into the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Probability clip for the cross-entropy logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    stride: usize,
    dilation: usize,
    pad_h: usize,
    pad_w: usize,
}

#[derive(Debug)]
enum Op<E: Element> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId, geom: ConvGeom },
    ConcatChannels { a: NodeId, b: NodeId },
    GlobalAvgPool { x: NodeId },
    SpatialDropout { x: NodeId, mask: Vec<bool>, scale: E },
    Dropout { x: NodeId, mask: Vec<bool>, scale: E },
    GaussianNoise { x: NodeId },
    Reshape { x: NodeId },
    SumAll { x: NodeId },
    BceLoss { probs: NodeId, targets: NodeId, clipped: Vec<E> },
}

pub struct Graph<E: Element> {
    values: Vec<Tensor<E>>,
    grads: Vec<Option<Tensor<E>>>,
    ops: Vec<Op<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self { values: Vec::new(), grads: Vec::new(), ops: Vec::new() }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        id
    }

    pub fn leaf(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.values[id.0]
    }

    /// Accumulated gradient, present once `backward` has reached the node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, zeros if backward never reached it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor<E> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.values[id.0].shape()),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(TensorError::Incompatible {
                op: "add",
                message: format!("shape {:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(TensorError::Incompatible {
                op: "mul",
                message: format!("shape {:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.values[x.0].map(|v| if v > E::zero() { v } else { E::zero() });
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.values[x.0].map(|v| E::one() / (E::one() + (-v).exp()));
        self.push(out, Op::Sigmoid { x })
    }

    /// Affine layer: `x[N,D] @ w[D,K] + b[K]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (&self.values[x.0], &self.values[w.0], &self.values[b.0]);
        let (xs, ws, bs) = (vx.shape(), vw.shape(), vb.shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(TensorError::Incompatible {
                op: "dense",
                message: format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            });
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        let mut out = vec![E::zero(); n * k];
        for i in 0..n {
            let row = &mut out[i * k..(i + 1) * k];
            row.copy_from_slice(vb.data());
            for j in 0..d {
                let xv = vx.data()[i * d + j];
                let wrow = &vw.data()[j * k..(j + 1) * k];
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o = *o + xv * wv;
                }
            }
        }
        let out = Tensor::new(vec![n, k], out)?;
        Ok(self.push(out, Op::Dense { x, w, b }))
    }

    /// Cross-correlation with dilated taps over NCHW input.
    ///
    /// `Same` pads with zeros, split evenly with the extra pixel on the
    /// high side when the total is odd.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (vi, vk, vb) = (&self.values[input.0], &self.values[kernel.0], &self.values[bias.0]);
        let (is, ks, bs) = (vi.shape(), vk.shape(), vb.shape());
        if is.len() != 4 || ks.len() != 4 || bs.len() != 1 {
            return Err(TensorError::Incompatible {
                op: "conv2d",
                message: format!("input {is:?}, kernel {ks:?}, bias {bs:?}"),
            });
        }
        if stride < 1 || dilation < 1 {
            return Err(TensorError::InvalidArg {
                op: "conv2d",
                message: format!("stride {stride}, dilation {dilation}; both must be >= 1"),
            });
        }
        if is[1] != ks[1] {
            return Err(TensorError::Incompatible {
                op: "conv2d",
                message: format!("input channels {} != kernel channels {}", is[1], ks[1]),
            });
        }
        if ks[0] != bs[0] {
            return Err(TensorError::Incompatible {
                op: "conv2d",
                message: format!("kernel filters {} != bias length {}", ks[0], bs[0]),
            });
        }
        let (h, w) = (is[2], is[3]);
        let (kh, kw) = (ks[2], ks[3]);
        let eff_h = (kh - 1) * dilation + 1;
        let eff_w = (kw - 1) * dilation + 1;
        let (out_h, out_w, pad_h, pad_w) = match padding {
            Padding::Valid => {
                if h < eff_h || w < eff_w {
                    return Err(TensorError::Incompatible {
                        op: "conv2d",
                        message: format!(
                            "effective kernel {eff_h}x{eff_w} exceeds input {h}x{w} without padding"
                        ),
                    });
                }
                ((h - eff_h) / stride + 1, (w - eff_w) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let th = ((oh - 1) * stride + eff_h).saturating_sub(h);
                let tw = ((ow - 1) * stride + eff_w).saturating_sub(w);
                (oh, ow, th / 2, tw / 2)
            }
        };
        let geom = ConvGeom { stride, dilation, pad_h, pad_w };
        let out = conv2d_forward(vi, vk, vb, geom, out_h, out_w);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, geom }))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(TensorError::Incompatible {
                op: "concat_channels",
                message: format!("shape {sa:?} vs {sb:?} (batch and spatial dims must match)"),
            });
        }
        let (n, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&va.data()[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&vb.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push(out, Op::ConcatChannels { a, b }))
    }

    /// Per-channel spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = &self.values[x.0];
        let s = vx.shape();
        if s.len() != 4 {
            return Err(TensorError::Incompatible {
                op: "global_avg_pool",
                message: format!("expected NCHW input, got {s:?}"),
            });
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let inv = E::from_f64(1.0 / plane as f64);
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n * c {
            let mut acc = E::zero();
            for &v in &vx.data()[i * plane..(i + 1) * plane] {
                acc = acc + v;
            }
            out.push(acc * inv);
        }
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.push(out, Op::GlobalAvgPool { x }))
    }

    /// Drops whole feature maps, one Bernoulli draw per (sample, channel),
    /// scaling survivors by 1/(1-rate) so eval mode is the identity.
    pub fn spatial_dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<NodeId> {
        check_rate("spatial_dropout", rate)?;
        let vx = &self.values[x.0];
        let s = vx.shape();
        if s.len() != 4 {
            return Err(TensorError::Incompatible {
                op: "spatial_dropout",
                message: format!("expected NCHW input, got {s:?}"),
            });
        }
        if mode == Mode::Eval || rate == 0.0 {
            let out = vx.clone();
            return Ok(self.push(out, Op::Reshape { x }));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mask: Vec<bool> = (0..n * c).map(|_| !rng.bernoulli(rate)).collect();
        let scale = E::from_f64(1.0 / (1.0 - rate));
        let mut out = vec![E::zero(); vx.numel()];
        for (i, &keep) in mask.iter().enumerate() {
            if keep {
                let src = &vx.data()[i * plane..(i + 1) * plane];
                for (o, &v) in out[i * plane..(i + 1) * plane].iter_mut().zip(src) {
                    *o = v * scale;
                }
            }
        }
        let out = Tensor::new(s.to_vec(), out)?;
        Ok(self.push(out, Op::SpatialDropout { x, mask, scale }))
    }

    /// Elementwise dropout with the same inverted-scaling convention.
    pub fn dropout(&mut self, x: NodeId, rate: f64, mode: Mode, rng: &mut RngState) -> Result<NodeId> {
        check_rate("dropout", rate)?;
        let vx = &self.values[x.0];
        if mode == Mode::Eval || rate == 0.0 {
            let out = vx.clone();
            return Ok(self.push(out, Op::Reshape { x }));
        }
        let mask: Vec<bool> = (0..vx.numel()).map(|_| !rng.bernoulli(rate)).collect();
        let scale = E::from_f64(1.0 / (1.0 - rate));
        let data = vx
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * scale } else { E::zero() })
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask, scale }))
    }

    /// Adds i.i.d. N(0, sigma^2) in train mode; the gradient passes through
    /// unchanged because the noise is constant within one forward pass.
    pub fn gaussian_noise(
        &mut self,
        x: NodeId,
        sigma: f64,
        mode: Mode,
        rng: &mut RngState,
    ) -> Result<NodeId> {
        if sigma < 0.0 {
            return Err(TensorError::InvalidArg {
                op: "gaussian_noise",
                message: format!("sigma {sigma} must be >= 0"),
            });
        }
        let vx = &self.values[x.0];
        if mode == Mode::Eval || sigma == 0.0 {
            let out = vx.clone();
            return Ok(self.push(out, Op::GaussianNoise { x }));
        }
        let data = vx
            .data()
            .iter()
            .map(|&v| v + E::from_f64(sigma * rng.next_normal()))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::GaussianNoise { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.values[x.0].reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut acc = E::zero();
        for &v in self.values[x.0].data() {
            acc = acc + v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll { x })
    }

    /// Mean binary cross-entropy, probabilities clipped to
    /// [[`BCE_EPS`], 1 - [`BCE_EPS`]] before the logs.
    pub fn bce_loss(&mut self, probs: NodeId, targets: NodeId) -> Result<NodeId> {
        let (vp, vy) = (&self.values[probs.0], &self.values[targets.0]);
        if vp.shape() != vy.shape() {
            return Err(TensorError::Incompatible {
                op: "bce_loss",
                message: format!("probs {:?} vs targets {:?}", vp.shape(), vy.shape()),
            });
        }
        for (i, &y) in vy.data().iter().enumerate() {
            if y != E::zero() && y != E::one() {
                return Err(TensorError::InvalidArg {
                    op: "bce_loss",
                    message: format!("target at flat index {i} is {y}, expected 0 or 1"),
                });
            }
        }
        let lo = E::from_f64(BCE_EPS);
        let hi = E::one() - lo;
        let clipped: Vec<E> = vp
            .data()
            .iter()
            .map(|&p| if p < lo { lo } else if p > hi { hi } else { p })
            .collect();
        let mut acc = E::zero();
        for (&p, &y) in clipped.iter().zip(vy.data()) {
            acc = acc - (y * p.ln() + (E::one() - y) * (E::one() - p).ln());
        }
        let loss = acc * E::from_f64(1.0 / vp.numel() as f64);
        Ok(self.push(Tensor::scalar(loss), Op::BceLoss { probs, targets, clipped }))
    }

    /// Reverse accumulation from a scalar root. Every node reachable from
    /// the root receives its total gradient; unreachable nodes keep zeros.
    /// Each call works in a fresh workspace and then adds into the stored
    /// gradients, so repeated calls without reset accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::InvalidArg {
                op: "backward",
                message: format!(
                    "root must be scalar, got shape {:?}",
                    self.values[loss.0].shape()
                ),
            });
        }
        let mut work: Vec<Option<Tensor<E>>> = vec![None; self.values.len()];
        let values = &self.values;
        let accumulate = |work: &mut Vec<Option<Tensor<E>>>, id: NodeId, delta: &[E]| {
            let g = work[id.0].get_or_insert_with(|| Tensor::zeros(values[id.0].shape()));
            for (a, &d) in g.data_mut().iter_mut().zip(delta) {
                *a = *a + d;
            }
        };
        accumulate(&mut work, loss, &[E::one()]);
        for i in (0..self.ops.len()).rev() {
            // Ops recorded after the root cannot influence it.
            if i > loss.0 {
                continue;
            }
            let Some(g) = work[i].clone() else { continue };
            let g = g.into_data();
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut work, a, &g);
                    accumulate(&mut work, b, &g);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da: Vec<E> =
                        g.iter().zip(self.values[b.0].data()).map(|(&gv, &bv)| gv * bv).collect();
                    let db: Vec<E> =
                        g.iter().zip(self.values[a.0].data()).map(|(&gv, &av)| gv * av).collect();
                    accumulate(&mut work, a, &da);
                    accumulate(&mut work, b, &db);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let dx: Vec<E> = g
                        .iter()
                        .zip(self.values[x.0].data())
                        .map(|(&gv, &xv)| if xv > E::zero() { gv } else { E::zero() })
                        .collect();
                    accumulate(&mut work, x, &dx);
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let dx: Vec<E> = g
                        .iter()
                        .zip(self.values[i].data())
                        .map(|(&gv, &s)| gv * s * (E::one() - s))
                        .collect();
                    accumulate(&mut work, x, &dx);
                }
                Op::Dense { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xs = self.values[x.0].shape().to_vec();
                    let (n, d, k) = (xs[0], xs[1], self.values[w.0].shape()[1]);
                    let xv = self.values[x.0].data();
                    let wv = self.values[w.0].data();
                    let mut dx = vec![E::zero(); n * d];
                    let mut dw = vec![E::zero(); d * k];
                    let mut db = vec![E::zero(); k];
                    for i in 0..n {
                        let grow = &g[i * k..(i + 1) * k];
                        for (dbv, &gv) in db.iter_mut().zip(grow) {
                            *dbv = *dbv + gv;
                        }
                        for j in 0..d {
                            let wrow = &wv[j * k..(j + 1) * k];
                            let mut acc = E::zero();
                            for (&gv, &wvv) in grow.iter().zip(wrow) {
                                acc = acc + gv * wvv;
                            }
                            dx[i * d + j] = acc;
                            let xvv = xv[i * d + j];
                            for (dwv, &gv) in dw[j * k..(j + 1) * k].iter_mut().zip(grow) {
                                *dwv = *dwv + xvv * gv;
                            }
                        }
                    }
                    accumulate(&mut work, x, &dx);
                    accumulate(&mut work, w, &dw);
                    accumulate(&mut work, b, &db);
                }
                Op::Conv2d { input, kernel, bias, geom } => {
                    let (input, kernel, bias, geom) = (*input, *kernel, *bias, *geom);
                    let out_shape = self.values[i].shape().to_vec();
                    let (di, dk, db) = conv2d_backward(
                        &self.values[input.0],
                        &self.values[kernel.0],
                        &g,
                        &out_shape,
                        geom,
                    );
                    accumulate(&mut work, input, di.data());
                    accumulate(&mut work, kernel, dk.data());
                    accumulate(&mut work, bias, db.data());
                }
                Op::ConcatChannels { a, b } => {
                    let (a, b) = (*a, *b);
                    let sa = self.values[a.0].shape().to_vec();
                    let sb = self.values[b.0].shape().to_vec();
                    let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                    let mut da = vec![E::zero(); n * ca * plane];
                    let mut db = vec![E::zero(); n * cb * plane];
                    let stride = (ca + cb) * plane;
                    for i in 0..n {
                        da[i * ca * plane..(i + 1) * ca * plane]
                            .copy_from_slice(&g[i * stride..i * stride + ca * plane]);
                        db[i * cb * plane..(i + 1) * cb * plane]
                            .copy_from_slice(&g[i * stride + ca * plane..(i + 1) * stride]);
                    }
                    accumulate(&mut work, a, &da);
                    accumulate(&mut work, b, &db);
                }
                Op::GlobalAvgPool { x } => {
                    let x = *x;
                    let s = self.values[x.0].shape().to_vec();
                    let plane = s[2] * s[3];
                    let inv = E::from_f64(1.0 / plane as f64);
                    let mut dx = vec![E::zero(); s.iter().product()];
                    for (i, &gv) in g.iter().enumerate() {
                        let gs = gv * inv;
                        for v in dx[i * plane..(i + 1) * plane].iter_mut() {
                            *v = gs;
                        }
                    }
                    accumulate(&mut work, x, &dx);
                }
                Op::SpatialDropout { x, mask, scale } => {
                    let (x, scale) = (*x, *scale);
                    let plane = {
                        let s = self.values[x.0].shape();
                        s[2] * s[3]
                    };
                    let mut dx = vec![E::zero(); self.values[x.0].numel()];
                    for (i, keep) in mask.clone().into_iter().enumerate() {
                        if keep {
                            for (d, &gv) in
                                dx[i * plane..(i + 1) * plane].iter_mut().zip(&g[i * plane..])
                            {
                                *d = gv * scale;
                            }
                        }
                    }
                    accumulate(&mut work, x, &dx);
                }
                Op::Dropout { x, mask, scale } => {
                    let (x, scale) = (*x, *scale);
                    let dx: Vec<E> = g
                        .iter()
                        .zip(mask.clone())
                        .map(|(&gv, keep)| if keep { gv * scale } else { E::zero() })
                        .collect();
                    accumulate(&mut work, x, &dx);
                }
                Op::GaussianNoise { x } | Op::Reshape { x } => {
                    let x = *x;
                    accumulate(&mut work, x, &g);
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let dx = vec![g[0]; self.values[x.0].numel()];
                    accumulate(&mut work, x, &dx);
                }
                Op::BceLoss { probs, targets, clipped } => {
                    let probs_id = *probs;
                    let y = self.values[targets.0].data().to_vec();
                    let inv_n = E::from_f64(1.0 / clipped.len() as f64);
                    let lo = E::from_f64(BCE_EPS);
                    let hi = E::one() - lo;
                    let raw = self.values[probs_id.0].data();
                    let dp: Vec<E> = clipped
                        .iter()
                        .zip(raw)
                        .zip(&y)
                        .map(|((&p, &praw), &yv)| {
                            // Clipped probabilities sit on a flat of the clip,
                            // so their gradient is zero.
                            if praw < lo || praw > hi {
                                E::zero()
                            } else {
                                g[0] * inv_n * ((E::one() - yv) / (E::one() - p) - yv / p)
                            }
                        })
                        .collect();
                    accumulate(&mut work, probs_id, &dp);
                }
            }
        }
        for (slot, fresh) in self.grads.iter_mut().zip(work) {
            match (slot.as_mut(), fresh) {
                (Some(total), Some(delta)) => {
                    for (a, &d) in total.data_mut().iter_mut().zip(delta.data()) {
                        *a = *a + d;
                    }
                }
                (None, Some(delta)) => *slot = Some(delta),
                _ => {}
            }
        }
        Ok(())
    }
}

fn check_rate(op: &'static str, rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidArg {
            op,
            message: format!("rate {rate} must be in [0, 1)"),
        });
    }
    Ok(())
}

/// Output row range for one kernel tap so that the sampled input index
/// stays inside [0, extent).
#[inline]
fn tap_range(extent_in: usize, extent_out: usize, tap_off: usize, pad: usize, stride: usize) -> (usize, usize) {
    let shift = tap_off as isize - pad as isize;
    let lo = if shift < 0 {
        (((-shift) as usize) + stride - 1) / stride
    } else {
        0
    };
    let hi_num = extent_in as isize - 1 - shift;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(extent_out);
    (lo.min(hi), hi)
}

fn conv2d_forward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    geom: ConvGeom,
    out_h: usize,
    out_w: usize,
) -> Tensor<E> {
    let is = input.shape();
    let ks = kernel.shape();
    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    let ConvGeom { stride, dilation, pad_h, pad_w } = geom;
    let out_shape = [n, f, out_h, out_w];
    let mut out = vec![E::zero(); n * f * out_h * out_w];
    let iv = input.data();
    let kv = kernel.data();
    let bv = bias.data();

    for ni in 0..n {
        for fi in 0..f {
            let ob = nchw_index(&out_shape, ni, fi, 0, 0);
            let bval = bv[fi];
            for v in out[ob..ob + out_h * out_w].iter_mut() {
                *v = bval;
            }
            for ci in 0..c {
                let ib = nchw_index(is, ni, ci, 0, 0);
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = tap_range(h, out_h, ky * dilation, pad_h, stride);
                    for kx in 0..kw {
                        let wt = kv[((fi * c + ci) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = tap_range(w, out_w, kx * dilation, pad_w, stride);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let x_shift = kx as isize * dilation as isize - pad_w as isize;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride + ky * dilation - pad_h) as usize;
                            let in_row = ib + iy * w;
                            let out_row = ob + oy * out_w;
                            if stride == 1 {
                                let src0 = (in_row as isize + ox_lo as isize + x_shift) as usize;
                                let src = &iv[src0..src0 + (ox_hi - ox_lo)];
                                let dst = &mut out[out_row + ox_lo..out_row + ox_hi];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d = *d + wt * s;
                                }
                            } else {
                                let mut ix = (ox_lo * stride) as isize + x_shift;
                                for ox in ox_lo..ox_hi {
                                    out[out_row + ox] =
                                        out[out_row + ox] + wt * iv[(in_row as isize + ix) as usize];
                                    ix += stride as isize;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv output shape")
}

fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    g: &[E],
    out_shape: &[usize],
    geom: ConvGeom,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let is = input.shape();
    let ks = kernel.shape();
    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
    let (out_h, out_w) = (out_shape[2], out_shape[3]);
    let ConvGeom { stride, dilation, pad_h, pad_w } = geom;
    let iv = input.data();
    let kv = kernel.data();
    let mut d_in = vec![E::zero(); iv.len()];
    let mut d_k = vec![E::zero(); kv.len()];
    let mut d_b = vec![E::zero(); f];

    for ni in 0..n {
        for fi in 0..f {
            let ob = nchw_index(out_shape, ni, fi, 0, 0);
            let mut bacc = E::zero();
            for &gv in &g[ob..ob + out_h * out_w] {
                bacc = bacc + gv;
            }
            d_b[fi] = d_b[fi] + bacc;
            for ci in 0..c {
                let ib = nchw_index(is, ni, ci, 0, 0);
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = tap_range(h, out_h, ky * dilation, pad_h, stride);
                    for kx in 0..kw {
                        let kidx = ((fi * c + ci) * kh + ky) * kw + kx;
                        let wt = kv[kidx];
                        let (ox_lo, ox_hi) = tap_range(w, out_w, kx * dilation, pad_w, stride);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let x_shift = kx as isize * dilation as isize - pad_w as isize;
                        let mut wacc = E::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride + ky * dilation - pad_h) as usize;
                            let in_row = ib + iy * w;
                            let out_row = ob + oy * out_w;
                            if stride == 1 {
                                let src0 = (in_row as isize + ox_lo as isize + x_shift) as usize;
                                let grow = &g[out_row + ox_lo..out_row + ox_hi];
                                let irow = &iv[src0..src0 + (ox_hi - ox_lo)];
                                let drow = &mut d_in[src0..src0 + (ox_hi - ox_lo)];
                                for ((&gv, &xv), dv) in grow.iter().zip(irow).zip(drow.iter_mut()) {
                                    wacc = wacc + gv * xv;
                                    *dv = *dv + wt * gv;
                                }
                            } else {
                                let mut ix = (ox_lo * stride) as isize + x_shift;
                                for ox in ox_lo..ox_hi {
                                    let gv = g[out_row + ox];
                                    let src = (in_row as isize + ix) as usize;
                                    wacc = wacc + gv * iv[src];
                                    d_in[src] = d_in[src] + wt * gv;
                                    ix += stride as isize;
                                }
                            }
                        }
                        d_k[kidx] = d_k[kidx] + wacc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(is.to_vec(), d_in).expect("d_input shape"),
        Tensor::new(ks.to_vec(), d_k).expect("d_kernel shape"),
        Tensor::new(vec![f], d_b).expect("d_bias shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor4(n: usize, c: usize, h: usize, w: usize, rng: &mut RngState) -> Tensor<f64> {
        let data = (0..n * c * h * w).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    /// Direct sliding-window cross-correlation, no dilation support.
    /// Independent oracle for conv2d at dilation 1, valid padding.
    fn conv_oracle(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: &[f64],
        stride: usize,
    ) -> Vec<f64> {
        let is = input.shape();
        let ks = kernel.shape();
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[fi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy * stride + ky;
                                    let ix = ox * stride + kx;
                                    acc += input.data()[nchw_index(is, ni, ci, iy, ix)]
                                        * kernel.data()[((fi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = RngState::new(1);
        let x = tensor4(1, 1, 5, 5, &mut rng);
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let ki = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let bi = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(xi, ki, bi, 1, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        let mut rng = RngState::new(2);
        let x = tensor4(1, 1, 6, 6, &mut rng);
        let k = Tensor::new(vec![1, 1, 3, 3], (0..9).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .unwrap();
        let bias = vec![0.3];
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let ki = g.leaf(k.clone());
        let bi = g.leaf(Tensor::new(vec![1], bias.clone()).unwrap());
        let y = g.conv2d(xi, ki, bi, 1, 1, Padding::Valid).unwrap();
        let expect = conv_oracle(&x, &k, &bias, 1);
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    /// Insert zeros between kernel taps: 3x3 at dilation 2 becomes 5x5 at
    /// dilation 1 with identical nonzero taps.
    fn zero_insert_kernel<E: Element>(k: &Tensor<E>, dilation: usize) -> Tensor<E> {
        let ks = k.shape();
        let (f, c, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        let nh = (kh - 1) * dilation + 1;
        let nw = (kw - 1) * dilation + 1;
        let mut out = vec![E::zero(); f * c * nh * nw];
        for fi in 0..f {
            for ci in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        out[((fi * c + ci) * nh + ky * dilation) * nw + kx * dilation] =
                            k.data()[((fi * c + ci) * kh + ky) * kw + kx];
                    }
                }
            }
        }
        Tensor::new(vec![f, c, nh, nw], out).unwrap()
    }

    #[test]
    fn dilation_equals_zero_inserted_kernel_bitexact() {
        let mut rng = RngState::new(3);
        for trial in 0..20 {
            let x32: Tensor<f32> = tensor4(1, 2, 9, 9, &mut rng).cast();
            let kdata: Vec<f32> =
                (0..1 * 2 * 3 * 3).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect();
            let k = Tensor::new(vec![1, 2, 3, 3], kdata).unwrap();
            let b = Tensor::new(vec![1], vec![0.1f32]).unwrap();
            let mut g = Graph::new();
            let xi = g.leaf(x32.clone());
            let ki = g.leaf(k.clone());
            let bi = g.leaf(b.clone());
            let dilated = g.conv2d(xi, ki, bi, 1, 2, Padding::Valid).unwrap();
            let kz = zero_insert_kernel(&k, 2);
            let kzi = g.leaf(kz);
            let bzi = g.leaf(b);
            let plain = g.conv2d(xi, kzi, bzi, 1, 1, Padding::Valid).unwrap();
            assert_eq!(g.value(dilated).shape(), g.value(plain).shape());
            for (a, b) in g.value(dilated).data().iter().zip(g.value(plain).data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "trial {trial}");
            }
        }
    }

    #[test]
    fn concat_shapes_and_backward() {
        let mut rng = RngState::new(4);
        let a = tensor4(1, 2, 2, 2, &mut rng);
        let b = tensor4(1, 3, 2, 2, &mut rng);
        let mut g = Graph::new();
        let ai = g.leaf(a.clone());
        let bi = g.leaf(b.clone());
        let c = g.concat_channels(ai, bi).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 5, 2, 2]);
        // First Ca channels recover a exactly.
        assert_eq!(&g.value(c).data()[..8], a.data());
        let s = g.sum_all(c);
        g.backward(s).unwrap();
        assert!(g.grad(ai).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(bi).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gap_of_constant_map() {
        let x = Tensor::<f64>::filled(&[2, 3, 4, 4], 7.0);
        let mut g = Graph::new();
        let xi = g.leaf(x);
        let y = g.global_avg_pool(xi).unwrap();
        assert_eq!(y_data(&g, y), vec![7.0; 6]);
    }

    fn y_data(g: &Graph<f64>, id: NodeId) -> Vec<f64> {
        g.value(id).data().to_vec()
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn dense_matches_hand_matmul() {
        // x: [[1,2,3],[4,5,6]], w: [[0.5],[-1],[2]], b: [0.25]
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.25]).unwrap();
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.leaf(x), g.leaf(w), g.leaf(b));
        let y = g.dense(xi, wi, bi).unwrap();
        // Row 0: 0.5 - 2 + 6 + 0.25 = 4.75; row 1: 2 - 5 + 12 + 0.25 = 9.25
        assert_eq!(y_data(&g, y), vec![4.75, 9.25]);
    }

    #[test]
    fn spatial_dropout_identity_cases() {
        let mut rng = RngState::new(5);
        let x = tensor4(2, 4, 3, 3, &mut rng);
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let eval = g.spatial_dropout(xi, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(eval).data(), x.data());
        let zero_rate = g.spatial_dropout(xi, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(zero_rate).data(), x.data());
        assert!(g.spatial_dropout(xi, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn spatial_dropout_channel_frequency() {
        let rate = 0.2;
        let mut rng = RngState::new(6);
        let x = Tensor::<f64>::filled(&[1, 4, 2, 2], 1.0);
        let mut dropped = [0usize; 4];
        let trials = 10_000;
        for _ in 0..trials {
            let mut g = Graph::new();
            let xi = g.leaf(x.clone());
            let y = g.spatial_dropout(xi, rate, Mode::Train, &mut rng).unwrap();
            for c in 0..4 {
                if g.value(y).data()[c * 4] == 0.0 {
                    dropped[c] += 1;
                }
            }
        }
        for (c, &d) in dropped.iter().enumerate() {
            let freq = d as f64 / trials as f64;
            assert!((freq - rate).abs() < 0.02, "channel {c}: {freq}");
        }
    }

    #[test]
    fn gaussian_noise_identity_and_std() {
        let mut rng = RngState::new(7);
        let x = Tensor::<f64>::zeros(&[1, 1, 100, 100]);
        let mut g = Graph::new();
        let xi = g.leaf(x.clone());
        let eval = g.gaussian_noise(xi, 1.0, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(eval).data(), x.data());
        let zero_sigma = g.gaussian_noise(xi, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(zero_sigma).data(), x.data());
        assert!(g.gaussian_noise(xi, -0.1, Mode::Train, &mut rng).is_err());

        // Sample std over 1e6 draws within 0.01 of sigma = 1.
        let big = Tensor::<f64>::zeros(&[1, 1, 1000, 1000]);
        let mut g = Graph::new();
        let bi = g.leaf(big);
        let noisy = g.gaussian_noise(bi, 1.0, Mode::Train, &mut rng).unwrap();
        let data = g.value(noisy).data();
        let n = data.len() as f64;
        let mean: f64 = data.iter().sum::<f64>() / n;
        let var: f64 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!((var.sqrt() - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn bce_values() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![1, 1], vec![1.0 - BCE_EPS]).unwrap());
        let y = g.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let loss = g.bce_loss(p, y).unwrap();
        assert!(g.value(loss).item() <= 2e-7);

        let p = g.leaf(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let loss = g.bce_loss(p, y).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let bad = g.leaf(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        assert!(g.bce_loss(p, bad).is_err());
    }

    #[test]
    fn bce_gradient_matches_central_difference() {
        let probs = [0.2, 0.7, 0.45, 0.99];
        let targets = [1.0, 0.0, 1.0, 1.0];
        let eval = |p: &[f64]| {
            let mut g: Graph<f64> = Graph::new();
            let pi = g.leaf(Tensor::new(vec![4, 1], p.to_vec()).unwrap());
            let yi = g.leaf(Tensor::new(vec![4, 1], targets.to_vec()).unwrap());
            let l = g.bce_loss(pi, yi).unwrap();
            g.value(l).item()
        };
        let mut g: Graph<f64> = Graph::new();
        let pi = g.leaf(Tensor::new(vec![4, 1], probs.to_vec()).unwrap());
        let yi = g.leaf(Tensor::new(vec![4, 1], targets.to_vec()).unwrap());
        let l = g.bce_loss(pi, yi).unwrap();
        g.backward(l).unwrap();
        let analytic = g.grad(pi).unwrap().data().to_vec();
        let h = 1e-6;
        for i in 0..4 {
            let mut hi = probs;
            let mut lo = probs;
            hi[i] += h;
            lo[i] -= h;
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs());
            assert!(rel < 1e-6, "i={i} analytic {} fd {fd}", analytic[i]);
        }
    }

    #[test]
    fn backward_square_and_unreachable() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let orphan = g.leaf(Tensor::scalar(11.0));
        let z = g.relu(orphan);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
        assert!(g.grad(orphan).is_none());
        assert_eq!(g.grad_or_zeros(z).item(), 0.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
    }

    #[test]
    fn elementwise_commutes_with_reshape() {
        let mut rng = RngState::new(8);
        let x = tensor4(1, 2, 3, 4, &mut rng);
        let mut g = Graph::new();
        let xi = g.leaf(x);
        let r = g.reshape(xi, vec![6, 4]).unwrap();
        let a = g.relu(r);
        let b = g.relu(xi);
        let br = g.reshape(b, vec![6, 4]).unwrap();
        assert_eq!(g.value(a).data(), g.value(br).data());
        let s1 = g.sigmoid(r);
        let s2 = g.sigmoid(xi);
        assert_eq!(g.value(s1).data(), g.value(s2).data());
    }

    #[test]
    fn conv_shape_errors_name_dimensions() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 3, 6, 6]));
        let k = g.leaf(Tensor::zeros(&[2, 4, 3, 3]));
        let b = g.leaf(Tensor::zeros(&[2]));
        let err = g.conv2d(x, k, b, 1, 1, Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
        // Effective extent larger than the unpadded input.
        let k2 = g.leaf(Tensor::zeros(&[2, 3, 4, 4]));
        let b2 = g.leaf(Tensor::zeros(&[2]));
        assert!(g.conv2d(x, k2, b2, 1, 2, Padding::Valid).is_err());
    }

    #[test]
    fn same_padding_output_sizes() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 7, 7]));
        let k = g.leaf(Tensor::zeros(&[1, 1, 5, 5]));
        let b = g.leaf(Tensor::zeros(&[1]));
        let y = g.conv2d(x, k, b, 1, 2, Padding::Same).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 7, 7]);
        let y2 = g.conv2d(x, k, b, 2, 1, Padding::Same).unwrap();
        assert_eq!(g.value(y2).shape(), &[1, 1, 4, 4]);
    }
}
