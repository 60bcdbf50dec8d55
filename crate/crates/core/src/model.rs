//! A tiny per-pixel segmentation network with hand-written backpropagation.
//!
//! ```text
//! image (3) -> conv3x3 -> ReLU -> conv3x3 -> ReLU -> features (F) -> conv1x1 -> logits (K)
//! ```
//!
//! Both 3×3 convolutions use zero "same" padding. Parameters live in one flat
//! [`ParamVector`] laid out as `w1, b1, w2, b2, w_head, b_head`, with 3×3 kernels
//! stored `[tap][in][out]` (tap = `dy * 3 + dx`) and the head stored `[in][out]`.

use alloc::vec;

use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::pseudolabel::ParamVector;
use crate::tensor::{FeatureMap, ImageTensor, LogitMap, PixelMap};
use crate::Rng;

pub const DEFAULT_FEATURES: usize = 8;

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub features: usize,
    pub outputs: usize,
}

impl Layout {
    const IN: usize = ImageTensor::CHANNELS;

    pub fn w1(&self) -> core::ops::Range<usize> {
        0..9 * Self::IN * self.features
    }

    pub fn b1(&self) -> core::ops::Range<usize> {
        let s = self.w1().end;
        s..s + self.features
    }

    pub fn w2(&self) -> core::ops::Range<usize> {
        let s = self.b1().end;
        s..s + 9 * self.features * self.features
    }

    pub fn b2(&self) -> core::ops::Range<usize> {
        let s = self.w2().end;
        s..s + self.features
    }

    pub fn w_head(&self) -> core::ops::Range<usize> {
        let s = self.b2().end;
        s..s + self.features * self.outputs
    }

    pub fn b_head(&self) -> core::ops::Range<usize> {
        let s = self.w_head().end;
        s..s + self.outputs
    }

    pub fn len(&self) -> usize {
        self.b_head().end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    layout: Layout,
    params: ParamVector,
}

/// Fixed affine map applied to every input channel before the first layer.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_SCALE: f64 = 0.25;

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    input: PixelMap,
    hidden: PixelMap,
    pub features: FeatureMap,
    pub logits: LogitMap,
}

impl SegNet {
    /// Fresh network with every block drawn uniform in `±1/sqrt(fan_in)`.
    pub fn new(features: usize, outputs: usize, rng: &mut Rng) -> Result<Self> {
        let layout = Self::check_layout(features, outputs)?;
        let mut params = ParamVector::zeros(layout.len());
        let p = params.as_mut_slice();
        let blocks = [
            (layout.w1(), 9 * Layout::IN),
            (layout.b1(), 9 * Layout::IN),
            (layout.w2(), 9 * features),
            (layout.b2(), 9 * features),
            (layout.w_head(), features),
            (layout.b_head(), features),
        ];
        for (range, fan_in) in blocks {
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            for v in &mut p[range] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { layout, params })
    }

    pub fn from_params(features: usize, outputs: usize, params: ParamVector) -> Result<Self> {
        let layout = Self::check_layout(features, outputs)?;
        if params.len() != layout.len() {
            return Err(Error::LengthMismatch {
                what: "network parameters",
                expected: layout.len(),
                found: params.len(),
            });
        }
        if !params.is_finite() {
            return Err(Error::NonFinite {
                what: "network parameters",
            });
        }
        Ok(Self { layout, params })
    }

    fn check_layout(features: usize, outputs: usize) -> Result<Layout> {
        if features == 0 {
            return Err(invalid("features", "must be at least 1"));
        }
        if outputs < 2 {
            return Err(invalid("outputs", "need at least two heads"));
        }
        Ok(Layout { features, outputs })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn num_features(&self) -> usize {
        self.layout.features
    }

    pub fn num_outputs(&self) -> usize {
        self.layout.outputs
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        *self = Self::from_params(self.layout.features, self.layout.outputs, params)?;
        Ok(())
    }

    pub fn forward(&self, image: &ImageTensor) -> Forward {
        let (h, w) = image.dims();
        let p = self.params.as_slice();
        let l = self.layout;
        let centred = image.data().iter().map(|v| (v - INPUT_MEAN) / INPUT_SCALE).collect();
        let input = PixelMap::new(h, w, Layout::IN, centred).expect("image data has three channels");
        let mut hidden = conv3x3(&input, &p[l.w1()], &p[l.b1()], l.features);
        relu(&mut hidden);
        let mut features = conv3x3(&hidden, &p[l.w2()], &p[l.b2()], l.features);
        relu(&mut features);
        let logits = conv1x1(&features, &p[l.w_head()], &p[l.b_head()], l.outputs);
        Forward {
            input,
            hidden,
            features,
            logits,
        }
    }

    /// Accumulates parameter gradients into `grads` given upstream gradients
    /// w.r.t. the logits and/or the feature map of `fwd`.
    pub fn backward(
        &self,
        fwd: &Forward,
        d_logits: Option<&PixelMap>,
        d_features: Option<&PixelMap>,
        grads: &mut ParamVector,
    ) -> Result<()> {
        if grads.len() != self.layout.len() {
            return Err(Error::LengthMismatch {
                what: "gradient buffer",
                expected: self.layout.len(),
                found: grads.len(),
            });
        }
        let l = self.layout;
        let p = self.params.as_slice();
        let (h, w) = fwd.features.dims();
        let mut d_feat = match d_features {
            Some(g) => {
                check_map("feature gradient", g, h, w, l.features)?;
                g.clone()
            }
            None => PixelMap::zeros(h, w, l.features),
        };
        let g = grads.as_mut_slice();
        if let Some(d_logits) = d_logits {
            check_map("logit gradient", d_logits, h, w, l.outputs)?;
            let (gw, rest) = g[l.w_head().start..].split_at_mut(l.features * l.outputs);
            let gb = &mut rest[..l.outputs];
            conv1x1_backward(
                &fwd.features,
                d_logits,
                &p[l.w_head()],
                gw,
                gb,
                &mut d_feat,
            );
        }
        relu_backward(&fwd.features, &mut d_feat);

        let mut d_hidden = PixelMap::zeros(h, w, l.features);
        {
            let (gw, rest) = g[l.w2().start..].split_at_mut(l.w2().len());
            conv3x3_backward(&fwd.hidden, &d_feat, &p[l.w2()], gw, &mut rest[..l.features], Some(&mut d_hidden));
        }
        relu_backward(&fwd.hidden, &mut d_hidden);
        let (gw, rest) = g[l.w1().start..].split_at_mut(l.w1().len());
        conv3x3_backward(&fwd.input, &d_hidden, &p[l.w1()], gw, &mut rest[..l.features], None);
        Ok(())
    }
}

fn check_map(what: &'static str, m: &PixelMap, h: usize, w: usize, c: usize) -> Result<()> {
    if m.dims() != (h, w) || m.channels() != c {
        return Err(Error::LengthMismatch {
            what,
            expected: h * w * c,
            found: m.data().len(),
        });
    }
    Ok(())
}

fn relu(m: &mut PixelMap) {
    for v in m.data_mut() {
        *v = v.max(0.0);
    }
}

fn relu_backward(activated: &PixelMap, grad: &mut PixelMap) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Valid `(tap, neighbour index)` pairs around pixel `(r, c)`.
fn taps(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..9).filter_map(move |tap| {
        let rr = r as isize + (tap / 3) as isize - 1;
        let cc = c as isize + (tap % 3) as isize - 1;
        (rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w)
            .then(|| (tap, rr as usize * w + cc as usize))
    })
}

fn conv3x3(input: &PixelMap, weights: &[f64], bias: &[f64], out_ch: usize) -> PixelMap {
    let (h, w) = input.dims();
    let in_ch = input.channels();
    let mut out = PixelMap::zeros(h, w, out_ch);
    let src = input.data();
    for r in 0..h {
        for c in 0..w {
            let dst = out.pixel_mut(r * w + c);
            dst.copy_from_slice(bias);
            for (tap, q) in taps(r, c, h, w) {
                let x = &src[q * in_ch..(q + 1) * in_ch];
                let wt = &weights[tap * in_ch * out_ch..(tap + 1) * in_ch * out_ch];
                for (&xv, wrow) in x.iter().zip(wt.chunks_exact(out_ch)) {
                    if xv == 0.0 {
                        continue;
                    }
                    for (d, &wv) in dst.iter_mut().zip(wrow) {
                        *d += xv * wv;
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_backward(
    input: &PixelMap,
    d_out: &PixelMap,
    weights: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut PixelMap>,
) {
    let (h, w) = input.dims();
    let in_ch = input.channels();
    let out_ch = d_out.channels();
    let src = input.data();
    for r in 0..h {
        for c in 0..w {
            let g = d_out.pixel(r * w + c);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (b, &gv) in d_bias.iter_mut().zip(g) {
                *b += gv;
            }
            for (tap, q) in taps(r, c, h, w) {
                let block = tap * in_ch * out_ch..(tap + 1) * in_ch * out_ch;
                let x = &src[q * in_ch..(q + 1) * in_ch];
                for (&xv, dw) in x.iter().zip(d_weights[block.clone()].chunks_exact_mut(out_ch)) {
                    if xv == 0.0 {
                        continue;
                    }
                    for (d, &gv) in dw.iter_mut().zip(g) {
                        *d += xv * gv;
                    }
                }
                if let Some(d_in) = d_input.as_deref_mut() {
                    let di = d_in.pixel_mut(q);
                    for (d, wrow) in di.iter_mut().zip(weights[block].chunks_exact(out_ch)) {
                        *d += wrow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
}

fn conv1x1(input: &PixelMap, weights: &[f64], bias: &[f64], out_ch: usize) -> PixelMap {
    let (h, w) = input.dims();
    let mut out = PixelMap::zeros(h, w, out_ch);
    for (x, dst) in input.rows().zip(out.data_mut().chunks_exact_mut(out_ch)) {
        dst.copy_from_slice(bias);
        for (&xv, wrow) in x.iter().zip(weights.chunks_exact(out_ch)) {
            for (d, &wv) in dst.iter_mut().zip(wrow) {
                *d += xv * wv;
            }
        }
    }
    out
}

fn conv1x1_backward(
    input: &PixelMap,
    d_out: &PixelMap,
    weights: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    d_input: &mut PixelMap,
) {
    let out_ch = d_out.channels();
    let in_ch = input.channels();
    for (j, g) in d_out.rows().enumerate() {
        for (b, &gv) in d_bias.iter_mut().zip(g) {
            *b += gv;
        }
        let x = input.pixel(j);
        for (&xv, dw) in x.iter().zip(d_weights.chunks_exact_mut(out_ch)) {
            for (d, &gv) in dw.iter_mut().zip(g) {
                *d += xv * gv;
            }
        }
        let di = d_input.pixel_mut(j);
        for (d, wrow) in di[..in_ch].iter_mut().zip(weights.chunks_exact(out_ch)) {
            *d += wrow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// Momentum buffer for [`sgd_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: ParamVector,
}

impl SgdState {
    pub fn new(len: usize) -> Self {
        Self {
            velocity: ParamVector::zeros(len),
        }
    }
}

/// `v = momentum * v + g; params -= lr * v`, in place.
pub fn sgd_step_in_place(
    params: &mut ParamVector,
    grads: &ParamVector,
    lr: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<()> {
    for (what, len) in [("gradients", grads.len()), ("velocity", state.velocity.len())] {
        if len != params.len() {
            return Err(Error::LengthMismatch {
                what,
                expected: params.len(),
                found: len,
            });
        }
    }
    for ((p, &g), v) in params
        .as_mut_slice()
        .iter_mut()
        .zip(grads.as_slice())
        .zip(state.velocity.as_mut_slice())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

pub fn sgd_step(
    params: &ParamVector,
    grads: &ParamVector,
    lr: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<ParamVector> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grads, lr, momentum, state)?;
    Ok(out)
}

/// Gradient of `sum(d_logits ⊙ logits) + sum(d_features ⊙ features)` for one image,
/// as a fresh vector. Convenience for tests and single-image callers.
pub fn param_gradient(
    net: &SegNet,
    fwd: &Forward,
    d_logits: Option<&PixelMap>,
    d_features: Option<&PixelMap>,
) -> Result<ParamVector> {
    let mut g = ParamVector(vec![0.0; net.layout().len()]);
    net.backward(fwd, d_logits, d_features, &mut g)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(rng: &mut Rng, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(h, w, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn layout_counts() {
        let l = Layout {
            features: 4,
            outputs: 5,
        };
        assert_eq!(l.len(), 9 * 3 * 4 + 4 + 9 * 16 + 4 + 20 + 5);
        assert_eq!(l.b_head().end, l.len());
    }

    #[test]
    fn zero_net_zero_image() {
        let net = SegNet::from_params(4, 3, ParamVector::zeros(Layout { features: 4, outputs: 3 }.len())).unwrap();
        let out = net.forward(&ImageTensor::zeros(5, 6));
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.logits.dims(), (5, 6));
        assert_eq!(out.logits.channels(), 3);
        assert_eq!(out.features.channels(), 4);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = crate::rng_from_seed(1);
        let net = SegNet::new(6, 5, &mut rng).unwrap();
        let img = image(&mut rng, 7, 9);
        let a = net.forward(&img);
        let b = net.forward(&img);
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let net = SegNet::new(8, 5, &mut crate::rng_from_seed(0)).unwrap();
        let p = net.params().as_slice();
        let l = net.layout();
        assert!(p[l.w1()].iter().all(|v| v.abs() < 1.0 / 27f64.sqrt()));
        assert!(p[l.w2()].iter().all(|v| v.abs() < 1.0 / 72f64.sqrt()));
        assert!(p[l.w_head()].iter().all(|v| v.abs() < 1.0 / 8f64.sqrt()));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(SegNet::from_params(4, 3, ParamVector::zeros(3)).is_err());
        assert!(SegNet::new(0, 3, &mut crate::rng_from_seed(0)).is_err());
        assert!(SegNet::new(4, 1, &mut crate::rng_from_seed(0)).is_err());
    }

    /// Finite-difference check of a linear functional of logits and features.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = crate::rng_from_seed(77);
        let net = SegNet::new(3, 4, &mut rng).unwrap();
        let img = image(&mut rng, 5, 5);
        let fwd = net.forward(&img);
        let dl = PixelMap::new(5, 5, 4, (0..100).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let df = PixelMap::new(5, 5, 3, (0..75).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let g = param_gradient(&net, &fwd, Some(&dl), Some(&df)).unwrap();
        let objective = |n: &SegNet| {
            let f = n.forward(&img);
            let a: f64 = f.logits.data().iter().zip(dl.data()).map(|(x, y)| x * y).sum();
            let b: f64 = f.features.data().iter().zip(df.data()).map(|(x, y)| x * y).sum();
            a + b
        };
        let h = 1e-6;
        for i in 0..net.layout().len() {
            let mut plus = net.clone();
            plus.params_mut().as_mut_slice()[i] += h;
            let mut minus = net.clone();
            minus.params_mut().as_mut_slice()[i] -= h;
            let num = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let ana = g.as_slice()[i];
            assert!((num - ana).abs() <= 1e-6 * (1.0 + ana.abs()), "param {i}: {ana} vs {num}");
        }
    }

    #[test]
    fn sgd_examples() {
        let p = ParamVector(vec![1.0, -2.0]);
        let g = ParamVector(vec![0.5, 0.25]);
        let mut s = SgdState::new(2);
        assert_eq!(sgd_step(&p, &g, 0.0, 0.9, &mut s).unwrap(), p);

        let mut s = SgdState::new(2);
        assert_eq!(sgd_step(&p, &g, 0.1, 0.0, &mut s).unwrap().0, vec![1.0 - 0.05, -2.0 - 0.025]);

        // v1 = g1, p1 = p0 - lr v1; v2 = m v1 + g2, p2 = p1 - lr v2.
        let (lr, m) = (0.1, 0.9);
        let g2 = ParamVector(vec![-1.0, 2.0]);
        let mut s = SgdState::new(2);
        let p1 = sgd_step(&p, &g, lr, m, &mut s).unwrap();
        let p2 = sgd_step(&p1, &g2, lr, m, &mut s).unwrap();
        for i in 0..2 {
            let v1 = g.0[i];
            let v2 = m * v1 + g2.0[i];
            let expected = p.0[i] - lr * v1 - lr * v2;
            assert!((p2.0[i] - expected).abs() < 1e-15);
        }
        assert!(sgd_step(&p, &ParamVector(vec![1.0]), 0.1, 0.0, &mut SgdState::new(2)).is_err());
    }
}
