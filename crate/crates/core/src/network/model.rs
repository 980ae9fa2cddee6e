use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{Dims, LayerSpec, NetworkSpec, NUM_CLASSES};
use super::tensor::{gemm, Scalar, Tensor, View};
use crate::dataset::TreatmentLabel;
use crate::{Error, Result};

/// Forward-pass regime. Dropout is active in `Train` and `InferStochastic`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    InferDeterministic,
    InferStochastic,
}

impl Mode {
    fn dropout_active(self) -> bool {
        !matches!(self, Mode::InferDeterministic)
    }
}

/// Intermediate values of one batched forward pass.
pub(crate) struct Trace<T> {
    pub batch: usize,
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub acts: Vec<Vec<T>>,
    pub pool_argmax: Vec<Vec<u32>>,
    pub dropout_scale: Vec<Vec<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn probabilities(&self) -> &[T] {
        self.acts.last().expect("trace has output")
    }

    fn logits(&self) -> &[T] {
        &self.acts[self.acts.len() - 2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    dims: Vec<super::spec::Dims>,
    params: Vec<Tensor<T>>,
    /// Index of the weight tensor for each conv/dense layer.
    slots: Vec<Option<usize>>,
}

impl<T: Scalar> Network<T> {
    /// He-normal weights and zero biases drawn from `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in net.slots.iter().flatten() {
            let w = &mut net.params[*slot];
            let fan_in = w.shape()[1] as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            for v in w.data_mut() {
                *v = T::lit(normal.sample(&mut rng));
            }
        }
        Ok(net)
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        let params = shapes.into_iter().map(Tensor::zeros).collect();
        Self::from_params(spec, params)
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let n = spec.layers.len();
        if spec.layers[..n - 1].contains(&LayerSpec::Softmax) {
            return Err(Error::Shape("softmax must be the final layer".into()));
        }
        let shapes = spec.param_shapes()?;
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s[..] != *p.shape())
        {
            return Err(Error::Shape(
                "parameter shapes do not match the spec".into(),
            ));
        }
        let mut slots = Vec::with_capacity(n);
        let mut next = 0;
        for layer in &spec.layers {
            match layer {
                LayerSpec::Conv2D { .. } | LayerSpec::Dense { .. } => {
                    slots.push(Some(next));
                    next += 2;
                }
                _ => slots.push(None),
            }
        }
        let dims = spec.layer_dims()?;
        Ok(Network {
            spec,
            dims,
            params,
            slots,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            dims: self.dims.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            slots: self.slots.clone(),
        }
    }

    pub(crate) fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let d = self.spec.input_dims();
        if input.shape() != [d.c, d.h, d.w] {
            return Err(Error::Shape(format!(
                "input {:?} does not match [{}, {}, {}]",
                input.shape(),
                d.c,
                d.h,
                d.w
            )));
        }
        Ok(())
    }

    /// Class probabilities for one `[C, H, W]` input.
    pub fn forward<R: Rng>(&self, input: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<[T; 4]> {
        self.check_input(input)?;
        let trace = self.forward_batch(input.data(), 1, mode, std::slice::from_mut(rng))?;
        let p = trace.probabilities();
        Ok([p[0], p[1], p[2], p[3]])
    }

    /// Most probable class; ties go to the earlier label.
    pub fn predict<R: Rng>(
        &self,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<TreatmentLabel> {
        Ok(argmax_label(&self.forward(input, mode, rng)?))
    }

    /// Runs a batch stored back to back in `x`. `rngs` supplies one stream
    /// per sample and is only consulted when dropout is active.
    pub(crate) fn forward_batch<R: Rng>(
        &self,
        x: &[T],
        batch: usize,
        mode: Mode,
        rngs: &mut [R],
    ) -> Result<Trace<T>> {
        let input = self.spec.input_dims();
        if x.len() != batch * input.len() {
            return Err(Error::Shape(format!(
                "batch of {batch} needs {} values, got {}",
                batch * input.len(),
                x.len()
            )));
        }
        let n = self.spec.layers.len();
        let mut trace = Trace {
            batch,
            acts: Vec::with_capacity(n + 1),
            pool_argmax: vec![Vec::new(); n],
            dropout_scale: vec![Vec::new(); n],
        };
        trace.acts.push(x.to_vec());
        let mut prev = input;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let d = self.dims[i];
            let src = &trace.acts[i];
            let out = match *layer {
                LayerSpec::Conv2D { .. } => {
                    let slot = self.slots[i].expect("conv slot");
                    conv_forward(
                        src,
                        batch,
                        prev,
                        d.c,
                        &self.params[slot],
                        &self.params[slot + 1],
                    )
                }
                LayerSpec::MaxPool2D => {
                    let (out, idx) = pool_forward(src, batch, prev);
                    trace.pool_argmax[i] = idx;
                    out
                }
                LayerSpec::Flatten => src.clone(),
                LayerSpec::Dense { .. } => {
                    let slot = self.slots[i].expect("dense slot");
                    dense_forward(
                        src,
                        batch,
                        prev.len(),
                        d.c,
                        &self.params[slot],
                        &self.params[slot + 1],
                    )
                }
                LayerSpec::Dropout { rate } => {
                    if mode.dropout_active() && rate > 0.0 {
                        if rngs.len() < batch {
                            return Err(Error::Shape(format!(
                                "dropout needs {batch} random streams, got {}",
                                rngs.len()
                            )));
                        }
                        let keep = T::lit(1.0 / (1.0 - rate));
                        let per = d.len();
                        let mut scale = Vec::with_capacity(src.len());
                        for rng in rngs.iter_mut().take(batch) {
                            for _ in 0..per {
                                let kept = rng.gen::<f64>() >= rate;
                                scale.push(if kept { keep } else { T::zero() });
                            }
                        }
                        let out = src.iter().zip(&scale).map(|(&v, &s)| v * s).collect();
                        trace.dropout_scale[i] = scale;
                        out
                    } else {
                        src.clone()
                    }
                }
                LayerSpec::ReLU => src.iter().map(|&v| v.max(T::zero())).collect(),
                LayerSpec::Softmax => softmax_rows(src, d.len()),
            };
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: i });
            }
            trace.acts.push(out);
            prev = d;
        }
        Ok(trace)
    }

    /// Sum of cross-entropy losses over the batch; accumulates the gradient
    /// of that sum into `grads`.
    pub(crate) fn backward(
        &self,
        trace: &Trace<T>,
        labels: &[usize],
        grads: &mut [Tensor<T>],
    ) -> T {
        let batch = trace.batch;
        let probs = trace.probabilities();
        let logits = trace.logits();
        let mut loss = T::zero();
        let mut delta = vec![T::zero(); batch * NUM_CLASSES];
        for b in 0..batch {
            let row = &logits[b * NUM_CLASSES..(b + 1) * NUM_CLASSES];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + lse - row[labels[b]];
            for k in 0..NUM_CLASSES {
                let target = if k == labels[b] { T::one() } else { T::zero() };
                delta[b * NUM_CLASSES + k] = probs[b * NUM_CLASSES + k] - target;
            }
        }

        let n = self.spec.layers.len();
        let input_dims = self.spec.input_dims();
        for i in (0..n - 1).rev() {
            let prev = if i == 0 { input_dims } else { self.dims[i - 1] };
            let d = self.dims[i];
            let src = &trace.acts[i];
            let out = &trace.acts[i + 1];
            delta = match self.spec.layers[i] {
                LayerSpec::Conv2D { .. } => {
                    let slot = self.slots[i].expect("conv slot");
                    let (gw, rest) = grads[slot..].split_at_mut(1);
                    conv_backward(
                        src,
                        &delta,
                        batch,
                        prev,
                        d.c,
                        &self.params[slot],
                        &mut gw[0],
                        &mut rest[0],
                        i > 0,
                    )
                }
                LayerSpec::Dense { .. } => {
                    let slot = self.slots[i].expect("dense slot");
                    let (gw, rest) = grads[slot..].split_at_mut(1);
                    dense_backward(
                        src,
                        &delta,
                        batch,
                        prev.len(),
                        d.c,
                        &self.params[slot],
                        &mut gw[0],
                        &mut rest[0],
                        i > 0,
                    )
                }
                LayerSpec::MaxPool2D => {
                    let mut g = vec![T::zero(); src.len()];
                    for (&idx, &dv) in trace.pool_argmax[i].iter().zip(&delta) {
                        g[idx as usize] = g[idx as usize] + dv;
                    }
                    g
                }
                LayerSpec::Flatten => delta,
                LayerSpec::Dropout { .. } => {
                    let scale = &trace.dropout_scale[i];
                    if scale.is_empty() {
                        delta
                    } else {
                        delta.iter().zip(scale).map(|(&g, &s)| g * s).collect()
                    }
                }
                LayerSpec::ReLU => delta
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect(),
                LayerSpec::Softmax => unreachable!("softmax is handled with the loss"),
            };
        }
        loss
    }

    /// Mean cross-entropy over the batch and its gradient for every
    /// trainable tensor, with dropout disabled.
    pub fn loss_and_gradients(
        &self,
        inputs: &[Tensor<T>],
        labels: &[TreatmentLabel],
    ) -> Result<(T, Vec<Tensor<T>>)> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs for {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let mut flat = Vec::with_capacity(inputs.len() * self.spec.input.len());
        for x in inputs {
            self.check_input(x)?;
            flat.extend_from_slice(x.data());
        }
        let trace = self.forward_batch::<ChaCha8Rng>(
            &flat,
            inputs.len(),
            Mode::InferDeterministic,
            &mut [],
        )?;
        let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        let mut grads = self.zero_grads();
        let loss = self.backward(&trace, &idx, &mut grads);
        let scale = T::one() / T::lit(inputs.len() as f64);
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
        }
        Ok((loss * scale, grads))
    }
}

pub(crate) fn argmax_label<T: Scalar>(p: &[T; 4]) -> TreatmentLabel {
    let mut best = 0;
    for k in 1..NUM_CLASSES {
        if p[k] > p[best] {
            best = k;
        }
    }
    TreatmentLabel::from_index(best).expect("four classes")
}

fn softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    out
}

/// `[C, H, W]` -> `[C * 9, H * W]` patches for a 3x3 same-padded kernel.
fn im2col<T: Scalar>(x: &[T], d: Dims, cols: &mut [T]) {
    let hw = d.h * d.w;
    for c in 0..d.c {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..d.h {
                    let dst = &mut row[y * d.w..(y + 1) * d.w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= d.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * d.w..(sy as usize + 1) * d.w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..d.w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..d.w - 1].copy_from_slice(&src[1..]);
                            dst[d.w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into `dx`.
fn col2im<T: Scalar>(cols: &[T], d: Dims, dx: &mut [T]) {
    let hw = d.h * d.w;
    for c in 0..d.c {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..d.h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= d.h as isize {
                        continue;
                    }
                    let src = &row[y * d.w..(y + 1) * d.w];
                    let dst = &mut plane[sy as usize * d.w..(sy as usize + 1) * d.w];
                    let (s, t) = match kx {
                        0 => (&src[1..], &mut dst[..d.w - 1]),
                        1 => (src, &mut dst[..]),
                        _ => (&src[..d.w - 1], &mut dst[1..]),
                    };
                    for (a, &b) in t.iter_mut().zip(s) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    d: Dims,
    out_c: usize,
    w: &Tensor<T>,
    bias: &Tensor<T>,
) -> Vec<T> {
    let hw = d.h * d.w;
    let k = d.c * 9;
    let mut cols = vec![T::zero(); k * hw];
    let mut out = vec![T::zero(); batch * out_c * hw];
    for b in 0..batch {
        im2col(&x[b * d.len()..(b + 1) * d.len()], d, &mut cols);
        let y = &mut out[b * out_c * hw..(b + 1) * out_c * hw];
        for (o, chunk) in y.chunks_exact_mut(hw).enumerate() {
            chunk.fill(bias.data()[o]);
        }
        gemm(
            out_c,
            k,
            hw,
            View::rows(w.data(), k),
            View::rows(&cols, hw),
            T::one(),
            y,
        );
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    d: Dims,
    out_c: usize,
    w: &Tensor<T>,
    gw: &mut Tensor<T>,
    gb: &mut Tensor<T>,
    need_input_grad: bool,
) -> Vec<T> {
    let hw = d.h * d.w;
    let k = d.c * 9;
    let mut cols = vec![T::zero(); k * hw];
    let mut dcols = vec![T::zero(); if need_input_grad { k * hw } else { 0 }];
    let mut dx = vec![T::zero(); if need_input_grad { x.len() } else { 0 }];
    for b in 0..batch {
        let g = &dy[b * out_c * hw..(b + 1) * out_c * hw];
        im2col(&x[b * d.len()..(b + 1) * d.len()], d, &mut cols);
        // dW += dY * cols^T
        gemm(
            out_c,
            hw,
            k,
            View::rows(g, hw),
            View::transposed(&cols, hw),
            T::one(),
            gw.data_mut(),
        );
        for (o, chunk) in g.chunks_exact(hw).enumerate() {
            let s: T = chunk.iter().copied().sum();
            gb.data_mut()[o] = gb.data()[o] + s;
        }
        if need_input_grad {
            // dcols = W^T * dY
            gemm(
                k,
                out_c,
                hw,
                View::transposed(w.data(), k),
                View::rows(g, hw),
                T::zero(),
                &mut dcols,
            );
            col2im(&dcols, d, &mut dx[b * d.len()..(b + 1) * d.len()]);
        }
    }
    dx
}

fn pool_forward<T: Scalar>(x: &[T], batch: usize, d: Dims) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (d.h / 2, d.w / 2);
    let mut out = Vec::with_capacity(batch * d.c * oh * ow);
    let mut idx = Vec::with_capacity(out.capacity());
    for bc in 0..batch * d.c {
        let base = bc * d.h * d.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * d.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * d.w + 2 * ox + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

fn dense_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    inputs: usize,
    outputs: usize,
    w: &Tensor<T>,
    bias: &Tensor<T>,
) -> Vec<T> {
    let mut out = Vec::with_capacity(batch * outputs);
    for _ in 0..batch {
        out.extend_from_slice(bias.data());
    }
    gemm(
        batch,
        inputs,
        outputs,
        View::rows(x, inputs),
        View::transposed(w.data(), inputs),
        T::one(),
        &mut out,
    );
    out
}

#[allow(clippy::too_many_arguments)]
fn dense_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    inputs: usize,
    outputs: usize,
    w: &Tensor<T>,
    gw: &mut Tensor<T>,
    gb: &mut Tensor<T>,
    need_input_grad: bool,
) -> Vec<T> {
    // dW += dY^T * X
    gemm(
        outputs,
        batch,
        inputs,
        View::transposed(dy, outputs),
        View::rows(x, inputs),
        T::one(),
        gw.data_mut(),
    );
    for row in dy.chunks_exact(outputs) {
        for (g, &v) in gb.data_mut().iter_mut().zip(row) {
            *g = *g + v;
        }
    }
    if !need_input_grad {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); batch * inputs];
    gemm(
        batch,
        outputs,
        inputs,
        View::rows(dy, outputs),
        View::rows(w.data(), inputs),
        T::zero(),
        &mut dx,
    );
    dx
}
