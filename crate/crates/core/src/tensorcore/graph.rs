use crate::scalar::{stable_sigmoid, Scalar};

use super::kernels::{self, ConvGeom};
use super::{shape_err, ParamId, ParamStore, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batchnorm behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormState<T> {
    /// Zero mean, unit variance, momentum 0.1, eps 1e-5.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `rs <- (1 - momentum) * rs + momentum * batch_stat`
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Batch statistics recorded by a train-mode batchnorm, keyed by the
/// caller's layer index. Applied later with [`BatchNormState::update`].
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate<T> {
    pub key: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Swish(Var),
    Sigmoid(Var),
    Relu(Var),
    Bilinear {
        x: Var,
        src: (usize, usize),
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Fusion {
        inputs: Vec<Var>,
        w: Var,
        eps: T,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Dice {
        p: Var,
        target: Vec<T>,
        eps: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
}

/// Tape of values and the operations that produced them.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bn_updates: Vec<BnUpdate<T>>,
}

fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize), TensorError> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(shape_err(op, format!("expected rank-4 input, got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Batch statistics recorded by train-mode batchnorm calls, in call order.
    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    /// Non-trainable input.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    /// Snapshot of a trainable parameter; its gradient is routed back by id.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = &store.get(id).tensor;
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id))
    }

    /// Same-ceil padded cross-correlation, stride 1 or 2, odd kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var, TensorError> {
        let (bs, cin, h, wd) = dims4(self.shape(x), "conv2d")?;
        let (cout, wcin, kh, kw) = dims4(self.shape(w), "conv2d")?;
        if wcin != cin {
            return Err(shape_err("conv2d", format!("input has {cin} channels, weight expects {wcin}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Argument {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} must be odd"),
            });
        }
        if stride != 1 && stride != 2 {
            return Err(TensorError::Argument {
                op: "conv2d",
                detail: format!("stride {stride} not in {{1, 2}}"),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias shape {:?} != [{cout}]", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(bs, cin, h, wd, cout, kh, kw, stride);
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        Ok(self.push(vec![bs, cout, geom.oh, geom.ow], out, Op::Conv2d { x, w, b, geom }))
    }

    /// Per-channel 3×3 (or any odd) convolution, stride 1, same padding. `w: [C,1,kh,kw]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (bs, c, h, wd) = dims4(self.shape(x), "depthwise_conv")?;
        let (wc, one, kh, kw) = dims4(self.shape(w), "depthwise_conv")?;
        if wc != c || one != 1 {
            return Err(shape_err(
                "depthwise_conv",
                format!("weight {:?} incompatible with {c} channels", self.shape(w)),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(TensorError::Argument {
                op: "depthwise_conv",
                detail: format!("kernel {kh}x{kw} must be odd"),
            });
        }
        let geom = ConvGeom::new(bs, c, h, wd, c, kh, kw, 1);
        let out = kernels::depthwise_forward(self.value(x), self.value(w), &geom);
        Ok(self.push(vec![bs, c, h, wd], out, Op::Depthwise { x, w, geom }))
    }

    /// Depthwise 3×3 followed by pointwise 1×1 channel mixing (no biases).
    pub fn depthwise_separable(&mut self, x: Var, dw: Var, pw: Var) -> Result<Var, TensorError> {
        let (_, c, _, _) = dims4(self.shape(x), "depthwise_separable")?;
        let (_, pc, ph, pww) = dims4(self.shape(pw), "depthwise_separable")?;
        if pc != c || ph != 1 || pww != 1 {
            return Err(shape_err(
                "depthwise_separable",
                format!("pointwise weight {:?} incompatible with {c} channels", self.shape(pw)),
            ));
        }
        let d = self.depthwise_conv(x, dw)?;
        self.conv2d(d, pw, None, 1)
    }

    /// Batch normalization over `(B, H, W)` per channel.
    ///
    /// In train mode the batch statistics are recorded under `key` (see
    /// [`Graph::bn_updates`]); the running statistics in `state` are not touched.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState<T>,
        mode: Mode,
        key: usize,
    ) -> Result<Var, TensorError> {
        let (b, c, h, w) = dims4(self.shape(x), "batchnorm2d")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            return Err(shape_err("batchnorm2d", format!("per-channel parameters must have length {c}")));
        }
        let dims = (b, c, h * w);
        match mode {
            Mode::Train => {
                if b * h * w < 2 {
                    return Err(TensorError::BatchTooSmall);
                }
                let f = kernels::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), dims, state.eps);
                self.bn_updates.push(BnUpdate {
                    key,
                    mean: f.mean,
                    var: f.var_unbiased,
                });
                Ok(self.push(
                    vec![b, c, h, w],
                    f.y,
                    Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        xhat: f.xhat,
                        inv_std: f.inv_std,
                        train: true,
                    },
                ))
            }
            Mode::Eval => {
                let (y, xhat, inv_std) = kernels::batchnorm_eval(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    &state.running_mean,
                    &state.running_var,
                    dims,
                    state.eps,
                );
                Ok(self.push(
                    vec![b, c, h, w],
                    y,
                    Op::BatchNorm {
                        x,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                        train: false,
                    },
                ))
            }
        }
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::swish(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Swish(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| stable_sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x))
    }

    /// Half-pixel bilinear resampling to an arbitrary `(H', W')`.
    pub fn bilinear_resize(&mut self, x: Var, target: (usize, usize)) -> Result<Var, TensorError> {
        let (b, c, h, w) = dims4(self.shape(x), "bilinear_resize")?;
        if target.0 == 0 || target.1 == 0 {
            return Err(TensorError::Argument {
                op: "bilinear_resize",
                detail: format!("target {target:?} must be at least 1x1"),
            });
        }
        let out = kernels::bilinear_forward(self.value(x), b * c, (h, w), target);
        Ok(self.push(vec![b, c, target.0, target.1], out, Op::Bilinear { x, src: (h, w) }))
    }

    /// 2×2 stride-2 max pooling, ceil mode.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (b, c, h, w) = dims4(self.shape(x), "maxpool2")?;
        let (out, arg) = kernels::maxpool2_forward(self.value(x), b * c, h, w);
        Ok(self.push(vec![b, c, h.div_ceil(2), w.div_ceil(2)], out, Op::MaxPool { x, arg }))
    }

    /// Crops from the top-left corner or pads by replicating the last row/column.
    pub fn crop_pad(&mut self, x: Var, target: (usize, usize)) -> Result<Var, TensorError> {
        let (b, c, h, w) = dims4(self.shape(x), "crop_pad")?;
        if target.0 == 0 || target.1 == 0 {
            return Err(TensorError::Argument {
                op: "crop_pad",
                detail: format!("target {target:?} must be at least 1x1"),
            });
        }
        let index = kernels::crop_pad_index((h, w), target, b * c);
        let src = self.value(x);
        let out = index.iter().map(|&i| src[i]).collect();
        Ok(self.push(vec![b, c, target.0, target.1], out, Op::Gather { x, index }))
    }

    /// Fast normalized fusion: `sum_i relu(w_i) / (sum_j relu(w_j) + eps) * x_i`.
    pub fn weighted_fusion(&mut self, inputs: &[Var], w: Var, eps: T) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Argument {
                op: "weighted_fusion",
                detail: "no inputs".into(),
            });
        }
        if self.shape(w) != [inputs.len()] {
            return Err(shape_err(
                "weighted_fusion",
                format!("weights {:?} for {} inputs", self.shape(w), inputs.len()),
            ));
        }
        let shape = self.shape(inputs[0]).to_vec();
        for &v in &inputs[1..] {
            if self.shape(v) != shape.as_slice() {
                return Err(shape_err(
                    "weighted_fusion",
                    format!("partner shapes differ: {shape:?} vs {:?}", self.shape(v)),
                ));
            }
        }
        let coeffs = fusion_coefficients(self.value(w), eps);
        let mut out = vec![T::zero(); shape.iter().product()];
        for (&v, &c) in inputs.iter().zip(&coeffs) {
            for (o, &x) in out.iter_mut().zip(self.value(v)) {
                *o += c * x;
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Fusion {
                inputs: inputs.to_vec(),
                w,
                eps,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    /// Smoothed soft Dice loss `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`
    /// over the whole batch.
    pub fn dice_loss(&mut self, p: Var, target: &Tensor<T>, eps: T) -> Result<Var, TensorError> {
        if self.shape(p) != target.shape() {
            return Err(shape_err(
                "dice_loss",
                format!("prediction {:?} vs target {:?}", self.shape(p), target.shape()),
            ));
        }
        let loss = dice_value(self.value(p), target.data(), eps);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Dice {
                p,
                target: target.data().to_vec(),
                eps,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut send = |v: Var, contrib: Vec<T>| -> Result<(), TensorError> {
                if v.0 >= i {
                    return Err(TensorError::Internal(format!("node {i} depends on later node {}", v.0)));
                }
                accumulate(&mut grads[v.0], contrib);
                Ok(())
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = kernels::conv2d_backward(self.value(*x), self.value(*w), &g, geom);
                    send(*x, dx)?;
                    send(*w, dw)?;
                    if let Some(b) = b {
                        send(*b, db)?;
                    }
                }
                Op::Depthwise { x, w, geom } => {
                    let (dx, dw) = kernels::depthwise_backward(self.value(*x), self.value(*w), &g, geom);
                    send(*x, dx)?;
                    send(*w, dw)?;
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (b, c, h, w) = dims4(&node.shape, "batchnorm2d")?;
                    let (dx, dg, db) =
                        kernels::batchnorm_backward(&g, xhat, self.value(*gamma), inv_std, (b, c, h * w), *train);
                    send(*x, dx)?;
                    send(*gamma, dg)?;
                    send(*beta, db)?;
                }
                Op::Swish(x) => {
                    let dx = self.value(*x).iter().zip(&g).map(|(&v, &d)| d * kernels::swish_grad(v)).collect();
                    send(*x, dx)?;
                }
                Op::Sigmoid(x) => {
                    let dx = node.value.iter().zip(&g).map(|(&s, &d)| d * s * (T::one() - s)).collect();
                    send(*x, dx)?;
                }
                Op::Relu(x) => {
                    let dx = self
                        .value(*x)
                        .iter()
                        .zip(&g)
                        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    send(*x, dx)?;
                }
                Op::Bilinear { x, src } => {
                    let (b, c, h, w) = dims4(&node.shape, "bilinear_resize")?;
                    send(*x, kernels::bilinear_backward(&g, b * c, *src, (h, w)))?;
                }
                Op::MaxPool { x, arg } => {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (&a, &d) in arg.iter().zip(&g) {
                        dx[a] += d;
                    }
                    send(*x, dx)?;
                }
                Op::Gather { x, index } => {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (&a, &d) in index.iter().zip(&g) {
                        dx[a] += d;
                    }
                    send(*x, dx)?;
                }
                Op::Fusion { inputs, w, eps } => {
                    let raw = self.value(*w);
                    let coeffs = fusion_coefficients(raw, *eps);
                    let active: Vec<T> = raw.iter().map(|&r| r.max(T::zero())).collect();
                    let s = active.iter().copied().sum::<T>() + *eps;
                    let dc: Vec<T> = inputs
                        .iter()
                        .map(|&v| self.value(v).iter().zip(&g).map(|(&x, &d)| x * d).sum::<T>())
                        .collect();
                    let weighted: T = dc.iter().zip(&active).map(|(&d, &a)| d * a).sum::<T>() / (s * s);
                    let dw = raw
                        .iter()
                        .zip(&dc)
                        .map(|(&r, &d)| if r > T::zero() { d / s - weighted } else { T::zero() })
                        .collect();
                    for (&v, &c) in inputs.iter().zip(&coeffs) {
                        send(v, g.iter().map(|&d| d * c).collect())?;
                    }
                    send(*w, dw)?;
                }
                Op::Add(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g.clone())?;
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(self.value(*b)).map(|(&d, &y)| d * y).collect();
                    let db = g.iter().zip(self.value(*a)).map(|(&d, &x)| d * x).collect();
                    send(*a, da)?;
                    send(*b, db)?;
                }
                Op::Sum(x) => {
                    send(*x, vec![g[0]; self.value(*x).len()])?;
                }
                Op::Dice { p, target, eps } => {
                    let pv = self.value(*p);
                    let inter: T = pv.iter().zip(target).map(|(&a, &b)| a * b).sum();
                    let denom = pv.iter().copied().sum::<T>() + target.iter().copied().sum::<T>() + *eps;
                    let num = T::lit(2.0) * inter + *eps;
                    let two = T::lit(2.0);
                    let dp = target
                        .iter()
                        .map(|&t| -g[0] * (two * t * denom - num) / (denom * denom))
                        .collect();
                    send(*p, dp)?;
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward from `loss`, then overwrite every parameter gradient in
    /// `store` (zero for parameters not reachable from the loss).
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<(), TensorError> {
        let grads = self.backward(loss)?;
        grads.write_params(self, store)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

/// Normalized non-negative fusion coefficients.
pub fn fusion_coefficients<T: Scalar>(raw: &[T], eps: T) -> Vec<T> {
    let active: Vec<T> = raw.iter().map(|&r| r.max(T::zero())).collect();
    let s = active.iter().copied().sum::<T>() + eps;
    active.into_iter().map(|a| a / s).collect()
}

/// Smoothed soft Dice loss of flat slices.
pub fn dice_value<T: Scalar>(p: &[T], g: &[T], eps: T) -> T {
    let inter: T = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
    let denom = p.iter().copied().sum::<T>() + g.iter().copied().sum::<T>() + eps;
    T::one() - (T::lit(2.0) * inter + eps) / denom
}

/// Gradients produced by [`Graph::backward`], indexed by graph value.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` if `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Sets every parameter's gradient in `store`, summing over repeated uses.
    pub fn write_params(&self, graph: &Graph<T>, store: &mut ParamStore<T>) -> Result<(), TensorError> {
        store.zero_grad();
        for (node, grad) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                let t = &mut store.get_mut(*id).tensor;
                if t.numel() != g.len() {
                    return Err(TensorError::Internal(format!(
                        "parameter {} changed size since the forward pass",
                        id.0
                    )));
                }
                let mut acc = t.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); g.len()]);
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                t.set_grad(acc)?;
            }
        }
        Ok(())
    }
}
