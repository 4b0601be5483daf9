//! MEDSeg: stride-2/4/8 backbone features, a padded bidirectional feature
//! pyramid with fast normalized fusion, bilinear upsampling back to the input
//! size and a depthwise-separable segmentation head, plus the Dice loss.

mod weights;

use rand_distr::{Distribution, Normal};
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensorcore::{BatchNormState, Graph, Mode, ParamId, ParamStore, Tensor, TensorError, Var};

pub use weights::{decode_tensors, encode_tensors, NamedTensor, CONTAINER_MAGIC, CONTAINER_VERSION};

/// Number of depthwise-separable blocks in the segmentation head.
pub const HEAD_BLOCKS: usize = 3;
/// Output classes (binary airway).
pub const CLASSES: usize = 1;
/// Smoothing term of the Dice loss.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("model expects 3 input channels, got shape {0:?}")]
    Channels(Vec<usize>),
    #[error("weights container: {0}")]
    Format(String),
}

/// Widths and depths of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Channels of P1, P2, P3 (strides 2, 4, 8).
    pub backbone_widths: [usize; 3],
    pub bifpn_width: usize,
    pub bifpn_repeats: usize,
    pub head_width: usize,
    pub fusion_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            backbone_widths: [8, 12, 16],
            bifpn_width: 16,
            bifpn_repeats: 2,
            head_width: 16,
            fusion_eps: 1e-4,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let widths = [
            self.backbone_widths[0],
            self.backbone_widths[1],
            self.backbone_widths[2],
            self.bifpn_width,
            self.head_width,
        ];
        if widths.contains(&0) {
            return Err(ModelError::Config(format!("all widths must be >= 1: {self:?}")));
        }
        if self.bifpn_repeats == 0 {
            return Err(ModelError::Config("bifpn_repeats must be >= 1".into()));
        }
        if !(self.fusion_eps > 0.0 && self.fusion_eps.is_finite()) {
            return Err(ModelError::Config(format!("fusion_eps {} must be positive", self.fusion_eps)));
        }
        Ok(())
    }

    fn to_meta(&self) -> Vec<f32> {
        vec![
            self.backbone_widths[0] as f32,
            self.backbone_widths[1] as f32,
            self.backbone_widths[2] as f32,
            self.bifpn_width as f32,
            self.bifpn_repeats as f32,
            self.head_width as f32,
            self.fusion_eps as f32,
        ]
    }

    fn from_meta(m: &[f32]) -> Result<Self, ModelError> {
        if m.len() != 7 {
            return Err(ModelError::Format(format!("meta.arch has {} values, expected 7", m.len())));
        }
        let u = |v: f32| v as usize;
        Ok(Self {
            backbone_widths: [u(m[0]), u(m[1]), u(m[2])],
            bifpn_width: u(m[3]),
            bifpn_repeats: u(m[4]),
            head_width: u(m[5]),
            // Shortest decimal of the stored f32, so 1e-4 comes back as 1e-4.
            fusion_eps: m[6].to_string().parse().expect("f32 display parses"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    state: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SepConv {
    dw: ParamId,
    pw: ParamId,
}

/// `sep -> bn -> swish`
#[derive(Debug, Clone, Copy, PartialEq)]
struct SepBlock {
    sep: SepConv,
    norm: Norm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Stage {
    conv: Conv,
    norm: Norm,
    block: SepBlock,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FuseNode {
    weights: ParamId,
    block: SepBlock,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BifpnLayer {
    p2_td: FuseNode,
    p1_out: FuseNode,
    p2_out: FuseNode,
    p3_out: FuseNode,
}

/// Input shapes seen by one fusion node during a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionTrace {
    pub node: String,
    pub input_shapes: Vec<Vec<usize>>,
}

/// Parameters, batchnorm state and wiring of a MEDSeg network.
#[derive(Debug, Clone, PartialEq)]
pub struct MedSegModel<T> {
    config: ArchConfig,
    params: ParamStore<T>,
    bn: Vec<BatchNormState<T>>,
    bn_names: Vec<String>,
    stages: [Stage; 3],
    projections: [Conv; 3],
    layers: Vec<BifpnLayer>,
    head: [SepBlock; HEAD_BLOCKS],
    out: Conv,
}

struct Builder<'a, T> {
    params: ParamStore<T>,
    bn: Vec<BatchNormState<T>>,
    bn_names: Vec<String>,
    rng: &'a mut Xoshiro256PlusPlus,
}

impl<T: Scalar> Builder<'_, T> {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> Result<ParamId, ModelError> {
        let dist = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| T::lit(dist.sample(self.rng)));
        Ok(self.params.add(name, t)?)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, v: f64) -> Result<ParamId, ModelError> {
        Ok(self.params.add(name, Tensor::full(shape, T::lit(v)))?)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Result<Conv, ModelError> {
        let fan_in = (cin * k * k) as f64;
        let w = self.normal(format!("{name}.weight"), vec![cout, cin, k, k], (2.0 / fan_in).sqrt())?;
        let b = if bias {
            Some(self.constant(format!("{name}.bias"), vec![cout], 0.0)?)
        } else {
            None
        };
        Ok(Conv { w, b, stride })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm, ModelError> {
        let gamma = self.constant(format!("{name}.gamma"), vec![c], 1.0)?;
        let beta = self.constant(format!("{name}.beta"), vec![c], 0.0)?;
        self.bn.push(BatchNormState::new(c));
        self.bn_names.push(name.to_string());
        Ok(Norm {
            gamma,
            beta,
            state: self.bn.len() - 1,
        })
    }

    fn sep(&mut self, name: &str, cin: usize, cout: usize) -> Result<SepConv, ModelError> {
        let dw = self.normal(format!("{name}.dw"), vec![cin, 1, 3, 3], (2.0f64 / 9.0).sqrt())?;
        let pw = self.normal(format!("{name}.pw"), vec![cout, cin, 1, 1], (2.0 / cin as f64).sqrt())?;
        Ok(SepConv { dw, pw })
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Result<SepBlock, ModelError> {
        Ok(SepBlock {
            sep: self.sep(&format!("{name}.sep"), cin, cout)?,
            norm: self.norm(&format!("{name}.bn"), cout)?,
        })
    }

    fn fuse(&mut self, name: &str, inputs: usize, width: usize) -> Result<FuseNode, ModelError> {
        Ok(FuseNode {
            weights: self.constant(format!("{name}.weights"), vec![inputs], 1.0)?,
            block: self.block(name, width, width)?,
        })
    }
}

/// Resizes a feature map to `target`: bilinear when growing, 2×2 max pooling
/// then crop / edge replication when shrinking, identity when equal.
pub fn align<T: Scalar>(g: &mut Graph<T>, x: Var, target: (usize, usize)) -> Result<Var, TensorError> {
    let (h, w) = match *g.shape(x) {
        [_, _, h, w] => (h, w),
        ref s => {
            return Err(TensorError::Shape {
                op: "align",
                detail: format!("expected rank 4, got {s:?}"),
            })
        }
    };
    if (h, w) == target {
        return Ok(x);
    }
    if target.0 <= h && target.1 <= w {
        let pooled = g.maxpool2(x)?;
        if g.shape(pooled)[2..] == [target.0, target.1] {
            return Ok(pooled);
        }
        return g.crop_pad(pooled, target);
    }
    g.bilinear_resize(x, target)
}

fn spatial<T: Scalar>(g: &Graph<T>, v: Var) -> (usize, usize) {
    let s = g.shape(v);
    (s[2], s[3])
}

impl<T: Scalar> MedSegModel<T> {
    /// Fresh model with seeded He-normal initialization.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            bn: Vec::new(),
            bn_names: Vec::new(),
            rng: &mut rng,
        };
        let [c1, c2, c3] = config.backbone_widths;
        let width = config.bifpn_width;

        let mut stages = Vec::with_capacity(3);
        for (i, (cin, cout)) in [(3, c1), (c1, c2), (c2, c3)].into_iter().enumerate() {
            let name = format!("backbone.s{}", i + 1);
            stages.push(Stage {
                conv: b.conv(&format!("{name}.conv"), cin, cout, 3, 2, false)?,
                norm: b.norm(&format!("{name}.bn"), cout)?,
                block: b.block(&format!("{name}.block"), cout, cout)?,
            });
        }
        let mut projections = Vec::with_capacity(3);
        for (i, c) in [c1, c2, c3].into_iter().enumerate() {
            projections.push(b.conv(&format!("bifpn.proj{}", i + 1), c, width, 1, 1, true)?);
        }
        let mut layers = Vec::with_capacity(config.bifpn_repeats);
        for r in 0..config.bifpn_repeats {
            let name = format!("bifpn.r{r}");
            layers.push(BifpnLayer {
                p2_td: b.fuse(&format!("{name}.p2_td"), 2, width)?,
                p1_out: b.fuse(&format!("{name}.p1_out"), 2, width)?,
                p2_out: b.fuse(&format!("{name}.p2_out"), 3, width)?,
                p3_out: b.fuse(&format!("{name}.p3_out"), 2, width)?,
            });
        }
        let hw = config.head_width;
        let head = [
            b.block("head.b1", width, hw)?,
            b.block("head.b2", hw, hw)?,
            b.block("head.b3", hw, hw)?,
        ];
        let out = b.conv("head.out", hw, CLASSES, 1, 1, true)?;
        let out_std = (1.0 / hw as f64).sqrt();
        let dist = Normal::new(0.0, out_std).map_err(|e| ModelError::Config(e.to_string()))?;
        for v in b.params.get_mut(out.w).tensor.data_mut() {
            *v = T::lit(dist.sample(b.rng));
        }

        Ok(Self {
            config,
            params: b.params,
            bn: b.bn,
            bn_names: b.bn_names,
            stages: stages.try_into().expect("three stages"),
            projections: projections.try_into().expect("three projections"),
            layers,
            head,
            out,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BatchNormState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.bn
    }

    /// Id of the final 1×1 convolution's weight and bias.
    pub fn output_conv(&self) -> (ParamId, ParamId) {
        (self.out.w, self.out.b.expect("output conv has a bias"))
    }

    /// Converts every parameter and running statistic to another scalar type.
    pub fn cast<U: Scalar>(&self) -> MedSegModel<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.add(p.name.clone(), p.tensor.cast()).expect("names are unique");
        }
        let conv = |s: &[T]| s.iter().map(|v| U::lit(v.as_f64())).collect::<Vec<U>>();
        MedSegModel {
            config: self.config.clone(),
            params,
            bn: self
                .bn
                .iter()
                .map(|b| BatchNormState {
                    running_mean: conv(&b.running_mean),
                    running_var: conv(&b.running_var),
                    momentum: U::lit(b.momentum.as_f64()),
                    eps: U::lit(b.eps.as_f64()),
                })
                .collect(),
            bn_names: self.bn_names.clone(),
            stages: self.stages,
            projections: self.projections,
            layers: self.layers.clone(),
            head: self.head,
            out: self.out,
        }
    }

    fn conv(&self, g: &mut Graph<T>, c: Conv, x: Var) -> Result<Var, TensorError> {
        let w = g.param(&self.params, c.w);
        let b = c.b.map(|b| g.param(&self.params, b));
        g.conv2d(x, w, b, c.stride)
    }

    fn norm(&self, g: &mut Graph<T>, n: Norm, x: Var, mode: Mode) -> Result<Var, TensorError> {
        let gamma = g.param(&self.params, n.gamma);
        let beta = g.param(&self.params, n.beta);
        g.batchnorm2d(x, gamma, beta, &self.bn[n.state], mode, n.state)
    }

    fn block(&self, g: &mut Graph<T>, b: SepBlock, x: Var, mode: Mode) -> Result<Var, TensorError> {
        let dw = g.param(&self.params, b.sep.dw);
        let pw = g.param(&self.params, b.sep.pw);
        let y = g.depthwise_separable(x, dw, pw)?;
        let y = self.norm(g, b.norm, y, mode)?;
        Ok(g.swish(y))
    }

    fn fuse(
        &self,
        g: &mut Graph<T>,
        node: FuseNode,
        name: &str,
        inputs: &[Var],
        mode: Mode,
        trace: &mut Option<&mut Vec<FusionTrace>>,
    ) -> Result<Var, TensorError> {
        if let Some(t) = trace.as_deref_mut() {
            t.push(FusionTrace {
                node: name.to_string(),
                input_shapes: inputs.iter().map(|&v| g.shape(v).to_vec()).collect(),
            });
        }
        let w = g.param(&self.params, node.weights);
        let fused = g.weighted_fusion(inputs, w, T::lit(self.config.fusion_eps))?;
        self.block(g, node.block, fused, mode)
    }

    /// P1, P2, P3 at strides 2, 4, 8 (ceil sizes).
    pub fn backbone_forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<[Var; 3], ModelError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(ModelError::Channels(shape));
        }
        let mut feats = Vec::with_capacity(3);
        let mut h = x;
        for stage in &self.stages {
            h = self.conv(g, stage.conv, h)?;
            h = self.norm(g, stage.norm, h, mode)?;
            h = g.swish(h);
            h = self.block(g, stage.block, h, mode)?;
            feats.push(h);
        }
        Ok([feats[0], feats[1], feats[2]])
    }

    /// Repeated top-down / bottom-up fusion; returns the P1-level map.
    pub fn bifpn_forward(
        &self,
        g: &mut Graph<T>,
        feats: [Var; 3],
        mode: Mode,
        mut trace: Option<&mut Vec<FusionTrace>>,
    ) -> Result<Var, ModelError> {
        let mut p = [Var::clone(&feats[0]); 3];
        for (i, (&f, &proj)) in feats.iter().zip(&self.projections).enumerate() {
            p[i] = self.conv(g, proj, f)?;
        }
        for (r, layer) in self.layers.iter().enumerate() {
            let [p1, p2, p3] = p;
            let (s1, s2, s3) = (spatial(g, p1), spatial(g, p2), spatial(g, p3));

            let up3 = align(g, p3, s2)?;
            let p2_td = self.fuse(g, layer.p2_td, &format!("r{r}.p2_td"), &[p2, up3], mode, &mut trace)?;
            let up2 = align(g, p2_td, s1)?;
            let p1_out = self.fuse(g, layer.p1_out, &format!("r{r}.p1_out"), &[p1, up2], mode, &mut trace)?;
            let down1 = align(g, p1_out, s2)?;
            let p2_out = self.fuse(
                g,
                layer.p2_out,
                &format!("r{r}.p2_out"),
                &[p2, p2_td, down1],
                mode,
                &mut trace,
            )?;
            let down2 = align(g, p2_out, s3)?;
            let p3_out = self.fuse(g, layer.p3_out, &format!("r{r}.p3_out"), &[p3, down2], mode, &mut trace)?;
            p = [p1_out, p2_out, p3_out];
        }
        Ok(p[0])
    }

    /// Bilinear upsampling to `size`, three separable blocks, 1×1 conv, sigmoid.
    pub fn head_forward(&self, g: &mut Graph<T>, f: Var, size: (usize, usize), mode: Mode) -> Result<Var, ModelError> {
        let mut h = g.bilinear_resize(f, size)?;
        for block in &self.head {
            h = self.block(g, *block, h, mode)?;
        }
        let logits = self.conv(g, self.out, h)?;
        Ok(g.sigmoid(logits))
    }

    /// Full network: `[B,3,H,W]` -> probabilities `[B,1,H,W]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var, ModelError> {
        self.forward_traced(g, x, mode, None)
    }

    pub fn forward_traced(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        trace: Option<&mut Vec<FusionTrace>>,
    ) -> Result<Var, ModelError> {
        let size = spatial(g, x);
        let feats = self.backbone_forward(g, x, mode)?;
        let f = self.bifpn_forward(g, feats, mode, trace)?;
        self.head_forward(g, f, size, mode)
    }

    /// Eval-mode forward on a standalone input tensor.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let xv = g.input(x);
        let p = self.forward(&mut g, xv, Mode::Eval)?;
        Ok(g.tensor(p))
    }

    /// Folds the batch statistics recorded on `g` into the running estimates.
    pub fn commit_bn(&mut self, g: &Graph<T>) {
        for u in g.bn_updates() {
            self.bn[u.key].update(&u.mean, &u.var);
        }
    }

    /// All weights and running statistics as float32 named tensors, the
    /// architecture first as `meta.arch`.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor {
            name: "meta.arch".into(),
            dims: vec![7],
            data: self.config.to_meta(),
        }];
        let f32s = |s: &[T]| s.iter().map(|v| v.as_f64() as f32).collect::<Vec<f32>>();
        for p in self.params.iter() {
            out.push(NamedTensor {
                name: p.name.clone(),
                dims: p.tensor.shape().to_vec(),
                data: f32s(p.tensor.data()),
            });
        }
        for (name, s) in self.bn_names.iter().zip(&self.bn) {
            out.push(NamedTensor {
                name: format!("{name}.running_mean"),
                dims: vec![s.channels()],
                data: f32s(&s.running_mean),
            });
            out.push(NamedTensor {
                name: format!("{name}.running_var"),
                dims: vec![s.channels()],
                data: f32s(&s.running_var),
            });
        }
        out
    }

    /// Rebuilds a model from [`to_named_tensors`](Self::to_named_tensors) output.
    pub fn from_named_tensors(tensors: &[NamedTensor]) -> Result<Self, ModelError> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| ModelError::Format(format!("missing tensor `{name}`")))
        };
        let config = ArchConfig::from_meta(&find("meta.arch")?.data)?;
        let mut model = Self::new(config, 0)?;
        let expected = 1 + model.params.len() + 2 * model.bn.len();
        if tensors.len() != expected {
            return Err(ModelError::Format(format!(
                "{} tensors in file, architecture needs {expected}",
                tensors.len()
            )));
        }
        for p in model.params.iter_mut() {
            let t = find(&p.name)?;
            if t.dims != p.tensor.shape() {
                return Err(ModelError::Format(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.dims,
                    p.tensor.shape()
                )));
            }
            for (dst, &src) in p.tensor.data_mut().iter_mut().zip(&t.data) {
                *dst = T::lit(src as f64);
            }
        }
        for (name, s) in model.bn_names.clone().iter().zip(model.bn.iter_mut()) {
            for (suffix, dst) in [("running_mean", &mut s.running_mean), ("running_var", &mut s.running_var)] {
                let t = find(&format!("{name}.{suffix}"))?;
                if t.data.len() != dst.len() {
                    return Err(ModelError::Format(format!("`{name}.{suffix}` has wrong length")));
                }
                for (d, &v) in dst.iter_mut().zip(&t.data) {
                    *d = T::lit(v as f64);
                }
            }
        }
        Ok(model)
    }
}

/// Hard Dice of `p >= 0.5` against a binary target; 1 when both are empty.
pub fn hard_dice<T: Scalar>(p: &[T], target: &[T]) -> f64 {
    let half = T::lit(0.5);
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.iter().zip(target) {
        let on = a >= half;
        let gt = b > half;
        inter += (on && gt) as usize;
        sp += on as usize;
        sg += gt as usize;
    }
    if sp + sg == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sp + sg) as f64
    }
}
