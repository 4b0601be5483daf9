//! Central finite differences in float64 as the reference for reverse-mode
//! gradients in either precision.

#![allow(dead_code)]

use airseg_core::medsegnet::{MedSegModel, DICE_EPS};
use airseg_core::tensorcore::{BatchNormState, Graph, Mode, Tensor, TensorError, Var};
use airseg_core::Scalar;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub const STEP: f64 = 1e-5;

/// One differentiable op with inputs of fixed shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Case {
    Conv { stride: usize },
    ConvBias,
    Depthwise,
    Separable,
    BatchNormTrain,
    BatchNormEval,
    Swish,
    Sigmoid,
    Relu,
    BilinearUp,
    BilinearDown,
    MaxPool,
    CropPad,
    Fusion,
    Add,
    Mul,
    Sum,
    Dice,
}

pub const ALL_CASES: [Case; 19] = [
    Case::Conv { stride: 1 },
    Case::Conv { stride: 2 },
    Case::ConvBias,
    Case::Depthwise,
    Case::Separable,
    Case::BatchNormTrain,
    Case::BatchNormEval,
    Case::Swish,
    Case::Sigmoid,
    Case::Relu,
    Case::BilinearUp,
    Case::BilinearDown,
    Case::MaxPool,
    Case::CropPad,
    Case::Fusion,
    Case::Add,
    Case::Mul,
    Case::Sum,
    Case::Dice,
];

fn random(shape: Vec<usize>, rng: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Inputs for `case`, rounded to float32 so both precisions see the same point.
pub fn case_inputs(case: Case, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let x = |rng: &mut Xoshiro256PlusPlus| random(vec![2, 3, 5, 6], rng);
    let raw = match case {
        Case::Conv { .. } => vec![x(&mut rng), random(vec![4, 3, 3, 3], &mut rng)],
        Case::ConvBias => vec![x(&mut rng), random(vec![4, 3, 1, 1], &mut rng), random(vec![4], &mut rng)],
        Case::Depthwise => vec![x(&mut rng), random(vec![3, 1, 3, 3], &mut rng)],
        Case::Separable => vec![
            x(&mut rng),
            random(vec![3, 1, 3, 3], &mut rng),
            random(vec![5, 3, 1, 1], &mut rng),
        ],
        Case::BatchNormTrain | Case::BatchNormEval => {
            vec![x(&mut rng), random(vec![3], &mut rng), random(vec![3], &mut rng)]
        }
        Case::Fusion => vec![
            random(vec![1, 2, 4, 4], &mut rng),
            random(vec![1, 2, 4, 4], &mut rng),
            random(vec![1, 2, 4, 4], &mut rng),
            Tensor::from_fn(vec![3], |_| rng.gen_range(0.2..1.5)),
        ],
        Case::Add | Case::Mul => vec![x(&mut rng), x(&mut rng)],
        Case::Dice => vec![Tensor::from_fn(vec![2, 1, 4, 5], |_| rng.gen_range(0.05..0.95))],
        _ => vec![x(&mut rng)],
    };
    raw.into_iter().map(|t| t.cast::<f32>().cast::<f64>()).collect()
}

fn dice_target<T: Scalar>() -> Tensor<T> {
    Tensor::from_fn(vec![2, 1, 4, 5], |i| if (i * 7) % 3 == 0 { T::one() } else { T::zero() })
}

fn bn_state<T: Scalar>() -> BatchNormState<T> {
    let mut s = BatchNormState::new(3);
    s.running_mean = vec![T::lit(0.1), T::lit(-0.2), T::lit(0.05)];
    s.running_var = vec![T::lit(0.8), T::lit(1.3), T::lit(0.5)];
    s
}

/// The op applied to graph inputs.
pub fn build<T: Scalar>(case: Case, g: &mut Graph<T>, xs: &[Var]) -> Result<Var, TensorError> {
    match case {
        Case::Conv { stride } => g.conv2d(xs[0], xs[1], None, stride),
        Case::ConvBias => g.conv2d(xs[0], xs[1], Some(xs[2]), 1),
        Case::Depthwise => g.depthwise_conv(xs[0], xs[1]),
        Case::Separable => g.depthwise_separable(xs[0], xs[1], xs[2]),
        Case::BatchNormTrain => g.batchnorm2d(xs[0], xs[1], xs[2], &bn_state(), Mode::Train, 0),
        Case::BatchNormEval => g.batchnorm2d(xs[0], xs[1], xs[2], &bn_state(), Mode::Eval, 0),
        Case::Swish => Ok(g.swish(xs[0])),
        Case::Sigmoid => Ok(g.sigmoid(xs[0])),
        Case::Relu => Ok(g.relu(xs[0])),
        Case::BilinearUp => g.bilinear_resize(xs[0], (9, 11)),
        Case::BilinearDown => g.bilinear_resize(xs[0], (3, 4)),
        Case::MaxPool => g.maxpool2(xs[0]),
        Case::CropPad => g.crop_pad(xs[0], (3, 8)),
        Case::Fusion => g.weighted_fusion(&xs[..3], xs[3], T::lit(1e-4)),
        Case::Add => g.add(xs[0], xs[1]),
        Case::Mul => g.mul(xs[0], xs[1]),
        Case::Sum => Ok(g.sum(xs[0])),
        Case::Dice => g.dice_loss(xs[0], &dice_target(), T::lit(DICE_EPS)),
    }
}

/// Scalar objective: the op's output contracted with a fixed random tensor.
fn objective<T: Scalar>(case: Case, inputs: &[Tensor<T>], seed: u64) -> Result<(Graph<T>, Vec<Var>, Var), TensorError> {
    let mut g = Graph::new();
    let xs: Vec<Var> = inputs.iter().map(|t| g.input(t)).collect();
    let out = build(case, &mut g, &xs)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0xA5A5);
    let r = Tensor::from_fn(g.shape(out).to_vec(), |_| T::lit(rng.gen_range(-1.0..1.0)));
    let rv = g.input(&r);
    let prod = g.mul(out, rv)?;
    let loss = g.sum(prod);
    Ok((g, xs, loss))
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error over all inputs of `case`, gradients computed in `T`.
pub fn check_case<T: Scalar>(case: Case, seed: u64) -> Result<f64, TensorError> {
    let inputs64 = case_inputs(case, seed);
    let inputs_t: Vec<Tensor<T>> = inputs64.iter().map(|t| t.cast()).collect();
    let (g, xs, loss) = objective(case, &inputs_t, seed)?;
    let grads = g.backward(loss)?;
    let f = |inputs: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let (g, _, loss) = objective(case, inputs, seed)?;
        Ok(g.value(loss)[0])
    };
    let mut worst: f64 = 0.0;
    for (k, x) in xs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(*x) {
            Some(a) => a.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; inputs64[k].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs64[k].numel() {
            let mut plus = inputs64.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs64.clone();
            minus[k].data_mut()[i] -= STEP;
            numeric.push((f(&plus)? - f(&minus)?) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Dice loss of the train-mode forward of `model` on a fixed batch.
pub fn model_loss<T: Scalar>(model: &MedSegModel<T>, x: &Tensor<T>, y: &Tensor<T>) -> Result<(Graph<T>, Var), TensorError> {
    let mut g = Graph::new();
    let xv = g.input(x);
    let p = model.forward(&mut g, xv, Mode::Train).map_err(|e| match e {
        airseg_core::medsegnet::ModelError::Tensor(t) => t,
        other => TensorError::Internal(other.to_string()),
    })?;
    let loss = g.dice_loss(p, y, T::lit(DICE_EPS))?;
    Ok((g, loss))
}

pub fn model_batch(h: usize, w: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let x = Tensor::from_fn(vec![2, 3, h, w], |_| rng.gen_range(0.0..1.0)).cast::<f32>().cast::<f64>();
    let y = Tensor::from_fn(vec![2, 1, h, w], |i| {
        let (r, c) = ((i / w) % h, i % w);
        if (r as isize - h as isize / 2).abs() + (c as isize - w as isize / 2).abs() < 5 {
            1.0
        } else {
            0.0
        }
    });
    (x, y)
}

/// Relative error of the model's parameter gradients computed in `T`,
/// against float64 central differences on `per_param` coordinates of every
/// parameter tensor.
pub fn check_model<T: Scalar>(model64: &MedSegModel<f64>, h: usize, w: usize, per_param: usize, seed: u64) -> Result<f64, TensorError> {
    let (x64, y64) = model_batch(h, w, seed);
    let mut model_t = model64.cast::<T>();
    let (g, loss) = model_loss(&model_t, &x64.cast(), &y64.cast())?;
    g.backward_into(loss, model_t.params_mut())?;

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ 0x5151);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = model64.clone();
    let ids: Vec<_> = (0..probe.params().len()).map(airseg_core::tensorcore::ParamId).collect();
    for id in ids {
        let n = probe.params().get(id).tensor.numel();
        let grad = model_t.params().get(id).tensor.grad().map(|g| g.to_vec());
        for _ in 0..per_param.min(n) {
            let i = rng.gen_range(0..n);
            analytic.push(grad.as_ref().map_or(0.0, |g| g[i].as_f64()));
            let orig = probe.params().get(id).tensor.data()[i];
            probe.params_mut().get_mut(id).tensor.data_mut()[i] = orig + STEP;
            let (gp, lp) = model_loss(&probe, &x64, &y64)?;
            probe.params_mut().get_mut(id).tensor.data_mut()[i] = orig - STEP;
            let (gm, lm) = model_loss(&probe, &x64, &y64)?;
            probe.params_mut().get_mut(id).tensor.data_mut()[i] = orig;
            numeric.push((gp.value(lp)[0] - gm.value(lm)[0]) / (2.0 * STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Model in float64 with weights rounded to float32.
pub fn toy_model(config: airseg_core::medsegnet::ArchConfig, seed: u64) -> MedSegModel<f64> {
    MedSegModel::<f32>::new(config, seed).expect("valid config").cast::<f64>()
}
