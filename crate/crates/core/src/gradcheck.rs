//! Central finite-difference checks of every backward kernel, run in f64.
//!
//! Each instance draws random inputs and a random upstream gradient `r`, and
//! compares the analytic gradient of `L = Σ r ⊙ f(inputs)` against
//! `(L(x + h) − L(x − h)) / 2h` for every input scalar. The error of an
//! instance is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
//!
//! Inputs to ReLU, ReLU6 and max pooling are drawn so no value sits within
//! `0.01` of a kink or of a competing window entry; a central difference
//! straddling a kink measures the wrong one-sided derivative.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::graph::{Graph, Op};
use crate::ops::*;
use crate::tensor::{Padding, Tensor};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_INSTANCES: usize = 20;

/// Every op the suite covers, in report order.
pub const OPS: [&str; 15] = [
    "conv2d",
    "depthwise_conv2d",
    "batchnorm_train",
    "batchnorm_infer",
    "relu",
    "relu6",
    "max_pool",
    "avg_pool",
    "global_avg_pool",
    "global_max_pool",
    "concat",
    "add",
    "fully_connected",
    "softmax_cross_entropy",
    "graph",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Scales the analytic gradient of the named op by `1 + 1e-3`, to prove
    /// the harness catches a broken backward pass.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            instances: DEFAULT_INSTANCES,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OpReport> {
        self.ops.iter().filter(|o| !o.passed)
    }

    /// Fixed-width table, one row per op.
    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>9} {:>14}  {}\n", "op", "instances", "max rel error", "result");
        for o in &self.ops {
            s.push_str(&format!(
                "{:<24} {:>9} {:>14.3e}  {}\n",
                o.op,
                o.instances,
                o.max_rel_error,
                if o.passed { "pass" } else { "FAIL" }
            ));
        }
        s
    }
}

type Forward = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;
type Backward = Box<dyn Fn(&[Tensor<f64>], &Tensor<f64>) -> Result<Vec<Tensor<f64>>>>;

/// One random instance: inputs plus the function and its claimed gradient.
struct Instance {
    inputs: Vec<Tensor<f64>>,
    forward: Forward,
    backward: Backward,
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut ops = Vec::with_capacity(OPS.len());
    for (k, &op) in OPS.iter().enumerate() {
        let mut rng = crate::rng::stream(cfg.seed, "gradcheck", k as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..cfg.instances {
            let inst = instance(op, &mut rng)?;
            let scale = if cfg.corrupt.as_deref() == Some(op) { 1.0 + 1e-3 } else { 1.0 };
            worst = worst.max(check(inst, cfg.step, scale, &mut rng)?);
        }
        ops.push(OpReport {
            op,
            instances: cfg.instances,
            max_rel_error: worst,
            passed: worst < cfg.tolerance,
        });
    }
    Ok(GradcheckReport {
        ops,
        tolerance: cfg.tolerance,
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn check(mut inst: Instance, h: f64, scale: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let y = (inst.forward)(&inst.inputs)?;
    let r = normal(y.shape(), 1.0, rng);
    let analytic = (inst.backward)(&inst.inputs, &r)?;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for k in 0..inst.inputs.len() {
        for i in 0..inst.inputs[k].len() {
            let x0 = inst.inputs[k].data()[i];
            inst.inputs[k].data_mut()[i] = x0 + h;
            let lp = dot(&r, &(inst.forward)(&inst.inputs)?);
            inst.inputs[k].data_mut()[i] = x0 - h;
            let lm = dot(&r, &(inst.forward)(&inst.inputs)?);
            inst.inputs[k].data_mut()[i] = x0;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[k].data()[i] * scale;
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    Ok(if denom == 0.0 { 0.0 } else { diff.sqrt() / denom })
}

fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// Values at least `gap` apart from each other, shuffled.
fn distinct(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("sized")
}

/// Uniform on `[lo, hi]`, resampled while within `margin` of any kink.
fn away_from(shape: &[usize], lo: f64, hi: f64, kinks: &[f64], margin: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > margin) {
            break v;
        }
    })
}

fn image_shape(rng: &mut impl Rng, min_side: usize) -> [usize; 4] {
    [
        rng.random_range(1..=2),
        rng.random_range(min_side..=min_side + 3),
        rng.random_range(min_side..=min_side + 3),
        rng.random_range(1..=3),
    ]
}

fn padding(rng: &mut impl Rng) -> Padding {
    if rng.random_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    }
}

fn instance(op: &str, rng: &mut ChaCha8Rng) -> Result<Instance> {
    Ok(match op {
        "conv2d" => {
            let k = [1, 3, 5][rng.random_range(0..3)];
            let s = image_shape(rng, k);
            let (stride, pad, cout, bias) = (rng.random_range(1..=2), padding(rng), rng.random_range(1..=3), rng.random_bool(0.5));
            let mut inputs = vec![normal(&s, 1.0, rng), normal(&[k, k, s[3], cout], 0.5, rng)];
            if bias {
                inputs.push(normal(&[cout], 0.5, rng));
            }
            let params = move |t: &[Tensor<f64>]| ConvParams::new(t[1].clone(), t.get(2).cloned(), stride, pad);
            Instance {
                inputs,
                forward: Box::new(move |t| conv2d(&t[0], &params(t)?)),
                backward: Box::new(move |t, dy| {
                    let g = conv2d_backward(&t[0], &params(t)?, dy, true)?;
                    let mut out = vec![g.input.expect("requested"), g.weight];
                    out.extend(g.bias);
                    Ok(out)
                }),
            }
        }
        "depthwise_conv2d" => {
            let k = [3, 5][rng.random_range(0..2)];
            let s = image_shape(rng, k);
            let (stride, pad) = (rng.random_range(1..=2), padding(rng));
            let params = move |t: &[Tensor<f64>]| DepthwiseParams::new(t[1].clone(), stride, pad);
            Instance {
                inputs: vec![normal(&s, 1.0, rng), normal(&[k, k, s[3], 1], 0.5, rng)],
                forward: Box::new(move |t| depthwise_conv2d(&t[0], &params(t)?)),
                backward: Box::new(move |t, dy| {
                    let g = depthwise_conv2d_backward(&t[0], &params(t)?, dy, true)?;
                    Ok(vec![g.input.expect("requested"), g.weight])
                }),
            }
        }
        "batchnorm_train" | "batchnorm_infer" => {
            let mode = if op == "batchnorm_train" { Mode::Train } else { Mode::Infer };
            let s = image_shape(rng, 2);
            let c = s[3];
            let mut running = BatchNormParams::<f64>::identity(c);
            running.running_mean = normal(&[c], 0.5, rng);
            running.running_var = Tensor::from_fn([c], |_| rng.random_range(0.5..2.0));
            let params = move |t: &[Tensor<f64>]| BatchNormParams {
                gamma: t[1].clone(),
                beta: t[2].clone(),
                ..running.clone()
            };
            let p2 = params.clone();
            let x = Tensor::from_fn(s.to_vec(), |_| 0.3 + 1.5 * rng.sample::<f64, _>(StandardNormal));
            Instance {
                inputs: vec![x, normal(&[c], 1.0, rng), normal(&[c], 1.0, rng)],
                forward: Box::new(move |t| Ok(batchnorm(&t[0], &params(t), mode)?.output)),
                backward: Box::new(move |t, dy| {
                    let p = p2(t);
                    let out = batchnorm(&t[0], &p, mode)?;
                    let g = batchnorm_backward(&t[0], &p, &out.cache, dy, true)?;
                    Ok(vec![g.input.expect("requested"), g.gamma, g.beta])
                }),
            }
        }
        "relu" | "relu6" => {
            let kind = if op == "relu" { ActivationKind::Relu } else { ActivationKind::Relu6 };
            let s = image_shape(rng, 2);
            Instance {
                inputs: vec![away_from(&s, -3.0, 9.0, &[0.0, 6.0], 0.01, rng)],
                forward: Box::new(move |t| Ok(activation(&t[0], kind))),
                backward: Box::new(move |t, dy| Ok(vec![activation_backward(&t[0], kind, dy)?])),
            }
        }
        "max_pool" | "avg_pool" => {
            let kind = if op == "max_pool" { PoolKind::Max } else { PoolKind::Avg };
            let k = rng.random_range(2..=3);
            let s = image_shape(rng, k);
            let p = PoolParams {
                kind,
                window: (k, k),
                stride: rng.random_range(1..=2),
                padding: padding(rng),
            };
            let x = if kind == PoolKind::Max { distinct(&s, 0.01, rng) } else { normal(&s, 1.0, rng) };
            Instance {
                inputs: vec![x],
                forward: Box::new(move |t| pool(&t[0], &p)),
                backward: Box::new(move |t, dy| Ok(vec![pool_backward(&t[0], &p, dy)?])),
            }
        }
        "global_avg_pool" | "global_max_pool" => {
            let kind = if op == "global_avg_pool" { GlobalPoolKind::Avg } else { GlobalPoolKind::Max };
            let s = image_shape(rng, 1);
            let x = if kind == GlobalPoolKind::Max { distinct(&s, 0.01, rng) } else { normal(&s, 1.0, rng) };
            Instance {
                inputs: vec![x],
                forward: Box::new(move |t| global_pool(&t[0], kind)),
                backward: Box::new(move |t, dy| Ok(vec![global_pool_backward(&t[0], kind, dy)?])),
            }
        }
        "concat" => {
            let s = image_shape(rng, 1);
            let widths: Vec<usize> = (0..rng.random_range(2..=4)).map(|_| rng.random_range(1..=3)).collect();
            let inputs = widths.iter().map(|&c| normal(&[s[0], s[1], s[2], c], 1.0, rng)).collect();
            Instance {
                inputs,
                forward: Box::new(|t| concat_channels(&t.iter().collect::<Vec<_>>())),
                backward: Box::new(move |_, dy| split_channels(dy, &widths)),
            }
        }
        "add" => {
            let s = image_shape(rng, 1);
            Instance {
                inputs: vec![normal(&s, 1.0, rng), normal(&s, 1.0, rng)],
                forward: Box::new(|t| add(&t[0], &t[1])),
                backward: Box::new(|_, dy| Ok(vec![dy.clone(), dy.clone()])),
            }
        }
        "fully_connected" => {
            let (n, din, dout) = (rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=5));
            let params = |t: &[Tensor<f64>]| DenseParams::new(t[1].clone(), t[2].clone());
            Instance {
                inputs: vec![normal(&[n, din], 1.0, rng), normal(&[din, dout], 0.5, rng), normal(&[dout], 0.5, rng)],
                forward: Box::new(move |t| fully_connected(&t[0], &params(t)?)),
                backward: Box::new(move |t, dy| {
                    let g = fully_connected_backward(&t[0], &params(t)?, dy, true)?;
                    Ok(vec![g.input.expect("requested"), g.weight, g.bias])
                }),
            }
        }
        "softmax_cross_entropy" => {
            let (n, k) = (rng.random_range(1..=4), rng.random_range(2..=5));
            let labels = {
                let hot: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
                Tensor::from_fn([n, k], |i| if hot[i / k] == i % k { 1.0 } else { 0.0 })
            };
            let l2 = labels.clone();
            Instance {
                inputs: vec![normal(&[n, k], 2.0, rng)],
                forward: Box::new(move |t| Ok(Tensor::scalar(softmax_cross_entropy(&t[0], &labels)?.0))),
                backward: Box::new(move |t, dy| {
                    let (_, probs) = softmax_cross_entropy(&t[0], &l2)?;
                    let g = softmax_cross_entropy_grad(&probs, &l2)?;
                    let r = dy.data()[0];
                    Ok(vec![g.map(|v| v * r)])
                }),
            }
        }
        "graph" => graph_instance(rng)?,
        other => unreachable!("unknown gradcheck op `{other}`"),
    })
}

/// A small kink-free graph with fan-out, concat, a residual add and batch
/// norm, checked against every parameter and the input.
fn graph_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    // Batch norm only sees the direction of the weights feeding it, so a step
    // h on a weight of size |w| has relative effect h / |w|. Keep those
    // weights well away from zero.
    let (h, w, c) = (rng.random_range(3..=5), rng.random_range(3..=5), 2);
    let conv = |rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize, stride: usize| {
        let weight = Tensor::from_fn([k, k, cin, cout], |_| {
            let m = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        });
        Op::Conv(ConvParams::new(weight, Some(normal(&[cout], 0.2, rng)), stride, Padding::Same).expect("valid"))
    };
    let mut g: Graph<f64> = Graph::new("x", h, w, c)?;
    g.add("a", conv(rng, 3, c, 2, 1), &["x"])?;
    g.add("b", conv(rng, 1, c, 3, 1), &["x"])?;
    g.add("cat", Op::Concat, &["a", "b"])?;
    let mut bn = BatchNormParams::identity(5);
    bn.gamma = normal(&[5], 1.0, rng);
    bn.beta = normal(&[5], 1.0, rng);
    g.add("bn", Op::BatchNorm(bn), &["cat"])?;
    g.add("dw", Op::Depthwise(DepthwiseParams::new(normal(&[3, 3, 5, 1], 0.5, rng), 1, Padding::Same)?), &["bn"])?;
    g.add("res", Op::Add, &["dw", "cat"])?;
    g.add("down", conv(rng, 3, 5, 4, 2), &["res"])?;
    g.add("gap", Op::GlobalPool(GlobalPoolKind::Avg), &["down"])?;
    g.add("fc", Op::Dense(DenseParams::new(normal(&[4, 3], 0.5, rng), normal(&[3], 0.2, rng))?), &["gap"])?;

    let names: Vec<String> = g.params().iter().map(|p| p.name.clone()).collect();
    let n = rng.random_range(2..=3);
    let mut inputs = vec![normal(&[n, h, w, c], 1.0, rng)];
    inputs.extend(g.params().iter().map(|p| p.tensor.clone()));

    let with = move |t: &[Tensor<f64>]| {
        let mut g = g.clone();
        for (p, v) in g.params_mut().into_iter().zip(&t[1..]) {
            *p.tensor = v.clone();
        }
        g
    };
    let w2 = with.clone();
    Ok(Instance {
        inputs,
        forward: Box::new(move |t| Ok(with(t).forward(&t[0], Mode::Train)?.into_output())),
        backward: Box::new(move |t, dy| {
            let mut g = w2(t);
            let acts = g.forward(&t[0], Mode::Train)?;
            let (grads, dx) = g.backward_with_input(&acts, dy)?;
            let mut out = vec![dx];
            out.extend(names.iter().map(|n| grads[n].clone()));
            Ok(out)
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kink_free_sampling() {
        let mut rng = crate::rng::stream(0, "t", 0);
        let x = away_from(&[1000], -3.0, 9.0, &[0.0, 6.0], 0.01, &mut rng);
        assert!(x.data().iter().all(|v| v.abs() > 0.01 && (v - 6.0).abs() > 0.01));
        let d = distinct(&[50], 0.01, &mut rng);
        let mut v = d.data().to_vec();
        v.sort_by(f64::total_cmp);
        assert!(v.windows(2).all(|p| p[1] - p[0] > 0.0099));
    }

    #[test]
    fn small_suite_passes_and_corruption_fails() {
        let cfg = GradcheckConfig {
            instances: 3,
            ..Default::default()
        };
        let report = run_gradcheck(&cfg).unwrap();
        assert!(report.passed(), "{}", report.table());
        let bad = run_gradcheck(&GradcheckConfig {
            corrupt: Some("dense".into()),
            ..cfg.clone()
        })
        .unwrap();
        assert!(bad.passed(), "unknown op names corrupt nothing");
        let bad = run_gradcheck(&GradcheckConfig {
            corrupt: Some("fully_connected".into()),
            ..cfg
        })
        .unwrap();
        assert_eq!(bad.failures().map(|o| o.op).collect::<Vec<_>>(), ["fully_connected"]);
    }
}
