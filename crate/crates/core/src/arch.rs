//! Network builders: the MobileNetV2 trunk, the Inception module, and the
//! assembled Mob-INC classifier.
//!
//! The trunk follows the standard MobileNetV2 stage schedule. By default it is
//! cut after the 96-channel stage, which leaves a `14×14×96` feature map for a
//! `224×224` input; the two Inception modules, a global average pool and a
//! 512-unit fully connected layer sit on top, followed by the class logits.
//!
//! ```text
//! input 224×224×3
//!   stem      conv 3×3/2 → BN → ReLU                   112×112×32
//!   block_0   t=1  c=16  s=1                           112×112×16
//!   block_1-2 t=6  c=24  s=2                           56×56×24
//!   block_3-5 t=6  c=32  s=2                           28×28×32
//!   block_6-9 t=6  c=64  s=2                           14×14×64
//!   block_10-12 t=6 c=96 s=1   ← tap / trunk boundary  14×14×96
//!   inception_1                                        14×14×256
//!   inception_2                                        14×14×480
//!   global average pool → fc1 512 → ReLU → logits 4
//! ```

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, invalid, Error, Result};
use crate::graph::{Graph, Op};
use crate::ops::{
    ActivationKind, BatchNormParams, ConvParams, DenseParams, DepthwiseParams, GlobalPoolKind, PoolKind, PoolParams,
};
use crate::tensor::{Padding, Tensor};

/// One stage of inverted residual bottlenecks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckConfig {
    /// Expansion factor `t`.
    pub expansion: usize,
    pub out_channels: usize,
    /// Stride of the first block in the stage; later blocks use 1.
    pub stride: usize,
    pub repeat: usize,
}

const fn stage(expansion: usize, out_channels: usize, stride: usize, repeat: usize) -> BottleneckConfig {
    BottleneckConfig {
        expansion,
        out_channels,
        stride,
        repeat,
    }
}

/// The full MobileNetV2 schedule, 17 blocks named `block_0`..`block_16`.
pub const MOBILENET_V2_STAGES: [BottleneckConfig; 7] = [
    stage(1, 16, 1, 1),
    stage(6, 24, 2, 2),
    stage(6, 32, 2, 3),
    stage(6, 64, 2, 4),
    stage(6, 96, 1, 3),
    stage(6, 160, 2, 3),
    stage(6, 320, 1, 1),
];

pub const STEM_CHANNELS: usize = 32;
/// End of the 96-channel stage.
pub const DEFAULT_TAP: &str = "block_12";
pub const INPUT_SIZE: usize = 224;
pub const FC_WIDTH: usize = 512;
pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TrunkConfig {
    /// Channel width multiplier (alpha), in `(0, 2]`.
    pub width_multiplier: f64,
    /// Last block kept, `block_<i>`.
    pub tap: String,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig {
            width_multiplier: 1.0,
            tap: DEFAULT_TAP.to_string(),
        }
    }
}

impl TrunkConfig {
    fn tap_block(&self) -> Result<usize> {
        let total: usize = MOBILENET_V2_STAGES.iter().map(|s| s.repeat).sum();
        self.tap
            .strip_prefix("block_")
            .and_then(|i| i.parse::<usize>().ok())
            .filter(|&i| i < total)
            .ok_or_else(|| invalid!("tap point must be block_0..block_{}, got `{}`", total - 1, self.tap))
    }
}

/// Filter counts of one Inception module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InceptionConfig {
    pub b1_1x1: usize,
    pub b2_reduce: usize,
    pub b2_3x3: usize,
    pub b3_reduce: usize,
    pub b3_5x5: usize,
    pub b4_proj: usize,
}

impl InceptionConfig {
    /// GoogLeNet inception-3a counts.
    pub const MODULE_1: InceptionConfig = InceptionConfig {
        b1_1x1: 64,
        b2_reduce: 96,
        b2_3x3: 128,
        b3_reduce: 16,
        b3_5x5: 32,
        b4_proj: 32,
    };
    /// GoogLeNet inception-3b counts.
    pub const MODULE_2: InceptionConfig = InceptionConfig {
        b1_1x1: 128,
        b2_reduce: 128,
        b2_3x3: 192,
        b3_reduce: 32,
        b3_5x5: 96,
        b4_proj: 64,
    };

    pub fn out_channels(&self) -> usize {
        self.b1_1x1 + self.b2_3x3 + self.b3_5x5 + self.b4_proj
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.b1_1x1,
            self.b2_reduce,
            self.b2_3x3,
            self.b3_reduce,
            self.b3_5x5,
            self.b4_proj,
        ];
        if all.contains(&0) {
            return Err(invalid!("inception filter counts must be positive: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MobIncConfig {
    pub trunk: TrunkConfig,
    pub inception: [InceptionConfig; 2],
    pub fc_width: usize,
    pub num_classes: usize,
}

impl Default for MobIncConfig {
    fn default() -> Self {
        MobIncConfig {
            trunk: TrunkConfig::default(),
            inception: [InceptionConfig::MODULE_1, InceptionConfig::MODULE_2],
            fc_width: FC_WIDTH,
            num_classes: NUM_CLASSES,
        }
    }
}

impl MobIncConfig {
    pub fn build(&self, seed: u64) -> Result<Graph> {
        let trunk = build_trunk_with(&self.trunk, seed)?;
        assemble_with_head(trunk, self.inception, self.fc_width, self.num_classes, seed)
    }
}

/// Scales a channel count by the width multiplier, rounding to the nearest
/// multiple of 8 (halves round up), never below 8.
pub fn scale_channels(channels: usize, multiplier: f64) -> usize {
    let eighths = (channels as f64 * multiplier / 8.0 + 0.5).floor() as usize;
    (eighths * 8).max(8)
}

/// He-normal initializer with an independent stream per parameter name, so a
/// parameter's initial value depends only on the seed and its name.
struct Init {
    seed: u64,
}

impl Init {
    fn normal(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        let mut rng = crate::rng::stream(self.seed, name, 0);
        let std = (2.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape.to_vec(), |_| {
            let z: f64 = rng.sample(StandardNormal);
            (z * std) as f32
        })
    }

    fn conv(&self, id: &str, k: usize, cin: usize, cout: usize, stride: usize, bias: bool) -> Op {
        let weight = self.normal(&format!("{id}.weight"), &[k, k, cin, cout], k * k * cin);
        let bias = bias.then(|| Tensor::zeros([cout]));
        Op::Conv(ConvParams::new(weight, bias, stride, Padding::Same).expect("valid conv"))
    }

    fn depthwise(&self, id: &str, c: usize, stride: usize) -> Op {
        let weight = self.normal(&format!("{id}.weight"), &[3, 3, c, 1], 9);
        Op::Depthwise(DepthwiseParams::new(weight, stride, Padding::Same).expect("valid depthwise"))
    }

    fn dense(&self, id: &str, din: usize, dout: usize) -> Op {
        let weight = self.normal(&format!("{id}.weight"), &[din, dout], din);
        Op::Dense(DenseParams::new(weight, Tensor::zeros([dout])).expect("valid dense"))
    }
}

fn bn(c: usize) -> Op {
    Op::BatchNorm(BatchNormParams::identity(c))
}

fn channels_of(g: &Graph, id: &str) -> usize {
    *g.node(id).expect("node exists").shape.last().expect("shape")
}

/// MobileNetV2 trunk at the default tap (`block_12`, 14×14×96 at 224×224).
pub fn build_trunk(width_multiplier: f64, seed: u64) -> Result<Graph> {
    build_trunk_with(
        &TrunkConfig {
            width_multiplier,
            ..TrunkConfig::default()
        },
        seed,
    )
}

pub fn build_trunk_with(cfg: &TrunkConfig, seed: u64) -> Result<Graph> {
    let alpha = cfg.width_multiplier;
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(invalid!("width multiplier must lie in (0, 2], got {alpha}"));
    }
    let last_block = cfg.tap_block()?;
    let init = Init { seed };
    let mut g = Graph::new("input", INPUT_SIZE, INPUT_SIZE, 3)?;

    let stem = scale_channels(STEM_CHANNELS, alpha);
    g.add("stem.conv", init.conv("stem.conv", 3, 3, stem, 2, false), &["input"])?;
    g.add("stem.bn", bn(stem), &["stem.conv"])?;
    g.add("stem.relu", Op::Activation(ActivationKind::Relu), &["stem.bn"])?;

    let mut prev = "stem.relu".to_string();
    let mut cin = stem;
    let mut block = 0;
    'stages: for st in MOBILENET_V2_STAGES {
        let cout = scale_channels(st.out_channels, alpha);
        for r in 0..st.repeat {
            let stride = if r == 0 { st.stride } else { 1 };
            prev = add_bottleneck(&mut g, &init, &prev, block, cin, cout, st.expansion, stride)?;
            cin = cout;
            if block == last_block {
                break 'stages;
            }
            block += 1;
        }
    }
    g.set_output(&prev)?;
    g.set_trunk_boundary(&prev)?;
    Ok(g)
}

/// Appends one inverted residual block; returns the id of its output node.
#[allow(clippy::too_many_arguments)]
fn add_bottleneck(
    g: &mut Graph,
    init: &Init,
    input: &str,
    index: usize,
    cin: usize,
    cout: usize,
    expansion: usize,
    stride: usize,
) -> Result<String> {
    let p = format!("block_{index}");
    let hidden = cin * expansion;
    let mut x = input.to_string();
    if expansion != 1 {
        let id = format!("{p}.expand");
        g.add(&id, init.conv(&id, 1, cin, hidden, 1, false), &[&x])?;
        g.add(&format!("{p}.expand_bn"), bn(hidden), &[&id])?;
        g.add(&format!("{p}.expand_relu"), Op::Activation(ActivationKind::Relu6), &[&format!("{p}.expand_bn")])?;
        x = format!("{p}.expand_relu");
    }
    let id = format!("{p}.depthwise");
    g.add(&id, init.depthwise(&id, hidden, stride), &[&x])?;
    g.add(&format!("{p}.depthwise_bn"), bn(hidden), &[&id])?;
    g.add(&format!("{p}.depthwise_relu"), Op::Activation(ActivationKind::Relu6), &[&format!("{p}.depthwise_bn")])?;
    let id = format!("{p}.project");
    g.add(&id, init.conv(&id, 1, hidden, cout, 1, false), &[&format!("{p}.depthwise_relu")])?;
    let out = format!("{p}.project_bn");
    g.add(&out, bn(cout), &[&id])?;
    if stride == 1 && cin == cout {
        let add = format!("{p}.add");
        g.add(&add, Op::Add, &[input, &out])?;
        return Ok(add);
    }
    Ok(out)
}

/// Appends an Inception module reading `input`; returns the concat node id.
pub fn append_inception(
    g: &mut Graph,
    input: &str,
    prefix: &str,
    in_channels: usize,
    cfg: &InceptionConfig,
    seed: u64,
) -> Result<String> {
    cfg.validate()?;
    let actual = g
        .node(input)
        .ok_or_else(|| invalid!("unknown inception input `{input}`"))?
        .shape
        .last()
        .copied()
        .unwrap_or(0);
    if actual != in_channels {
        return Err(dim_err!(
            "{prefix} expects {in_channels} input channels, `{input}` produces {actual}"
        ));
    }
    let init = Init { seed };
    let relu = || Op::Activation(ActivationKind::Relu);
    let conv_relu = |g: &mut Graph, name: &str, from: &str, k: usize, cin: usize, cout: usize| -> Result<String> {
        let id = format!("{prefix}.{name}");
        g.add(&id, init.conv(&id, k, cin, cout, 1, true), &[from])?;
        let r = format!("{id}_relu");
        g.add(&r, relu(), &[&id])?;
        Ok(r)
    };

    let b1 = conv_relu(g, "b1_1x1", input, 1, in_channels, cfg.b1_1x1)?;
    let b2 = conv_relu(g, "b2_reduce", input, 1, in_channels, cfg.b2_reduce)?;
    let b2 = conv_relu(g, "b2_3x3", &b2, 3, cfg.b2_reduce, cfg.b2_3x3)?;
    let b3 = conv_relu(g, "b3_reduce", input, 1, in_channels, cfg.b3_reduce)?;
    let b3 = conv_relu(g, "b3_5x5", &b3, 5, cfg.b3_reduce, cfg.b3_5x5)?;
    let pool = format!("{prefix}.b4_pool");
    g.add(
        &pool,
        Op::Pool(PoolParams {
            kind: PoolKind::Max,
            window: (3, 3),
            stride: 1,
            padding: Padding::Same,
        }),
        &[input],
    )?;
    let b4 = conv_relu(g, "b4_proj", &pool, 1, in_channels, cfg.b4_proj)?;

    let out = format!("{prefix}.concat");
    g.add(&out, Op::Concat, &[&b1, &b2, &b3, &b4])?;
    Ok(out)
}

/// A standalone Inception module on a nominal `14×14×in_channels` input.
pub fn build_inception(in_channels: usize, cfg: &InceptionConfig, seed: u64) -> Result<Graph> {
    let mut g = Graph::new("input", 14, 14, in_channels)?;
    append_inception(&mut g, "input", "inception", in_channels, cfg, seed)?;
    Ok(g)
}

/// Grafts two Inception modules and the classifier head onto a trunk whose
/// output node is the tap point.
pub fn assemble_mob_inc(trunk: Graph, inception: [InceptionConfig; 2], num_classes: usize, seed: u64) -> Result<Graph> {
    assemble_with_head(trunk, inception, FC_WIDTH, num_classes, seed)
}

fn assemble_with_head(
    mut g: Graph,
    inception: [InceptionConfig; 2],
    fc_width: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Graph> {
    if num_classes < 2 {
        return Err(invalid!("a classifier needs at least 2 classes, got {num_classes}"));
    }
    if fc_width == 0 {
        return Err(invalid!("fully connected width must be positive"));
    }
    let tap = g.output_id().to_string();
    g.set_trunk_boundary(&tap)?;
    let c = channels_of(&g, &tap);
    let x = append_inception(&mut g, &tap, "inception_1", c, &inception[0], seed)?;
    let x = append_inception(&mut g, &x, "inception_2", inception[0].out_channels(), &inception[1], seed)?;

    let init = Init { seed };
    let c = inception[1].out_channels();
    g.add("head.pool", Op::GlobalPool(GlobalPoolKind::Avg), &[&x])?;
    g.add("head.fc1", init.dense("head.fc1", c, fc_width), &["head.pool"])?;
    g.add("head.fc1_relu", Op::Activation(ActivationKind::Relu), &["head.fc1"])?;
    g.add("head.logits", init.dense("head.logits", fc_width, num_classes), &["head.fc1_relu"])?;
    Ok(g)
}

/// Default Mob-INC: width 1.0, GoogLeNet 3a/3b Inception counts, 4 classes.
pub fn mob_inc(seed: u64) -> Result<Graph> {
    MobIncConfig::default().build(seed)
}

/// Exact number of parameter scalars.
pub fn count_parameters(graph: &Graph, trainable_only: bool) -> usize {
    graph.parameter_count(trainable_only)
}

/// Maps a build error at a node back to a plain error for callers that only
/// care about the cause.
pub fn is_dimension_error(e: &Error) -> bool {
    matches!(e.root_cause(), Error::Dimension(_))
}
