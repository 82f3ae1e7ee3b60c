//! Network builders: the multi-leg segmentation net, the classifier head that
//! consumes its features, and a VGG-style classifier trained from scratch.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CheckpointFile, TrainMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{Graph, GraphBuilder, Mode, NodeId, Real, Tensor};
use crate::error::{Error, Result};

/// Name of the marked node holding the classifier feature concatenation.
pub const FEATURES: &str = "features";

/// Pooling stages of the segmentation net.
pub const MNET_DEPTH: usize = 4;

/// Dropout rate used after the bottleneck pool and in the FC stacks.
pub const DROPOUT_RATE: f64 = 0.5;

fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Error::Param(format!("dim must be 2 or 3, got {dim}")))
    }
}

fn check_spatial(op: &'static str, dim: usize, spatial: &[usize], stages: usize) -> Result<()> {
    let step = 1usize << stages;
    if spatial.len() != dim || spatial.iter().any(|&d| d == 0 || d % step != 0) {
        return Err(Error::shape(
            op,
            format!("spatial dims {spatial:?} must be {dim} positive multiples of {step}"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MNetSpec {
    pub dim: usize,
    pub in_channels: usize,
    pub spatial: Vec<usize>,
    pub n_s: usize,
    /// Segmentation labels including background.
    pub n_labels: usize,
    /// Depths whose outputs the right leg brings back to full resolution:
    /// 1..=3 are decoder outputs, 4 is the bottleneck.
    pub right_leg_levels: Vec<usize>,
}

impl MNetSpec {
    /// Default right leg: everything in 2D, the two shallowest outputs in 3D.
    pub fn new(dim: usize, spatial: &[usize], n_s: usize, n_labels: usize) -> Self {
        let right_leg_levels = if dim == 3 { vec![1, 2] } else { vec![1, 2, 3, 4] };
        MNetSpec {
            dim,
            in_channels: 1,
            spatial: spatial.to_vec(),
            n_s,
            n_labels,
            right_leg_levels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.dim)?;
        check_spatial("build_mnet", self.dim, &self.spatial, MNET_DEPTH)?;
        if self.n_s == 0 || self.in_channels == 0 || self.n_labels < 2 {
            return Err(Error::Param(format!(
                "n_s {} / input channels {} must be positive and labels {} at least 2",
                self.n_s, self.in_channels, self.n_labels
            )));
        }
        let mut seen = [false; MNET_DEPTH + 1];
        for &l in &self.right_leg_levels {
            if !(1..=MNET_DEPTH).contains(&l) || seen[l] {
                return Err(Error::Param(format!("bad right-leg levels {:?}", self.right_leg_levels)));
            }
            seen[l] = true;
        }
        Ok(())
    }

    /// Width of the classifier feature concatenation.
    pub fn feature_channels(&self) -> usize {
        self.n_s * (1 + self.right_leg_levels.iter().map(|&l| 1usize << l).sum::<usize>())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClsHeadSpec {
    pub dim: usize,
    pub input_channels: usize,
    pub spatial: Vec<usize>,
    pub n_c: usize,
    pub n_fc: usize,
    /// Conv-pool pairs after the leading pool.
    pub r: usize,
    pub n_classes: usize,
}

impl ClsHeadSpec {
    pub fn validate(&self) -> Result<()> {
        check_dim(self.dim)?;
        if self.r == 0 {
            return Err(Error::Param("classifier head needs at least one conv-pool pair".into()));
        }
        check_spatial("build_cls_head", self.dim, &self.spatial, self.r + 1)?;
        if self.n_c == 0 || self.n_fc == 0 || self.n_classes < 2 || self.input_channels == 0 {
            return Err(Error::Param(format!("invalid head widths {self:?}")));
        }
        Ok(())
    }
}

/// Conv blocks per stage and channel multipliers of the scratch net.
pub const SCRATCH_BLOCKS: [usize; 5] = [2, 2, 3, 3, 3];
pub const SCRATCH_MULTIPLIERS: [usize; 5] = [1, 2, 4, 8, 8];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScratchSpec {
    pub dim: usize,
    pub in_channels: usize,
    pub spatial: Vec<usize>,
    pub n_c: usize,
    pub n_fc: usize,
    pub n_classes: usize,
    pub batchnorm: bool,
}

/// One entry of a layer sequence, independent of any allocated weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv { inputs: usize, outputs: usize },
    BatchNorm { channels: usize },
    Relu,
    MaxPool,
    Flatten,
    Dense { inputs: usize, outputs: usize },
    Dropout,
    Softmax,
}

impl Layer {
    pub fn param_count(&self, dim: usize) -> usize {
        match *self {
            Layer::Conv { inputs, outputs } => outputs * inputs * 3usize.pow(dim as u32) + outputs,
            Layer::BatchNorm { channels } => 2 * channels,
            Layer::Dense { inputs, outputs } => outputs * inputs + outputs,
            _ => 0,
        }
    }
}

impl ScratchSpec {
    pub fn validate(&self) -> Result<()> {
        check_dim(self.dim)?;
        check_spatial("build_scratch", self.dim, &self.spatial, SCRATCH_BLOCKS.len())?;
        if self.n_c == 0 || self.n_fc == 0 || self.n_classes < 2 || self.in_channels == 0 {
            return Err(Error::Param(format!("invalid scratch widths {self:?}")));
        }
        Ok(())
    }

    pub fn layer_plan(&self) -> Result<Vec<Layer>> {
        self.validate()?;
        let mut plan = Vec::new();
        let mut c = self.in_channels;
        for (&convs, &mult) in SCRATCH_BLOCKS.iter().zip(&SCRATCH_MULTIPLIERS) {
            for _ in 0..convs {
                let out = self.n_c * mult;
                plan.push(Layer::Conv { inputs: c, outputs: out });
                if self.batchnorm {
                    plan.push(Layer::BatchNorm { channels: out });
                }
                plan.push(Layer::Relu);
                c = out;
            }
            plan.push(Layer::MaxPool);
        }
        plan.push(Layer::Flatten);
        let reduced: usize = self.spatial.iter().map(|d| d >> SCRATCH_BLOCKS.len()).product();
        let mut width = c * reduced;
        for _ in 0..2 {
            plan.push(Layer::Dense { inputs: width, outputs: self.n_fc });
            if self.batchnorm {
                plan.push(Layer::BatchNorm { channels: self.n_fc });
            }
            plan.push(Layer::Relu);
            plan.push(Layer::Dropout);
            width = self.n_fc;
        }
        plan.push(Layer::Dense { inputs: width, outputs: self.n_classes });
        plan.push(Layer::Softmax);
        Ok(plan)
    }

    pub fn planned_params(&self) -> Result<usize> {
        Ok(self.layer_plan()?.iter().map(|l| l.param_count(self.dim)).sum())
    }
}

/// Any buildable architecture; echoed into checkpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ArchSpec {
    MNet(MNetSpec),
    ClsHead(ClsHeadSpec),
    Scratch(ScratchSpec),
}

impl ArchSpec {
    pub fn build<T: Real>(&self, seed: u64) -> Result<Graph<T>> {
        match self {
            ArchSpec::MNet(s) => build_mnet(s, seed),
            ArchSpec::ClsHead(s) => build_cls_head(s, seed),
            ArchSpec::Scratch(s) => build_scratch(s, seed),
        }
    }

    pub fn kind_tag(&self) -> u8 {
        match self {
            ArchSpec::MNet(_) => 1,
            ArchSpec::ClsHead(_) => 2,
            ArchSpec::Scratch(_) => 3,
        }
    }

    /// Scalar fields in checkpoint order.
    pub fn fields(&self) -> Vec<u32> {
        let mut f = Vec::new();
        let push_spatial = |f: &mut Vec<u32>, s: &[usize]| f.extend(s.iter().map(|&d| d as u32));
        match self {
            ArchSpec::MNet(s) => {
                f.extend([s.dim, s.in_channels].map(|v| v as u32));
                push_spatial(&mut f, &s.spatial);
                f.extend([s.n_s, s.n_labels, MNET_DEPTH, s.right_leg_levels.len()].map(|v| v as u32));
                f.extend(s.right_leg_levels.iter().map(|&v| v as u32));
            }
            ArchSpec::ClsHead(s) => {
                f.extend([s.dim, s.input_channels].map(|v| v as u32));
                push_spatial(&mut f, &s.spatial);
                f.extend([s.n_c, s.n_fc, s.r, s.n_classes].map(|v| v as u32));
            }
            ArchSpec::Scratch(s) => {
                f.extend([s.dim, s.in_channels].map(|v| v as u32));
                push_spatial(&mut f, &s.spatial);
                f.extend([s.n_c, s.n_fc, s.n_classes, s.batchnorm as usize].map(|v| v as u32));
            }
        }
        f
    }

    pub fn from_fields(tag: u8, fields: &[u32]) -> Result<Self> {
        let bad = || Error::Format(format!("architecture block (kind {tag}) has malformed fields {fields:?}"));
        let v: Vec<usize> = fields.iter().map(|&x| x as usize).collect();
        let dim = *v.first().ok_or_else(bad)?;
        if !(dim == 2 || dim == 3) {
            return Err(bad());
        }
        let head = 2 + dim;
        if v.len() < head {
            return Err(bad());
        }
        let spatial = v[2..head].to_vec();
        let rest = &v[head..];
        let spec = match tag {
            1 => {
                if rest.len() < 4 || rest[2] != MNET_DEPTH || rest.len() != 4 + rest[3] {
                    return Err(bad());
                }
                ArchSpec::MNet(MNetSpec {
                    dim,
                    in_channels: v[1],
                    spatial,
                    n_s: rest[0],
                    n_labels: rest[1],
                    right_leg_levels: rest[4..].to_vec(),
                })
            }
            2 => {
                if rest.len() != 4 {
                    return Err(bad());
                }
                ArchSpec::ClsHead(ClsHeadSpec {
                    dim,
                    input_channels: v[1],
                    spatial,
                    n_c: rest[0],
                    n_fc: rest[1],
                    r: rest[2],
                    n_classes: rest[3],
                })
            }
            3 => {
                if rest.len() != 4 || rest[3] > 1 {
                    return Err(bad());
                }
                ArchSpec::Scratch(ScratchSpec {
                    dim,
                    in_channels: v[1],
                    spatial,
                    n_c: rest[0],
                    n_fc: rest[1],
                    n_classes: rest[2],
                    batchnorm: rest[3] == 1,
                })
            }
            _ => return Err(Error::Format(format!("unknown architecture kind {tag}"))),
        };
        Ok(spec)
    }
}

fn conv_bn_relu<T: Real>(b: &mut GraphBuilder<T>, x: NodeId, out: usize, name: &str) -> Result<NodeId> {
    let c = b.conv(x, out, &format!("{name}.conv"))?;
    let n = b.batchnorm(c, &format!("{name}.bn"))?;
    b.relu(n, &format!("{name}.relu"))
}

/// Two cascaded conv-BN-ReLU units with the first unit's output added to the second's.
/// Returns (first unit output, pair output).
fn conv_pair<T: Real>(b: &mut GraphBuilder<T>, x: NodeId, out: usize, name: &str) -> Result<(NodeId, NodeId)> {
    let first = conv_bn_relu(b, x, out, &format!("{name}.a"))?;
    let second = conv_bn_relu(b, first, out, &format!("{name}.b"))?;
    let sum = b.add(first, second, &format!("{name}.sum"))?;
    Ok((first, sum))
}

pub fn build_mnet<T: Real>(spec: &MNetSpec, seed: u64) -> Result<Graph<T>> {
    spec.validate()?;
    let n_s = spec.n_s;
    let mut b = GraphBuilder::new(seed);
    let input = b.input(spec.in_channels, &spec.spatial)?;

    let (first, e0) = conv_pair(&mut b, input, n_s, "enc0")?;
    let mut skips = vec![e0];
    let mut left = first;
    let mut x = e0;
    for i in 1..=MNET_DEPTH {
        let mut pooled = b.maxpool(x, &format!("enc{i}.pool"))?;
        if i == MNET_DEPTH {
            pooled = b.dropout(pooled, DROPOUT_RATE, "bottleneck.dropout")?;
        }
        left = b.maxpool(left, &format!("left{i}.pool"))?;
        let joined = b.concat(&[pooled, left], &format!("enc{i}.join"))?;
        let (_, out) = conv_pair(&mut b, joined, n_s << i, &format!("enc{i}"))?;
        skips.push(out);
        x = out;
    }

    // skips[4] is the bottleneck; decoder outputs are stored by depth.
    let mut outputs = [0; MNET_DEPTH + 1];
    outputs[MNET_DEPTH] = x;
    for i in (0..MNET_DEPTH).rev() {
        let up = b.upsample(x, &format!("dec{i}.up"))?;
        let joined = b.concat(&[up, skips[i]], &format!("dec{i}.join"))?;
        let (_, out) = conv_pair(&mut b, joined, n_s << i, &format!("dec{i}"))?;
        outputs[i] = out;
        x = out;
    }

    let mut parts = vec![outputs[0]];
    let mut levels = spec.right_leg_levels.clone();
    levels.sort_unstable();
    for l in levels {
        let mut y = outputs[l];
        for k in 0..l {
            y = b.upsample(y, &format!("right{l}.up{k}"))?;
        }
        parts.push(y);
    }
    let features = b.concat(&parts, FEATURES)?;
    b.mark(FEATURES, features)?;
    let logits = b.pointwise_conv(features, spec.n_labels, "seg.out")?;
    let probs = b.softmax(logits, "seg.softmax")?;
    b.finish(probs)
}

fn fc_stack<T: Real>(b: &mut GraphBuilder<T>, mut x: NodeId, n_fc: usize, n_classes: usize, batchnorm: bool) -> Result<NodeId> {
    for i in 0..2 {
        x = b.dense(x, n_fc, &format!("fc{i}"))?;
        if batchnorm {
            x = b.batchnorm(x, &format!("fc{i}.bn"))?;
        }
        x = b.relu(x, &format!("fc{i}.relu"))?;
        x = b.dropout(x, DROPOUT_RATE, &format!("fc{i}.dropout"))?;
    }
    let logits = b.dense(x, n_classes, "fc2")?;
    b.softmax(logits, "softmax")
}

pub fn build_cls_head<T: Real>(spec: &ClsHeadSpec, seed: u64) -> Result<Graph<T>> {
    spec.validate()?;
    let mut b = GraphBuilder::new(seed);
    let input = b.input(spec.input_channels, &spec.spatial)?;
    let mut x = b.maxpool(input, "pool0")?;
    for i in 1..=spec.r {
        x = conv_bn_relu(&mut b, x, spec.n_c, &format!("block{i}"))?;
        x = b.maxpool(x, &format!("block{i}.pool"))?;
    }
    let flat = b.flatten(x, "flatten")?;
    let out = fc_stack(&mut b, flat, spec.n_fc, spec.n_classes, true)?;
    b.finish(out)
}

pub fn build_scratch<T: Real>(spec: &ScratchSpec, seed: u64) -> Result<Graph<T>> {
    let plan = spec.layer_plan()?;
    let mut b = GraphBuilder::new(seed);
    let mut x = b.input(spec.in_channels, &spec.spatial)?;
    let (mut stage, mut conv, mut fc) = (1, 1, 0);
    let mut last = String::new();
    for layer in &plan {
        x = match *layer {
            Layer::Conv { outputs, .. } => {
                last = format!("conv{stage}_{conv}");
                conv += 1;
                b.conv(x, outputs, &last)?
            }
            Layer::BatchNorm { .. } => b.batchnorm(x, &format!("{last}.bn"))?,
            Layer::Relu => b.relu(x, &format!("{last}.relu"))?,
            Layer::MaxPool => {
                let id = b.maxpool(x, &format!("pool{stage}"))?;
                stage += 1;
                conv = 1;
                id
            }
            Layer::Flatten => b.flatten(x, "flatten")?,
            Layer::Dense { outputs, .. } => {
                last = format!("fc{fc}");
                fc += 1;
                b.dense(x, outputs, &last)?
            }
            Layer::Dropout => b.dropout(x, DROPOUT_RATE, &format!("{last}.dropout"))?,
            Layer::Softmax => b.softmax(x, "softmax")?,
        };
    }
    b.finish(x)
}

pub fn count_params<T: Real>(graph: &Graph<T>) -> usize {
    graph.count_params()
}

/// Classifier features at full resolution, computed in eval mode.
/// With `freeze` set the net is marked frozen so later backward passes leave
/// its parameters untouched.
pub fn extract_features<T: Real>(mnet: &mut Graph<T>, image: &Tensor<T>, freeze: bool) -> Result<Tensor<T>> {
    let target = mnet
        .marked(FEATURES)
        .ok_or_else(|| Error::State("graph has no feature tap".into()))?;
    if freeze {
        mnet.set_frozen(true);
    }
    // Eval mode draws no random numbers; the generator only satisfies the signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = mnet.forward_to(image, target, Mode::Eval, &mut rng)?;
    mnet.clear_tape();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_width_formula() {
        assert_eq!(MNetSpec::new(2, &[64, 64], 16, 4).feature_channels(), 496);
        assert_eq!(MNetSpec::new(3, &[32, 32, 32], 12, 4).feature_channels(), 84);
    }

    #[test]
    fn small_mnet_shapes() {
        let spec = MNetSpec::new(2, &[16, 16], 2, 3);
        let mut g = build_mnet::<f64>(&spec, 1).unwrap();
        let f = g.marked(FEATURES).unwrap();
        assert_eq!(g.nodes()[f].channels, 62);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_f64(vec![2, 1, 16, 16], &(0..512).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap();
        let y = g.forward(&x, Mode::Train, &mut rng).unwrap();
        assert_eq!(y.shape(), &[2, 3, 16, 16]);
        for p in 0..256 {
            let s: f64 = (0..3).map(|c| y.data()[c * 256 + p]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_spatial_rejected() {
        assert!(build_mnet::<f32>(&MNetSpec::new(2, &[24, 24], 2, 2), 0).is_err());
        let head = ClsHeadSpec {
            dim: 2,
            input_channels: 4,
            spatial: vec![12, 12],
            n_c: 4,
            n_fc: 8,
            r: 2,
            n_classes: 3,
        };
        assert!(build_cls_head::<f32>(&head, 0).is_err());
        let zero_r = ClsHeadSpec { r: 0, spatial: vec![16, 16], ..head };
        assert!(build_cls_head::<f32>(&zero_r, 0).is_err());
    }

    #[test]
    fn arch_fields_round_trip() {
        let specs = [
            ArchSpec::MNet(MNetSpec::new(3, &[16, 32, 16], 3, 4)),
            ArchSpec::ClsHead(ClsHeadSpec {
                dim: 2,
                input_channels: 31,
                spatial: vec![32, 64],
                n_c: 4,
                n_fc: 10,
                r: 2,
                n_classes: 9,
            }),
            ArchSpec::Scratch(ScratchSpec {
                dim: 2,
                in_channels: 1,
                spatial: vec![64, 64],
                n_c: 8,
                n_fc: 16,
                n_classes: 3,
                batchnorm: true,
            }),
        ];
        for s in specs {
            assert_eq!(ArchSpec::from_fields(s.kind_tag(), &s.fields()).unwrap(), s);
        }
    }

    #[test]
    fn scratch_plan_matches_built_graph() {
        let spec = ScratchSpec {
            dim: 2,
            in_channels: 1,
            spatial: vec![32, 32],
            n_c: 2,
            n_fc: 6,
            n_classes: 3,
            batchnorm: true,
        };
        let g = build_scratch::<f32>(&spec, 0).unwrap();
        assert_eq!(g.count_params(), spec.planned_params().unwrap());
    }
}
