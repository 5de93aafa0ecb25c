//! Small conv/relu classifier with optional per-stage channel attention.
//!
//! Each stage is `blocks_per_stage` 3×3 convolutions (padding 1) followed
//! by relu. The first convolution of every stage after the first has
//! stride 2. For the `se` and `csa` variants the output of a stage's last
//! block is recalibrated by that stage's attention block. The head is a
//! global average pool and a linear layer.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{channel_attribute, CsaBlock, CsaNodes, GateMlp, GateVars, SeBlock};
use crate::autodiff::{Checkpoint, Graph, Var};
use crate::error::{CsaError, Result};
use crate::spatial::{self, DEFAULT_EPS_DIST, DEFAULT_EPS_SIGMA};
use crate::tensor::Tensor;

const ATTENTION_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Se,
    Csa,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Se, Variant::Csa];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Se => "se",
            Variant::Csa => "csa",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "se" => Ok(Variant::Se),
            "csa" => Ok(Variant::Csa),
            _ => Err(CsaError::InvalidConfig(format!(
                "unknown variant {s:?} (expected baseline, se or csa)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub reduction: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// CSA only: no gradient through the spatial weight matrix.
    pub stop_grad_weights: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            variant: Variant::Csa,
            in_channels: 1,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            reduction: 16,
            num_classes: 10,
            seed: 0,
            stop_grad_weights: false,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CsaError::InvalidConfig(format!("model: {m}")));
        if self.in_channels == 0 {
            return fail("in_channels must be positive");
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return fail("stage_channels must be a non-empty list of positive widths");
        }
        if self.blocks_per_stage == 0 {
            return fail("blocks_per_stage must be positive");
        }
        if self.reduction == 0 {
            return fail("reduction must be positive");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.variant == Variant::Csa && self.stage_channels.contains(&1) {
            return fail("csa attention needs at least 2 channels per stage");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `out × in × 3 × 3`.
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Attention {
    Se(SeBlock),
    Csa(CsaBlock),
}

impl Attention {
    pub fn mlp(&self) -> &GateMlp {
        match self {
            Attention::Se(b) => &b.mlp,
            Attention::Csa(b) => &b.mlp,
        }
    }

    fn mlp_mut(&mut self) -> &mut GateMlp {
        match self {
            Attention::Se(b) => &mut b.mlp,
            Attention::Csa(b) => &mut b.mlp,
        }
    }

    pub fn param_count(&self) -> usize {
        self.mlp().param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub convs: Vec<ConvLayer>,
    pub attention: Option<Attention>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub stages: Vec<Stage>,
    /// `classes × C_last`.
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
}

/// Graph nodes of one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageNodes {
    /// Last block output before attention.
    pub features: Var,
    /// Stage output (recalibrated when attention is present).
    pub output: Var,
    pub attention: Option<AttentionNodes>,
}

#[derive(Debug, Clone, Copy)]
pub enum AttentionNodes {
    Se { x: Var, p: Var },
    Csa(CsaNodes),
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub stages: Vec<StageNodes>,
}

/// Per-channel descriptors of one stage for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTrace {
    pub x: Tensor,
    pub z: Tensor,
    pub local: Tensor,
    pub q: Tensor,
    /// Absent for the baseline.
    pub p: Option<Tensor>,
}

fn uniform(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape and data agree")
}

/// Builds a freshly initialised model. Convolutions use He-uniform kernels
/// and zero biases, the classifier is uniform in `±1/√fan_in` with zero
/// bias. Backbone and attention draw from separate streams of the same
/// seed, so the backbone does not depend on the variant.
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let mut backbone = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut attn_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    attn_rng.set_stream(ATTENTION_STREAM);

    let mut stages = Vec::with_capacity(spec.stage_channels.len());
    let mut c_in = spec.in_channels;
    for (s, &c) in spec.stage_channels.iter().enumerate() {
        let mut convs = Vec::with_capacity(spec.blocks_per_stage);
        for b in 0..spec.blocks_per_stage {
            let fan_in = c_in * 9;
            convs.push(ConvLayer {
                kernel: uniform(vec![c, c_in, 3, 3], (6.0 / fan_in as f64).sqrt(), &mut backbone),
                bias: Tensor::zeros(vec![c]),
                stride: if s > 0 && b == 0 { 2 } else { 1 },
            });
            c_in = c;
        }
        let attention = match spec.variant {
            Variant::Baseline => None,
            Variant::Se => Some(Attention::Se(SeBlock::with_rng(c, spec.reduction, &mut attn_rng)?)),
            Variant::Csa => {
                let mut block = CsaBlock::with_rng(c, spec.reduction, &mut attn_rng)?;
                block.stop_grad_weights = spec.stop_grad_weights;
                Some(Attention::Csa(block))
            }
        };
        stages.push(Stage { convs, attention });
    }
    let bound = 1.0 / (c_in as f64).sqrt();
    Ok(Model {
        spec: spec.clone(),
        stages,
        classifier_weight: uniform(vec![spec.num_classes, c_in], bound, &mut backbone),
        classifier_bias: Tensor::zeros(vec![spec.num_classes]),
    })
}

impl Model {
    /// Parameters in a fixed order: per stage the conv kernels and biases
    /// then the attention MLP, then the classifier.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for stage in &self.stages {
            for conv in &stage.convs {
                out.push(&conv.kernel);
                out.push(&conv.bias);
            }
            if let Some(a) = &stage.attention {
                out.extend(a.mlp().tensors());
            }
        }
        out.push(&self.classifier_weight);
        out.push(&self.classifier_bias);
        out
    }

    /// Same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            for conv in &mut stage.convs {
                out.push(&mut conv.kernel);
                out.push(&mut conv.bias);
            }
            if let Some(a) = &mut stage.attention {
                out.extend(a.mlp_mut().tensors_mut());
            }
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    /// Checkpoint keys, same order as [`Model::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for b in 0..stage.convs.len() {
                out.push(format!("stage{s}.conv{b}.weight"));
                out.push(format!("stage{s}.conv{b}.bias"));
            }
            if let Some(a) = &stage.attention {
                let kind = match a {
                    Attention::Se(_) => "se",
                    Attention::Csa(_) => "csa",
                };
                for part in ["down_weight", "down_bias", "up_weight", "up_bias"] {
                    out.push(format!("stage{s}.{kind}.{part}"));
                }
            }
        }
        out.push("classifier.weight".into());
        out.push("classifier.bias".into());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn attention_param_count(&self) -> usize {
        self.stages
            .iter()
            .filter_map(|s| s.attention.as_ref())
            .map(Attention::param_count)
            .sum()
    }

    pub fn backbone_param_count(&self) -> usize {
        self.param_count() - self.attention_param_count()
    }

    pub fn attention_blocks(&self) -> usize {
        self.stages.iter().filter(|s| s.attention.is_some()).count()
    }

    /// Adds every parameter to `g`, in [`Model::params`] order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Logits for one `C×H×W` input node. `params` must come from
    /// [`Model::bind`].
    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<ForwardPass> {
        let shape = g.value(input).shape();
        if shape.len() != 3 || shape[0] != self.spec.in_channels {
            return Err(CsaError::shape("model input", shape, &[self.spec.in_channels]));
        }
        let mut next = params.iter().copied();
        let mut take = || next.next().ok_or(CsaError::InvalidConfig("too few bound parameters".into()));
        let mut h = input;
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for conv in &stage.convs {
                let (k, b) = (take()?, take()?);
                h = g.conv2d(h, k, Some(b), conv.stride, 1)?;
                h = g.relu(h);
            }
            let features = h;
            let attention = match &stage.attention {
                None => None,
                Some(a) => {
                    let gate = GateVars {
                        down_weight: take()?,
                        down_bias: take()?,
                        up_weight: take()?,
                        up_bias: take()?,
                    };
                    Some(match a {
                        Attention::Se(block) => {
                            let (x, p) = block.forward(g, &gate, features)?;
                            AttentionNodes::Se { x, p }
                        }
                        Attention::Csa(block) => AttentionNodes::Csa(block.forward(g, &gate, features)?),
                    })
                }
            };
            if let Some(nodes) = &attention {
                let p = match nodes {
                    AttentionNodes::Se { p, .. } => *p,
                    AttentionNodes::Csa(n) => n.p,
                };
                h = g.scale_channels(features, p)?;
            }
            stages.push(StageNodes {
                features,
                output: h,
                attention,
            });
        }
        let pooled = g.global_avg_pool(h)?;
        let (w, b) = (take()?, take()?);
        let logits = g.linear(pooled, w, Some(b))?;
        Ok(ForwardPass { logits, stages })
    }

    /// Inference-only logits.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let pass = self.forward(&mut g, &params, x)?;
        Ok(g.value(pass.logits).clone())
    }

    /// Logits and per-stage descriptors for one input. The descriptor
    /// chain is evaluated on each stage's pre-attention features for every
    /// variant, since it has no learnable parameters.
    pub fn trace(&self, image: &Tensor) -> Result<(Tensor, Vec<StageTrace>)> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(image.clone());
        let pass = self.forward(&mut g, &params, x)?;
        let mut traces = Vec::with_capacity(pass.stages.len());
        for nodes in &pass.stages {
            let trace = match nodes.attention {
                Some(AttentionNodes::Csa(csa)) => {
                    let t = csa.trace(&g);
                    StageTrace {
                        x: t.x,
                        z: t.z,
                        local: t.local,
                        q: t.q,
                        p: Some(t.p),
                    }
                }
                other => {
                    let f = g.value(nodes.features);
                    let m = spatial::moran(f, DEFAULT_EPS_DIST, DEFAULT_EPS_SIGMA)?;
                    let x = channel_attribute(f)?;
                    let (z, _) = spatial::standardize(&x, DEFAULT_EPS_SIGMA);
                    StageTrace {
                        x,
                        z,
                        local: m.local,
                        q: m.descriptor,
                        p: match other {
                            Some(AttentionNodes::Se { p, .. }) => Some(g.value(p).clone()),
                            _ => None,
                        },
                    }
                }
            };
            traces.push(trace);
        }
        Ok((g.value(pass.logits).clone(), traces))
    }

    /// Parameters as a checkpoint, with the spec under meta key `spec`.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: vec![("spec".into(), serde_json::to_string(&self.spec)?)],
            tensors: self
                .param_names()
                .into_iter()
                .zip(self.params().into_iter().cloned())
                .collect(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec_json = ck
            .meta("spec")
            .ok_or_else(|| CsaError::format("checkpoint", "missing `spec` meta entry"))?;
        let spec: ModelSpec = serde_json::from_str(spec_json)?;
        let mut model = build_model(&spec)?;
        let names = model.param_names();
        if ck.tensors.len() != names.len() {
            return Err(CsaError::format(
                "checkpoint",
                format!("{} tensors, model has {}", ck.tensors.len(), names.len()),
            ));
        }
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = ck
                .tensor(name)
                .ok_or_else(|| CsaError::format("checkpoint", format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(CsaError::shape("checkpoint tensor", slot.shape(), t.shape()));
            }
            *slot = t.clone();
        }
        Ok(model)
    }
}
