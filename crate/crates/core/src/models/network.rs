use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dense::{activate, activate_backward, Activation, Dense};
use crate::data::AugmentedView;
use crate::error::{DtsError, Result};
use crate::rng::{self, streams};
use crate::tensor::{max_value, softmax_rows, Matrix};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
}

impl BackboneSpec {
    pub fn mlp(input_dim: usize, hidden_widths: Vec<usize>, feature_dim: usize) -> Self {
        BackboneSpec {
            input_dim,
            hidden_widths,
            feature_dim,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 {
            return Err(DtsError::validation(
                "backbone input_dim and feature_dim must be positive",
            ));
        }
        if self.hidden_widths.contains(&0) {
            return Err(DtsError::validation("hidden widths must be positive"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &w in self.hidden_widths.iter().chain(std::iter::once(&self.feature_dim)) {
            dims.push((prev, w));
            prev = w;
        }
        dims
    }
}

/// `K` is the seen-class head Φ, `KPlusOne` the head ψ with the extra
/// unseen-class output in the last position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    K,
    KPlusOne,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub backbone: BackboneSpec,
    pub num_classes: usize,
    pub head_k: bool,
    pub head_k1: bool,
    /// Extra activated projection layer in front of the `K+1` head.
    #[serde(default)]
    pub k1_projection: bool,
}

impl NetworkSpec {
    pub fn dual(backbone: BackboneSpec, num_classes: usize) -> Self {
        NetworkSpec {
            backbone,
            num_classes,
            head_k: true,
            head_k1: true,
            k1_projection: false,
        }
    }

    pub fn head_width(&self, head: HeadKind) -> usize {
        match head {
            HeadKind::K => self.num_classes,
            HeadKind::KPlusOne => self.num_classes + 1,
        }
    }

    pub fn has_head(&self, head: HeadKind) -> bool {
        match head {
            HeadKind::K => self.head_k,
            HeadKind::KPlusOne => self.head_k1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    projection: Option<Dense>,
    output: Dense,
}

struct HeadCache {
    projection_pre: Option<Matrix>,
    output_input: Matrix,
}

/// Shared-backbone classifier with up to two softmax heads.
///
/// A freshly initialized network with both heads is the pre-training teacher;
/// the inlier and outlier models are copies that keep one head each.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Dense>,
    head_k: Option<Head>,
    head_k1: Option<Head>,
    pretrained: bool,
}

/// Activations cached by [`Network::forward_train`] for backpropagation.
pub struct ForwardPass {
    layer_inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    features: Matrix,
    head_k: Option<(HeadCache, Matrix)>,
    head_k1: Option<(HeadCache, Matrix)>,
}

impl ForwardPass {
    /// Softmax probabilities of `head`, one row per input.
    pub fn probs(&self, head: HeadKind) -> Option<&Matrix> {
        match head {
            HeadKind::K => self.head_k.as_ref().map(|(_, p)| p),
            HeadKind::KPlusOne => self.head_k1.as_ref().map(|(_, p)| p),
        }
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }
}

/// Parameter gradients in [`Network::named_params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|v| v.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: BTreeMap<String, TensorData>,
    pub pretrained: bool,
}

/// Initial gain for hidden layers (He-uniform for ReLU) and output layers.
const HIDDEN_GAIN: f64 = 2.449_489_742_783_178; // sqrt(6)
const OUTPUT_GAIN: f64 = 1.0;

impl Network {
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.backbone.validate()?;
        if spec.num_classes < 2 {
            return Err(DtsError::validation("need at least 2 seen classes"));
        }
        if !spec.head_k && !spec.head_k1 {
            return Err(DtsError::validation("network needs at least one head"));
        }
        let mut rng = rng::stream(seed, streams::INIT);
        let layers = spec
            .backbone
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Dense::init(i, o, HIDDEN_GAIN, &mut rng))
            .collect();
        let d = spec.backbone.feature_dim;
        let head_k = spec.head_k.then(|| Head {
            projection: None,
            output: Dense::init(d, spec.num_classes, OUTPUT_GAIN, &mut rng),
        });
        let head_k1 = spec.head_k1.then(|| Head {
            projection: spec
                .k1_projection
                .then(|| Dense::init(d, d, HIDDEN_GAIN, &mut rng)),
            output: Dense::init(d, spec.num_classes + 1, OUTPUT_GAIN, &mut rng),
        });
        Ok(Network {
            spec,
            layers,
            head_k,
            head_k1,
            pretrained: false,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn mark_pretrained(&mut self) {
        self.pretrained = true;
    }

    pub fn has_head(&self, head: HeadKind) -> bool {
        self.spec.has_head(head)
    }

    /// Zeroes the output layers of every head so all outputs start uniform.
    pub fn zero_output_layers(&mut self) {
        for head in self.head_k.iter_mut().chain(self.head_k1.iter_mut()) {
            head.output.weight.iter_mut().for_each(|w| *w = 0.0);
            head.output.bias.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    /// Copy of this network keeping only the requested heads.
    pub fn with_heads(&self, keep_k: bool, keep_k1: bool) -> Result<Network> {
        if (keep_k && self.head_k.is_none()) || (keep_k1 && self.head_k1.is_none()) {
            return Err(DtsError::State("requested head is not present".into()));
        }
        if !keep_k && !keep_k1 {
            return Err(DtsError::validation("network needs at least one head"));
        }
        let mut spec = self.spec.clone();
        spec.head_k = keep_k;
        spec.head_k1 = keep_k1;
        spec.k1_projection = keep_k1 && self.spec.k1_projection;
        Ok(Network {
            spec,
            layers: self.layers.clone(),
            head_k: if keep_k { self.head_k.clone() } else { None },
            head_k1: if keep_k1 { self.head_k1.clone() } else { None },
            pretrained: self.pretrained,
        })
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.spec.backbone.input_dim {
            return Err(DtsError::shape(format!(
                "input dimension {} does not match network input {}",
                x.cols(),
                self.spec.backbone.input_dim
            )));
        }
        Ok(())
    }

    pub fn forward_train(&self, x: &Matrix) -> Result<ForwardPass> {
        self.check_input(x)?;
        let act = self.spec.backbone.activation;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = layer.forward(&h);
            layer_inputs.push(h);
            h = activate(&z, act);
            pre_activations.push(z);
        }
        let run_head = |head: &Head| {
            let (projection_pre, input) = match &head.projection {
                Some(p) => {
                    let z = p.forward(&h);
                    let a = activate(&z, act);
                    (Some(z), a)
                }
                None => (None, h.clone()),
            };
            let probs = softmax_rows(&head.output.forward(&input));
            (
                HeadCache {
                    projection_pre,
                    output_input: input,
                },
                probs,
            )
        };
        let head_k = self.head_k.as_ref().map(run_head);
        let head_k1 = self.head_k1.as_ref().map(run_head);
        Ok(ForwardPass {
            layer_inputs,
            pre_activations,
            features: h,
            head_k,
            head_k1,
        })
    }

    /// Probabilities of one head, one row per input.
    pub fn forward(&self, x: &Matrix, head: HeadKind) -> Result<Matrix> {
        if !self.has_head(head) {
            return Err(DtsError::State(format!("network has no {head:?} head")));
        }
        let pass = self.forward_train(x)?;
        Ok(pass.probs(head).cloned().expect("head present"))
    }

    pub fn forward_views(&self, views: &[AugmentedView], head: HeadKind) -> Result<Matrix> {
        let rows: Vec<&[f64]> = views.iter().map(|v| v.input.as_slice()).collect();
        let x = Matrix::from_rows(&rows, self.spec.backbone.input_dim)?;
        self.forward(&x, head)
    }

    /// Seen-class distribution: the `K` head, or the first `K` outputs of the
    /// `K+1` head renormalized when the network has no `K` head.
    pub fn seen_probs(&self, x: &Matrix) -> Result<Matrix> {
        if self.has_head(HeadKind::K) {
            return self.forward(x, HeadKind::K);
        }
        let full = self.forward(x, HeadKind::KPlusOne)?;
        Ok(renormalize_seen(&full, self.spec.num_classes))
    }

    /// Per-example evidence that an input is unseen: the last component of
    /// the `K+1` head, or `1 - max` of the `K` head when that is the only head.
    pub fn unseen_evidence(&self, x: &Matrix) -> Result<Vec<f64>> {
        if self.has_head(HeadKind::KPlusOne) {
            let p = self.forward(x, HeadKind::KPlusOne)?;
            let k = self.spec.num_classes;
            return Ok(p.iter_rows().map(|r| r[k]).collect());
        }
        let p = self.forward(x, HeadKind::K)?;
        Ok(p.iter_rows().map(|r| 1.0 - max_value(r)).collect())
    }

    /// Backpropagates logit gradients of each head through the network.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        grad_logits_k: Option<&Matrix>,
        grad_logits_k1: Option<&Matrix>,
    ) -> Gradients {
        let act = self.spec.backbone.activation;
        let mut grads = self.zero_gradients();
        let n_backbone = self.layers.len() * 2;
        let mut grad_features = Matrix::zeros(pass.features.rows(), pass.features.cols());

        let mut slot = n_backbone;
        let heads = [
            (&self.head_k, &pass.head_k, grad_logits_k),
            (&self.head_k1, &pass.head_k1, grad_logits_k1),
        ];
        for (head, cache, grad_logits) in heads {
            let Some(head) = head else { continue };
            let proj_slots = if head.projection.is_some() { 2 } else { 0 };
            if let (Some((cache, _)), Some(g)) = (cache, grad_logits) {
                let out_slot = slot + proj_slots;
                let (gw, rest) = grads.0[out_slot..].split_at_mut(1);
                let grad_input =
                    head.output
                        .backward(&cache.output_input, g, &mut gw[0], &mut rest[0]);
                let grad_h = match (&head.projection, &cache.projection_pre) {
                    (Some(p), Some(z)) => {
                        let gz = activate_backward(z, &grad_input, act);
                        let (gw, rest) = grads.0[slot..].split_at_mut(1);
                        p.backward(&pass.features, &gz, &mut gw[0], &mut rest[0])
                    }
                    _ => grad_input,
                };
                grad_features.add_assign(&grad_h);
            }
            slot += proj_slots + 2;
        }

        let mut grad = grad_features;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let gz = activate_backward(&pass.pre_activations[l], &grad, act);
            let (gw, rest) = grads.0[2 * l..].split_at_mut(1);
            grad = layer.backward(&pass.layer_inputs[l], &gz, &mut gw[0], &mut rest[0]);
        }
        grads
    }

    fn dense_layers(&self) -> Vec<(String, &Dense)> {
        let mut out: Vec<(String, &Dense)> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("backbone.{i}"), l))
            .collect();
        for (name, head) in [("head_k", &self.head_k), ("head_k1", &self.head_k1)] {
            if let Some(h) = head {
                if let Some(p) = &h.projection {
                    out.push((format!("{name}.projection"), p));
                }
                out.push((format!("{name}.output"), &h.output));
            }
        }
        out
    }

    fn dense_layers_mut(&mut self) -> Vec<&mut Dense> {
        let mut out: Vec<&mut Dense> = self.layers.iter_mut().collect();
        for h in [&mut self.head_k, &mut self.head_k1].into_iter().flatten() {
            if let Some(p) = &mut h.projection {
                out.push(p);
            }
            out.push(&mut h.output);
        }
        out
    }

    /// Parameter tensors in canonical order: backbone layers, then the `K`
    /// head, then the `K+1` head; weight before bias within each layer.
    pub fn named_params(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (name, d) in self.dense_layers() {
            out.push((format!("{name}.weight"), vec![d.out_dim, d.in_dim], d.weight.as_slice()));
            out.push((format!("{name}.bias"), vec![d.out_dim], d.bias.as_slice()));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for d in self.dense_layers_mut() {
            out.push(d.weight.as_mut_slice());
            out.push(d.bias.as_mut_slice());
        }
        out
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients(
            self.named_params()
                .into_iter()
                .map(|(_, _, p)| vec![0.0; p.len()])
                .collect(),
        )
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, _, p)| p.len()).sum()
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn param_hash(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, _, p) in self.named_params() {
            for v in p {
                for byte in v.to_bits().to_le_bytes() {
                    hash ^= u64::from(byte);
                    hash = hash.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        hash
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec.clone(),
            params: self
                .named_params()
                .into_iter()
                .map(|(name, shape, data)| {
                    (
                        name,
                        TensorData {
                            shape,
                            data: data.to_vec(),
                        },
                    )
                })
                .collect(),
            pretrained: self.pretrained,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Network> {
        let mut net = Network::new(ckpt.spec.clone(), 0)?;
        let names: Vec<(String, Vec<usize>)> = net
            .named_params()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if names.len() != ckpt.params.len() {
            return Err(DtsError::shape(format!(
                "checkpoint has {} tensors, spec expects {}",
                ckpt.params.len(),
                names.len()
            )));
        }
        for ((name, shape), dst) in names.iter().zip(net.params_mut()) {
            let t = ckpt
                .params
                .get(name)
                .ok_or_else(|| DtsError::shape(format!("checkpoint is missing {name}")))?;
            if &t.shape != shape || t.data.len() != dst.len() {
                return Err(DtsError::shape(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            dst.copy_from_slice(&t.data);
        }
        net.pretrained = ckpt.pretrained;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network> {
        let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        Network::from_checkpoint(&ckpt)
    }
}

fn renormalize_seen(full: &Matrix, k: usize) -> Matrix {
    let mut out = Matrix::zeros(full.rows(), k);
    for i in 0..full.rows() {
        let row = &full.row(i)[..k];
        let total: f64 = row.iter().sum();
        for (dst, v) in out.row_mut(i).iter_mut().zip(row) {
            *dst = v / total;
        }
    }
    out
}
