//! Sequential networks grouped into layer blocks.
//!
//! A block opens at every `dense` or `conv` layer and absorbs the
//! parameter-free layers that follow it (activation, pooling, flatten,
//! norm). Split indices count blocks: `split(l)` puts blocks `1..=l` in the
//! low half and `l+1..=L` in the high half.

mod checkpoint;
mod layer;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, CheckpointMeta};
pub use layer::{LayerKind, LayerSpec};

use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture description: per-sample input shape plus the layer list.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Parses layer strings such as `"dense 8 64"` or `"fc: dense 8 64"`.
    /// Unnamed layers are called `<kind><position>`.
    pub fn parse(input_shape: Vec<usize>, layers: &[impl AsRef<str>]) -> Result<Self> {
        let layers = layers
            .iter()
            .enumerate()
            .map(|(i, s)| LayerSpec::parse(s.as_ref(), i))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelSpec {
            input_shape,
            layers,
        })
    }

    pub fn layer_strings(&self) -> Vec<String> {
        self.layers.iter().map(ToString::to_string).collect()
    }

    /// Per-sample output shape of every layer, checking that shapes compose
    /// and names are unique.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(invalid_arg!("input shape must be non-empty and positive, got {:?}", self.input_shape));
        }
        let mut seen = std::collections::HashSet::new();
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(invalid_arg!("duplicate layer name `{}`", layer.name));
            }
            shape = layer.kind.output_shape(&shape).map_err(|e| match e {
                Error::ShapeMismatch(msg) => shape_err!("layer `{}`: {msg}", layer.name),
                other => other,
            })?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .infer_shapes()?
            .pop()
            .unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn blocks(&self) -> Vec<Range<usize>> {
        block_ranges(&self.layers)
    }
}

fn block_ranges(layers: &[LayerSpec]) -> Vec<Range<usize>> {
    let mut starts: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind.has_params())
        .map(|(i, _)| i)
        .collect();
    if starts.first() != Some(&0) {
        // leading parameter-free layers join the first block
        if starts.is_empty() {
            starts.push(0);
        } else {
            starts[0] = 0;
        }
    }
    let mut ranges = Vec::with_capacity(starts.len());
    for (k, &s) in starts.iter().enumerate() {
        let end = starts.get(k + 1).copied().unwrap_or(layers.len());
        ranges.push(s..end);
    }
    ranges
}

/// A layer spec together with its parameter tensors (weight, bias).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
}

impl Layer {
    fn param_names(&self) -> Vec<String> {
        self.spec
            .kind
            .param_suffixes()
            .iter()
            .map(|s| format!("{}.{s}", self.spec.name))
            .collect()
    }

    fn forward_on(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        match &self.spec.kind {
            LayerKind::Dense { .. } => {
                let y = tape.matmul(x, params[0])?;
                tape.add_bias(y, params[1])
            }
            LayerKind::Conv {
                stride, padding, ..
            } => {
                let y = tape.conv2d(x, params[0], *stride, *padding)?;
                tape.add_bias(y, params[1])
            }
            LayerKind::Relu => Ok(tape.relu(x)),
            LayerKind::MaxPool { size } => tape.max_pool2d(x, *size),
            LayerKind::Flatten => {
                let t = tape.value(x);
                let shape = vec![t.rows(), t.row_len()];
                tape.reshape(x, shape)
            }
            LayerKind::Norm => {
                let t = tape.value(x);
                let group = if t.rank() > 2 {
                    t.shape()[2..].iter().product()
                } else {
                    t.row_len()
                };
                tape.standardize(x, group)
            }
        }
    }
}

/// Whether a network's parameters enter the tape as trainable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

/// Result of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct TapedOutput {
    pub logits: Var,
    pub features: BTreeMap<String, Var>,
    /// Parameter leaves in [`Network::params`] order.
    pub params: Vec<Var>,
}

/// Logits plus tapped intermediate features, as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillBatchOutput {
    pub logits: Tensor,
    pub features: BTreeMap<String, Tensor>,
}

/// Anything that runs a contiguous run of layers.
pub trait Network {
    fn input_shape(&self) -> &[usize];
    fn layers(&self) -> &[Layer];

    fn params(&self) -> Vec<&Tensor> {
        self.layers().iter().flat_map(|l| l.params.iter()).collect()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .iter()
            .flat_map(|l| l.param_names().into_iter().zip(l.params.iter()))
            .collect()
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec {
            input_shape: self.input_shape().to_vec(),
            layers: self.layers().iter().map(|l| l.spec.clone()).collect(),
        }
    }

    fn output_shape(&self) -> Vec<usize> {
        // shapes were validated at construction
        self.spec().output_shape().expect("validated model")
    }

    fn forward_on(&self, tape: &mut Tape, x: Var, mode: ParamMode, taps: &[&str]) -> Result<TapedOutput> {
        let xs = tape.value(x).shape();
        if xs.len() != self.input_shape().len() + 1 || xs[1..] != *self.input_shape() {
            return Err(shape_err!(
                "input {:?} does not match model input [n, {:?}]",
                xs,
                self.input_shape()
            ));
        }
        for tap in taps {
            if !self.layers().iter().any(|l| l.spec.name == *tap) {
                return Err(Error::UnknownTap(tap.to_string()));
            }
        }
        let mut params = Vec::new();
        let mut features = BTreeMap::new();
        let mut h = x;
        for layer in self.layers() {
            let vars: Vec<Var> = layer
                .params
                .iter()
                .map(|p| match mode {
                    ParamMode::Trainable => tape.param(p.clone()),
                    ParamMode::Frozen => tape.constant(p.clone()),
                })
                .collect();
            h = layer.forward_on(tape, h, &vars)?;
            params.extend(vars);
            if taps.contains(&layer.spec.name.as_str()) {
                features.insert(layer.spec.name.clone(), h);
            }
        }
        Ok(TapedOutput {
            logits: h,
            features,
            params,
        })
    }

    /// Untracked forward pass.
    fn forward(&self, x: &Tensor, taps: &[&str]) -> Result<DistillBatchOutput> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, xv, ParamMode::Frozen, taps)?;
        Ok(DistillBatchOutput {
            logits: tape.value(out.logits).clone(),
            features: out
                .features
                .iter()
                .map(|(k, v)| (k.clone(), tape.value(*v).clone()))
                .collect(),
        })
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    fn param_checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequentialModel {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    blocks: Vec<Range<usize>>,
}

impl Network for SequentialModel {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn layers(&self) -> &[Layer] {
        &self.layers
    }
}

/// Builds a model with Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`)
/// and zero biases, drawn deterministically from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<SequentialModel> {
    spec.infer_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layers
        .iter()
        .map(|ls| {
            let params = ls
                .kind
                .param_shapes()
                .into_iter()
                .enumerate()
                .map(|(k, shape)| {
                    if k == 0 {
                        let bound = (6.0 / ls.kind.fan_in() as f32).sqrt();
                        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                        let n: usize = shape.iter().product();
                        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
                        Tensor::new(shape, data).expect("consistent shape")
                    } else {
                        Tensor::zeros(&shape)
                    }
                })
                .collect();
            Layer {
                spec: ls.clone(),
                params,
            }
        })
        .collect();
    SequentialModel::from_layers(spec.input_shape.clone(), layers)
}

impl SequentialModel {
    /// Assembles a model from layers that already carry parameters.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let spec = ModelSpec {
            input_shape: input_shape.clone(),
            layers: layers.iter().map(|l| l.spec.clone()).collect(),
        };
        spec.infer_shapes()?;
        for l in &layers {
            let want = l.spec.kind.param_shapes();
            let got: Vec<&[usize]> = l.params.iter().map(Tensor::shape).collect();
            if want.len() != got.len() || want.iter().zip(&got).any(|(w, g)| w.as_slice() != *g) {
                return Err(shape_err!(
                    "layer `{}` expects parameter shapes {want:?}, got {got:?}",
                    l.spec.name
                ));
            }
        }
        let blocks = block_ranges(&spec.layers);
        Ok(SequentialModel {
            input_shape,
            layers,
            blocks,
        })
    }

    /// Number of layer blocks, `L`.
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params.iter_mut())
            .collect()
    }

    fn check_split(&self, l: usize) -> Result<usize> {
        let blocks = self.block_count();
        if l == 0 || l >= blocks {
            return Err(invalid_arg!("split index {l} outside [1, {}]", blocks.saturating_sub(1)));
        }
        Ok(self.blocks[l].start)
    }

    /// Borrowed views of blocks `1..=l` and `l+1..=L`.
    pub fn split(&self, l: usize) -> Result<(ModelSlice<'_>, ModelSlice<'_>)> {
        let cut = self.check_split(l)?;
        let boundary = self.spec().infer_shapes()?[cut - 1].clone();
        Ok((
            ModelSlice {
                input_shape: self.input_shape.clone(),
                layers: &self.layers[..cut],
            },
            ModelSlice {
                input_shape: boundary,
                layers: &self.layers[cut..],
            },
        ))
    }

    /// Name of the last layer of block `L-1`, i.e. the penultimate
    /// representation fed to the final block.
    pub fn penultimate_tap(&self) -> Option<&str> {
        if self.blocks.len() < 2 {
            return None;
        }
        let r = &self.blocks[self.blocks.len() - 2];
        Some(self.layers[r.end - 1].spec.name.as_str())
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.spec.name.as_str())
    }
}

/// A contiguous run of a model's layers, borrowing its parameters.
#[derive(Clone, Debug)]
pub struct ModelSlice<'a> {
    input_shape: Vec<usize>,
    layers: &'a [Layer],
}

impl Network for ModelSlice<'_> {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn layers(&self) -> &[Layer] {
        self.layers
    }
}

impl ModelSlice<'_> {
    /// Deep copy into an owned, independently trainable model.
    pub fn to_model(&self) -> SequentialModel {
        SequentialModel::from_layers(self.input_shape.clone(), self.layers.to_vec())
            .expect("slice of a validated model")
    }
}

/// Splits `model` at block boundary `l`; thin wrapper over
/// [`SequentialModel::split`].
pub fn split_model(model: &SequentialModel, l: usize) -> Result<(ModelSlice<'_>, ModelSlice<'_>)> {
    model.split(l)
}

/// `high ∘ low` as one owned model.
pub fn compose(low: &impl Network, high: &impl Network) -> Result<SequentialModel> {
    let boundary = low.output_shape();
    if boundary != high.input_shape() {
        return Err(shape_err!(
            "low half emits {boundary:?} but high half expects {:?}",
            high.input_shape()
        ));
    }
    let mut layers = low.layers().to_vec();
    layers.extend_from_slice(high.layers());
    SequentialModel::from_layers(low.input_shape().to_vec(), layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(layers: &[&str]) -> ModelSpec {
        ModelSpec::parse(vec![4], layers).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let spec = mlp(&["dense 4 2"]);
        assert_eq!(build_model(&spec, 7).unwrap(), build_model(&spec, 7).unwrap());
        assert_ne!(build_model(&spec, 7).unwrap(), build_model(&spec, 8).unwrap());
    }

    #[test]
    fn shapes_compose() {
        let m = build_model(&mlp(&["dense 4 3", "relu", "dense 3 2"]), 1).unwrap();
        let out = m.forward(&Tensor::zeros(&[1, 4]), &[]).unwrap();
        assert_eq!(out.logits.shape(), &[1, 2]);
        assert!(out.features.is_empty());
    }

    #[test]
    fn non_composing_spec_is_rejected() {
        let r = build_model(&mlp(&["dense 4 3", "dense 5 2"]), 1);
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let r = build_model(&mlp(&["a: dense 4 3", "a: relu"]), 1);
        assert!(matches!(r, Err(Error::InvalidArg(_))));
    }

    #[test]
    fn blocks_group_parameter_free_layers() {
        let spec = mlp(&["relu", "dense 4 8", "relu", "dense 8 8", "relu", "norm", "dense 8 2"]);
        assert_eq!(spec.blocks(), vec![0..3, 3..6, 6..7]);
    }

    #[test]
    fn taps_match_manual_composition() {
        let m = build_model(&mlp(&["dense 4 6", "relu", "dense 6 5", "relu", "dense 5 3"]), 3).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, -0.4, 2.0, 0.5], vec![1.0, 1.0, -1.0, 0.0]]).unwrap();
        let out = m.forward(&x, &["relu3"]).unwrap();
        let (low, _) = m.split(2).unwrap();
        let manual = low.forward(&x, &[]).unwrap().logits;
        assert_eq!(out.features["relu3"], manual);
        assert!(matches!(m.forward(&x, &["nosuch"]), Err(Error::UnknownTap(t)) if t == "nosuch"));
    }

    #[test]
    fn split_identity_and_ranges() {
        let m = build_model(&mlp(&["dense 4 6", "relu", "dense 6 5", "relu", "dense 5 3"]), 3).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.2, 0.9, 1.5]]).unwrap();
        let full = m.forward(&x, &[]).unwrap().logits;
        for l in 1..m.block_count() {
            let (low, high) = m.split(l).unwrap();
            let mid = low.forward(&x, &[]).unwrap().logits;
            assert_eq!(high.forward(&mid, &[]).unwrap().logits, full);
            assert_eq!(low.param_count() + high.param_count(), m.param_count());
        }
        let (_, high) = m.split(m.block_count() - 1).unwrap();
        assert_eq!(high.layers().len(), 1);
        assert!(matches!(high.layers()[0].spec.kind, LayerKind::Dense { .. }));
        assert!(matches!(m.split(0), Err(Error::InvalidArg(_))));
        assert!(matches!(m.split(3), Err(Error::InvalidArg(_))));
    }

    #[test]
    fn split_views_share_parameters() {
        let m = build_model(&mlp(&["dense 4 6", "relu", "dense 6 3"]), 3).unwrap();
        let (low, _) = m.split(1).unwrap();
        assert!(std::ptr::eq(low.params()[0], m.params()[0]));
    }

    #[test]
    fn conv_model_runs() {
        let spec = ModelSpec::parse(
            vec![1, 6, 6],
            &["conv 1 4 3 padding=1", "relu", "maxpool 2", "norm", "flatten", "dense 36 3"],
        )
        .unwrap();
        let m = build_model(&spec, 11).unwrap();
        assert_eq!(m.block_count(), 2);
        let out = m.forward(&Tensor::full(&[2, 1, 6, 6], 0.5), &["flatten4"]).unwrap();
        assert_eq!(out.logits.shape(), &[2, 3]);
        assert_eq!(out.features["flatten4"].shape(), &[2, 36]);
    }

    #[test]
    fn compose_checks_boundary() {
        let t = build_model(&mlp(&["dense 4 6", "relu", "dense 6 3"]), 3).unwrap();
        let other = build_model(&ModelSpec::parse(vec![5], &["dense 5 3"]).unwrap(), 1).unwrap();
        let (low, high) = t.split(1).unwrap();
        assert_eq!(compose(&low, &high).unwrap(), t);
        assert!(matches!(compose(&low, &other), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn penultimate_tap_is_end_of_second_to_last_block() {
        let m = build_model(&mlp(&["dense 4 6", "relu", "dense 6 5", "relu", "dense 5 3"]), 3).unwrap();
        assert_eq!(m.penultimate_tap(), Some("relu3"));
    }
}
