//! Declarative layer graphs for the three network families, with
//! freeze-point semantics and binary weight serialization.

mod build;
mod io;

pub use build::{build_inception_classifier, build_residual_classifier, build_unet, he_uniform};
pub use io::{load_weights, save_weights};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Softmax,
}

/// Node kind plus its structural configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Output,
    Conv { stride: usize, padding: usize },
    ConvT { stride: usize },
    MaxPool { window: usize },
    AvgPool { window: usize },
    GlobalAvgPool,
    Dense,
    Activation(Activation),
    BatchNorm,
    Concat,
    Add,
}

/// One layer in the ordered graph. Indices are dense and ascending, and
/// every input index precedes the node's own.
pub struct LayerNode<T: Scalar> {
    pub index: usize,
    pub kind: LayerKind,
    /// Owned tensors: conv/convT/dense carry [weight, bias]; batchnorm
    /// carries [gamma, beta, running_mean, running_var].
    pub params: Vec<Tensor<T>>,
    pub trainable: bool,
    pub inputs: Vec<usize>,
}

impl<T: Scalar> LayerNode<T> {
    /// The subset of `params` that receives gradients.
    pub fn trainable_params(&self) -> &[Tensor<T>] {
        match self.kind {
            LayerKind::BatchNorm => &self.params[..2],
            _ => &self.params,
        }
    }

    pub fn has_params(&self) -> bool {
        !self.params.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Ordered layer graph with a freeze point: parameterized nodes with
/// index < freeze_point are held fixed during training.
pub struct NetworkSpec<T: Scalar> {
    pub nodes: Vec<LayerNode<T>>,
    /// Index of the final dense layer in classifiers; the final conv in the segmenter.
    pub head_index: usize,
    pub freeze_point: usize,
    /// Family tag ("unet", "residual", "inception"); informational and serialized.
    pub family: String,
    /// Input spatial extents must divide this (2^depth for the U-Net).
    pub pool_factor: usize,
}

impl<T: Scalar> NetworkSpec<T> {
    fn validate_indices(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.index != i {
                return Err(Error::Contract(format!("node {i} carries index {}", n.index)));
            }
            for &inp in &n.inputs {
                if inp >= i {
                    return Err(Error::Contract(format!(
                        "node {i} depends on non-preceding node {inp}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Executes nodes in index order on the given tape.
    pub fn forward_on(&self, tape: &Tape<T>, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_collect(tape, input, mode)?.1)
    }

    /// Like [`forward_on`] but also returns every node activation
    /// (used by ablation-style tests and diagnostics).
    pub fn forward_collect(
        &self,
        tape: &Tape<T>,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let mut acts: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut output = None;
        for node in &self.nodes {
            let at = |idx: usize| -> Tensor<T> { acts[idx].clone().expect("topological order") };
            let ctx = |e: Error| -> Error {
                match e {
                    Error::Dimension(m) => Error::Dimension(format!("node {}: {m}", node.index)),
                    other => other,
                }
            };
            let out = match node.kind {
                LayerKind::Input => input.clone(),
                LayerKind::Output => at(node.inputs[0]),
                LayerKind::Conv { stride, padding } => tensor::conv2d(
                    tape,
                    &at(node.inputs[0]),
                    &node.params[0],
                    &node.params[1],
                    stride,
                    padding,
                )
                .map_err(ctx)?,
                LayerKind::ConvT { stride } => tensor::conv_transpose2d(
                    tape,
                    &at(node.inputs[0]),
                    &node.params[0],
                    &node.params[1],
                    stride,
                )
                .map_err(ctx)?,
                LayerKind::MaxPool { window } => {
                    tensor::maxpool2d(tape, &at(node.inputs[0]), window).map_err(ctx)?
                }
                LayerKind::AvgPool { window } => {
                    tensor::avgpool2d_same(tape, &at(node.inputs[0]), window).map_err(ctx)?
                }
                LayerKind::GlobalAvgPool => {
                    tensor::global_avg_pool(tape, &at(node.inputs[0])).map_err(ctx)?
                }
                LayerKind::Dense => {
                    tensor::dense(tape, &at(node.inputs[0]), &node.params[0], &node.params[1])
                        .map_err(ctx)?
                }
                LayerKind::Activation(Activation::Relu) => tensor::relu(tape, &at(node.inputs[0])),
                LayerKind::Activation(Activation::Sigmoid) => {
                    tensor::sigmoid(tape, &at(node.inputs[0]))
                }
                LayerKind::Activation(Activation::Softmax) => {
                    tensor::softmax(tape, &at(node.inputs[0]))
                }
                LayerKind::BatchNorm => {
                    // Samples pass through one at a time, so normalization
                    // always uses the sample's own statistics; anything else
                    // would make inference compute a different function than
                    // training did. Running buffers are recorded (and
                    // serialized) only while the node actually trains, and a
                    // frozen node also freezes them.
                    if mode == Mode::Train && node.trainable {
                        tensor::batchnorm2d(
                            tape,
                            &at(node.inputs[0]),
                            &node.params[0],
                            &node.params[1],
                            &node.params[2],
                            &node.params[3],
                            true,
                        )
                        .map_err(ctx)?
                    } else {
                        tensor::batchnorm2d_stateless(
                            tape,
                            &at(node.inputs[0]),
                            &node.params[0],
                            &node.params[1],
                        )
                        .map_err(ctx)?
                    }
                }
                LayerKind::Concat => {
                    let ins: Vec<Tensor<T>> = node.inputs.iter().map(|&i| at(i)).collect();
                    let refs: Vec<&Tensor<T>> = ins.iter().collect();
                    tensor::concat_channels(tape, &refs).map_err(ctx)?
                }
                LayerKind::Add => {
                    tensor::add(tape, &at(node.inputs[0]), &at(node.inputs[1])).map_err(ctx)?
                }
            };
            if node.kind == LayerKind::Output {
                output = Some(out.clone());
            }
            acts[node.index] = Some(out);
        }
        let output = output.ok_or_else(|| Error::Contract("network has no output node".into()))?;
        let acts = acts.into_iter().map(|a| a.expect("all executed")).collect();
        Ok((acts, output))
    }

    /// Eval-mode convenience forward on a throwaway tape.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        self.forward_on(&tape, input, Mode::Eval)
    }

    /// Legal freeze points: 0 (train everything), every add/concat block
    /// boundary, and the head index (head-only fine-tune).
    pub fn legal_freeze_points(&self) -> Vec<usize> {
        let mut pts = vec![0];
        for n in &self.nodes {
            if matches!(n.kind, LayerKind::Add | LayerKind::Concat) {
                pts.push(n.index);
            }
        }
        pts.push(self.head_index);
        pts.sort_unstable();
        pts.dedup();
        pts
    }

    /// Sets the freeze point: parameterized nodes below `k` stop training
    /// (batchnorm nodes below `k` also freeze their running statistics).
    pub fn set_freeze_point(&mut self, k: usize) -> Result<()> {
        let legal = self.legal_freeze_points();
        if !legal.contains(&k) {
            return Err(Error::Config(format!(
                "freeze point {k} is not a block boundary; legal points: {legal:?}"
            )));
        }
        self.freeze_point = k;
        for node in &mut self.nodes {
            node.trainable = node.index >= k;
            let trainable = node.trainable;
            for p in node.trainable_params() {
                p.set_requires_grad(trainable);
            }
        }
        Ok(())
    }

    pub fn trainable_params(&self) -> Vec<Tensor<T>> {
        self.nodes
            .iter()
            .filter(|n| n.trainable)
            .flat_map(|n| n.trainable_params().iter().cloned())
            .collect()
    }

    pub fn all_params(&self) -> Vec<Tensor<T>> {
        self.nodes.iter().flat_map(|n| n.params.iter().cloned()).collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.trainable_params().iter().map(|p| p.len()).sum()
    }

    /// Replaces the dense head with a freshly initialized `n_classes`-way
    /// layer; every other parameter is left untouched.
    pub fn replace_head(&mut self, n_classes: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if n_classes < 2 {
            return Err(Error::Config("classifier needs at least 2 classes".into()));
        }
        let head = &self.nodes[self.head_index];
        if head.kind != LayerKind::Dense {
            return Err(Error::Contract(format!(
                "node {} is not a dense head",
                self.head_index
            )));
        }
        let in_features = head.params[0].shape()[1];
        let trainable = head.trainable;
        let weight = he_uniform(&[n_classes, in_features], in_features, rng);
        let bias = Tensor::zeros(&[n_classes]);
        weight.set_requires_grad(trainable);
        bias.set_requires_grad(trainable);
        self.nodes[self.head_index].params = vec![weight, bias];
        Ok(())
    }

    /// Conservative receptive-field radius of the output w.r.t. the input,
    /// in input pixels. Used to validate overlap-tile margins.
    pub fn receptive_radius(&self) -> usize {
        // track (radius, jump) per node; jump = input stride of one output step
        let mut rj: Vec<(f64, f64)> = vec![(0.0, 1.0); self.nodes.len()];
        for node in &self.nodes {
            let merged = node
                .inputs
                .iter()
                .map(|&i| rj[i])
                .fold((0.0f64, 1.0f64), |a, b| (a.0.max(b.0), a.1.max(b.1)));
            rj[node.index] = match node.kind {
                LayerKind::Conv { stride, .. } => {
                    let k = self.nodes[node.index].params[0].shape()[2];
                    (merged.0 + ((k - 1) as f64 / 2.0) * merged.1, merged.1 * stride as f64)
                }
                LayerKind::MaxPool { window } => (
                    merged.0 + ((window - 1) as f64 / 2.0) * merged.1,
                    merged.1 * window as f64,
                ),
                LayerKind::AvgPool { window } => {
                    (merged.0 + ((window - 1) as f64 / 2.0) * merged.1, merged.1)
                }
                LayerKind::ConvT { stride } => {
                    let k = self.nodes[node.index].params[0].shape()[2];
                    let j = merged.1 / stride as f64;
                    (merged.0 + (k as f64 / 2.0) * j, j)
                }
                _ => merged,
            };
        }
        let out = self
            .nodes
            .iter()
            .find(|n| n.kind == LayerKind::Output)
            .map(|n| rj[n.index].0)
            .unwrap_or(0.0);
        out.ceil() as usize + 1
    }
}

#[cfg(test)]
mod tests;
