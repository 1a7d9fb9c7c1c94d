//! Builders for the three network families. Conv and dense weights are
//! He-uniform initialized, biases zero, batchnorm gamma=1 / beta=0, all
//! from the caller's RNG stream.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Activation, LayerKind, LayerNode, NetworkSpec};

/// Uniform(−√(6/fan_in), √(6/fan_in)).
pub fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::cast_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

struct GraphBuilder<T: Scalar> {
    nodes: Vec<LayerNode<T>>,
}

impl<T: Scalar> GraphBuilder<T> {
    fn new() -> Self {
        let mut b = GraphBuilder { nodes: Vec::new() };
        b.push(LayerKind::Input, vec![], vec![]);
        b
    }

    fn push(&mut self, kind: LayerKind, params: Vec<Tensor<T>>, inputs: Vec<usize>) -> usize {
        let index = self.nodes.len();
        for p in &params {
            p.set_requires_grad(true);
        }
        if kind == LayerKind::BatchNorm {
            // running stats never receive gradients
            params[2].set_requires_grad(false);
            params[3].set_requires_grad(false);
        }
        self.nodes.push(LayerNode { index, kind, params, trainable: true, inputs });
        index
    }

    fn conv(
        &mut self,
        from: usize,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let weight = he_uniform(&[out_c, in_c, k, k], in_c * k * k, rng);
        let bias = Tensor::zeros(&[out_c]);
        self.push(LayerKind::Conv { stride, padding }, vec![weight, bias], vec![from])
    }

    fn conv_t(
        &mut self,
        from: usize,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let weight = he_uniform(&[in_c, out_c, k, k], in_c * k * k, rng);
        let bias = Tensor::zeros(&[out_c]);
        self.push(LayerKind::ConvT { stride }, vec![weight, bias], vec![from])
    }

    fn batchnorm(&mut self, from: usize, c: usize) -> usize {
        let gamma = Tensor::full(&[c], T::one());
        let beta = Tensor::zeros(&[c]);
        let rmean = Tensor::zeros(&[c]);
        let rvar = Tensor::full(&[c], T::one());
        self.push(LayerKind::BatchNorm, vec![gamma, beta, rmean, rvar], vec![from])
    }

    fn relu(&mut self, from: usize) -> usize {
        self.push(LayerKind::Activation(Activation::Relu), vec![], vec![from])
    }

    fn dense(&mut self, from: usize, in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> usize {
        let weight = he_uniform(&[out_f, in_f], in_f, rng);
        let bias = Tensor::zeros(&[out_f]);
        self.push(LayerKind::Dense, vec![weight, bias], vec![from])
    }

    /// conv → bn → relu, the standard classifier unit.
    fn conv_bn_relu(
        &mut self,
        from: usize,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let c = self.conv(from, in_c, out_c, k, stride, padding, rng);
        let b = self.batchnorm(c, out_c);
        self.relu(b)
    }

    fn finish(mut self, head_index: usize, last: usize, family: &str, pool_factor: usize) -> NetworkSpec<T> {
        self.push(LayerKind::Output, vec![], vec![last]);
        NetworkSpec {
            nodes: self.nodes,
            head_index,
            freeze_point: 0,
            family: family.to_string(),
            pool_factor,
        }
    }
}

/// U-Net segmenter: `depth` contracting levels (two same-padded 3×3 convs +
/// relu, then 2×2 pool, channels doubling), a two-conv bottleneck, a
/// symmetric expanding path with channel-concat skips, and a final 1×1
/// conv + sigmoid. Output spatial size equals input size.
pub fn build_unet<T: Scalar>(
    depth: usize,
    base_channels: usize,
    in_channels: usize,
    out_channels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NetworkSpec<T>> {
    if depth < 1 || base_channels < 1 {
        return Err(Error::Config(format!(
            "unet depth ({depth}) and base_channels ({base_channels}) must be >= 1"
        )));
    }
    let mut g = GraphBuilder::new();
    let mut cur = 0;
    let mut cur_c = in_channels;
    let mut skips = Vec::new();
    for level in 0..depth {
        let c = base_channels << level;
        cur = g.conv(cur, cur_c, c, 3, 1, 1, rng);
        cur = g.relu(cur);
        cur = g.conv(cur, c, c, 3, 1, 1, rng);
        cur = g.relu(cur);
        skips.push((cur, c));
        cur = g.push(LayerKind::MaxPool { window: 2 }, vec![], vec![cur]);
        cur_c = c;
    }
    let bc = base_channels << depth;
    cur = g.conv(cur, cur_c, bc, 3, 1, 1, rng);
    cur = g.relu(cur);
    cur = g.conv(cur, bc, bc, 3, 1, 1, rng);
    cur = g.relu(cur);
    cur_c = bc;
    for level in (0..depth).rev() {
        let c = base_channels << level;
        cur = g.conv_t(cur, cur_c, c, 2, 2, rng);
        let (skip, skip_c) = skips[level];
        cur = g.push(LayerKind::Concat, vec![], vec![skip, cur]);
        cur = g.conv(cur, c + skip_c, c, 3, 1, 1, rng);
        cur = g.relu(cur);
        cur = g.conv(cur, c, c, 3, 1, 1, rng);
        cur = g.relu(cur);
        cur_c = c;
    }
    let head = g.conv(cur, cur_c, out_channels, 1, 1, 0, rng);
    let sig = g.push(LayerKind::Activation(Activation::Sigmoid), vec![], vec![head]);
    Ok(g.finish(head, sig, "unet", 1 << depth))
}

/// Residual classifier: stem conv, stages of two-conv residual blocks with
/// identity or 1×1-projection shortcuts, global average pool, dense head,
/// softmax. Every `add` node is a legal freeze point.
pub fn build_residual_classifier<T: Scalar>(
    blocks_per_stage: &[usize],
    base_channels: usize,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NetworkSpec<T>> {
    if blocks_per_stage.is_empty() {
        return Err(Error::Config("blocks_per_stage must not be empty".into()));
    }
    if n_classes < 2 {
        return Err(Error::Config("classifier needs at least 2 classes".into()));
    }
    let mut g = GraphBuilder::new();
    let mut cur = g.conv_bn_relu(0, 3, base_channels, 3, 1, 1, rng);
    let mut cur_c = base_channels;
    for (stage, &blocks) in blocks_per_stage.iter().enumerate() {
        let c = base_channels << stage;
        for block in 0..blocks {
            let downsample = stage > 0 && block == 0;
            let stride = if downsample { 2 } else { 1 };
            // main branch: conv-bn-relu-conv-bn
            let b1 = g.conv(cur, cur_c, c, 3, stride, 1, rng);
            let b1 = g.batchnorm(b1, c);
            let b1 = g.relu(b1);
            let b2 = g.conv(b1, c, c, 3, 1, 1, rng);
            let branch = g.batchnorm(b2, c);
            // shortcut: identity, or 1×1 projection when shape changes
            let shortcut = if downsample || cur_c != c {
                let p = g.conv(cur, cur_c, c, 1, stride, 0, rng);
                g.batchnorm(p, c)
            } else {
                cur
            };
            let added = g.push(LayerKind::Add, vec![], vec![shortcut, branch]);
            cur = g.relu(added);
            cur_c = c;
        }
    }
    let gap = g.push(LayerKind::GlobalAvgPool, vec![], vec![cur]);
    let head = g.dense(gap, cur_c, n_classes, rng);
    let sm = g.push(LayerKind::Activation(Activation::Softmax), vec![], vec![head]);
    Ok(g.finish(head, sm, "residual", 1))
}

/// Inception-style classifier: stem conv, `n_mixed_blocks` mixed blocks of
/// parallel 1×1 / 3×3 / avg-pooled-1×1 branches concatenated on channels,
/// global average pool, dense head, softmax. Every `concat` node is a
/// legal freeze point.
pub fn build_inception_classifier<T: Scalar>(
    n_mixed_blocks: usize,
    base_channels: usize,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NetworkSpec<T>> {
    if n_mixed_blocks < 1 {
        return Err(Error::Config("n_mixed_blocks must be >= 1".into()));
    }
    if n_classes < 2 {
        return Err(Error::Config("classifier needs at least 2 classes".into()));
    }
    let mut g = GraphBuilder::new();
    let mut cur = g.conv_bn_relu(0, 3, base_channels, 3, 2, 1, rng);
    let mut cur_c = base_channels;
    for block in 0..n_mixed_blocks {
        if block > 0 {
            // stride-2 reduction between blocks keeps mixed blocks cheap
            cur = g.conv_bn_relu(cur, cur_c, cur_c, 3, 2, 1, rng);
        }
        let b = base_channels;
        let br1 = g.conv_bn_relu(cur, cur_c, b, 1, 1, 0, rng);
        let br3a = g.conv_bn_relu(cur, cur_c, b, 1, 1, 0, rng);
        let br3 = g.conv_bn_relu(br3a, b, b, 3, 1, 1, rng);
        let pooled = g.push(LayerKind::AvgPool { window: 3 }, vec![], vec![cur]);
        let brp = g.conv_bn_relu(pooled, cur_c, b, 1, 1, 0, rng);
        cur = g.push(LayerKind::Concat, vec![], vec![br1, br3, brp]);
        cur_c = 3 * b;
    }
    let gap = g.push(LayerKind::GlobalAvgPool, vec![], vec![cur]);
    let head = g.dense(gap, cur_c, n_classes, rng);
    let sm = g.push(LayerKind::Activation(Activation::Softmax), vec![], vec![head]);
    Ok(g.finish(head, sm, "inception", 1))
}
