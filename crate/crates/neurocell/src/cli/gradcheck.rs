//! Finite-difference verification of every differentiable operation,
//! runnable from the command line.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rng::stream;
use crate::tensor::{
    add, avgpool2d_same, batchnorm2d, concat_channels, conv2d, conv_transpose2d,
    cross_entropy_categorical, cross_entropy_pixelwise, dense, finite_difference_grad,
    global_avg_pool, max_rel_error, maxpool2d, mul, relu, scale, sigmoid, softmax, sum,
    Tape, Tensor,
};

const FD_STEP: f64 = 1e-5;

/// One op's verdict: name, worst relative error over all differentiable
/// inputs, and the tolerance it must meet.
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let t = Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
        .expect("shape/len agree");
    t.set_requires_grad(true);
    t
}

/// Compares backward gradients against central differences for every
/// tensor in `inputs`, where `f` evaluates the op to a scalar.
fn check<F>(inputs: &[&Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let owned: Vec<Tensor<f64>> = inputs.iter().map(|t| (*t).clone()).collect();
    for t in &owned {
        t.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape, &owned)?;
    tape.backward(&loss)?;
    let mut worst = 0.0f64;
    for (i, t) in owned.iter().enumerate() {
        let analytic = t.grad().expect("input participates in the loss");
        let numeric = finite_difference_grad(
            |probe| {
                let mut swapped = owned.clone();
                swapped[i] = probe.clone();
                let tape = Tape::new();
                f(&tape, &swapped)?.item()
            },
            t,
            FD_STEP,
        )?;
        worst = worst.max(max_rel_error(&analytic, &numeric.data()));
    }
    Ok(worst)
}

/// Runs the whole suite with inputs drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = stream(seed, "gradcheck", 0);
    let mut out = Vec::new();
    let mut push = |name: &'static str, err: f64, tol: f64| {
        out.push(OpCheck { name, max_rel_error: err, tolerance: tol });
    };

    let x = rand_tensor(&[2, 6, 6], &mut rng, -1.0, 1.0);
    let y = rand_tensor(&[2, 6, 6], &mut rng, -1.0, 1.0);
    push("add", check(&[&x, &y], |t, v| Ok(sum(t, &add(t, &v[0], &v[1])?)))?, 1e-4);
    push("mul", check(&[&x, &y], |t, v| Ok(sum(t, &mul(t, &v[0], &v[1])?)))?, 1e-4);
    push("scale", check(&[&x], |t, v| Ok(sum(t, &scale(t, &v[0], 1.7))))?, 1e-4);
    push("sigmoid", check(&[&x], |t, v| Ok(sum(t, &sigmoid(t, &v[0]))))?, 1e-4);
    // keep relu inputs away from the hinge where the derivative jumps
    let xr = rand_tensor(&[2, 6, 6], &mut rng, 0.2, 1.0);
    push("relu", check(&[&xr], |t, v| Ok(sum(t, &relu(t, &v[0]))))?, 1e-4);
    push(
        "softmax",
        check(&[&x], |t, v| {
            let s = softmax(t, &v[0]);
            Ok(sum(t, &mul(t, &s, &s)?))
        })?,
        1e-4,
    );

    let w = rand_tensor(&[3, 2, 3, 3], &mut rng, -0.5, 0.5);
    let b = rand_tensor(&[3], &mut rng, -0.5, 0.5);
    push(
        "conv2d",
        check(&[&x, &w, &b], |t, v| Ok(sum(t, &conv2d(t, &v[0], &v[1], &v[2], 1, 1)?)))?,
        1e-4,
    );
    let wt = rand_tensor(&[2, 3, 2, 2], &mut rng, -0.5, 0.5);
    push(
        "conv_transpose2d",
        check(&[&x, &wt, &b], |t, v| {
            Ok(sum(t, &conv_transpose2d(t, &v[0], &v[1], &v[2], 2)?))
        })?,
        1e-4,
    );
    push("maxpool2d", check(&[&x], |t, v| Ok(sum(t, &maxpool2d(t, &v[0], 2)?)))?, 1e-4);
    push("avgpool2d", check(&[&x], |t, v| Ok(sum(t, &avgpool2d_same(t, &v[0], 3)?)))?, 1e-4);
    push("global_avg_pool", check(&[&x], |t, v| Ok(sum(t, &global_avg_pool(t, &v[0])?)))?, 1e-4);

    let xi = rand_tensor(&[5], &mut rng, -1.0, 1.0);
    let dw = rand_tensor(&[4, 5], &mut rng, -0.5, 0.5);
    let db = rand_tensor(&[4], &mut rng, -0.5, 0.5);
    push(
        "dense",
        check(&[&xi, &dw, &db], |t, v| Ok(sum(t, &dense(t, &v[0], &v[1], &v[2])?)))?,
        1e-4,
    );
    push(
        "concat_channels",
        check(&[&x, &y], |t, v| Ok(sum(t, &concat_channels(t, &[&v[0], &v[1]])?)))?,
        1e-4,
    );

    let gamma = rand_tensor(&[2], &mut rng, 0.5, 1.5);
    let beta = rand_tensor(&[2], &mut rng, -0.5, 0.5);
    push(
        "batchnorm2d",
        check(&[&x, &gamma, &beta], |t, v| {
            let mean = Tensor::zeros(&[2]);
            let var = Tensor::from_vec(&[2], vec![1.0, 1.0])?;
            let bn = batchnorm2d(t, &v[0], &v[1], &v[2], &mean, &var, true)?;
            Ok(sum(t, &mul(t, &bn, &bn)?))
        })?,
        1e-3,
    );

    let probs = rand_tensor(&[1, 4, 4], &mut rng, 0.05, 0.95);
    let target = Tensor::from_vec(
        &[1, 4, 4],
        (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
    )?;
    push(
        "cross_entropy_pixelwise",
        check(&[&probs], |t, v| cross_entropy_pixelwise(t, &v[0], &target))?,
        1e-4,
    );
    let pvec = rand_tensor(&[3], &mut rng, 0.1, 0.9);
    push(
        "cross_entropy_categorical",
        check(&[&pvec], |t, v| cross_entropy_categorical(t, &v[0], 1))?,
        1e-4,
    );

    Ok(out)
}
