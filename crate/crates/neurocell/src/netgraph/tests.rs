use rand::Rng;

use super::*;
use crate::rng::stream;
use crate::tensor::{cross_entropy_categorical, Sgd};

fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, "netgraph-test", 0);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn unet_shape_and_range() {
    let mut rng = stream(1, "init", 0);
    let net: NetworkSpec<f64> = build_unet(1, 4, 1, 1, &mut rng).unwrap();
    let out = net.infer(&rand_input(&[1, 16, 16], 2)).unwrap();
    assert_eq!(out.shape(), [1, 16, 16]);
    assert!(out.to_vec().iter().all(|v| *v > 0.0 && *v < 1.0));
}

#[test]
fn unet_contracting_channel_widths_double() {
    let mut rng = stream(1, "init", 0);
    let net: NetworkSpec<f32> = build_unet(3, 8, 1, 1, &mut rng).unwrap();
    let mut widths = Vec::new();
    let mut seen_pools = 0;
    for n in &net.nodes {
        if let LayerKind::Conv { .. } = n.kind {
            if seen_pools < 3 && n.params[0].shape()[2] == 3 {
                widths.push(n.params[0].shape()[0]);
            }
        }
        if matches!(n.kind, LayerKind::MaxPool { .. }) {
            seen_pools += 1;
        }
    }
    assert_eq!(&widths[..6], &[8, 8, 16, 16, 32, 32]);
}

#[test]
fn unet_skip_paths_carry_signal() {
    let mut rng = stream(3, "init", 0);
    let net: NetworkSpec<f64> = build_unet(2, 4, 1, 1, &mut rng).unwrap();
    // zero every conv/convT weight at the deepest level (between the last
    // pool and the first convT, inclusive)
    let last_pool = net
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, LayerKind::MaxPool { .. }))
        .map(|n| n.index)
        .max()
        .unwrap();
    let first_convt = net
        .nodes
        .iter()
        .find(|n| matches!(n.kind, LayerKind::ConvT { .. }))
        .map(|n| n.index)
        .unwrap();
    for n in &net.nodes {
        if n.index > last_pool && n.index <= first_convt && !n.params.is_empty() {
            let len = n.params[0].len();
            n.params[0].data_mut().copy_from_slice(&vec![0.0; len]);
        }
    }
    let out = net.infer(&rand_input(&[1, 16, 16], 4)).unwrap();
    let spread = out
        .to_vec()
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    assert!(spread.1 - spread.0 > 1e-6, "output is constant: skip path is dead");
}

#[test]
fn unet_zero_input_gives_half_map() {
    let mut rng = stream(5, "init", 0);
    let net: NetworkSpec<f64> = build_unet(1, 4, 1, 1, &mut rng).unwrap();
    let out = net.infer(&Tensor::zeros(&[1, 8, 8])).unwrap();
    assert!(out.to_vec().iter().all(|v| (*v - 0.5).abs() < 1e-12));
}

#[test]
fn unet_train_eval_identical_without_batchnorm() {
    let mut rng = stream(6, "init", 0);
    let net: NetworkSpec<f64> = build_unet(2, 4, 1, 1, &mut rng).unwrap();
    let x = rand_input(&[1, 16, 16], 7);
    let tape = Tape::new();
    let a = net.forward_on(&tape, &x, Mode::Train).unwrap();
    let b = net.infer(&x).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
}

#[test]
fn residual_classifier_probability_vector() {
    let mut rng = stream(10, "init", 0);
    let net: NetworkSpec<f64> = build_residual_classifier(&[1, 1], 4, 3, &mut rng).unwrap();
    let out = net.infer(&rand_input(&[3, 32, 32], 11)).unwrap();
    let v = out.to_vec();
    assert_eq!(v.len(), 3);
    assert!(v.iter().all(|p| *p >= 0.0));
    assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

#[test]
fn residual_add_count_matches_blocks() {
    let mut rng = stream(10, "init", 0);
    let net: NetworkSpec<f32> = build_residual_classifier(&[2, 3, 1], 4, 3, &mut rng).unwrap();
    let adds = net.nodes.iter().filter(|n| n.kind == LayerKind::Add).count();
    assert_eq!(adds, 6);
    assert!(build_residual_classifier::<f32>(&[], 4, 3, &mut rng).is_err());
}

#[test]
fn residual_zero_branch_is_identity_at_add() {
    let mut rng = stream(12, "init", 0);
    let net: NetworkSpec<f64> = build_residual_classifier(&[1], 4, 3, &mut rng).unwrap();
    // zero the two 3×3 convs of the block; then add output == shortcut input
    for n in &net.nodes {
        if let LayerKind::Conv { .. } = n.kind {
            if n.params[0].shape()[2] == 3 && n.index > 1 {
                let len = n.params[0].len();
                n.params[0].data_mut().copy_from_slice(&vec![0.0; len]);
            }
        }
    }
    let add_idx = net.nodes.iter().find(|n| n.kind == LayerKind::Add).unwrap().index;
    let shortcut = net.nodes[add_idx].inputs[0];
    let tape = Tape::new();
    let (acts, _) = net
        .forward_collect(&tape, &rand_input(&[3, 16, 16], 13), Mode::Eval)
        .unwrap();
    assert_eq!(acts[add_idx].to_vec(), acts[shortcut].to_vec());
}

#[test]
fn inception_structure() {
    let mut rng = stream(20, "init", 0);
    let net: NetworkSpec<f64> = build_inception_classifier(2, 4, 3, &mut rng).unwrap();
    let concats: Vec<&LayerNode<f64>> =
        net.nodes.iter().filter(|n| n.kind == LayerKind::Concat).collect();
    assert_eq!(concats.len(), 2);
    // branch channel counts sum to the block output channels
    let tape = Tape::new();
    let (acts, out) = net
        .forward_collect(&tape, &rand_input(&[3, 16, 16], 21), Mode::Eval)
        .unwrap();
    for cn in &concats {
        let branch_sum: usize = cn.inputs.iter().map(|&i| acts[i].shape()[0]).sum();
        assert_eq!(acts[cn.index].shape()[0], branch_sum);
    }
    let v = out.to_vec();
    assert_eq!(v.len(), 3);
    assert!(v.iter().all(|p| *p >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(build_inception_classifier::<f64>(0, 4, 3, &mut rng).is_err());
}

#[test]
fn replace_head_preserves_everything_else() {
    let mut rng = stream(30, "init", 0);
    let mut net: NetworkSpec<f32> = build_residual_classifier(&[1], 4, 10, &mut rng).unwrap();
    let before: Vec<Vec<f32>> = net
        .nodes
        .iter()
        .filter(|n| n.index != net.head_index)
        .flat_map(|n| n.params.iter().map(|p| p.to_vec()))
        .collect();
    let mut hrng = stream(31, "head", 0);
    net.replace_head(3, &mut hrng).unwrap();
    let after: Vec<Vec<f32>> = net
        .nodes
        .iter()
        .filter(|n| n.index != net.head_index)
        .flat_map(|n| n.params.iter().map(|p| p.to_vec()))
        .collect();
    assert_eq!(before, after);
    let x = rand_input(&[3, 16, 16], 32);
    let x32: Tensor<f32> =
        Tensor::from_vec(x.shape(), x.to_vec().iter().map(|v| *v as f32).collect()).unwrap();
    let out = net.infer(&x32).unwrap();
    assert_eq!(out.len(), 3);

    // same seed → identical head weights
    let head_a = net.nodes[net.head_index].params[0].to_vec();
    let mut hrng2 = stream(31, "head", 0);
    net.replace_head(3, &mut hrng2).unwrap();
    assert_eq!(net.nodes[net.head_index].params[0].to_vec(), head_a);

    // no dense head: the segmenter refuses
    let mut unet: NetworkSpec<f32> = build_unet(1, 4, 1, 1, &mut rng).unwrap();
    assert!(unet.replace_head(3, &mut hrng2).is_err());
}

#[test]
fn freeze_point_semantics() {
    let mut rng = stream(40, "init", 0);
    let mut net: NetworkSpec<f64> = build_residual_classifier(&[1, 1], 4, 3, &mut rng).unwrap();
    net.set_freeze_point(0).unwrap();
    assert!(net.nodes.iter().all(|n| n.trainable));
    let full = net.trainable_param_count();

    let legal = net.legal_freeze_points();
    assert!(legal.len() >= 4); // 0, two adds, head
    // monotone trainable-parameter count
    let mut last = usize::MAX;
    for &k in &legal {
        net.set_freeze_point(k).unwrap();
        let count = net.trainable_param_count();
        assert!(count <= last, "count not monotone at k={k}");
        last = count;
    }
    assert!(last < full);

    // head-only: exactly the head's parameters train
    net.set_freeze_point(net.head_index).unwrap();
    let head_params: usize = net.nodes[net.head_index].params.iter().map(|p| p.len()).sum();
    assert_eq!(net.trainable_param_count(), head_params);

    let err = net.set_freeze_point(net.head_index + 1).unwrap_err();
    assert!(err.to_string().contains("legal points"), "{err}");
}

#[test]
fn freeze_invariance_under_training() {
    let mut rng = stream(50, "init", 0);
    let mut net: NetworkSpec<f64> = build_residual_classifier(&[1, 1], 4, 3, &mut rng).unwrap();
    let adds: Vec<usize> = net
        .nodes
        .iter()
        .filter(|n| n.kind == LayerKind::Add)
        .map(|n| n.index)
        .collect();
    let k = adds[1];
    net.set_freeze_point(k).unwrap();
    let snapshot: Vec<(usize, Vec<f64>)> = net
        .nodes
        .iter()
        .filter(|n| n.index < k)
        .flat_map(|n| n.params.iter().map(move |p| (n.index, p.to_vec())))
        .collect();
    let mut opt = Sgd::new(0.05, 0.9).unwrap();
    let mut drng = stream(51, "data", 0);
    for step in 0..20 {
        let x = Tensor::from_vec(
            &[3, 16, 16],
            (0..3 * 256).map(|_| drng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let tape = Tape::new();
        let out = net.forward_on(&tape, &x, Mode::Train).unwrap();
        let loss = cross_entropy_categorical(&tape, &out, step % 3).unwrap();
        tape.backward(&loss).unwrap();
        opt.step(&net.trainable_params()).unwrap();
    }
    let after: Vec<(usize, Vec<f64>)> = net
        .nodes
        .iter()
        .filter(|n| n.index < k)
        .flat_map(|n| n.params.iter().map(move |p| (n.index, p.to_vec())))
        .collect();
    assert_eq!(snapshot, after, "parameters below the freeze point moved");
}

#[test]
fn eval_forward_is_pure() {
    let mut rng = stream(60, "init", 0);
    let net: NetworkSpec<f64> = build_inception_classifier(1, 4, 3, &mut rng).unwrap();
    let x = rand_input(&[3, 16, 16], 61);
    assert_eq!(net.infer(&x).unwrap().to_vec(), net.infer(&x).unwrap().to_vec());
}

#[test]
fn weight_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = stream(70, "init", 0);
    let mut net: NetworkSpec<f32> = build_residual_classifier(&[1, 1], 4, 3, &mut rng).unwrap();
    net.set_freeze_point(net.legal_freeze_points()[1]).unwrap();
    let p1 = dir.path().join("a.ncw");
    let p2 = dir.path().join("b.ncw");
    save_weights(&net, &p1).unwrap();
    let loaded: NetworkSpec<f32> = load_weights(&p1).unwrap();
    assert_eq!(loaded.freeze_point, net.freeze_point);
    assert_eq!(loaded.family, net.family);
    save_weights(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    // identical outputs after round trip
    let x = rand_input(&[3, 16, 16], 71);
    let x32 = Tensor::from_vec(x.shape(), x.to_vec().iter().map(|v| *v as f32).collect()).unwrap();
    assert_eq!(net.infer(&x32).unwrap().to_vec(), loaded.infer(&x32).unwrap().to_vec());
}

#[test]
fn weight_file_rejects_mismatch_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = stream(80, "init", 0);
    let net: NetworkSpec<f32> = build_residual_classifier(&[1], 4, 3, &mut rng).unwrap();
    let path = dir.path().join("net.ncw");
    save_weights(&net, &path).unwrap();

    let mut other: NetworkSpec<f32> = build_residual_classifier(&[1], 8, 3, &mut rng).unwrap();
    let err = other.load_params_from(&path).unwrap_err();
    assert!(matches!(err, Error::Format(_)), "{err}");
    assert!(err.to_string().contains("node"), "{err}");

    let bytes = std::fs::read(&path).unwrap();
    let truncated = dir.path().join("trunc.ncw");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_weights::<f32>(&truncated), Err(Error::Format(_))));

    let garbage = dir.path().join("bad.ncw");
    std::fs::write(&garbage, b"not a weight file").unwrap();
    assert!(matches!(load_weights::<f32>(&garbage), Err(Error::Format(_))));
}

#[test]
fn receptive_radius_is_positive_and_grows_with_depth() {
    let mut rng = stream(90, "init", 0);
    let shallow: NetworkSpec<f32> = build_unet(1, 4, 1, 1, &mut rng).unwrap();
    let deep: NetworkSpec<f32> = build_unet(3, 4, 1, 1, &mut rng).unwrap();
    assert!(shallow.receptive_radius() >= 4);
    assert!(deep.receptive_radius() > shallow.receptive_radius());
}
