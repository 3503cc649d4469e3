//! Composite-network checks against independent per-patch oracles.

mod common;

use cnnic::autograd::{DropoutKey, Tape, ValueId};
use cnnic::net::{cnnic_forward, forward_on_tape, CnnicConfig, CnnicModel, Preset};
use cnnic::rng::SplitMix64;
use cnnic::tensor::Tensor;
use cnnic::Mode;
use common::{naive_conv2d, naive_dense, naive_patches, naive_pool, naive_softmax};

/// Re-implements one CNNIC-2 kernel network with plain loops.
fn oracle_small_cnn(patch: &[f64], p: usize, model: &CnnicModel<f64>) -> Vec<f64> {
    let kernel = &model.kernels[0];
    let (w1, b1) = (&kernel.convs[0].weight, &kernel.convs[0].bias);
    let (w2, b2) = (&kernel.convs[1].weight, &kernel.convs[1].bias);

    let s1 = p - 4;
    let h1 = naive_conv2d(patch, (1, p, p), w1.data(), (64, 5, 5), b1.data(), 1, true);
    let h1 = naive_pool(&h1, (64, s1, s1));
    let s2 = s1 / 2;
    let h2 = naive_conv2d(&h1, (64, s2, s2), w2.data(), (64, 5, 5), b2.data(), 1, true);
    let s3 = s2 - 4;
    let h2 = naive_pool(&h2, (64, s3, s3));
    let fc = naive_dense(&h2, kernel.fc.weight.data(), kernel.fc.bias.data(), 1024, true);
    naive_dense(&fc, kernel.out.weight.data(), kernel.out.bias.data(), 10, false)
}

#[test]
fn extract_patches_matches_naive_slicing() {
    let mut tape = Tape::<f64>::new();
    let img = Tensor::from_fn(&[1, 1, 6, 6], |i| ((i * 13) % 17) as f64 / 17.0);
    let x = tape.leaf(img.clone());
    let patches = tape.extract_patches(x, 4, 2).unwrap();
    assert_eq!(tape.value(patches).shape(), &[1, 4, 1, 4, 4]);
    let expect = naive_patches(img.data(), 6, 4, 2);
    for (pos, exp) in expect.iter().enumerate() {
        let got = &tape.value(patches).data()[pos * 16..(pos + 1) * 16];
        assert_eq!(got, &exp[..]);
    }
}

#[test]
fn cnnic_forward_matches_loop_over_patches_oracle() {
    // Default geometry: 3x3 grid, 9 patch positions.
    let config = CnnicConfig::default();
    let model: CnnicModel<f64> = CnnicModel::init(config.clone(), 77).unwrap();
    let mut rng = SplitMix64::stream(123, &[1]);
    let images = Tensor::from_fn(&[2, 1, 28, 28], |_| rng.next_f64());

    let out = cnnic_forward(&model, &images, Mode::Infer, 0, 0).unwrap();

    for b in 0..2 {
        let img = &images.data()[b * 28 * 28..(b + 1) * 28 * 28];
        let patches = naive_patches(img, 28, config.patch_size, config.patch_stride);
        assert_eq!(patches.len(), 9);
        let mut mean_logits = vec![0.0f64; 10];
        for patch in &patches {
            let logits = oracle_small_cnn(patch, config.patch_size, &model);
            for (m, l) in mean_logits.iter_mut().zip(logits.iter()) {
                *m += l / patches.len() as f64;
            }
        }
        let probs = naive_softmax(&mean_logits);
        let got_row = &out.probs.data()[b * 10..(b + 1) * 10];
        for (c, (got, expect)) in got_row.iter().zip(probs.iter()).enumerate() {
            assert!(
                (got - expect).abs() < 1e-10,
                "batch {b} class {c}: {got} vs {expect}"
            );
        }
    }
}

/// Mirror of the kernel-network structure with explicit per-position weight
/// copies; used as the weight-sharing oracle.
fn kernel_chain_cnnic2(
    tape: &mut Tape<f64>,
    x: ValueId,
    ids: &[ValueId],
    flat: usize,
) -> ValueId {
    let h = tape.conv2d_relu(x, ids[0], ids[1], 1, true).unwrap();
    let h = tape.avg_pool_2x2(h).unwrap();
    let h = tape.conv2d_relu(h, ids[2], ids[3], 1, true).unwrap();
    let h = tape.avg_pool_2x2(h).unwrap();
    let n = tape.value(h).shape()[0];
    let h = tape.reshape(h, &[n, flat]).unwrap();
    let h = tape.dense(h, ids[4], ids[5]).unwrap();
    let h = tape.relu(h);
    tape.dense(h, ids[6], ids[7]).unwrap()
}

#[test]
fn shared_kernel_gradient_equals_sum_of_position_copies() {
    // 18x18 images, patch 16, stride 2 -> 2x2 grid of overlapping patches.
    let config = CnnicConfig {
        preset: Preset::Cnnic2,
        patch_size: 16,
        patch_stride: 2,
        image_size: 18,
        dropout_p: 0.0,
        ..CnnicConfig::default()
    };
    let geometry = config.validate().unwrap();
    assert_eq!(geometry.positions, 4);
    let model: CnnicModel<f64> = CnnicModel::init(config.clone(), 5).unwrap();
    let mut rng = SplitMix64::stream(6, &[2]);
    let images = Tensor::from_fn(&[2, 1, 18, 18], |_| rng.next_f64());
    let labels = vec![3usize, 8];

    // Route A: the production weight-shared forward.
    let mut tape_a = Tape::new();
    let fwd = forward_on_tape(&mut tape_a, &model, &images, Mode::Infer, 0, 0).unwrap();
    let (loss_a, _) = tape_a.softmax_cross_entropy(fwd.combined, &labels).unwrap();
    let mut grads_a = tape_a.backward(loss_a).unwrap();

    // Route B: one independent weight copy per patch position on one tape.
    let flat_tensors = model.to_flat();
    let mut tape_b = Tape::new();
    let mut copy_ids: Vec<Vec<ValueId>> = Vec::new();
    for _pos in 0..geometry.positions {
        copy_ids.push(flat_tensors.iter().map(|t| tape_b.param(t.clone())).collect());
    }
    let mut pooled = Vec::new();
    for (pos, ids) in copy_ids.iter().enumerate() {
        // Gather this position's patch across the batch by naive slicing.
        let (gi, gj) = (pos / geometry.grid, pos % geometry.grid);
        let mut patch_data = Vec::new();
        for b in 0..2 {
            let img = &images.data()[b * 18 * 18..(b + 1) * 18 * 18];
            for u in 0..16 {
                for v in 0..16 {
                    patch_data.push(img[(gi * 2 + u) * 18 + gj * 2 + v]);
                }
            }
        }
        let x = tape_b.leaf(Tensor::new(vec![2, 1, 16, 16], patch_data).unwrap());
        pooled.push(kernel_chain_cnnic2(&mut tape_b, x, ids, geometry.flat_features));
    }
    let mut acc = pooled[0];
    for &p in &pooled[1..] {
        acc = tape_b.add(acc, p).unwrap();
    }
    let avg = tape_b.scale(acc, 0.25);
    let (loss_b, _) = tape_b.softmax_cross_entropy(avg, &labels).unwrap();

    // Same forward value on both routes.
    assert!((tape_a.value(loss_a).item() - tape_b.value(loss_b).item()).abs() < 1e-12);

    let mut grads_b = tape_b.backward(loss_b).unwrap();
    for (pi, &shared_id) in fwd.params.iter().enumerate() {
        let shape = flat_tensors[pi].shape().to_vec();
        let shared = grads_a.take_or_zeros(shared_id, &shape);
        let mut summed = Tensor::zeros(&shape);
        for ids in &copy_ids {
            let g = grads_b.take_or_zeros(ids[pi], &shape);
            summed.add_scaled(&g, 1.0).unwrap();
        }
        for (a, b) in shared.data().iter().zip(summed.data()) {
            assert!(
                (a - b).abs() < 1e-8,
                "param {pi}: shared {a} vs summed copies {b}"
            );
        }
    }
}

#[test]
fn gap_is_permutation_invariant() {
    let config = CnnicConfig::default();
    let model: CnnicModel<f64> = CnnicModel::init(config, 31).unwrap();
    let mut rng = SplitMix64::stream(32, &[3]);
    let images = Tensor::from_fn(&[1, 1, 28, 28], |_| rng.next_f64());
    let out = cnnic_forward(&model, &images, Mode::Infer, 0, 0).unwrap();

    // Average the logit map over positions in forward and reversed order;
    // both must reproduce the combined output.
    let p = 9;
    for reverse in [false, true] {
        for c in 0..10 {
            let mut acc = 0.0;
            let order: Vec<usize> = if reverse {
                (0..p).rev().collect()
            } else {
                (0..p).collect()
            };
            for pos in order {
                acc += out.logit_map.data()[pos * 10 + c];
            }
            assert!((acc / p as f64 - out.combined.data()[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn dropout_mean_over_seeds_converges_to_identity() {
    let x = Tensor::from_fn(&[100], |i| 0.5 + (i as f64) / 100.0);
    let mut mean = vec![0.0f64; 100];
    let seeds = 10_000u64;
    for s in 0..seeds {
        let key = DropoutKey::new(900, 0, s);
        let dropped = cnnic::autograd::dropout(&x, 0.4, Mode::Train, key).unwrap();
        for (m, v) in mean.iter_mut().zip(dropped.data()) {
            *m += v / seeds as f64;
        }
    }
    let num: f64 = mean
        .iter()
        .zip(x.data())
        .map(|(m, v)| (m - v) * (m - v))
        .sum::<f64>()
        .sqrt();
    let den: f64 = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(num / den < 0.01, "relative deviation {}", num / den);
}
