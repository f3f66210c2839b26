//! Forward kernels against brute-force loop oracles.

use attnforge::autograd::{softmax_rows, Mode, RunningStats, Tape};
use attnforge::kernels::{self, PoolMode};
use attnforge::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{max_rel, naive_conv, rand_tensor, rel};

#[test]
fn conv_hand_example() {
    let x = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = kernels::conv2d_forward(&x, &w, None, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[5.0]);
}

#[test]
fn conv_matches_naive_over_small_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 1..=4 {
        for c in 1..=4 {
            for h in 1..=8 {
                for wd in 1..=8 {
                    for k in [1, 3, 5, 7] {
                        // same padding at stride 1, and unpadded stride 2 when it fits
                        let mut configs = vec![(1, k / 2)];
                        if k <= h && k <= wd {
                            configs.push((2, 0));
                        }
                        for (stride, pad) in configs {
                            let co = 1 + (n + c + h) % 3;
                            let x = rand_tensor(&[n, c, h, wd], &mut rng);
                            let w = rand_tensor(&[co, c, k, k], &mut rng);
                            let b = rand_tensor(&[co], &mut rng);
                            let y = kernels::conv2d_forward(&x, &w, Some(&b), stride, pad).unwrap();
                            worst = worst.max(max_rel(&y, &naive_conv(&x, &w, Some(&b), stride, pad)));
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(cases > 4000);
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}

#[test]
fn depthwise_matches_per_channel_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (c, h, k, stride) in [(3, 7, 3, 1), (4, 8, 3, 2), (2, 5, 5, 1)] {
        let x = rand_tensor(&[2, c, h, h], &mut rng);
        let w = rand_tensor(&[c, 1, k, k], &mut rng);
        let y = kernels::depthwise_forward(&x, &w, None, stride, k / 2).unwrap();
        let (_, _, ho, wo) = y.dims4().unwrap();
        for ni in 0..2 {
            for ci in 0..c {
                let xc = Tensor::from_fn([1, 1, h, h], |i| x.data()[(ni * c + ci) * h * h + i]);
                let wc = Tensor::from_fn([1, 1, k, k], |i| w.data()[ci * k * k + i]);
                let want = naive_conv(&xc, &wc, None, stride, k / 2);
                for i in 0..ho * wo {
                    let got = y.data()[(ni * c + ci) * ho * wo + i];
                    assert!(rel(got, want[i]) < 1e-9);
                }
            }
        }
    }
}

#[test]
fn max_pool_matches_window_scan() {
    let ramp = Tensor::from_fn([1, 1, 4, 4], |i| i as f64);
    let (y, _) = kernels::max_pool2d_forward(&ramp, 2, 2).unwrap();
    assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[2, 3, 7, 6], &mut rng);
    let (y, _) = kernels::max_pool2d_forward(&x, 3, 2).unwrap();
    let (_, _, ho, wo) = y.dims4().unwrap();
    for n in 0..2 {
        for c in 0..3 {
            for i in 0..ho {
                for j in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for u in 0..3 {
                        for v in 0..3 {
                            m = m.max(x.at(&[n, c, i * 2 + u, j * 2 + v]));
                        }
                    }
                    assert_eq!(y.at(&[n, c, i, j]), m);
                }
            }
        }
    }
}

#[test]
fn global_avg_pool_is_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 8, 5, 5], &mut rng);
    let (y, _) = kernels::global_pool_forward(&x, PoolMode::Avg).unwrap();
    assert_eq!(y.shape(), &[2, 8, 1, 1]);
    for nc in 0..16 {
        let s: f64 = x.data()[nc * 25..(nc + 1) * 25].iter().sum();
        assert!((y.data()[nc] - s / 25.0).abs() < 1e-12);
    }
}

#[test]
fn channel_pools_match_per_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[1, 16, 4, 4], &mut rng);
    let (avg, _) = kernels::channel_pool_forward(&x, PoolMode::Avg).unwrap();
    let (max, _) = kernels::channel_pool_forward(&x, PoolMode::Max).unwrap();
    for p in 0..16 {
        let vals: Vec<f64> = (0..16).map(|c| x.data()[c * 16 + p]).collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((avg.data()[p] - mean).abs() < 1e-12);
        assert_eq!(max.data()[p], mx);
    }
}

#[test]
fn linear_hand_example() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
    let w = t.constant(Tensor::new([1, 2], vec![3.0, 4.0]).unwrap());
    let b = t.constant(Tensor::new([1], vec![5.0]).unwrap());
    let y = t.linear(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y).data(), &[16.0]);
}

#[test]
fn sigmoid_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn([64], |_| rng.gen_range(-8.0..8.0));
    let mut t = Tape::<f64>::new();
    let a = t.constant(x.clone());
    let b = t.constant(x.map(|v| -v));
    let sa = t.sigmoid(a).unwrap();
    let sb = t.sigmoid(b).unwrap();
    for (p, q) in t.value(sa).data().iter().zip(t.value(sb).data()) {
        assert!((p + q - 1.0).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_eval_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let g = t.constant(Tensor::ones([3]));
    let b = t.constant(Tensor::zeros([3]));
    let mut stats = RunningStats::new(3);
    let y = t.batch_norm2d(xv, g, b, &mut stats, Mode::Eval).unwrap();
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (o, i) in t.value(y).data().iter().zip(x.data()) {
        assert!((o - i * scale).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_train_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::from_fn([4, 3, 5, 5], |_| rng.gen_range(-3.0..5.0));
    let (y, _) = kernels::batch_norm_train(&x, &Tensor::ones([3]), &Tensor::zeros([3])).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..25).map(move |p| (n, p))).map(|(n, p)| y.data()[(n * 3 + c) * 25 + p]).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-3);
    }
}

#[test]
fn cross_entropy_matches_f64_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits: Vec<f32> = (0..12).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let labels = [0usize, 3, 2];
    let mut t = Tape::<f32>::new();
    let l = t.constant(Tensor::new([3, 4], logits.clone()).unwrap());
    let loss = t.softmax_cross_entropy(l, &labels).unwrap();
    let got = t.value(loss).item() as f64;
    // direct formula in f64
    let mut want = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits[r * 4..r * 4 + 4].iter().map(|&v| v as f64).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        want += lse - row[y];
    }
    want /= 3.0;
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    let p = softmax_rows(&logits.iter().map(|&v| v as f64).collect::<Vec<_>>(), 4);
    for r in 0..3 {
        assert!((p[r * 4..r * 4 + 4].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn avg_pool_counts_padding_as_zero() {
    let x = Tensor::<f64>::ones([1, 1, 3, 3]);
    let y = kernels::avg_pool2d_forward(&x, 3, 1, 1).unwrap();
    assert!((y.at(&[0, 0, 0, 0]) - 4.0 / 9.0).abs() < 1e-12);
    assert!((y.at(&[0, 0, 1, 1]) - 1.0).abs() < 1e-12);
}
