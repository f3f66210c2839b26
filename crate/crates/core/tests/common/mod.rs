#![allow(dead_code)]

use attnforge::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-9)
}

pub fn max_rel(a: &Tensor<f64>, b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.data().iter().zip(b).map(|(&x, &y)| rel(x, y)).fold(0.0, f64::max)
}

/// Six nested loops, no im2col.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for ni in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = b.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    s += x.at(&[ni, ci, y as usize, xx as usize]) * w.at(&[o, ci, u, v]);
                                }
                            }
                        }
                    }
                    out[((ni * co + o) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    out
}
