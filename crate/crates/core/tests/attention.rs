//! SE and SA blocks against step-by-step primitive oracles.

use attnforge::attention::{sa_param_count, se_hidden, se_param_count, SaBlock, SeBlock};
use attnforge::autograd::{Mode, Tape};
use attnforge::exec::TapeExec;
use attnforge::kernels;
use attnforge::param::ParamStore;
use attnforge::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::{naive_conv, rand_tensor, rel};

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        p.value = rand_tensor(p.value.shape(), rng);
    }
}

fn run_block(store: &ParamStore<f64>, x: &Tensor<f64>, f: impl Fn(&mut TapeExec<'_, f64>, &attnforge::autograd::Var) -> attnforge::autograd::Var) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = {
        let mut e = TapeExec::new(&mut tape, store, Mode::Eval);
        f(&mut e, &xv)
    };
    tape.value(out).clone()
}

#[test]
fn se_matches_primitive_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, c, h, w, r) = (2, 32, 5, 4, 16);
    let mut store = ParamStore::<f64>::new();
    let block = SeBlock::new(&mut store, "se", c, r, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let x = rand_tensor(&[n, c, h, w], &mut rng);
    let y = run_block(&store, &x, |e, xv| block.forward(e, xv).unwrap());

    let hid = se_hidden(c, r);
    let w1 = &store.get(block.fc1_w).value;
    let b1 = &store.get(block.fc1_b).value;
    let w2 = &store.get(block.fc2_w).value;
    let b2 = &store.get(block.fc2_b).value;
    for ni in 0..n {
        // squeeze
        let z: Vec<f64> = (0..c)
            .map(|ci| (0..h * w).map(|p| x.data()[(ni * c + ci) * h * w + p]).sum::<f64>() / (h * w) as f64)
            .collect();
        // excite
        let a: Vec<f64> = (0..hid)
            .map(|j| (b1.data()[j] + (0..c).map(|ci| w1.at(&[j, ci]) * z[ci]).sum::<f64>()).max(0.0))
            .collect();
        for ci in 0..c {
            let g = sig(b2.data()[ci] + (0..hid).map(|j| w2.at(&[ci, j]) * a[j]).sum::<f64>());
            for p in 0..h * w {
                let i = (ni * c + ci) * h * w + p;
                assert!(rel(y.data()[i], x.data()[i] * g) < 1e-12);
            }
        }
    }
}

#[test]
fn se_dense_equals_pointwise_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (c, hid) = (12, 3);
    let z = rand_tensor(&[3, c], &mut rng);
    let w = rand_tensor(&[hid, c], &mut rng);
    let b = rand_tensor(&[hid], &mut rng);
    let mut tape = Tape::<f64>::new();
    let (zv, wv, bv) = (tape.constant(z.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let dense = tape.linear(zv, wv, Some(bv)).unwrap();
    let conv = kernels::conv2d_forward(&z.reshape([3, c, 1, 1]).unwrap(), &w.reshape([hid, c, 1, 1]).unwrap(), Some(&b), 1, 0)
        .unwrap();
    for (a, b) in tape.value(dense).data().iter().zip(conv.data()) {
        assert!(rel(*a, *b) < 1e-12);
    }
}

#[test]
fn sa_matches_primitive_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in [7, 3] {
        let (n, c, h, w) = (2, 5, 6, 7);
        let mut store = ParamStore::<f64>::new();
        let block = SaBlock::new(&mut store, "sa", k).unwrap();
        randomize(&mut store, &mut rng);
        let x = rand_tensor(&[n, c, h, w], &mut rng);
        let y = run_block(&store, &x, |e, xv| block.forward(e, xv).unwrap());

        let mut desc = vec![0.0; n * 2 * h * w];
        for ni in 0..n {
            for p in 0..h * w {
                let vals: Vec<f64> = (0..c).map(|ci| x.data()[(ni * c + ci) * h * w + p]).collect();
                desc[(ni * 2) * h * w + p] = vals.iter().sum::<f64>() / c as f64;
                desc[(ni * 2 + 1) * h * w + p] = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
        }
        let desc = Tensor::new([n, 2, h, w], desc).unwrap();
        let logits = naive_conv(&desc, &store.get(block.conv_w).value, Some(&store.get(block.conv_b).value), 1, k / 2);
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..h * w {
                    let i = (ni * c + ci) * h * w + p;
                    let m = sig(logits[ni * h * w + p]);
                    assert!(rel(y.data()[i], x.data()[i] * m) < 1e-12);
                }
            }
        }
    }
}

#[test]
fn zero_init_gates_are_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[2, 20, 4, 4], &mut rng);
    let mut store = ParamStore::<f64>::new();
    let se = SeBlock::new(&mut store, "se", 20, 16, &mut rng).unwrap();
    let sa = SaBlock::new(&mut store, "sa", 7).unwrap();
    let ys = run_block(&store, &x, |e, xv| se.forward(e, xv).unwrap());
    let ya = run_block(&store, &x, |e, xv| sa.forward(e, xv).unwrap());
    for ((a, b), v) in ys.data().iter().zip(ya.data()).zip(x.data()) {
        assert_eq!(*a, 0.5 * v);
        assert_eq!(*b, 0.5 * v);
    }
}

#[test]
fn raising_fc2_bias_raises_that_gate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let se = SeBlock::new(&mut store, "se", 8, 4, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let x = rand_tensor(&[1, 8, 3, 3], &mut rng);
    let gate = |store: &ParamStore<f64>| run_block(store, &x, |e, xv| se.gate(e, xv).unwrap());
    let before = gate(&store);
    store.get_mut(se.fc2_b).value.data_mut()[5] += 0.25;
    let after = gate(&store);
    for c in 0..8 {
        if c == 5 {
            assert!(after.data()[c] > before.data()[c]);
        } else {
            assert_eq!(after.data()[c], before.data()[c]);
        }
    }
}

#[test]
fn parameter_counts() {
    assert_eq!(se_hidden(176, 16), 11);
    assert_eq!(se_param_count(176, 16), 176 * 11 + 11 + 11 * 176 + 176);
    assert_eq!(se_param_count(176, 16), 4059);
    assert_eq!(se_param_count(16, 16), 49);
    assert_eq!(sa_param_count(7), 99);
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    SeBlock::new(&mut store, "a", 176, 16, &mut rng).unwrap();
    assert_eq!(store.count(None), 4059);
    SaBlock::new(&mut store, "b", 7).unwrap();
    assert_eq!(store.count(None), 4059 + 99);
    assert!(SaBlock::new(&mut store, "c", 4).is_err());
    assert!(SeBlock::new(&mut store, "d", 0, 16, &mut rng).is_err());
}

#[test]
fn se_rejects_wrong_channel_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let se = SeBlock::new(&mut store, "se", 8, 4, &mut rng).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::zeros([1, 6, 2, 2]));
    let mut e = TapeExec::new(&mut tape, &store, Mode::Eval);
    assert!(se.forward(&mut e, &xv).is_err());
}
