//! Central finite differences against the tape's analytic gradients, one
//! operation at a time, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shotlab_tensor::{AttentionMask, Piece, Tape, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Builds the graph for `inputs`, reduces the result with fixed random
/// weights and compares every input gradient to central differences.
fn check<F>(inputs: Vec<Tensor<f64>>, build: F, tol: f64)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |xs: &[Tensor<f64>], weights: Option<&[f64]>| -> (f64, Vec<f64>, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let n = tape.value(out).numel();
        let w: Vec<f64> = match weights {
            Some(w) => w.to_vec(),
            None => (0..n).map(|i| ((i as f64) * 0.7).sin() + 0.3).collect(),
        };
        let loss = tape.weighted_sum(out, &w);
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss);
        let gs = vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
            .collect();
        (value, w, gs)
    };
    let (_, weights, analytic) = eval(&inputs, None);
    let h = 1e-5;
    for (k, x) in inputs.iter().enumerate() {
        // probe a random subset on large inputs to keep the check quick
        let probes: Vec<usize> = if x.numel() <= 64 {
            (0..x.numel()).collect()
        } else {
            (0..64).map(|_| rng.gen_range(0..x.numel())).collect()
        };
        for i in probes {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h);
            let an = analytic[k].data()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
            assert!(err < tol, "input {k} index {i}: analytic {an} vs numeric {fd} (rel {err})");
        }
    }
}

#[test]
fn linear_with_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![random(&[4, 3], &mut rng), random(&[3, 5], &mut rng), random(&[5], &mut rng)];
    check(inputs, |t, v| t.linear(v[0], v[1], Some(v[2])), 1e-6);
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng), random(&[4], &mut rng)];
    check(
        inputs,
        |t, v| {
            let a = t.add(v[0], v[1]);
            let b = t.gelu(a);
            let c = t.add_broadcast(b, v[2]);
            let d = t.scale(c, 1.7);
            let e = t.relu(d);
            t.add(e, v[0])
        },
        1e-6,
    );
}

#[test]
fn layer_and_group_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        random(&[2, 3, 3, 4], &mut rng),
        random(&[4], &mut rng),
        random(&[4], &mut rng),
    ];
    check(inputs.clone(), |t, v| t.group_norm(v[0], v[1], v[2], 2, 2, 1e-5), 1e-5);
    let ln = vec![random(&[5, 4], &mut rng), inputs[1].clone(), inputs[2].clone()];
    check(ln, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), 1e-5);
}

#[test]
fn conv2d_padding_and_stride() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (2, 0, 2)] {
        let inputs = vec![
            random(&[2, 5, 5, 3], &mut rng),
            random(&[k, k, 3, 4], &mut rng),
            random(&[4], &mut rng),
        ];
        check(inputs, move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad), 1e-6);
    }
}

#[test]
fn masked_and_full_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for mask in [AttentionMask::Full, AttentionMask::QueryLast] {
        let inputs = vec![random(&[2 * 4, 3 * 6], &mut rng)];
        check(inputs, move |t, v| t.attention(v[0], 2, 4, 2, mask), 1e-6);
    }
}

#[test]
fn gather_stitch_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = vec![random(&[4, 3], &mut rng), random(&[2, 2], &mut rng)];
    check(
        inputs,
        |t, v| {
            let g = t.gather_rows(v[0], &[3, 1, 1, 0]);
            let s = t.stitch(
                4,
                5,
                vec![
                    Piece { src: g, src_row: 0, rows: 4, dst_row: 0, dst_col: 0 },
                    Piece { src: v[1], src_row: 0, rows: 2, dst_row: 1, dst_col: 3 },
                ],
            );
            let r = t.reshape(s, &[2, 10]);
            let r = t.reshape(r, &[4, 5]);
            t.mean_groups(r, 2)
        },
        1e-6,
    );
}

#[test]
fn normalization_and_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![random(&[4, 3], &mut rng)];
    check(inputs.clone(), |t, v| t.l2_normalize_rows(v[0]), 1e-6);
    check(inputs.clone(), |t, v| t.cross_entropy(v[0], &[0, 2, 1, 1], 0.1), 1e-6);
    check(
        inputs,
        |t, v| {
            let n = t.l2_normalize_rows(v[0]);
            t.triplet(n, &[(0, 1, 2), (1, 0, 3), (2, 3, 0)], 1.5)
        },
        1e-6,
    );
}

#[test]
fn dropout_routes_gradient_through_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[6, 5], &mut rng);
    let mut tape = Tape::new();
    let v = tape.leaf(x, true);
    let mut drng = ChaCha8Rng::seed_from_u64(1);
    let y = tape.dropout(v, 0.5, &mut drng);
    let w = vec![1.0; 30];
    let loss = tape.weighted_sum(y, &w);
    let grads = tape.backward(loss);
    let g = grads.get(v).unwrap();
    for (gv, yv) in g.data().iter().zip(tape.value(y).data()) {
        if *yv == 0.0 {
            assert_eq!(*gv, 0.0);
        } else {
            assert_eq!(*gv, 2.0);
        }
    }
}
