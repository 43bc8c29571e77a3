//! Finite-difference verification of every differentiable operation.
//!
//! The oracle is plain central differences on untracked forward evaluations;
//! it never touches the tape machinery it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remoe::param::{Param, ParamKind};
use remoe::tensor::{Tape, Tensor};
use remoe::Error;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect()
}

/// Checks d(f)/d(inputs) against central differences for every coordinate.
fn fd_check(
    name: &str,
    inputs: &[(Vec<usize>, Vec<f64>)],
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
) {
    fd_check_tol(name, inputs, TOL, f)
}

fn fd_check_tol(
    name: &str,
    inputs: &[(Vec<usize>, Vec<f64>)],
    tol: f64,
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
) {
    // Analytic gradients through the tape.
    let tape = Tape::new();
    let params: Vec<Param<f64>> = inputs
        .iter()
        .enumerate()
        .map(|(i, (shape, data))| {
            Param::new(format!("in{i}"), ParamKind::Router, shape.clone(), data.clone(), true)
        })
        .collect();
    let leaves: Vec<Tensor<f64>> = params.iter().map(|p| p.leaf(&tape)).collect();
    let loss = f(&leaves);
    assert_eq!(loss.rank(), 0, "{name}: test function must return a scalar");
    loss.backward().unwrap();

    // Central differences on untracked evaluations.
    let eval = |datas: &[Vec<f64>]| -> f64 {
        let ts: Vec<Tensor<f64>> = inputs
            .iter()
            .zip(datas)
            .map(|((shape, _), d)| Tensor::from_vec(shape.clone(), d.clone()).unwrap())
            .collect();
        f(&ts).scalar().unwrap()
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    for (i, p) in params.iter().enumerate() {
        let grad = p
            .grad()
            .unwrap_or_else(|| panic!("{name}: input {i} received no gradient"));
        for j in 0..base[i].len() {
            let mut plus = base.clone();
            plus[i][j] += STEP;
            let mut minus = base.clone();
            minus[i][j] -= STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            let ad = grad[j];
            let denom = ad.abs().max(fd.abs()).max(1e-6);
            let rel = (ad - fd).abs() / denom;
            assert!(
                rel < tol,
                "{name}: input {i} coord {j}: analytic {ad} vs fd {fd} (rel {rel})"
            );
        }
    }
}

#[test]
fn matmul_forward_hand_cases() {
    let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!(eye.matmul(&a).unwrap().all_eq(&a));

    let b = Tensor::from_vec(vec![2, 1], vec![5.0, 6.0]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.data(), &[17.0, 39.0]);

    let err = b.matmul(&a).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 1]") && msg.contains("[2, 2]"), "got: {msg}");
    assert!(matches!(err, Error::Dim { .. }));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_vec(&mut rng, 2 * 3 * 4, 1.0);
    let b = rand_vec(&mut rng, 4 * 2, 1.0);
    fd_check(
        "matmul",
        &[(vec![2, 3, 4], a), (vec![4, 2], b)],
        |t| t[0].matmul(&t[1]).unwrap().sum_all().unwrap(),
    );
}

#[test]
fn bmm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_vec(&mut rng, 2 * 3 * 4, 1.0);
    let b = rand_vec(&mut rng, 2 * 4 * 2, 1.0);
    fd_check(
        "bmm",
        &[(vec![2, 3, 4], a), (vec![2, 4, 2], b)],
        |t| t[0].bmm(&t[1]).unwrap().sum_all().unwrap(),
    );
}

#[test]
fn elementwise_forward_and_gradients() {
    let z = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0])
        .unwrap()
        .hadamard(&Tensor::zeros(vec![3]))
        .unwrap();
    assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
    let s = Tensor::from_vec(vec![2], vec![1.0, 2.0])
        .unwrap()
        .add(&Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap())
        .unwrap();
    assert_eq!(s.data(), &[4.0, 6.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_vec(&mut rng, 6, 1.0);
    let b = rand_vec(&mut rng, 6, 1.0);
    for (name, op) in [
        ("add", 0usize),
        ("sub", 1),
        ("hadamard", 2),
    ] {
        let (a, b) = (a.clone(), b.clone());
        fd_check(
            name,
            &[(vec![2, 3], a), (vec![2, 3], b)],
            move |t| {
                let r = match op {
                    0 => t[0].add(&t[1]).unwrap(),
                    1 => t[0].sub(&t[1]).unwrap(),
                    _ => t[0].hadamard(&t[1]).unwrap(),
                };
                // Weight the sum so gradients differ per coordinate.
                let w = Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, -1.5, 2.5]).unwrap();
                r.hadamard(&w).unwrap().sum_all().unwrap()
            },
        );
    }

    let err = Tensor::<f64>::zeros(vec![2, 3])
        .add(&Tensor::zeros(vec![3, 2]))
        .unwrap_err();
    assert!(matches!(err, Error::Dim { .. }));
}

#[test]
fn scalar_broadcast_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_vec(&mut rng, 4, 1.0);
    let c = rand_vec(&mut rng, 1, 1.0);
    fd_check(
        "mul_scalar_tensor",
        &[(vec![4], a), (vec![], c)],
        |t| t[0].hadamard(&t[1]).unwrap().sum_all().unwrap(),
    );
}

#[test]
fn activation_values_and_gradients() {
    let s = Tensor::from_vec(vec![1], vec![0.0]).unwrap().sigmoid().unwrap();
    assert_eq!(s.data()[0], 0.5);

    let sm = Tensor::from_vec(vec![4], vec![0.0; 4]).unwrap().softmax_last().unwrap();
    assert_eq!(sm.data(), &[0.25, 0.25, 0.25, 0.25]);

    let sm2 = Tensor::from_vec(vec![2], vec![2.0, 0.0]).unwrap().softmax_last().unwrap();
    assert!((sm2.data()[0] - 0.8807970779778823).abs() < 1e-15);
    assert!((sm2.data()[1] - 0.11920292202211755).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_vec(&mut rng, 6, 2.0);
    for (name, which) in [("sigmoid", 0usize), ("tanh", 1), ("silu", 2), ("softmax", 3)] {
        let x = x.clone();
        fd_check(name, &[(vec![2, 3], x)], move |t| {
            let y = match which {
                0 => t[0].sigmoid().unwrap(),
                1 => t[0].tanh().unwrap(),
                2 => t[0].silu().unwrap(),
                _ => t[0].softmax_last().unwrap(),
            };
            let w = Tensor::from_vec(vec![2, 3], vec![0.3, -1.0, 2.0, 1.1, -0.4, 0.9]).unwrap();
            y.hadamard(&w).unwrap().sum_all().unwrap()
        });
    }
}

#[test]
fn softmax_rows_are_normalized_and_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let cols = rng.random_range(1..7);
        let rows = rng.random_range(1..5);
        let x = rand_vec(&mut rng, rows * cols, 30.0);
        let y = Tensor::from_vec(vec![rows, cols], x).unwrap().softmax_last().unwrap();
        for row in y.data().chunks(cols) {
            assert!(row.iter().all(|&v| v >= 0.0));
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }
}

#[test]
fn concat_forward_and_gradient_split() {
    let a = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
    let b = Tensor::from_vec(vec![2], vec![2.0, 3.0]).unwrap();
    let c = Tensor::concat_last(&a, &b).unwrap();
    assert_eq!(c.data(), &[1.0, 2.0, 3.0]);

    // Concat with an empty tensor is the identity on values.
    let e = Tensor::from_vec(vec![1, 0], vec![]).unwrap();
    let x = Tensor::from_vec(vec![1, 3], vec![4.0, 5.0, 6.0]).unwrap();
    let xe = Tensor::concat_last(&x, &e).unwrap();
    assert_eq!(xe.data(), x.data());

    let err = Tensor::<f64>::concat_last(
        &Tensor::zeros(vec![2, 3]),
        &Tensor::zeros(vec![3, 1]),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Dim { .. }));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_vec(&mut rng, 4, 1.0);
    let b = rand_vec(&mut rng, 6, 1.0);
    fd_check(
        "concat_last",
        &[(vec![2, 2], a), (vec![2, 3], b)],
        |t| {
            let c = Tensor::concat_last(&t[0], &t[1]).unwrap();
            let w = Tensor::from_vec(
                vec![2, 5],
                vec![1.0, -1.0, 2.0, 0.5, -0.5, 3.0, 1.5, -2.0, 0.25, 1.25],
            )
            .unwrap();
            c.hadamard(&w).unwrap().sum_all().unwrap()
        },
    );
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_vec(&mut rng, 2 * 3 * 4, 1.0);
    fd_check("permute", &[(vec![2, 3, 4], x.clone())], |t| {
        let w = Tensor::from_vec(vec![24], (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        t[0].permute(&[2, 0, 1])
            .unwrap()
            .reshape(vec![24])
            .unwrap()
            .hadamard(&w)
            .unwrap()
            .sum_all()
            .unwrap()
    });
    let m = rand_vec(&mut rng, 6, 1.0);
    fd_check("transpose2d", &[(vec![2, 3], m)], |t| {
        let w = Tensor::from_vec(vec![3, 2], vec![1.0, -1.0, 0.5, 2.0, -2.0, 0.25]).unwrap();
        t[0].transpose2d().unwrap().hadamard(&w).unwrap().sum_all().unwrap()
    });
    let b = rand_vec(&mut rng, 4, 1.0);
    let xb = rand_vec(&mut rng, 12, 1.0);
    fd_check(
        "add_bias",
        &[(vec![3, 4], xb), (vec![4], b)],
        |t| {
            let w = Tensor::from_vec(vec![3, 4], (0..12).map(|i| (i as f64 * 0.7).cos()).collect())
                .unwrap();
            t[0].add_bias(&t[1]).unwrap().hadamard(&w).unwrap().sum_all().unwrap()
        },
    );
}

#[test]
fn rms_norm_and_rope_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_vec(&mut rng, 2 * 4, 1.0);
    let g = rand_vec(&mut rng, 4, 1.0);
    fd_check(
        "rms_norm",
        &[(vec![2, 4], x), (vec![4], g)],
        |t| {
            let w = Tensor::from_vec(vec![2, 4], (0..8).map(|i| 0.3 * i as f64 - 1.0).collect())
                .unwrap();
            t[0].rms_norm(&t[1], 1e-6)
                .unwrap()
                .hadamard(&w)
                .unwrap()
                .sum_all()
                .unwrap()
        },
    );
    let q = rand_vec(&mut rng, 1 * 2 * 3 * 4, 1.0);
    fd_check("rope", &[(vec![1, 2, 3, 4], q)], |t| {
        let w = Tensor::from_vec(vec![1, 2, 3, 4], (0..24).map(|i| (i as f64 * 0.31).sin()).collect())
            .unwrap();
        t[0].rope(2, 10000.0).unwrap().hadamard(&w).unwrap().sum_all().unwrap()
    });
}

#[test]
fn causal_mask_and_selection_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_vec(&mut rng, 2 * 3 * 3, 1.0);
    fd_check("causal_mask", &[(vec![2, 3, 3], x)], |t| {
        // Softmax after masking: the masked entries must not leak gradient.
        t[0].causal_mask(0)
            .unwrap()
            .softmax_last()
            .unwrap()
            .select_entries(vec![0, 4, 8, 9, 13, 17])
            .unwrap()
            .sum_all()
            .unwrap()
    });

    let m = rand_vec(&mut rng, 4 * 3, 1.0);
    fd_check("gather_scatter_scale_rows", &[(vec![4, 3], m)], |t| {
        let idx = std::rc::Rc::new(vec![0usize, 2, 3]);
        let rows = t[0].gather_rows(std::rc::Rc::clone(&idx)).unwrap();
        let w = Tensor::from_vec(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
        let scaled = rows.scale_rows(&w).unwrap();
        let back = scaled.scatter_rows(idx, 4).unwrap();
        let ww = Tensor::from_vec(vec![4, 3], (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        back.hadamard(&ww).unwrap().sum_all().unwrap()
    });

    let p = rand_vec(&mut rng, 2 * 4, 1.0);
    fd_check("mean_over_rows", &[(vec![2, 4], p)], |t| {
        let w = Tensor::from_vec(vec![4], vec![1.0, -2.0, 0.5, 1.5]).unwrap();
        t[0].mean_over_rows().unwrap().hadamard(&w).unwrap().sum_all().unwrap()
    });
}

#[test]
fn topk_renorm_gradient_within_fixed_selection() {
    // Probabilities far from ties so +-step cannot flip the selection.
    let probs = vec![0.5, 0.3, 0.15, 0.05, 0.4, 0.35, 0.2, 0.05];
    fd_check("topk_renorm", &[(vec![2, 4], probs.clone())], |t| {
        let (sparse, _) = t[0].topk_renorm(2, true).unwrap();
        let w = Tensor::from_vec(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0])
            .unwrap();
        sparse.hadamard(&w).unwrap().sum_all().unwrap()
    });
    fd_check("topk_raw", &[(vec![2, 4], probs)], |t| {
        let (sparse, _) = t[0].topk_renorm(2, false).unwrap();
        let w = Tensor::from_vec(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0])
            .unwrap();
        sparse.hadamard(&w).unwrap().sum_all().unwrap()
    });
}

#[test]
fn embedding_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = rand_vec(&mut rng, 5 * 3, 1.0);
    fd_check("embedding", &[(vec![5, 3], w)], |t| {
        let e = Tensor::embedding(&t[0], &[1, 4, 1, 0], &[2, 2]).unwrap();
        let w = Tensor::from_vec(vec![2, 2, 3], (0..12).map(|i| 0.2 * i as f64 - 1.0).collect())
            .unwrap();
        e.hadamard(&w).unwrap().sum_all().unwrap()
    });
}

#[test]
fn cross_entropy_values_and_gradient() {
    // Uniform logits over V=4: loss = ln 4 regardless of targets.
    let logits = Tensor::<f64>::zeros(vec![1, 2, 4]);
    let loss = logits.cross_entropy(&[3, 1], &[true, true]).unwrap();
    assert!((loss.scalar().unwrap() - 4.0f64.ln()).abs() < 1e-12);
    assert!((loss.scalar().unwrap() - 1.3862943611198906).abs() < 1e-12);

    // Near-one-hot logit at the target: loss below 1e-8.
    let mut peaked = vec![0.0; 4];
    peaked[2] = 1e4;
    let loss = Tensor::from_vec(vec![1, 1, 4], peaked)
        .unwrap()
        .cross_entropy(&[2], &[true])
        .unwrap();
    assert!(loss.scalar().unwrap() < 1e-8);

    // All-masked input is degenerate.
    let err = Tensor::<f64>::zeros(vec![1, 2, 4])
        .cross_entropy(&[0, 0], &[false, false])
        .unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)));

    // Gradient on a 2x3x5 case with a partial mask.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let logits = rand_vec(&mut rng, 2 * 3 * 5, 2.0);
    let targets = [1u32, 4, 0, 2, 3, 1];
    let mask = [true, false, true, true, true, false];
    fd_check("cross_entropy", &[(vec![2, 3, 5], logits)], move |t| {
        t[0].cross_entropy(&targets, &mask).unwrap()
    });
}

#[test]
fn backward_contract_errors() {
    let tape = Tape::new();
    let p = Param::new("p", ParamKind::Router, vec![2], vec![1.0f64, 2.0], true);
    let leaf = p.leaf(&tape);

    // Non-scalar loss is rejected.
    let err = leaf.backward().unwrap_err();
    assert!(matches!(err, Error::Contract(_)));

    let loss = leaf.sum_all().unwrap();
    loss.backward().unwrap();
    assert_eq!(p.grad().unwrap(), vec![1.0, 1.0]);

    // A consumed tape refuses a second backward pass.
    let err = loss.backward().unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
    assert!(err.to_string().contains("already consumed"));

    // Untracked loss is rejected.
    let c = Tensor::scalar_value(1.0f64);
    assert!(matches!(c.backward(), Err(Error::Contract(_))));
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = rand_vec(&mut rng, 64 * 48, 1.0);
    let b = rand_vec(&mut rng, 48 * 32, 1.0);
    let run = || {
        let ta = Tensor::from_vec(vec![64, 48], a.clone()).unwrap();
        let tb = Tensor::from_vec(vec![48, 32], b.clone()).unwrap();
        let y = ta.matmul(&tb).unwrap().silu().unwrap().softmax_last().unwrap();
        y.data().to_vec()
    };
    let y1 = run();
    let y2 = run();
    assert!(y1.iter().zip(&y2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn gradients_accumulate_across_shared_leaves() {
    // x used twice: d(x*x)/dx = 2x comes from two accumulation paths.
    let tape = Tape::new();
    let p = Param::new("x", ParamKind::Router, vec![1], vec![3.0f64], true);
    let x = p.leaf(&tape);
    let y = x.hadamard(&x).unwrap().sum_all().unwrap();
    y.backward().unwrap();
    assert!((p.grad().unwrap()[0] - 6.0).abs() < 1e-12);
}
