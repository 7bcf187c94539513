use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniark::numeric::{
    finite_difference_check, gelu, kernels, GradCheckOptions, Graph, Tensor, Var,
};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// erf by its Maclaurin series; converges quickly for |z| ≤ 1.
fn erf_series(z: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = z; // z^(2n+1) / n!
    for n in 0..60 {
        sum += term / (2 * n + 1) as f64 * if n % 2 == 0 { 1.0 } else { -1.0 };
        term *= z * z / (n + 1) as f64;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn gelu_matches_series_normal_cdf() {
    let expected = 1.0 * 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    let got = gelu(&Tensor::scalar(1.0)).data()[0];
    assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    assert_eq!(gelu(&Tensor::scalar(0.0)).data()[0], 0.0);
    assert!((gelu(&Tensor::scalar(10.0)).data()[0] - 10.0).abs() < 1e-9);
}

fn check(params: Vec<Tensor>, f: impl Fn(&mut Graph<'_>, &[Var]) -> uniark::Result<Var>) {
    let report = finite_difference_check(
        &params,
        f,
        GradCheckOptions {
            coords: 64,
            tol: 1e-4,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(
        report.passed,
        "max relative error {:.3e}",
        report.max_rel_error
    );
}

#[test]
fn matmul_chain_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 5]);
    let c = random_tensor(&mut rng, &[5, 2]);
    check(vec![a, b, c], |g, v| {
        let ab = g.matmul(v[0], v[1])?;
        let abc = g.matmul(ab, v[2])?;
        let sq = g.mul(abc, abc)?;
        Ok(g.sum(sq))
    });
}

#[test]
fn matmul_bt_and_bias_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_tensor(&mut rng, &[4, 6]);
    let b = random_tensor(&mut rng, &[5, 6]);
    let bias = random_tensor(&mut rng, &[5]);
    check(vec![a, b, bias], |g, v| {
        let s = g.matmul_bt(v[0], v[1])?;
        let s = g.add_row(s, v[2])?;
        let s = g.gelu(s);
        let sq = g.mul(s, s)?;
        Ok(g.sum(sq))
    });
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[3, 8]);
    let gain = random_tensor(&mut rng, &[8]);
    let bias = random_tensor(&mut rng, &[8]);
    let w = random_tensor(&mut rng, &[3, 8]);
    check(vec![x, gain, bias], move |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let wc = g.constant(w.clone());
        let p = g.mul(y, wc)?;
        let p = g.mul(p, p)?;
        Ok(g.sum(p))
    });
}

#[test]
fn embedding_log_softmax_nll_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = random_tensor(&mut rng, &[10, 6]);
    let proj = random_tensor(&mut rng, &[6, 10]);
    check(vec![table, proj], |g, v| {
        let e = g.embedding(v[0], &[3, 7, 3, 0])?;
        let logits = g.matmul(e, v[1])?;
        let lp = g.log_softmax(logits)?;
        g.nll(lp, &[1, 2, 9, 4])
    });
}

#[test]
fn attention_block_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[5, 8]);
    let wq = random_tensor(&mut rng, &[8, 8]);
    let wk = random_tensor(&mut rng, &[8, 8]);
    check(vec![x, wq, wk], |g, v| {
        let q = g.matmul(v[0], v[1])?;
        let k = g.matmul(v[0], v[2])?;
        let qh = g.slice_cols(q, 0, 4)?;
        let kh = g.slice_cols(k, 4, 4)?;
        let s = g.matmul_bt(qh, kh)?;
        let s = g.scale(s, 0.5);
        let p = g.softmax(s)?;
        let out = g.matmul(p, qh)?;
        let cat = g.concat_cols(&[out, kh])?;
        let rows = g.select_rows(cat, &[0, 4, 4])?;
        let sq = g.mul(rows, rows)?;
        Ok(g.sum(sq))
    });
}

#[test]
fn entropy_of_renormalized_topk_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = random_tensor(&mut rng, &[12]);
    check(vec![logits], |g, v| {
        let p = g.softmax(v[0])?;
        let sub = g.gather(p, &[0, 3, 5, 7, 11])?;
        let q = g.normalize(sub)?;
        let h = g.entropy_bits_all(q)?;
        let lp = g.ln_floor(p, 1e-12);
        let pick = g.gather(lp, &[2])?;
        g.weighted_sum(&[(h, -0.2), (pick, -1.0)])
    });
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_tensor(&mut rng, &[6, 6]);
    let run = || {
        let mut g = Graph::new();
        let v = g.param_ref(&a);
        let m = g.matmul(v, v).unwrap();
        let s = g.softmax(m).unwrap();
        let l = g.sum(s);
        let e = g.entropy_bits_all(s).unwrap();
        let t = g.add(l, e).unwrap();
        g.backward(t).unwrap();
        (g.value(s).to_vec(), g.grad(v).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 2..40)) {
        let p = kernels::softmax(&values);
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn random_compositions_pass_gradient_check(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[4, 5]);
        let w = random_tensor(&mut rng, &[5, 5]);
        let gain = random_tensor(&mut rng, &[5]);
        let bias = random_tensor(&mut rng, &[5]);
        let report = finite_difference_check(
            &[x, w, gain, bias],
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.gelu(h);
                let h = g.layer_norm(h, v[2], v[3], 1e-5)?;
                let p = g.softmax(h)?;
                let lp = g.log_softmax(h)?;
                let prod = g.mul(p, lp)?;
                Ok(g.sum(prod))
            },
            GradCheckOptions { seed, ..Default::default() },
        ).unwrap();
        prop_assert!(report.passed, "max rel err {}", report.max_rel_error);
    }
}
