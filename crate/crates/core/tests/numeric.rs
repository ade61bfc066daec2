use std::sync::Arc;

use proptest::prelude::*;

use hic::numeric::{grad_check, NdBuffer, Tape, Var};
use hic::HicError;

fn buffer(shape: Vec<usize>) -> impl Strategy<Value = NdBuffer> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| NdBuffer::new(shape.clone(), d).unwrap())
}

fn naive_matmul(a: &NdBuffer, b: &NdBuffer) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get(&[i, p]).unwrap() * b.get(&[p, j]).unwrap();
            }
        }
    }
    out
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> hic::Result<Var>, params: &[NdBuffer]) {
    let r = grad_check(f, params).unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_matches_naive((m, k, n) in (1usize..5, 1usize..5, 1usize..5), seed in any::<u64>()) {
        let a = NdBuffer::from_fn(&[m, k], |i| ((i as u64 ^ seed) % 7) as f64 - 3.0).unwrap();
        let b = NdBuffer::from_fn(&[k, n], |i| ((i as u64 + seed) % 5) as f64 * 0.5).unwrap();
        let got = a.matmul(&b).unwrap();
        for (g, w) in got.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(x in buffer(vec![3, 4])) {
        let s = x.softmax_lastdim();
        for row in s.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_broadcast_arithmetic(a in buffer(vec![2, 3, 4]), b in buffer(vec![3, 1]), c in buffer(vec![4])) {
        check(|t, v| {
            let x = t.mul(v[0], v[1])?;
            let y = t.add(x, v[2])?;
            let z = t.tanh(y)?;
            let s = t.scale(z, 0.7)?;
            t.sum(s)
        }, &[a, b, c]);
    }

    #[test]
    fn grad_matrix_products(a in buffer(vec![2, 3, 4]), w in buffer(vec![4, 3]), c in buffer(vec![2, 3])) {
        let c = Arc::new(c);
        check(move |t, v| {
            let x = t.matmul(v[0], v[1])?;
            let xt = t.transpose_last2(x)?;
            let g = t.batch_matmul(x, xt)?;
            let h = t.const_left(c.clone(), g)?;
            let s = t.swap_axes01(h)?;
            let r = t.reshape(s, &[4, 3])?;
            let q = t.mul(r, r)?;
            t.sum(q)
        }, &[a, w]);
    }

    #[test]
    fn grad_normalizations(x in buffer(vec![2, 3, 4]), g in buffer(vec![4]), b in buffer(vec![4])) {
        check(|t, v| {
            let n = t.layer_norm(v[0], v[1], v[2])?;
            let s = t.softmax(n)?;
            let w = t.mul(s, v[0])?;
            let r = t.row_norm(w)?;
            t.sum(r)
        }, &[x, g, b]);
    }

    #[test]
    fn grad_fusion_and_scan(
        y in buffer(vec![2, 3, 2]),
        z in buffer(vec![2, 3, 2]),
        a in buffer(vec![2]),
        b in buffer(vec![2]),
        c in buffer(vec![2]),
        d in buffer(vec![2]),
    ) {
        check(|t, v| {
            let cat = t.concat(&[v[0], v[1]])?;
            let alpha = t.softmax(cat)?;
            let alpha = t.reshape(alpha, &[2, 3, 4])?;
            let y2 = t.tanh(v[0])?;
            let parts = [v[0], v[1], y2, v[1]];
            let parts: Vec<Var> = parts.to_vec();
            let fused = t.level_fuse(alpha, &parts)?;
            let ta = t.tanh(v[2])?;
            let s = t.ssm_scan(fused, ta, v[3], v[4], v[5])?;
            let q = t.mul(s, s)?;
            t.sum(q)
        }, &[y, z, a, b, c, d]);
    }

    #[test]
    fn overflow_is_reported_with_op_name(big in 300.0f64..400.0) {
        let mut t = Tape::new();
        let mut x = t.leaf(NdBuffer::filled(&[2], big));
        let err = loop {
            match t.mul(x, x) {
                Ok(y) => x = y,
                Err(e) => break e,
            }
        };
        match err {
            HicError::Numeric { op, .. } => prop_assert!(op.starts_with("mul#"), "{}", op),
            other => prop_assert!(false, "expected numeric error, got {}", other),
        }
    }
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut t = Tape::new();
    let a = t.leaf(NdBuffer::filled(&[2, 2], 1.0));
    let b = t.leaf(NdBuffer::filled(&[3], 1.0));
    let s = t.sum(a).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(b), NdBuffer::zeros(&[3]));
    assert_eq!(g.get(a), NdBuffer::filled(&[2, 2], 1.0));
}

#[test]
fn row_norm_subgradient_at_zero() {
    let mut t = Tape::new();
    let a = t.leaf(NdBuffer::zeros(&[2, 3]));
    let n = t.row_norm(a).unwrap();
    let s = t.sum(n).unwrap();
    assert_eq!(t.backward(s).unwrap().get(a), NdBuffer::zeros(&[2, 3]));
}

#[test]
fn shape_errors_name_shapes() {
    let mut t = Tape::new();
    let a = t.leaf(NdBuffer::zeros(&[2, 3]));
    let b = t.leaf(NdBuffer::zeros(&[2, 3]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    let c = t.leaf(NdBuffer::zeros(&[4]));
    assert!(matches!(t.add(a, c), Err(HicError::Dimension(_))));
}
