use proptest::prelude::*;
use spanedit_autodiff::{grad_check, NArray, Tape};

fn lcg(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed;
    move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }
}

fn random(shape: &[usize], next: &mut impl FnMut() -> f64) -> NArray {
    let len = shape.iter().product();
    NArray::new(shape.to_vec(), (0..len).map(|_| next()).collect()).unwrap()
}

#[test]
fn three_layer_composite_matches_finite_differences() {
    let mut next = lcg(7);
    let params = vec![
        random(&[2, 4], &mut next),
        random(&[5, 4], &mut next),
        random(&[5], &mut next),
        random(&[3, 5], &mut next),
        random(&[3], &mut next),
    ];
    let err = grad_check(
        |t, v| {
            let h = t.matmul_t(v[0], v[1])?;
            let h = t.add_bias(h, v[2])?;
            let h = t.tanh(h);
            let h = t.matmul_t(h, v[3])?;
            let h = t.add_bias(h, v[4])?;
            let h = t.sigmoid(h);
            let h = t.log_softmax(h)?;
            let picked = t.gather(h, &[0, 4])?;
            let l = t.logsumexp(picked)?;
            Ok(t.neg(l))
        },
        &params,
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(err <= 1e-6, "max relative error {err}");
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut next = lcg(11);
    let params = vec![
        random(&[3, 2], &mut next),
        random(&[3, 3], &mut next),
        random(&[4], &mut next),
        random(&[4], &mut next),
        random(&[6, 3], &mut next),
    ];
    let err = grad_check(
        |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let top = t.slice(c, 0, 0, 2)?;
            let left = t.slice(top, 1, 1, 4)?;
            let emb = t.embed(v[4], &[5, 0, 5])?;
            let e2 = t.slice(emb, 0, 0, 2)?;
            let prod = t.mul(left, e2)?;
            let flat = t.reshape(prod, &[6])?;
            let grid = t.outer_sum(v[2], v[3])?;
            let mask: Vec<bool> = (0..16).map(|k| k / 4 > k % 4).collect();
            let grid = t.masked_fill(grid, &mask)?;
            let grid = t.reshape(grid, &[16])?;
            let both = t.concat(&[flat, grid], 0)?;
            let ex = t.exp(both);
            let s = t.sum(ex);
            let ls = t.log_softmax(both)?;
            let g = t.gather(ls, &[1, 7, 9])?;
            let gs = t.sum(g);
            let d = t.sub(s, gs)?;
            Ok(t.scale(d, 0.5))
        },
        &params,
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(err <= 1e-5, "max relative error {err}");
}

#[test]
fn upper_pair_logsumexp_matches_finite_differences() {
    let mut next = lcg(3);
    let params = vec![random(&[3, 5], &mut next), random(&[3, 5], &mut next)];
    let err = grad_check(
        |t, v| {
            let z = t.upper_pair_logsumexp(v[0], v[1])?;
            let w = t.constant(NArray::vector(vec![0.3, -1.1, 0.7]));
            let zw = t.mul(z, w)?;
            Ok(t.sum(zw))
        },
        &params,
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(err <= 1e-6, "max relative error {err}");
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let mut t = Tape::new();
        let x = t.leaf(NArray::vector(vals));
        let y = t.log_softmax(x).unwrap();
        let total: f64 = t.value(y).data().iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn backward_is_linear_in_the_loss(
        vals in prop::collection::vec(-3.0f64..3.0, 4),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let build = |t: &mut Tape, wa: f64, wb: f64| {
            let x = t.leaf(NArray::vector(vals.clone()));
            let f1 = t.logsumexp(x).unwrap();
            let th = t.tanh(x);
            let sq = t.mul(th, x).unwrap();
            let f2 = t.sum(sq);
            let f1 = t.scale(f1, wa);
            let f2 = t.scale(f2, wb);
            let total = t.add(f1, f2).unwrap();
            t.backward(total).unwrap();
            t.grad(x)
        };
        let mut t = Tape::new();
        let both = build(&mut t, a, b);
        let mut t1 = Tape::new();
        let first = build(&mut t1, a, 0.0);
        let mut t2 = Tape::new();
        let second = build(&mut t2, 0.0, b);
        for i in 0..4 {
            let sum = first.data()[i] + second.data()[i];
            prop_assert!((both.data()[i] - sum).abs() <= 1e-12);
        }
    }
}
