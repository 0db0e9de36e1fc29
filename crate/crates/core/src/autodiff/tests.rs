use proptest::prelude::*;

use super::*;
use crate::error::Error;

fn t2(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(matches!(
        Tensor::new(vec![2, 3], vec![0.0; 5]),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let i = tape.leaf(&t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let y = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(tape.shape(y), &[2, 2]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(&Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn relu_clips_negatives() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
}

#[test]
fn mean_axis_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t2(&[&[1.0, 3.0], &[5.0, 7.0]]));
    let m = tape.mean_axis(x, 0).unwrap();
    assert_eq!(tape.value(m), &[3.0, 5.0]);
    let m1 = tape.mean_axis(x, 1).unwrap();
    assert_eq!(tape.value(m1), &[2.0, 6.0]);
}

#[test]
fn softmax_uniform_logits() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t2(&[&[0.0, 0.0, 0.0]]));
    let q = tape.softmax(x, 3.0).unwrap();
    assert!(close(tape.value(q), &[1.0 / 3.0; 3], 1e-15));
}

#[test]
fn softmax_infinite_temperature_limit() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t2(&[&[5.0, -5.0]]));
    let q = tape.softmax(x, 1e6).unwrap();
    assert!(close(tape.value(q), &[0.5, 0.5], 1e-5));
}

#[test]
fn softmax_matches_direct_evaluation() {
    // exp(k) / (e + e^2 + e^3), evaluated without max subtraction.
    let expected = [
        0.090_030_573_170_380_46,
        0.244_728_471_054_797_67,
        0.665_240_955_774_821_9,
    ];
    let mut tape = Tape::new();
    let x = tape.leaf(&t2(&[&[1.0, 2.0, 3.0]]));
    let q = tape.softmax(x, 1.0).unwrap();
    assert!(close(tape.value(q), &expected, 1e-15));
}

#[test]
fn softmax_survives_large_logits() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t2(&[&[700.0, -700.0, 699.0]]));
    let q = tape.softmax(x, 1.0).unwrap();
    let v = tape.value(q);
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_rejects_bad_inputs() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t2(&[&[f64::NAN, 0.0]]));
    assert!(matches!(tape.softmax(x, 1.0), Err(Error::NonFinite(_))));
    let y = tape.leaf(&t2(&[&[0.0, 0.0]]));
    assert!(matches!(tape.softmax(y, 0.0), Err(Error::InvalidArgument(_))));
    assert!(matches!(tape.softmax(y, -1.0), Err(Error::InvalidArgument(_))));
}

#[test]
fn cross_entropy_cases() {
    let mut tape = Tape::new();
    let one_hot = tape.leaf(&t2(&[&[0.0, 1.0, 0.0]]));
    let ce = tape.cross_entropy(one_hot, &[1]).unwrap();
    assert_eq!(tape.scalar_value(ce), 0.0);

    let q = tape.leaf(&t2(&[&[0.25, 0.25, 0.5]]));
    let ce = tape.cross_entropy(q, &[2]).unwrap();
    assert!((tape.scalar_value(ce) - 0.5f64.ln().abs()).abs() < 1e-15);

    let c = 7;
    let uniform = tape.leaf(&Tensor::full(vec![2, c], 1.0 / c as f64));
    let ce = tape.cross_entropy(uniform, &[0, 6]).unwrap();
    assert!((tape.scalar_value(ce) - (c as f64).ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_clamps_zero_probability() {
    let mut tape = Tape::new();
    let q = tape.leaf(&t2(&[&[1.0, 0.0]]).with_grad());
    let ce = tape.cross_entropy(q, &[1]).unwrap();
    let v = tape.scalar_value(ce);
    assert!(v.is_finite());
    assert!((v + PROB_FLOOR.ln()).abs() < 1e-9);
    let g = tape.backward(ce).unwrap();
    assert!(g.get(q).unwrap().iter().all(|x| x.is_finite()));
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut tape = Tape::new();
    let q = tape.leaf(&t2(&[&[0.5, 0.5]]));
    assert!(tape.cross_entropy(q, &[2]).is_err());
}

#[test]
fn kl_cases() {
    let mut tape = Tape::new();
    let p = tape.leaf(&t2(&[&[0.2, 0.3, 0.5], &[0.9, 0.05, 0.05]]));
    let kl = tape.kl_divergence(p, p).unwrap();
    assert_eq!(tape.scalar_value(kl), 0.0);

    let t = tape.leaf(&t2(&[&[1.0, 0.0]]));
    let q = tape.leaf(&t2(&[&[0.5, 0.5]]));
    let kl = tape.kl_divergence(t, q).unwrap();
    assert!((tape.scalar_value(kl) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn backward_sum_gives_ones() {
    let x = Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect())
        .unwrap()
        .with_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let s = tape.sum(xv);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(xv).unwrap(), &[1.0; 12]);
}

#[test]
fn backward_mean_square() {
    let data = vec![1.0, -2.0, 0.5, 3.0];
    let n = data.len() as f64;
    let x = Tensor::new(vec![4], data.clone()).unwrap().with_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let sq = tape.mul(xv, xv).unwrap();
    let m = tape.mean(sq);
    let g = tape.backward(m).unwrap();
    let expected: Vec<f64> = data.iter().map(|v| 2.0 * v / n).collect();
    assert!(close(g.get(xv).unwrap(), &expected, 1e-15));
}

#[test]
fn backward_disconnected_stays_zero() {
    let mut x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
    let mut y = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let yv = tape.leaf(&y);
    let s = tape.sum(xv);
    let g = tape.backward(s).unwrap();
    g.accumulate_into(xv, &mut x);
    g.accumulate_into(yv, &mut y);
    assert_eq!(y.grad().unwrap(), &[0.0, 0.0]);
    assert_eq!(x.grad().unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::zeros(vec![3]).with_grad());
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn gradients_accumulate_until_zeroed() {
    let mut x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
    for _ in 0..3 {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.sum(xv);
        tape.backward(s).unwrap().accumulate_into(xv, &mut x);
    }
    assert_eq!(x.grad().unwrap(), &[3.0, 3.0]);
    x.zero_grad();
    assert_eq!(x.grad().unwrap(), &[0.0, 0.0]);
}

#[test]
fn detach_blocks_gradient() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let d = tape.detach(xv);
    let y = tape.mul(xv, d).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    // d(x * sg(x))/dx = sg(x)
    assert_eq!(g.get(xv).unwrap(), &[1.0, 2.0]);
}

#[test]
fn fd_check_sum_is_exact() {
    let x = Tensor::new(vec![5], vec![0.3, -1.2, 4.0, 2.2, -0.1]).unwrap();
    let d = finite_difference_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
    assert!(d < 1e-9, "{d}");
}

#[test]
fn fd_check_ce_of_softened_softmax() {
    let x = t2(&[&[0.3, -1.2, 0.8], &[2.0, 0.1, -0.4]]);
    let d = finite_difference_check(
        |t, v| {
            let q = t.softmax(v, 3.0)?;
            t.cross_entropy(q, &[2, 0])
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(d < 1e-4, "{d}");
}

#[test]
fn fd_check_rejects_step_out_of_range() {
    let x = Tensor::zeros(vec![1]);
    assert!(finite_difference_check(|t, v| Ok(t.sum(v)), &x, 0.1).is_err());
}

#[test]
fn max_pool_picks_window_max() {
    let x = Tensor::new(
        vec![1, 1, 2, 4],
        vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, -1.0],
    )
    .unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let y = tape.max_pool2(xv).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 2]);
    assert_eq!(tape.value(y), &[5.0, 8.0]);
}

#[test]
fn conv2d_matches_hand_evaluation() {
    // 1x1x3x3 input, 1x1x2x2 kernel, no padding: valid correlation.
    let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
    let b = Tensor::new(vec![1], vec![0.5]).unwrap();
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
    let y = tape.conv2d(xv, wv, bv, 0).unwrap();
    // x[i,j] - x[i+1,j+1] = -4 everywhere, plus bias.
    assert_eq!(tape.value(y), &[-3.5; 4]);
    let y = tape.conv2d(xv, wv, bv, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    // Top-left output sees only x[0,0] under the -1 tap.
    assert_eq!(tape.value(y)[0], -1.0 + 0.5);
}

// Random-input gradient checks for every taped operation.

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn away_from_zero(v: Vec<f64>) -> Vec<f64> {
    v.into_iter()
        .map(|x| if x.abs() < 0.05 { x + 0.1 } else { x })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fd_matmul_bias_relu(a in values(6), w in values(12), b in values(4)) {
        let wt = Tensor::new(vec![3, 4], w).unwrap();
        let bt = Tensor::new(vec![4], b).unwrap();
        let x = Tensor::new(vec![2, 3], a).unwrap();
        let d = finite_difference_check(|t, xv| {
            let wv = t.leaf(&wt);
            let bv = t.leaf(&bt);
            let h = t.matmul(xv, wv)?;
            let h = t.bias_add(h, bv)?;
            let h2 = t.mul(h, h)?;
            Ok(t.sum(h2))
        }, &x, 1e-5).unwrap();
        prop_assert!(d < 1e-4, "{}", d);

        let xt = x.clone();
        let d = finite_difference_check(|t, wv| {
            let xv = t.leaf(&xt);
            let h = t.matmul(xv, wv)?;
            let h = t.relu(h);
            let h2 = t.mul(h, h)?;
            Ok(t.mean(h2))
        }, &wt, 1e-6).unwrap();
        // Relu kinks are crossed only with negligible probability at this step.
        prop_assert!(d < 1e-4, "{}", d);
    }

    #[test]
    fn fd_elementwise(a in values(6), b in values(6)) {
        let bt = Tensor::new(vec![2, 3], b).unwrap();
        let x = Tensor::new(vec![2, 3], a).unwrap();
        let d = finite_difference_check(|t, xv| {
            let bv = t.leaf(&bt);
            let s = t.add(xv, bv)?;
            let d = t.sub(s, xv)?;
            let p = t.mul(xv, s)?;
            let e = t.exp(p);
            let e = t.scale(e, 0.3);
            let q = t.add(e, d)?;
            let r = t.mul(q, xv)?;
            Ok(t.sum(r))
        }, &x, 1e-6).unwrap();
        prop_assert!(d < 1e-4, "{}", d);
    }

    #[test]
    fn fd_ln_and_axis_reductions(a in prop::collection::vec(0.1f64..3.0, 12)) {
        let x = Tensor::new(vec![2, 3, 2], a).unwrap();
        let d = finite_difference_check(|t, xv| {
            let l = t.ln(xv);
            let m = t.mean_axis(l, 1)?;
            let s = t.sum_axis(xv, 2)?;
            let sq = t.mul(s, s)?;
            let f = t.flatten(m)?;
            let r = t.reshape(f, vec![4])?;
            let a = t.mul(r, r)?;
            let a = t.sum(a);
            let b = t.mean(sq);
            let v = t.reshape(a, vec![1])?;
            let w = t.reshape(b, vec![1])?;
            let out = t.add(v, w)?;
            Ok(t.sum(out))
        }, &x, 1e-6).unwrap();
        prop_assert!(d < 1e-4, "{}", d);
    }

    #[test]
    fn fd_softmax_kl_ce(a in values(8), b in values(8), temp in prop::sample::select(vec![1.0, 3.0, 20.0])) {
        let tl = Tensor::new(vec![2, 4], b).unwrap();
        let x = Tensor::new(vec![2, 4], a).unwrap();
        let d = finite_difference_check(|t, xv| {
            let tv = t.leaf(&tl);
            let target = t.softmax(tv, temp)?;
            let q = t.softmax(xv, temp)?;
            let kl = t.kl_divergence(target, q)?;
            let kl_rev = t.kl_divergence(q, target)?;
            let q1 = t.softmax(xv, 1.0)?;
            let ce = t.cross_entropy(q1, &[3, 1])?;
            let s = t.add(kl, ce)?;
            t.add(s, kl_rev)
        }, &x, 1e-5).unwrap();
        prop_assert!(d < 1e-4, "{}", d);
    }

    #[test]
    fn fd_scale_rows_stack_select(a in values(6), s in values(2)) {
        let st = Tensor::new(vec![2], s).unwrap().with_grad();
        let x = Tensor::new(vec![2, 3], a).unwrap();
        let d = finite_difference_check(|t, xv| {
            let sv = t.leaf(&st);
            let c0 = t.select_col(xv, 0)?;
            let c2 = t.select_col(xv, 2)?;
            let m = t.mul(c0, sv)?;
            let stacked = t.stack_cols(&[m, c2, c0])?;
            let scaled = t.scale_rows(stacked, c2)?;
            let p = t.mul(scaled, scaled)?;
            Ok(t.sum(p))
        }, &x, 1e-6).unwrap();
        prop_assert!(d < 1e-4, "{}", d);

        let xt = x.clone();
        let d = finite_difference_check(|t, sv| {
            let xv = t.leaf(&xt);
            let scaled = t.scale_rows(xv, sv)?;
            let e = t.exp(scaled);
            Ok(t.sum(e))
        }, &st, 1e-6).unwrap();
        prop_assert!(d < 1e-4, "{}", d);
    }

    #[test]
    fn fd_conv_pool(a in values(2 * 2 * 4 * 4), w in values(3 * 2 * 3 * 3), b in values(3)) {
        let a = away_from_zero(a);
        let wt = Tensor::new(vec![3, 2, 3, 3], w).unwrap();
        let bt = Tensor::new(vec![3], b).unwrap();
        let x = Tensor::new(vec![2, 2, 4, 4], a).unwrap();
        let d = finite_difference_check(|t, xv| {
            let wv = t.leaf(&wt);
            let bv = t.leaf(&bt);
            let y = t.conv2d(xv, wv, bv, 1)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }, &x, 1e-5).unwrap();
        prop_assert!(d < 1e-4, "{}", d);

        let xt = x.clone();
        let d = finite_difference_check(|t, wv| {
            let xv = t.leaf(&xt);
            let bv = t.leaf(&bt);
            let y = t.conv2d(xv, wv, bv, 1)?;
            let y = t.max_pool2(y)?;
            let f = t.flatten(y)?;
            let f2 = t.mul(f, f)?;
            Ok(t.sum(f2))
        }, &wt, 1e-6).unwrap();
        prop_assert!(d < 1e-4, "{}", d);
    }

    #[test]
    fn softmax_rows_sum_to_one(a in prop::collection::vec(-50.0f64..50.0, 12), temp in prop::sample::select(vec![1.0, 3.0, 20.0])) {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3, 4], a).unwrap());
        let q = tape.softmax(x, temp).unwrap();
        for row in tape.value(q).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn higher_temperature_flattens(a in values(5), t1 in 0.5f64..10.0, dt in 0.0f64..10.0) {
        let t2 = t1 + dt;
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1, 5], a).unwrap());
        let q1 = tape.softmax(x, t1).unwrap();
        let q2 = tape.softmax(x, t2).unwrap();
        let m1 = tape.value(q1).iter().copied().fold(0.0, f64::max);
        let m2 = tape.value(q2).iter().copied().fold(0.0, f64::max);
        prop_assert!(m2 <= m1 + 1e-12);
    }

    #[test]
    fn kl_zero_iff_rows_coincide(a in values(6), b in values(6)) {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2, 3], a).unwrap());
        let y = tape.leaf(&Tensor::new(vec![2, 3], b).unwrap());
        let p = tape.softmax(x, 1.0).unwrap();
        let q = tape.softmax(y, 1.0).unwrap();
        let kl = tape.kl_divergence(p, q).unwrap();
        let kl_self = tape.kl_divergence(p, p).unwrap();
        let maxdiff = tape.value(p).iter().zip(tape.value(q)).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        prop_assert!(tape.scalar_value(kl) >= 0.0);
        prop_assert_eq!(tape.scalar_value(kl_self), 0.0);
        if maxdiff >= 1e-9 {
            prop_assert!(tape.scalar_value(kl) > 0.0);
        }
    }
}
