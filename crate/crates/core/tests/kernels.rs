use mshnet_core::tensor::{grad_check_many, Tape, Tensor};
use proptest::prelude::*;

/// Cross-correlation by direct summation over NCHW input and OIKK weights.
fn naive_conv(x: &Tensor, k: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for b in 0..n {
        for oc in 0..o {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for i in 0..ks {
                            for j in 0..ks {
                                let y = (r * stride + i) as isize - pad as isize;
                                let xx = (q * stride + j) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ic) * h + y as usize) * w + xx as usize]
                                    * k.data()[((oc * c + ic) * ks + i) * ks + j];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_direct_summation(
        (n, c, o, h, w, ks, stride, pad) in (1usize..3, 1usize..4, 1usize..4, 3usize..9, 3usize..9, prop_oneof![Just(1usize), Just(3)], 1usize..3, 0usize..2),
        seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * pad >= ks && w + 2 * pad >= ks);
        let mut s = seed;
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0 };
        let x = Tensor::from_fn(&[n, c, h, w], |_| next());
        let k = Tensor::from_fn(&[o, c, ks, ks], |_| next());
        let bias: Vec<f64> = (0..o).map(|_| next()).collect();
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
        let bv = t.constant(Tensor::new(vec![o], bias.clone()).unwrap());
        let y = t.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        let want = naive_conv(&x, &k, &bias, stride, pad);
        let got = t.value(y).data();
        prop_assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn pool_matches_brute_force(h in 1usize..5, w in 1usize..5, f in 1usize..4, data in values(16 * 16)) {
        let (hh, ww) = (h * f, w * f);
        let x = Tensor::new(vec![hh, ww], data[..hh * ww].to_vec()).unwrap();
        let p = x.max_pool2d(f).unwrap();
        for r in 0..h {
            for c in 0..w {
                let mut m = f64::NEG_INFINITY;
                for i in 0..f {
                    for j in 0..f {
                        m = m.max(x.data()[(r * f + i) * ww + c * f + j]);
                    }
                }
                prop_assert_eq!(p.data()[r * w + c], m);
            }
        }
    }

    #[test]
    fn upsample_preserves_constants_and_range(h in 1usize..6, w in 1usize..6, f in 1usize..5, data in values(36)) {
        let x = Tensor::new(vec![h, w], data[..h * w].to_vec()).unwrap();
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.upsample_bilinear(v, f).unwrap();
        let (lo, hi) = x.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert_eq!(t.value(y).shape(), &[h * f, w * f]);
        prop_assert!(t.value(y).data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }
}

#[test]
fn composite_graph_gradients_match_finite_differences() {
    let x = Tensor::from_fn(&[1, 2, 4, 4], |i| ((i * 37) % 11) as f64 / 11.0 - 0.4);
    let k = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 13) % 7) as f64 / 7.0 - 0.5);
    let err = grad_check_many(
        |t, v| {
            let c = t.conv2d(v[0], v[1], None, 1, 1)?;
            let c = t.instance_norm(c)?;
            let c = t.sigmoid(c)?;
            let p = t.max_pool2d(c, 2)?;
            let u = t.upsample_bilinear(p, 2)?;
            let s = t.square(u)?;
            t.sum_all(s)
        },
        &[x, k],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}
