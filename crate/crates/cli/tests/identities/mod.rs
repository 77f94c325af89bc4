//! Every worked example of the operation contracts, each checked against an
//! oracle written out here rather than taken from the library.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;

use mshnet_core::harness::{
    ablate, adagrad_step, evaluate, threshold_sweep, train, weight_grid, location_grid, AblationEntry, AdaGrad,
    AdaGradState, ConstantPredictor, OraclePredictor, TrainConfig,
};
use mshnet_core::losses::{
    dice_loss, location_loss_between, location_loss_variant, multiscale_sls, scale_sensitive_loss, scale_weight,
    sls_loss, soft_centroid, soft_iou_loss, to_polar, Centroid, GroundTruthMask, LocationKind, LossKind, ScaleSet,
    SoftMask,
};
use mshnet_core::metrics::{
    binarize, bucketed_eval, connected_components, false_alarm_rate, pixel_iou, prob_detection, BinaryMask, Connectivity,
    EvalOptions, MatchRule, ScaleBucket,
};
use mshnet_core::mshnet::{load_checkpoint, load_checkpoint_for, save_checkpoint, ModelError, MshNet, UNetConfig};
use mshnet_core::synth_data::{
    binarize_mask, encode_pgm, generate_dataset, generate_scene, ingest_external, Dataset, SceneConfig, Split,
    SplitPolicy,
};
use mshnet_core::tensor::{grad_check, grad_check_many, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Check {
    ensure!((got - want).abs() <= tol, "{name}: got {got}, want {want} (tol {tol:e})");
    Ok(())
}

fn gt(h: usize, w: usize, px: &[(usize, usize)]) -> GroundTruthMask {
    GroundTruthMask::from_pixels(h, w, px).expect("in bounds")
}

fn soft(m: &GroundTruthMask) -> SoftMask {
    SoftMask::new(m.tensor().clone()).expect("binary is a probability")
}

fn bin(h: usize, w: usize, px: &[(usize, usize)]) -> BinaryMask {
    BinaryMask::from_pixels(h, w, px)
}

/// Direct cross-correlation of one `h x w` plane with a `k x k` kernel.
fn naive_conv(x: &[f64], h: usize, w: usize, k: &[f64], ks: usize, pad: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for i in 0..ks {
                for j in 0..ks {
                    let (y, xx) = (r as isize + i as isize - pad as isize, c as isize + j as isize - pad as isize);
                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                        acc += x[y as usize * w + xx as usize] * k[i * ks + j];
                    }
                }
            }
            out[r * w + c] = acc;
        }
    }
    out
}

fn conv_on(x: Tensor, k: Tensor, bias: f64, pad: usize) -> Result<Tensor, String> {
    let mut t = Tape::new();
    let xv = t.constant(x);
    let kv = t.constant(k);
    let bv = t.constant(Tensor::new(vec![1], vec![bias]).map_err(e)?);
    let y = t.conv2d(xv, kv, Some(bv), 1, pad).map_err(e)?;
    Ok(t.value(y).clone())
}

fn tensor_ops() -> Check {
    // conv2d
    let x = Tensor::from_fn(&[1, 1, 5, 5], |i| i as f64 * 0.5 - 3.0);
    let y = conv_on(x.clone(), Tensor::ones(&[1, 1, 1, 1]), 0.0, 0)?;
    ensure!(y.data() == x.data(), "1x1 identity kernel changed the input");

    let k: Vec<f64> = (1..=9).map(f64::from).collect();
    let mut delta = vec![0.0; 25];
    delta[12] = 1.0;
    let y = conv_on(Tensor::new(vec![1, 1, 5, 5], delta.clone()).map_err(e)?, Tensor::new(vec![1, 1, 3, 3], k.clone()).map_err(e)?, 0.0, 1)?;
    let want = naive_conv(&delta, 5, 5, &k, 3, 1);
    ensure!(y.data() == want.as_slice(), "delta response differs from direct enumeration");
    let patch: Vec<f64> = (1..4).flat_map(|r| (1..4).map(move |c| (r, c))).map(|(r, c)| y.data()[r * 5 + c]).collect();
    let mut flipped = k.clone();
    flipped.reverse();
    ensure!(patch == flipped, "delta patch {patch:?} is not the kernel (flipped for cross-correlation)");

    let ones = vec![1.0; 16];
    let y = conv_on(Tensor::new(vec![1, 1, 4, 4], ones.clone()).map_err(e)?, Tensor::ones(&[1, 1, 3, 3]), 0.0, 1)?;
    let want = naive_conv(&ones, 4, 4, &[1.0; 9], 3, 1);
    ensure!(y.data() == want.as_slice(), "overlap counts differ");
    ensure!(y.data()[5] == 9.0 && y.data()[0] == 4.0, "center/corner {} {}", y.data()[5], y.data()[0]);

    // max_pool2d
    let p = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).map_err(e)?.max_pool2d(2).map_err(e)?;
    ensure!(p.data() == [4.0], "pool of [[1,2],[3,4]] is {:?}", p.data());
    let p = Tensor::full(&[8, 8], 0.3).max_pool2d(4).map_err(e)?;
    ensure!(p.shape() == [2, 2] && p.data().iter().all(|&v| v == 0.3), "pooled constant");
    let mut m = Tensor::zeros(&[4, 4]);
    m.data_mut()[5] = 1.0;
    let p = m.max_pool2d(2).map_err(e)?;
    ensure!(p.data() == [1.0, 0.0, 0.0, 0.0], "binary pool {:?}", p.data());

    // upsample_bilinear
    let up = |x: Tensor, f: usize| -> Result<Tensor, String> {
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.upsample_bilinear(v, f).map_err(e)?;
        Ok(t.value(y).clone())
    };
    let c = up(Tensor::full(&[3, 4], 0.7), 4)?;
    ensure!(c.shape() == [12, 16] && c.data().iter().all(|&v| (v - 0.7).abs() < 1e-15), "upsampled constant");
    let x = Tensor::from_fn(&[3, 5], |i| (i * i) as f64);
    ensure!(up(x.clone(), 1)? == x, "factor 1 is not the identity");
    let row = up(Tensor::new(vec![1, 2], vec![0.0, 1.0]).map_err(e)?, 2)?;
    // Half-pixel centres: output j samples input coordinate (j + 0.5) / 2 - 0.5, clamped.
    let want: Vec<f64> = (0..4)
        .map(|j| ((j as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0))
        .collect();
    let r = &row.data()[4..8];
    ensure!(r == want.as_slice(), "row {r:?} vs {want:?}");
    ensure!(r.windows(2).all(|p| p[0] <= p[1]), "row not monotone");

    // sigmoid
    let mut t = Tape::new();
    let x = t.param(Tensor::new(vec![2], vec![0.0, 40.0]).map_err(e)?);
    let s = t.sigmoid(x).map_err(e)?;
    let v = t.value(s).data().to_vec();
    ensure!(v[0] == 0.5, "sigmoid(0) = {}", v[0]);
    ensure!(v[1] > 1.0 - 1e-15 && v[1] <= 1.0, "sigmoid(40) = {}", v[1]);
    let total = t.sum_all(s).map_err(e)?;
    let g = t.backward(total).map_err(e)?;
    ensure!(g.get(x).unwrap().data()[0] == 0.25, "sigmoid'(0)");

    // elementwise and reductions
    let mut t = Tape::new();
    let o = t.param(Tensor::ones(&[3, 3]));
    let s = t.sum_all(o).map_err(e)?;
    ensure!(t.value(s).item() == 9.0, "sum of ones");
    let r = t.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).map_err(e)?);
    let r = t.relu(r).map_err(e)?;
    ensure!(t.value(r).data() == [0.0, 2.0], "relu");
    let a = t.param(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).map_err(e)?);
    let b = t.param(Tensor::new(vec![3], vec![0.5, 4.0, -1.5]).map_err(e)?);
    let ab = t.mul(a, b).map_err(e)?;
    let l = t.sum_all(ab).map_err(e)?;
    let g = t.backward(l).map_err(e)?;
    ensure!(g.get(a).unwrap().data() == [0.5, 4.0, -1.5], "d(ab)/da != b");
    ensure!(g.get(o).is_none() || g.get(o).unwrap().data().iter().all(|&v| v == 0.0), "unrelated leaf got gradient");

    // concat_channels
    let mut t = Tape::new();
    let u = t.param(Tensor::full(&[1, 1, 2, 2], 1.0));
    let v = t.param(Tensor::full(&[1, 1, 2, 2], 2.0));
    let cat = t.concat_channels(&[u, v]).map_err(e)?;
    ensure!(t.value(cat).shape() == [1, 2, 2, 2], "concat shape");
    let single = t.concat_channels(&[u]).map_err(e)?;
    ensure!(t.value(single) == t.value(u), "single concat");
    let w = t.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| if i < 4 { 1.0 } else { 0.0 }));
    let sel = t.mul(cat, w).map_err(e)?;
    let l = t.sum_all(sel).map_err(e)?;
    let g = t.backward(l).map_err(e)?;
    ensure!(g.get(u).unwrap().data().iter().all(|&x| x == 1.0), "slice 0 gradient");
    ensure!(g.get(v).unwrap().data().iter().all(|&x| x == 0.0), "slice 1 leaked gradient");

    // backward
    let mut t = Tape::new();
    let x = t.param(Tensor::from_fn(&[4], |i| i as f64 - 1.5));
    let l = t.sum_all(x).map_err(e)?;
    ensure!(t.backward(l).map_err(e)?.get(x).unwrap().data() == [1.0; 4], "grad of sum");
    let mut t = Tape::new();
    let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).map_err(e)?);
    let sq = t.square(x).map_err(e)?;
    let l = t.sum_all(sq).map_err(e)?;
    ensure!(t.backward(l).map_err(e)?.get(x).unwrap().data() == [2.0, 4.0], "grad of sum of squares");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(&[1, 1, 6, 6], |_| rng.random_range(-1.0..1.0))).collect();
    let k = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.random_range(-1.0..1.0));
    let composite = |t: &mut Tape, v: &[mshnet_core::Var]| {
        let kk = t.constant(k.clone());
        let c = t.conv2d(v[0], kk, None, 1, 1)?;
        let c = t.sigmoid(c)?;
        let p = t.max_pool2d(c, 2)?;
        let u = t.upsample_bilinear(p, 2)?;
        let s = t.concat_channels(&[u, v[1]])?;
        let s = t.mul(s, s)?;
        let m = t.sum_all(s)?;
        let n = t.sum_all(v[2])?;
        let n = t.atan(n)?;
        t.add(m, n)
    };
    let xs2 = vec![xs[0].clone(), Tensor::from_fn(&[1, 1, 6, 6], |i| (i as f64 * 0.37).sin()), xs[2].clone()];
    let err = grad_check_many(composite, &xs2, 1e-5).map_err(e)?;
    ensure!(err < 1e-4, "composite graph rel err {err:e}");

    // grad_check
    let x = Tensor::from_fn(&[7], |i| i as f64 * 0.3 - 1.0);
    let err = grad_check(|t, v| t.sum_all(v), &x, 1e-6).map_err(e)?;
    ensure!(err < 1e-9, "grad_check(sum) = {err:e}");
    let err = grad_check(
        |t, v| {
            let s = t.sum_all(v)?;
            t.sigmoid(s)
        },
        &x,
        1e-6,
    )
    .map_err(e)?;
    ensure!(err < 1e-6, "grad_check(sigmoid . sum) = {err:e}");
    Ok(())
}

/// `(I, U, Σp, Σg)` of two binary masks by enumeration.
fn counts(p: &GroundTruthMask, g: &GroundTruthMask) -> (f64, f64, f64, f64) {
    let (a, b) = (p.tensor().data(), g.tensor().data());
    let i = a.iter().zip(b).filter(|(x, y)| **x == 1.0 && **y == 1.0).count() as f64;
    let u = a.iter().zip(b).filter(|(x, y)| **x == 1.0 || **y == 1.0).count() as f64;
    (i, u, a.iter().sum(), b.iter().sum())
}

fn oracle_weight(a: f64, b: f64) -> f64 {
    let var = (a - b).powi(2) / 4.0;
    (a.min(b) + var) / (a.max(b) + var)
}

fn oracle_polar(p: Centroid, g: Centroid) -> f64 {
    let (dp, dg) = (p.x.hypot(p.y), g.x.hypot(g.y));
    let (tp, tg) = ((p.y / p.x).atan(), (g.y / g.x).atan());
    1.0 - dp.min(dg) / dp.max(dg) + 4.0 / (PI * PI) * (tp - tg).powi(2)
}

fn losses() -> Check {
    let a = gt(4, 4, &[(1, 1), (1, 2), (2, 1)]);
    let b = gt(4, 4, &[(1, 1), (1, 2), (2, 2)]);
    let far = gt(4, 4, &[(3, 3)]);
    let (i, u, sp, sg) = counts(&a, &b);

    // soft IoU
    close("iou(gt, gt)", soft_iou_loss(&soft(&b), &b).map_err(e)?, 0.0, 0.0)?;
    close("iou disjoint", soft_iou_loss(&soft(&far), &b).map_err(e)?, 1.0, 0.0)?;
    close("iou example", soft_iou_loss(&soft(&a), &b).map_err(e)?, 1.0 - i / u, 1e-15)?;
    close("iou example value", 1.0 - i / u, 0.5, 0.0)?;

    // Dice
    close("dice(gt, gt)", dice_loss(&soft(&b), &b).map_err(e)?, 0.0, 1e-15)?;
    close("dice disjoint", dice_loss(&soft(&far), &b).map_err(e)?, 1.0, 0.0)?;
    close("dice example", dice_loss(&soft(&a), &b).map_err(e)?, 1.0 - 2.0 * i / (sp + sg), 1e-15)?;
    close("dice example value", 1.0 - 2.0 * i / (sp + sg), 1.0 / 3.0, 1e-15)?;

    // scale weight
    close("w(a, a)", scale_weight(0.01, 0.01).map_err(e)?, 1.0, 0.0)?;
    let (a1, b1) = (10.0 / 4096.0, 40.0 / 4096.0);
    close("w(10/4096, 40/4096)", scale_weight(a1, b1).map_err(e)?, oracle_weight(a1, b1), 1e-15)?;
    close("w(10/4096, 40/4096) approx", oracle_weight(a1, b1), 0.2509, 5e-4)?;
    close("w(0.001, 0.1)", scale_weight(0.001, 0.1).map_err(e)?, oracle_weight(0.001, 0.1), 1e-15)?;
    close("w(0.001, 0.1) approx", oracle_weight(0.001, 0.1), 0.0337, 5e-5)?;

    // scale-sensitive loss
    close("L_S(gt, gt)", scale_sensitive_loss(&soft(&b), &b).map_err(e)?, 0.0, 1e-15)?;
    close("L_S disjoint", scale_sensitive_loss(&soft(&far), &b).map_err(e)?, 1.0, 0.0)?;
    let [(p1, g1), (p2, g2)] = equal_iou_pairs(16);
    ensure!(counts(&p1, &g1).0 == 4.0 && counts(&p2, &g2).1 == 16.0, "pair construction");
    let (l_same, l_shrunk) = (
        scale_sensitive_loss(&soft(&p1), &g1).map_err(e)?,
        scale_sensitive_loss(&soft(&p2), &g2).map_err(e)?,
    );
    ensure!(l_shrunk > l_same, "1:4 pair ({l_shrunk}) not above 1:1 pair ({l_same})");

    // centroid
    let c = soft_centroid(gt(4, 4, &[(1, 1), (1, 3), (3, 1), (3, 3)]).tensor()).map_err(e)?;
    ensure!(c == Centroid { x: 2.0, y: 2.0 }, "symmetric centroid {c:?}");
    let mut wts = Tensor::zeros(&[3, 3]);
    wts.data_mut()[0] = 1.0;
    wts.data_mut()[2] = 3.0;
    let c = soft_centroid(&wts).map_err(e)?;
    close("weighted x", c.x, (1.0 * 1.0 + 3.0 * 3.0) / 4.0, 1e-15)?;
    close("weighted y", c.y, 1.0, 1e-15)?;
    for (r, col, wgt) in [(4, 1, 0.3), (0, 5, 2.0)] {
        let mut m = Tensor::zeros(&[6, 6]);
        m.data_mut()[r * 6 + col] = wgt;
        let c = soft_centroid(&m).map_err(e)?;
        ensure!(c == Centroid { x: (col + 1) as f64, y: (r + 1) as f64 }, "single pixel centroid {c:?}");
    }

    // polar coordinates
    let p = to_polar(Centroid { x: 3.0, y: 4.0 });
    close("d(3,4)", p.d, 5.0, 1e-15)?;
    close("theta(3,4)", p.theta, (4.0f64 / 3.0).atan(), 1e-15)?;
    for k in [1.0, 2.0, 17.0] {
        close("theta(k,k)", to_polar(Centroid { x: k, y: k }).theta, PI / 4.0, 1e-15)?;
    }
    let p = to_polar(Centroid { x: 3f64.sqrt(), y: 1.0 });
    close("d(sqrt3,1)", p.d, 2.0, 1e-15)?;
    close("theta(sqrt3,1)", p.theta, PI / 6.0, 1e-15)?;

    // location loss
    for kind in [LocationKind::Polar, LocationKind::L1, LocationKind::L2] {
        let m = gt(8, 8, &[(2, 3), (3, 3), (5, 6)]);
        close("L_L(gt, gt)", location_loss_variant(&soft(&m), &m, kind).map_err(e)?, 0.0, 1e-15)?;
    }
    let polar = |p, g| location_loss_between(p, g, LocationKind::Polar, (64, 64)).map_err(e);
    let (cp, cg) = (Centroid { x: 3.0, y: 4.0 }, Centroid { x: 6.0, y: 8.0 });
    close("L_L same angle", polar(cp, cg)?, oracle_polar(cp, cg), 1e-15)?;
    close("L_L same angle value", oracle_polar(cp, cg), 0.5, 1e-15)?;
    let (cp, cg) = (Centroid { x: 3f64.sqrt(), y: 1.0 }, Centroid { x: 1.0, y: 3f64.sqrt() });
    close("L_L same distance", polar(cp, cg)?, oracle_polar(cp, cg), 1e-14)?;
    close("L_L same distance value", oracle_polar(cp, cg), 1.0 / 9.0, 1e-14)?;

    // location variants
    let (cp, cg) = (Centroid { x: 1.0, y: 1.0 }, Centroid { x: 4.0, y: 5.0 });
    let diag = 256f64.hypot(256.0);
    let l2 = location_loss_between(cp, cg, LocationKind::L2, (256, 256)).map_err(e)?;
    close("L2 variant", l2, (3f64).hypot(4.0) / diag, 1e-15)?;
    close("L2 variant value", (3f64).hypot(4.0) / diag, 5.0 / diag, 1e-15)?;
    let (cp, cg) = (Centroid { x: 3.0, y: 4.0 }, Centroid { x: 4.0, y: 3.0 });
    let pol = location_loss_between(cp, cg, LocationKind::Polar, (64, 64)).map_err(e)?;
    let angle_only = 4.0 / (PI * PI) * ((4.0f64 / 3.0).atan() - (3.0f64 / 4.0).atan()).powi(2);
    close("polar with equal d", pol, angle_only, 1e-15)?;
    for kind in [LocationKind::L1, LocationKind::L2] {
        let v = location_loss_between(cp, cg, kind, (64, 64)).map_err(e)?;
        ensure!(v > 0.0, "{kind} zero for distinct centroids");
    }

    // SLS
    let m = gt(8, 8, &[(2, 2), (2, 3), (3, 2)]);
    close("SLS(gt, gt)", sls_loss(&soft(&m), &m).map_err(e)?.total, 0.0, 1e-15)?;
    let (left, right, target) = translated_pair(16);
    let (s1, s2) = (sls_loss(&soft(&left), &target).map_err(e)?, sls_loss(&soft(&right), &target).map_err(e)?);
    close("translated pair IoU", soft_iou_loss(&soft(&left), &target).map_err(e)?, soft_iou_loss(&soft(&right), &target).map_err(e)?, 1e-15)?;
    ensure!((s1.total - s2.total).abs() > 1e-3, "translated totals {} and {}", s1.total, s2.total);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(&[8, 8], |_| rng.random_range(0.02..0.98));
    let g8 = gt(8, 8, &[(2, 2), (2, 3), (3, 3), (5, 6)]);
    let err = grad_check(
        |t, v| Ok(mshnet_core::losses::sls_loss_on(t, v, &g8, Default::default()).map_err(|l| match l {
            mshnet_core::losses::LossError::Tensor(te) => te,
            other => panic!("{other}"),
        })?.total),
        &x,
        1e-6,
    )
    .map_err(e)?;
    ensure!(err < 1e-4, "SLS grad check {err:e}");

    // multi-scale
    let g = gt(16, 16, &[(3, 3), (3, 4), (4, 4), (10, 12)]);
    let maps: Vec<SoftMask> = [8, 4, 2, 1, 1]
        .iter()
        .map(|&f| soft(&g.downsample(f).expect("divisible")))
        .collect();
    close("multiscale at truth", multiscale_sls(&maps, &g).map_err(e)?, 0.0, 1e-15)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let maps: Vec<SoftMask> = [2, 4, 8, 16, 16]
        .iter()
        .map(|&s| SoftMask::new(Tensor::from_fn(&[s, s], |_| rng.random_range(0.05..0.95))).unwrap())
        .collect();
    let parts: Vec<f64> = maps
        .iter()
        .zip([8, 4, 2, 1, 1])
        .map(|(m, f)| sls_loss(m, &g.downsample(f).unwrap()).map(|b| b.total))
        .collect::<Result<_, _>>()
        .map_err(e)?;
    close("multiscale mean", multiscale_sls(&maps, &g).map_err(e)?, parts.iter().sum::<f64>() / 5.0, 1e-14)?;
    Ok(())
}

fn block(r0: usize, c0: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    (r0..r0 + h).flat_map(|r| (c0..c0 + w).map(move |c| (r, c))).collect()
}

/// Two `(prediction, target)` pairs on an `n x n` frame, both with I = 4 and
/// U = 16. The first has equal sizes (10 px and 10 px), the second a 1:4
/// size ratio (a 2x2 block inside a 4x4 block).
pub fn equal_iou_pairs(n: usize) -> [(GroundTruthMask, GroundTruthMask); 2] {
    [
        (gt(n, n, &block(4, 7, 2, 5)), gt(n, n, &block(4, 4, 2, 5))),
        (gt(n, n, &block(5, 5, 2, 2)), gt(n, n, &block(4, 4, 4, 4))),
    ]
}

/// A 4x4 target and two equally sized predictions shifted two columns
/// right and two columns left of it (I = 8, U = 24 for both).
pub fn translated_pair(n: usize) -> (GroundTruthMask, GroundTruthMask, GroundTruthMask) {
    (gt(n, n, &block(6, 8, 4, 4)), gt(n, n, &block(6, 4, 4, 4)), gt(n, n, &block(6, 6, 4, 4)))
}

fn model() -> Check {
    let cfg = UNetConfig {
        input_size: (64, 64),
        base_channels: 8,
        channel_multipliers: [1, 2, 4, 8],
        seed: 21,
        ..UNetConfig::default()
    };
    let a = MshNet::build(cfg.clone()).map_err(e)?;
    let b = MshNet::build(cfg.clone()).map_err(e)?;
    ensure!(a.params() == b.params(), "same seed built different parameters");
    for (scale, mult) in (1..=4).zip([8, 4, 2, 1]) {
        let w = &a.params()[&format!("head{scale}.weight")];
        ensure!(w.shape()[1] == 8 * mult, "head{scale} takes {} channels", w.shape()[1]);
    }
    // Closed form: two 3x3 convs per encoder level, two per decoder level
    // (input = upsampled deeper level concatenated with the skip), four 1x1
    // heads and a 3x3 fuse over the four upsampled heads.
    let ch: Vec<usize> = cfg.channel_multipliers.iter().map(|m| m * cfg.base_channels).collect();
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let mut want = 0;
    for l in 0..4 {
        want += conv(if l == 0 { 1 } else { ch[l - 1] }, ch[l], 3) + conv(ch[l], ch[l], 3);
    }
    for l in 0..3 {
        want += conv(ch[l + 1] + ch[l], ch[l], 3) + conv(ch[l], ch[l], 3);
    }
    want += ch.iter().map(|&c| conv(c, 1, 1)).sum::<usize>() + conv(4, 1, 3);
    let counted: usize = a.params().values().map(Tensor::numel).sum();
    ensure!(counted == want && a.parameter_count() == want, "parameters {counted}, closed form {want}");

    let img = Tensor::from_fn(&[64, 64], |i| ((i * 7919) % 255) as f64 / 255.0);
    let out = a.predict(&img).map_err(e)?;
    let shapes: Vec<Vec<usize>> = out.to_vec().iter().map(|m| m.tensor().shape().to_vec()).collect();
    ensure!(shapes == [vec![8, 8], vec![16, 16], vec![32, 32], vec![64, 64], vec![64, 64]], "output shapes {shapes:?}");
    ensure!(out.to_vec().iter().all(|m| m.tensor().data().iter().all(|v| (0.0..=1.0).contains(v))), "outputs outside [0, 1]");

    let dir = tempfile::tempdir().map_err(e)?;
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&a, &path).map_err(e)?;
    ensure!(load_checkpoint(&path).map_err(e)?.params() == a.params(), "checkpoint round trip");
    let bytes = fs::read(&path).map_err(e)?;
    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() - 9]).map_err(e)?;
    ensure!(matches!(load_checkpoint(&cut), Err(ModelError::Checksum)), "truncated checkpoint accepted");
    let other = UNetConfig { base_channels: 4, ..cfg };
    ensure!(
        matches!(load_checkpoint_for(&path, &other), Err(ModelError::ConfigMismatch(_))),
        "config mismatch not reported"
    );
    Ok(())
}

fn metrics() -> Check {
    let p = SoftMask::new(Tensor::full(&[4, 4], 0.4)).map_err(e)?;
    ensure!(binarize(&p, 0.5).map_err(e)?.count() == 0, "0.4 survived threshold 0.5");
    let p = SoftMask::new(Tensor::full(&[4, 4], 0.5)).map_err(e)?;
    ensure!(binarize(&p, 0.5).map_err(e)?.count() == 16, "0.5 dropped at threshold 0.5");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = SoftMask::new(Tensor::from_fn(&[16, 16], |_| rng.random())).map_err(e)?;
    let (lo, hi) = (binarize(&p, 0.3).map_err(e)?, binarize(&p, 0.7).map_err(e)?);
    ensure!(hi.data().iter().zip(lo.data()).all(|(h, l)| h <= l), "higher threshold kept a pixel the lower dropped");

    let diag = bin(5, 5, &[(0, 0), (1, 1), (2, 2)]);
    ensure!(connected_components(&diag, Connectivity::Eight).components.len() == 1, "diagonal split");
    let apart = bin(5, 5, &[(0, 0), (2, 2)]);
    ensure!(connected_components(&apart, Connectivity::Eight).components.len() == 2, "separated pixels merged");

    let g = vec![bin(4, 4, &[(0, 0), (3, 3)]), bin(4, 4, &[(1, 1)])];
    ensure!(pixel_iou(&g, &g).map_err(e)?.iou == 1.0, "IoU of identical sets");
    let empty = vec![BinaryMask::zeros(4, 4), BinaryMask::zeros(4, 4)];
    ensure!(pixel_iou(&empty, &g).map_err(e)?.iou == 0.0, "IoU of empty predictions");
    // Image 1: I = 2, U = 4. Image 2: I = 0, U = 2.
    let preds = vec![bin(4, 4, &[(0, 0), (0, 1), (1, 0)]), bin(4, 4, &[(3, 3)])];
    let gts = vec![bin(4, 4, &[(0, 0), (0, 1), (1, 1)]), bin(4, 4, &[(0, 0)])];
    let (i, u): (usize, usize) = preds
        .iter()
        .zip(&gts)
        .map(|(p, g)| {
            let i = p.data().iter().zip(g.data()).filter(|(a, b)| **a == 1 && **b == 1).count();
            let u = p.data().iter().zip(g.data()).filter(|(a, b)| **a == 1 || **b == 1).count();
            (i, u)
        })
        .fold((0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
    ensure!((i, u) == (2, 6), "hand accumulation {i}/{u}");
    close("pooled IoU", pixel_iou(&preds, &gts).map_err(e)?.iou, 2.0 / 6.0, 1e-15)?;

    let rule = MatchRule::default();
    ensure!(prob_detection(&g, &g, rule).map_err(e)?.pd == 1.0, "Pd of identical sets");
    ensure!(prob_detection(&empty, &g, rule).map_err(e)?.pd == 0.0, "Pd of empty predictions");
    let target = vec![bin(16, 16, &[(8, 8)])];
    ensure!(prob_detection(&[bin(16, 16, &[(8, 10)])], &target, rule).map_err(e)?.pd == 1.0, "2 px match missed");
    ensure!(prob_detection(&[bin(16, 16, &[(8, 12)])], &target, rule).map_err(e)?.pd == 0.0, "4 px match accepted");

    ensure!(false_alarm_rate(&g, &g).map_err(e)?.fa == 0.0, "Fa of identical sets");
    let fa = false_alarm_rate(&[bin(256, 256, &[(17, 200)])], &[BinaryMask::zeros(256, 256)]).map_err(e)?.fa;
    close("one spurious pixel", fa, 1.0 / (256.0 * 256.0), 0.0)?;
    close("one spurious pixel approx", fa, 1.526e-5, 1e-8)?;
    let ones = BinaryMask::new(4, 4, vec![1; 16]).map_err(e)?;
    ensure!(false_alarm_rate(&[ones], &[BinaryMask::zeros(4, 4)]).map_err(e)?.fa == 1.0, "all-ones Fa");

    let opts = EvalOptions::default();
    let five = |r0: usize| -> Vec<(usize, usize)> { (0..5).map(|c| (r0, c + 1)).collect() };
    let small = vec![bin(32, 32, &[five(2), five(20)].concat())];
    let r = bucketed_eval(&small, &small, opts).map_err(e)?;
    let present: Vec<bool> = r.buckets.iter().map(|b| b.present).collect();
    ensure!(present == [true, false, false], "5 px buckets {present:?}");
    ensure!(r.buckets[1].iou.is_none() && r.buckets[1].pd.is_none(), "absent bucket reported as a number");
    let fifty: Vec<(usize, usize)> = (10..15).flat_map(|r| (10..20).map(move |c| (r, c))).collect();
    let mixed = vec![bin(32, 32, &[five(2), fifty].concat())];
    let r = bucketed_eval(&mixed, &mixed, opts).map_err(e)?;
    let present: Vec<bool> = r.buckets.iter().map(|b| b.present).collect();
    ensure!(present == [true, false, true], "5 + 50 px buckets {present:?}");

    // Three images, targets listed as (pixels, detected by hand):
    // image 0: 2 px (hit), 20 px (miss); image 1: 1 px (miss); image 2: 60 px (hit), 3 px (hit).
    let sq = |r0: usize, c0: usize, h: usize, w: usize| -> Vec<(usize, usize)> {
        (r0..r0 + h).flat_map(|r| (c0..c0 + w).map(move |c| (r, c))).collect()
    };
    let gts = vec![
        bin(32, 32, &[sq(2, 2, 1, 2), sq(20, 20, 4, 5)].concat()),
        bin(32, 32, &sq(10, 10, 1, 1)),
        bin(32, 32, &[sq(1, 1, 6, 10), sq(25, 25, 1, 3)].concat()),
    ];
    let preds = vec![
        bin(32, 32, &[sq(2, 3, 1, 1), sq(20, 29, 1, 1)].concat()),
        bin(32, 32, &sq(10, 15, 1, 1)),
        bin(32, 32, &[sq(2, 3, 3, 4), sq(25, 26, 1, 1)].concat()),
    ];
    let r = bucketed_eval(&preds, &gts, opts).map_err(e)?;
    let by = |b: ScaleBucket| r.buckets[b.index()].pd;
    ensure!(by(ScaleBucket::Small) == Some(2.0 / 3.0), "small-bucket Pd {:?}", by(ScaleBucket::Small));
    ensure!(by(ScaleBucket::Medium) == Some(0.0), "medium-bucket Pd {:?}", by(ScaleBucket::Medium));
    ensure!(by(ScaleBucket::Large) == Some(1.0), "large-bucket Pd {:?}", by(ScaleBucket::Large));
    Ok(())
}

fn synthetic_data() -> Check {
    let c = SceneConfig { size: (32, 32), ..SceneConfig::default() };
    let (a, b) = (generate_scene(&c, 7).map_err(e)?, generate_scene(&c, 7).map_err(e)?);
    ensure!(a.image_pgm() == b.image_pgm() && a.mask_pgm() == b.mask_pgm(), "same (seed, index) differs");
    let none = SceneConfig { targets_per_image: (0, 0), ..c.clone() };
    ensure!(generate_scene(&none, 0).map_err(e)?.mask.count() == 0, "zero targets yet non-empty mask");
    let tiny = SceneConfig { scale_mix: [1.0, 0.0, 0.0], ..c.clone() };
    for i in 0..40 {
        let s = generate_scene(&tiny, i).map_err(e)?;
        let comps = connected_components(&s.mask, Connectivity::Eight);
        ensure!(comps.components.iter().all(|t| t.pixel_count <= 10), "scene {i} has a target over 10 px");
    }

    let mix = SceneConfig { size: (64, 64), ..SceneConfig::default() };
    let mut per = [0usize; 3];
    for i in 0..300 {
        for t in generate_scene(&mix, i).map_err(e)?.targets {
            per[ScaleBucket::of(t.pixel_count).expect("non-empty").index()] += 1;
        }
    }
    let n: usize = per.iter().sum();
    for (k, &cnt) in per.iter().enumerate() {
        let f = cnt as f64 / n as f64;
        ensure!((0.23..=0.43).contains(&f), "bucket {k} fraction {f:.3} ({per:?})");
    }

    let dir = tempfile::tempdir().map_err(e)?;
    let m = generate_dataset(&c, 200, 50, &dir.path().join("a")).map_err(e)?;
    ensure!(m.samples.len() == 250 && m.count(Split::Train) == 200 && m.count(Split::Test) == 50, "split counts");
    let ids: std::collections::BTreeSet<&str> = m.samples.iter().map(|s| s.id.as_str()).collect();
    ensure!(ids.len() == 250, "duplicate sample ids");
    let again = generate_dataset(&c, 200, 50, &dir.path().join("b")).map_err(e)?;
    ensure!(again.dataset_hash == m.dataset_hash, "regenerated dataset hash differs");

    let (imgs, masks) = (dir.path().join("img"), dir.path().join("mask"));
    fs::create_dir_all(&imgs).map_err(e)?;
    fs::create_dir_all(&masks).map_err(e)?;
    for i in 0..3 {
        fs::write(imgs.join(format!("s{i}.pgm")), encode_pgm(8, 8, &[40; 64])).map_err(e)?;
        let mut px = [0u8; 64];
        px[9 + i] = 255;
        fs::write(masks.join(format!("s{i}.pgm")), encode_pgm(8, 8, &px)).map_err(e)?;
    }
    let m = ingest_external(&imgs, &masks, SplitPolicy::FourToOne, 0).map_err(e)?;
    ensure!(m.samples.len() == 3 && m.warnings.is_empty(), "3 pairs gave {} entries", m.samples.len());
    fs::write(imgs.join("lonely.pgm"), encode_pgm(8, 8, &[0; 64])).map_err(e)?;
    let m = ingest_external(&imgs, &masks, SplitPolicy::FourToOne, 0).map_err(e)?;
    ensure!(m.samples.len() == 3 && m.warnings.len() == 1, "unpaired image: {} warnings", m.warnings.len());
    let mut px = [0u8; 4];
    px[2] = 255;
    ensure!(binarize_mask(2, 2, &px).tensor().data() == [0.0, 0.0, 1.0, 0.0], "255 not binarized to 1");
    Ok(())
}

fn toy_dataset(root: &std::path::Path) -> Result<Dataset, String> {
    let c = SceneConfig { size: (32, 32), seed: 5, ..SceneConfig::default() };
    generate_dataset(&c, 20, 8, root).map_err(e)?;
    Dataset::load(root).map_err(e)
}

fn toy_config(epochs: usize) -> TrainConfig {
    let mut c = TrainConfig { epochs, ..TrainConfig::default() };
    c.model.input_size = (32, 32);
    c.model.base_channels = 2;
    c
}

fn harness() -> Check {
    let one = |v: f64| BTreeMap::from([("w".to_string(), Tensor::scalar(v))]);
    let opt = AdaGrad { eps: 0.0, ..AdaGrad::default() };
    let mut p = one(1.5);
    let mut s = AdaGradState::default();
    adagrad_step(&mut p, &one(0.0), &mut s, &opt).map_err(e)?;
    ensure!(p["w"].item() == 1.5, "zero gradient moved the parameter");
    let mut p = one(0.0);
    adagrad_step(&mut p, &one(1.0), &mut s, &opt).map_err(e)?;
    close("first step", p["w"].item(), -0.05, 0.0)?;
    let before = p["w"].item();
    adagrad_step(&mut p, &one(1.0), &mut s, &opt).map_err(e)?;
    // accumulator 1 + 1 = 2
    close("second step", p["w"].item() - before, -0.05 / 2f64.sqrt(), 1e-16)?;

    let dir = tempfile::tempdir().map_err(e)?;
    let ds = toy_dataset(dir.path())?;
    let untrained = train(&toy_config(0), &ds, 3, "untrained").map_err(e)?;
    ensure!(untrained.record.history.is_empty(), "epochs = 0 recorded history");
    let fresh = MshNet::build(UNetConfig { seed: 3, ..toy_config(0).model }).map_err(e)?;
    ensure!(untrained.net.params() == fresh.params(), "epochs = 0 changed the initialization");
    let fresh_eval = evaluate(&fresh, &ds, EvalOptions::default()).map_err(e)?;
    ensure!(untrained.record.eval == fresh_eval, "epochs = 0 metrics differ from the initialization's");

    let run = train(&toy_config(30), &ds, 0, "descent").map_err(e)?;
    let (first, last) = (run.record.initial_loss.loss, run.record.final_loss.loss);
    ensure!(last < first, "30 epochs of SLS: loss {first} -> {last}");

    let r = evaluate(&OraclePredictor, &ds, EvalOptions::default()).map_err(e)?;
    ensure!((r.iou, r.pd, r.fa) == (1.0, 1.0, 0.0), "oracle predictor: {} {} {}", r.iou, r.pd, r.fa);
    let r = evaluate(&ConstantPredictor(0.0), &ds, EvalOptions::default()).map_err(e)?;
    ensure!((r.pd, r.fa) == (0.0, 0.0), "zero predictor: Pd {} Fa {}", r.pd, r.fa);
    let test: Vec<_> = ds.split(Split::Test).collect();
    let thresholds = [0.3, 0.4, 0.5, 0.6, 0.7];
    let sweep = threshold_sweep(&run.net, &test, &thresholds, EvalOptions::default()).map_err(e)?;
    let fa: Vec<f64> = sweep.iter().map(|r| r.fa).collect();
    ensure!(fa.windows(2).all(|w| w[1] <= w[0]), "Fa over thresholds {fa:?}");

    // report grids
    for line in weight_grid(40, 3, 4096).map_err(e)?.lines().skip(1) {
        let v: Vec<f64> = line.split('\t').map(|c| c.parse().unwrap()).collect();
        if v[0] == v[1] {
            ensure!(v[2] == 1.0, "w off 1 on the diagonal: {line}");
        }
    }
    for line in location_grid(30, 5, (64, 64)).map_err(e)?.lines().skip(1) {
        let v: Vec<f64> = line.split('\t').map(|c| c.parse().unwrap()).collect();
        if v[0] == 0.0 && v[1] == 0.0 {
            ensure!(v[2..] == [0.0, 0.0, 0.0], "location term nonzero at zero offset: {line}");
        }
    }
    let entries: Vec<AblationEntry> = [LossKind::Iou, LossKind::Sls]
        .into_iter()
        .map(|loss| AblationEntry {
            label: loss.to_string(),
            config: TrainConfig { loss, scales: ScaleSet::all(), ..toy_config(1) },
        })
        .collect();
    let table = ablate(&entries, &ds, &[0], None).map_err(e)?;
    let rows = table.to_csv().lines().count() - 1;
    ensure!(rows == entries.len(), "{rows} CSV rows for {} configurations", entries.len());
    Ok(())
}

/// Named groups of identities; each returns the first violation.
pub fn all() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("tensor ops", tensor_ops),
        ("losses", losses),
        ("model", model),
        ("metrics", metrics),
        ("synthetic data", synthetic_data),
        ("harness", harness),
    ]
}
