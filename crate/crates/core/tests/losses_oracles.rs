use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spast_core::feature_codec::{FeatureMap, FeaturePyramid, Level};
use spast_core::losses::*;
use spast_core::tensor::{gradcheck, ParamSet, Tensor};

const CH: [usize; 5] = [2, 3, 3, 4, 4];

fn shapes(side: usize) -> Vec<[usize; 3]> {
    (0..5).map(|i| [CH[i], side >> i, side >> i]).collect()
}

fn random_values(rng: &mut ChaCha8Rng, side: usize) -> Vec<Vec<f64>> {
    shapes(side)
        .iter()
        .map(|s| (0..s.iter().product()).map(|_| rng.random_range(-1.0..2.0)).collect())
        .collect()
}

fn pyramid(values: &[Vec<f64>], side: usize, variable: bool) -> (FeaturePyramid, Vec<Tensor>) {
    let tensors: Vec<Tensor> = values
        .iter()
        .zip(shapes(side))
        .map(|(v, s)| {
            if variable {
                Tensor::variable(v.clone(), &s)
            } else {
                Tensor::from_vec(v.clone(), &s)
            }
        })
        .collect();
    let maps = tensors
        .iter()
        .zip(Level::ALL)
        .map(|(t, l)| FeatureMap::new(t.clone(), l).unwrap())
        .collect();
    (FeaturePyramid::new(maps).unwrap(), tensors)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn stats(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / c;
    let mut means = vec![];
    let mut stds = vec![];
    for ch in x.chunks(n) {
        let m = ch.iter().sum::<f64>() / n as f64;
        let v = ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
        means.push(m);
        stds.push((v + 1e-5).sqrt());
    }
    (means, stds)
}

fn gram_oracle(x: &[f64], c: usize) -> Vec<f64> {
    let n = x.len() / c;
    let mut g = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            g[i * c + j] = (0..n).map(|k| x[i * n + k] * x[j * n + k]).sum::<f64>() / (c * n) as f64;
        }
    }
    g
}

#[test]
fn content_loss_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random_values(&mut rng, 16), random_values(&mut rng, 16));
    let got = content_loss(&pyramid(&a, 16, false).0, &pyramid(&b, 16, false).0).unwrap().item();
    let want = l2(&a[3], &b[3]) + l2(&a[4], &b[4]);
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn style_loss_matches_direct_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (random_values(&mut rng, 16), random_values(&mut rng, 8 * 2));
    let got = style_loss(&pyramid(&a, 16, false).0, &pyramid(&b, 16, false).0).unwrap().item();
    let mut want = 0.0;
    for i in 0..5 {
        let (ma, sa) = stats(&a[i], CH[i]);
        let (mb, sb) = stats(&b[i], CH[i]);
        want += l2(&ma, &mb) + l2(&sa, &sb);
    }
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn style_loss_accepts_different_spatial_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (random_values(&mut rng, 16), random_values(&mut rng, 32));
    let got = style_loss(&pyramid(&a, 16, false).0, &pyramid(&b, 32, false).0).unwrap().item();
    assert!(got.is_finite() && got > 0.0);
    assert!(content_loss(&pyramid(&a, 16, false).0, &pyramid(&b, 32, false).0).is_err());
}

#[test]
fn gram_loss_matches_direct_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, b) = (random_values(&mut rng, 16), random_values(&mut rng, 16));
    let got = gram_loss(&pyramid(&a, 16, false).0, &pyramid(&b, 16, false).0).unwrap().item();
    let mut want = 0.0;
    for i in 0..5 {
        let (ga, gb) = (gram_oracle(&a[i], CH[i]), gram_oracle(&b[i], CH[i]));
        want += ga.iter().zip(&gb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / ga.len() as f64;
    }
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn identity_terms_are_weighted_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = |rng: &mut ChaCha8Rng| Tensor::from_vec((0..3 * 16 * 16).map(|_| rng.random()).collect(), &[3, 16, 16]);
    let (icc, ic, iss, is) = (img(&mut rng), img(&mut rng), img(&mut rng), img(&mut rng));
    let feats: Vec<Vec<Vec<f64>>> = (0..4).map(|_| random_values(&mut rng, 16)).collect();
    let p: Vec<FeaturePyramid> = feats.iter().map(|f| pyramid(f, 16, false).0).collect();
    let w = LossWeights::default();
    let got = identity_from_parts(
        &IdentityParts {
            icc: &icc,
            ic: &ic,
            iss: &iss,
            is: &is,
            e_icc: &p[0],
            e_ic: &p[1],
            e_iss: &p[2],
            e_is: &p[3],
        },
        &w,
    )
    .unwrap()
    .item();
    let pixel = l2(icc.data(), ic.data()) + l2(iss.data(), is.data());
    let feature: f64 = (0..5).map(|i| l2(&feats[0][i], &feats[1][i]) + l2(&feats[2][i], &feats[3][i])).sum();
    assert_eq!(w.identity_pixel, 50.0);
    assert_eq!(w.identity_feature, 1.0);
    assert!((got - (50.0 * pixel + feature)).abs() < 1e-9);
}

#[test]
fn feature_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (a, b) = (random_values(&mut rng, 16), random_values(&mut rng, 16));
    let (fixed, _) = pyramid(&b, 16, false);
    type LossFn = fn(&FeaturePyramid, &FeaturePyramid) -> spast_core::Result<Tensor>;
    for (name, f) in [
        ("content", content_loss as LossFn),
        ("style", style_loss as LossFn),
        ("gram", gram_loss as LossFn),
    ] {
        let (var, leaves) = pyramid(&a, 16, true);
        let grads = f(&var, &fixed).unwrap().backward();
        for level in 0..5 {
            let analytic = grads.get_or_zeros(&leaves[level]).to_vec();
            let numeric = gradcheck::central_difference(&a[level], 1e-6, |v| {
                let mut vals = a.clone();
                vals[level] = v.to_vec();
                f(&pyramid(&vals, 16, false).0, &fixed).unwrap().item()
            });
            let err = gradcheck::relative_error(&analytic, &numeric);
            assert!(err < 1e-3, "{name} level {level}: {err}");
        }
    }
}

#[test]
fn identity_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ic: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.random()).collect();
    let is: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.random()).collect();
    let icc0: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.random()).collect();
    let feats: Vec<Vec<Vec<f64>>> = (0..4).map(|_| random_values(&mut rng, 16)).collect();
    let w = LossWeights::default();
    let eval = |icc: &Tensor| {
        let p: Vec<FeaturePyramid> = feats.iter().map(|f| pyramid(f, 16, false).0).collect();
        let ic = Tensor::from_vec(ic.clone(), &[3, 8, 8]);
        let is = Tensor::from_vec(is.clone(), &[3, 8, 8]);
        identity_from_parts(
            &IdentityParts {
                icc,
                ic: &ic,
                iss: &is.scale(0.9),
                is: &is,
                e_icc: &p[0],
                e_ic: &p[1],
                e_iss: &p[2],
                e_is: &p[3],
            },
            &w,
        )
        .unwrap()
    };
    let x = Tensor::variable(icc0.clone(), &[3, 8, 8]);
    let analytic = eval(&x).backward().get(&x).unwrap().to_vec();
    let numeric = gradcheck::central_difference(&icc0, 1e-6, |v| eval(&Tensor::from_vec(v.to_vec(), &[3, 8, 8])).item());
    assert!(gradcheck::relative_error(&analytic, &numeric) < 1e-3);
}

fn small_disc() -> (Discriminator, ParamSet) {
    let d = Discriminator::new(16).unwrap();
    let mut set = ParamSet::new();
    d.init(&mut set, &mut spast_core::init::rng_for(3, "disc-test"));
    (d, set)
}

fn log_sigmoid(x: f64) -> f64 {
    -(1.0 + (-x).exp()).ln()
}

#[test]
fn adversarial_losses_match_logit_formulas() {
    let (d, set) = small_disc();
    let p = set.bind(false);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let real = Tensor::from_vec((0..3 * 32 * 32).map(|_| rng.random()).collect(), &[3, 32, 32]);
    let fake = Tensor::from_vec((0..3 * 32 * 32).map(|_| rng.random()).collect(), &[3, 32, 32]);
    let lr = d.logits(&p, &real).to_vec();
    let lf = d.logits(&p, &fake).to_vec();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let d_want = -mean(lr.iter().map(|&l| log_sigmoid(l)).collect()) - mean(lf.iter().map(|&l| log_sigmoid(-l)).collect());
    let g_want = -mean(lf.iter().map(|&l| log_sigmoid(l)).collect());
    let (dl, gl) = adversarial_losses(&d, &p, &real, &fake);
    assert!((dl.item() - d_want).abs() < 1e-12);
    assert!((gl.item() - g_want).abs() < 1e-12);
}

#[test]
fn discriminator_loss_ignores_the_generator() {
    let (d, set) = small_disc();
    let p = set.bind(true);
    let fake = Tensor::variable(vec![0.5; 3 * 16 * 16], &[3, 16, 16]);
    let real = Tensor::from_vec(vec![0.2; 3 * 16 * 16], &[3, 16, 16]);
    let grads = d.d_loss(&p, &real, &fake).backward();
    assert!(!grads.contains(&fake));
    assert!(!p.touched_by(&grads).is_empty());
}

#[test]
fn adversarial_gradients_match_finite_differences() {
    let (d, set) = small_disc();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.random()).collect();
    let real = Tensor::from_vec((0..3 * 16 * 16).map(|_| rng.random()).collect(), &[3, 16, 16]);

    let p = set.bind(false);
    let x = Tensor::variable(x0.clone(), &[3, 16, 16]);
    let analytic = d.g_loss(&p, &x).backward().get(&x).unwrap().to_vec();
    let numeric = gradcheck::central_difference(&x0, 1e-6, |v| d.g_loss(&p, &Tensor::from_vec(v.to_vec(), &[3, 16, 16])).item());
    assert!(gradcheck::relative_error(&analytic, &numeric) < 1e-3);

    let fake = Tensor::from_vec(x0, &[3, 16, 16]);
    let bound = set.bind(true);
    let grads = bound.collect_grads(&d.d_loss(&bound, &real, &fake).backward());
    for name in ["disc.logit.weight", "disc.conv4.bias"] {
        let v0 = set.get(name).unwrap().values.clone();
        let numeric = gradcheck::central_difference(&v0, 1e-6, |v| {
            let mut s = set.clone();
            s.get_mut(name).unwrap().values = v.to_vec();
            d.d_loss(&s.bind(false), &real, &fake).item()
        });
        assert!(gradcheck::relative_error(&grads[name], &numeric) < 1e-3, "{name}");
    }
}

#[test]
fn total_loss_weights_each_term() {
    let mut r = LossReport {
        content: 1.0,
        style: 2.0,
        identity: 3.0,
        adversarial: 4.0,
        style_prior: 5.0,
        ..LossReport::default()
    };
    let w = LossWeights {
        style: 10.0,
        content: 100.0,
        identity: 1000.0,
        adversarial: 10000.0,
        style_prior: 100000.0,
        ..LossWeights::default()
    };
    assert_eq!(total_loss(&mut r, &w).unwrap(), 543120.0);
    assert_eq!(r.total, 543120.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_vanish_on_identical_inputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_values(&mut rng, 16);
        let (p, _) = pyramid(&a, 16, false);
        prop_assert_eq!(content_loss(&p, &p).unwrap().item(), 0.0);
        prop_assert_eq!(style_loss(&p, &p).unwrap().item(), 0.0);
        prop_assert_eq!(gram_loss(&p, &p).unwrap().item(), 0.0);
    }

    #[test]
    fn losses_are_symmetric_and_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_values(&mut rng, 16), random_values(&mut rng, 16));
        let (pa, pb) = (pyramid(&a, 16, false).0, pyramid(&b, 16, false).0);
        for f in [content_loss, style_loss, gram_loss] {
            let (x, y) = (f(&pa, &pb).unwrap().item(), f(&pb, &pa).unwrap().item());
            prop_assert!(x >= 0.0);
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
