use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spast_core::feature_codec::{FeatureMap, Level};
use spast_core::lgwssm::*;
use spast_core::tensor::{gradcheck, ParamSet, Tensor};

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    let data = (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
    FeatureMap::new(Tensor::from_vec(data, &[c, h, w]), Level::Relu4_1).unwrap()
}

/// Element `(region, token, channel)` read straight from the spatial map.
fn blocked_oracle(x: &[f64], c: usize, h: usize, w: usize, b: usize) -> Vec<f64> {
    let (rh, rw) = (h / b, w / b);
    let mut out = Vec::with_capacity(x.len());
    for ri in 0..b {
        for rj in 0..b {
            for y in 0..rh {
                for xx in 0..rw {
                    for ch in 0..c {
                        out.push(x[ch * h * w + (ri * rh + y) * w + rj * rw + xx]);
                    }
                }
            }
        }
    }
    out
}

/// Exhaustive search over style regions on raw spatial data.
fn match_oracle(q: &[f64], k: &[f64], c: usize, h: usize, w: usize, b: usize) -> Vec<usize> {
    let (rh, rw) = (h / b, w / b);
    let mean = |x: &[f64], r: usize| -> Vec<f64> {
        let (ri, rj) = (r / b, r % b);
        (0..c)
            .map(|ch| {
                let mut s = 0.0;
                for y in 0..rh {
                    for xx in 0..rw {
                        s += x[ch * h * w + (ri * rh + y) * w + rj * rw + xx];
                    }
                }
                s / (rh * rw) as f64
            })
            .collect()
    };
    let sim = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let n = (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|x| x * x).sum::<f64>()).sqrt();
        if n == 0.0 {
            0.0
        } else {
            dot / n
        }
    };
    (0..b * b)
        .map(|n| {
            let qn = mean(q, n);
            let scores: Vec<f64> = (0..b * b).map(|m| sim(&qn, &mean(k, m))).collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            scores.iter().position(|s| *s == best).unwrap()
        })
        .collect()
}

fn norm_data(f: &FeatureMap) -> Vec<f64> {
    channel_norm(f).tensor().to_vec()
}

#[test]
fn blocked_layout_matches_index_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (c, h, w, b) in [(3, 4, 4, 2), (2, 8, 4, 4), (5, 6, 9, 3), (1, 4, 8, 1)] {
        let f = random_map(&mut rng, c, h, w);
        let grid = RegionGrid::new(b, h, w).unwrap();
        let blocked = to_blocks(f.tensor(), grid);
        assert_eq!(blocked.shape(), &[b * b, (h / b) * (w / b), c]);
        assert_eq!(blocked.to_vec(), blocked_oracle(f.tensor().data(), c, h, w, b));
    }
}

#[test]
fn region_match_equals_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let id = StylizationParams::identity(4);
    for b in [1, 2, 4] {
        for _ in 0..100 {
            let (fc, fs) = (random_map(&mut rng, 4, 8, 8), random_map(&mut rng, 4, 8, 8));
            let qb = block(&fc, &id, b, true).unwrap();
            let kb = block(&fs, &id, b, true).unwrap();
            let got = region_match(&qb, &kb).unwrap();
            let want = match_oracle(&norm_data(&fc), &norm_data(&fs), 4, 8, 8, b);
            assert_eq!(got.as_slice(), want.as_slice(), "b={b}");
        }
    }
}

#[test]
fn region_match_breaks_ties_to_lowest_index() {
    let id = StylizationParams::identity(1);
    let fc = FeatureMap::new(Tensor::ones(&[1, 4, 4]), Level::Relu4_1).unwrap();
    let qb = block(&fc, &id, 2, false).unwrap();
    let kb = block(&fc, &id, 2, false).unwrap();
    assert_eq!(region_match(&qb, &kb).unwrap().as_slice(), &[0, 0, 0, 0]);
}

#[test]
fn region_match_rejects_mismatched_grids() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let id = StylizationParams::identity(2);
    let f = random_map(&mut rng, 2, 4, 4);
    let a = block(&f, &id, 2, true).unwrap();
    let b = block(&f, &id, 4, true).unwrap();
    assert!(region_match(&a, &b).is_err());
}

#[test]
fn rearrange_rejects_out_of_range_indices() {
    assert!(matches!(
        RegionIndexMap::new(vec![0, 4], 4),
        Err(spast_core::SpastError::IndexOutOfRange { index: 4, len: 4 })
    ));
}

#[test]
fn divisibility_is_enforced() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = random_map(&mut rng, 2, 6, 6);
    let p = StylizationParams::identity(2);
    assert!(matches!(
        lwssm_forward(&f, &f, &p, 4),
        Err(spast_core::SpastError::Divisibility { b: 4, height: 6, width: 6 })
    ));
}

#[test]
fn one_hot_attention_selects_a_token_with_zero_spread() {
    // Keys are scaled unit vectors; each query aligns with exactly one key.
    let (n, c) = (5, 5);
    let mut k = vec![0.0; n * c];
    for i in 0..n {
        k[i * c + i] = 60.0;
    }
    let picks = [3, 0, 4, 4];
    let mut q = vec![0.0; picks.len() * c];
    for (row, &j) in picks.iter().enumerate() {
        q[row * c + j] = 60.0;
    }
    let a = region_attention(&Tensor::from_vec(q, &[picks.len(), c]), &Tensor::from_vec(k, &[n, c]));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-3.0..3.0)).collect();
    let (m, s) = attention_weighted_stats(&Tensor::from_vec(v.clone(), &[n, 3]), &a);
    for (row, &j) in picks.iter().enumerate() {
        assert_eq!(&m.data()[row * 3..row * 3 + 3], &v[j * 3..j * 3 + 3]);
        assert!(s.data()[row * 3..row * 3 + 3].iter().all(|x| x.abs() <= 1e-4));
    }
}

#[test]
fn constant_style_gives_constant_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut set = ParamSet::new();
    StylizationParams::init(&mut set, &mut rng, "p", 4);
    let params = StylizationParams::bind(&set.bind(false), "p");
    let fc = random_map(&mut rng, 4, 8, 8);
    let mut style = Vec::new();
    for ch in 0..4 {
        style.extend(std::iter::repeat(ch as f64 * 0.7 - 1.0).take(64));
    }
    let fs = FeatureMap::new(Tensor::from_vec(style, &[4, 8, 8]), Level::Relu4_1).unwrap();
    let out = lgwssm_forward(&fc, &fs, &params, 2, Branches::default()).unwrap();
    for ch in out.tensor().data().chunks(64) {
        assert!(ch.iter().all(|v| (v - ch[0]).abs() < 1e-6));
    }
}

#[test]
fn uniform_attention_global_path_is_adain() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let c = rng.random_range(1..6);
        let (hc, wc, hs, ws) = (
            rng.random_range(2..7),
            rng.random_range(2..7),
            rng.random_range(2..7),
            rng.random_range(2..7),
        );
        let fc = random_map(&mut rng, c, hc, wc);
        let fs = random_map(&mut rng, c, hs, ws);
        let params = StylizationParams {
            f: Projection::zero(c),
            ..StylizationParams::identity(c)
        };
        let out = gwssm_forward(&fc, &fs, &params).unwrap();
        let (xc, xs) = (fc.tensor().data(), fs.tensor().data());
        let (nc, ns) = (hc * wc, hs * ws);
        for ch in 0..c {
            let cs = &xc[ch * nc..(ch + 1) * nc];
            let ss = &xs[ch * ns..(ch + 1) * ns];
            let mc = cs.iter().sum::<f64>() / nc as f64;
            let vc = cs.iter().map(|v| (v - mc).powi(2)).sum::<f64>() / nc as f64;
            let ms = ss.iter().sum::<f64>() / ns as f64;
            let sd = (ss.iter().map(|v| (v - ms).powi(2)).sum::<f64>() / ns as f64).sqrt();
            for (i, v) in cs.iter().enumerate() {
                let adain = sd * (v - mc) / (vc + NORM_EPS).sqrt() + ms;
                assert!((out.tensor().data()[ch * nc + i] - adain).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn lgwssm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut set = ParamSet::new();
    StylizationParams::init(&mut set, &mut rng, "p", 3);
    let fc = random_map(&mut rng, 3, 4, 4);
    let fs = random_map(&mut rng, 3, 4, 4);
    let weights: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wt = Tensor::from_vec(weights, &[3, 4, 4]);
    let loss = |set: &ParamSet, fc: &Tensor| -> Tensor {
        let params = StylizationParams::bind(&set.bind(true), "p");
        let fc = FeatureMap::new(fc.clone(), Level::Relu4_1).unwrap();
        lgwssm_forward(&fc, &fs, &params, 2, Branches::default())
            .unwrap()
            .tensor()
            .mul(&wt)
            .sum()
    };

    // Parameter gradients.
    let bound = set.bind(true);
    let params = StylizationParams::bind(&bound, "p");
    let out = lgwssm_forward(&fc, &fs, &params, 2, Branches::default()).unwrap();
    let grads = bound.collect_grads(&out.tensor().mul(&wt).sum().backward());
    for name in ["p.f.weight", "p.g.weight", "p.h.weight", "p.block.weight", "p.unblock.bias"] {
        let x = set.get(name).unwrap().values.clone();
        let numeric = gradcheck::central_difference(&x, 1e-6, |v| {
            let mut s = set.clone();
            s.get_mut(name).unwrap().values = v.to_vec();
            loss(&s, fc.tensor()).item()
        });
        let err = gradcheck::relative_error(&grads[name], &numeric);
        assert!(err < 1e-3, "{name}: relative error {err}");
    }

    // Input gradient with respect to the content feature.
    let x = Tensor::variable(fc.tensor().to_vec(), &[3, 4, 4]);
    let analytic = loss(&set, &x).backward().get(&x).unwrap().to_vec();
    let numeric = gradcheck::central_difference(&fc.tensor().to_vec(), 1e-6, |v| {
        loss(&set, &Tensor::from_vec(v.to_vec(), &[3, 4, 4])).item()
    });
    assert!(gradcheck::relative_error(&analytic, &numeric) < 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blocks_round_trip(c in 1usize..4, b in 1usize..4, rh in 1usize..4, rw in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_map(&mut rng, c, b * rh, b * rw);
        let grid = RegionGrid::new(b, b * rh, b * rw).unwrap();
        let back = from_blocks(&to_blocks(f.tensor(), grid), grid);
        prop_assert_eq!(back.to_vec(), f.tensor().to_vec());
        let tokens = from_tokens(&to_tokens(f.tensor()), b * rh, b * rw);
        prop_assert_eq!(tokens.to_vec(), f.tensor().to_vec());
    }

    #[test]
    fn unblock_inverts_identity_block(h in prop::sample::select(vec![4usize, 8, 16]), w in prop::sample::select(vec![4usize, 8, 16]), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_map(&mut rng, 3, h, w);
        let id = StylizationParams::identity(3);
        for b in [1usize, 2, 4] {
            let bt = block(&f, &id, b, false).unwrap();
            let back = unblock(&bt, &id, Level::Relu4_1).unwrap();
            prop_assert_eq!(back.tensor().to_vec(), f.tensor().to_vec());
        }
    }

    #[test]
    fn attention_rows_are_distributions(n in 1usize..12, m in 1usize..12, c in 1usize..6, scale in 0.1f64..20.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |r: usize| Tensor::from_vec((0..r * c).map(|_| rng.random_range(-scale..scale)).collect(), &[r, c]);
        let a = region_attention(&t(n), &t(m));
        prop_assert!(a.max_row_error() < 1e-5);
        prop_assert!(a.scores().data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn spread_is_never_negative(n in 1usize..8, m in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |r: usize, c: usize| Tensor::from_vec((0..r * c).map(|_| rng.random_range(-3.0..3.0)).collect(), &[r, c]);
        let a = region_attention(&t(n, 4), &t(m, 4));
        let (_, s) = attention_weighted_stats(&t(m, 3), &a);
        prop_assert!(s.data().iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn normalized_channels_have_zero_mean(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_map(&mut rng, c, h, w);
        let n = channel_norm(&f);
        for ch in n.tensor().data().chunks(h * w) {
            prop_assert!((ch.iter().sum::<f64>() / (h * w) as f64).abs() < 1e-9);
        }
    }
}
