use proptest::prelude::*;
use spast_tensor::{Param, ParamSet, Tensor};

#[test]
fn conv_matches_direct_loop() {
    let x: Vec<f64> = (0..2 * 5 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
    let w: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| (i as f64 * 0.11).cos()).collect();
    let out = Tensor::from_vec(x.clone(), &[2, 5, 5]).conv2d(&Tensor::from_vec(w.clone(), &[3, 2, 3, 3]), None, 2);
    assert_eq!(out.shape(), [3, 2, 2]);
    for o in 0..3 {
        for oy in 0..2 {
            for ox in 0..2 {
                let mut acc = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            acc += w[((o * 2 + c) * 3 + ky) * 3 + kx] * x[c * 25 + (oy * 2 + ky) * 5 + ox * 2 + kx];
                        }
                    }
                }
                assert!((out.data()[(o * 2 + oy) * 2 + ox] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn reflect_pad_layout() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 2, 3]);
    let p = x.pad_reflect(1);
    assert_eq!(p.shape(), [1, 4, 5]);
    assert_eq!(&p.data()[..5], &[5.0, 4.0, 5.0, 6.0, 5.0]);
    assert_eq!(&p.data()[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
}

#[test]
fn pooling_and_resize_values() {
    let x = Tensor::from_vec((0..16).map(f64::from).collect(), &[1, 4, 4]);
    assert_eq!(x.max_pool2().data(), &[5.0, 7.0, 13.0, 15.0]);
    assert_eq!(x.avg_pool(2).data(), &[2.5, 4.5, 10.5, 12.5]);
    let up = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]).resize_nearest(4, 4);
    assert_eq!(&up.data()[..4], &[1.0, 1.0, 2.0, 2.0]);
    let c = Tensor::full(&[2, 3, 5], 0.7).resize_bilinear(8, 4);
    assert!(c.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn softmax_rows_are_distributions() {
    let x = Tensor::from_vec(vec![1000.0, 0.0, -1000.0, 3.0, 3.0, 3.0], &[2, 3]);
    let s = x.softmax();
    assert_eq!(&s.data()[..3], &[1.0, 0.0, 0.0]);
    for v in &s.data()[3..] {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn constants_record_no_history() {
    let a = Tensor::ones(&[2, 2]);
    let b = a.matmul(&a).exp().sum();
    assert!(!b.requires_grad());
    assert!(b.backward().is_empty());
    let v = Tensor::variable(vec![1.0, 2.0], &[2]);
    let g = v.detach().square().sum().backward();
    assert!(!g.contains(&v));
}

#[test]
fn log_sigmoid_is_stable_at_extremes() {
    let x = Tensor::from_vec(vec![-800.0, 800.0, 0.0], &[3]);
    let y = x.log_sigmoid();
    assert!((y.data()[0] + 800.0).abs() < 1e-9);
    assert!(y.data()[1].abs() < 1e-300);
    assert!((y.data()[2] + std::f64::consts::LN_2).abs() < 1e-15);
}

proptest! {
    #[test]
    fn param_blob_round_trips(values in proptest::collection::vec(-1e6f64..1e6, 1..40), name in "[a-z_.0-9]{1,12}") {
        let mut set = ParamSet::new();
        set.insert(name.clone(), Param::new(&[values.len()], values.clone()));
        set.insert("z.other", Param::new(&[1, 1], vec![0.5]));
        let bytes = set.to_bytes();
        let back = ParamSet::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn permute_then_inverse_is_identity(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4) {
        let n = d0 * d1 * d2;
        let x = Tensor::from_vec((0..n).map(|i| i as f64).collect(), &[d0, d1, d2]);
        let y = x.permute(&[1, 2, 0]).permute(&[2, 0, 1]);
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert_eq!(y.data(), x.data());
    }
}

#[test]
fn truncated_param_blob_is_rejected() {
    let mut set = ParamSet::new();
    set.insert("w", Param::new(&[3], vec![1.0, 2.0, 3.0]));
    let bytes = set.to_bytes();
    assert!(ParamSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}
