mod common;

use common::{mlp, uniform_point};
use curvlab::error::Error;
use curvlab::model::{arch, build_network, checkpoint, Activation, Network};
use curvlab::Tensor;
use proptest::prelude::*;

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn checkpoint_round_trip_preserves_logits_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    for (i, act) in [Activation::Relu, Activation::Tanh].into_iter().enumerate() {
        let net = build_network(&arch::mlp_2d(act), 11 + i as u64).unwrap();
        let path = dir.path().join(format!("net{i}.ckpt"));
        net.save_checkpoint(&path).unwrap();
        let back = Network::load_checkpoint(&path).unwrap();
        for s in 0..100 {
            let x = uniform_point(2, -3.0, 3.0, 1000 + s);
            assert_eq!(bits(&net.logits(&x).unwrap()), bits(&back.logits(&x).unwrap()));
        }
        for (a, b) in net.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }
}

#[test]
fn uniform_logits_give_log_k() {
    for k in [2usize, 3, 10] {
        let mut net = mlp(&[4, 8, k], Activation::Relu, 3);
        for v in net.param_values_mut() {
            *v = v.scale(0.0);
        }
        let x = uniform_point(4, -1.0, 1.0, 4);
        for y in 0..k {
            let l = net.xent_loss(&x, y).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-12, "k={k}: {l}");
        }
    }
}

#[test]
fn binary_loss_below_log_two_iff_correct() {
    let net = build_network(&arch::mlp_2d(Activation::Tanh), 21).unwrap();
    let mut agree = 0;
    for s in 0..500 {
        let x = uniform_point(2, -4.0, 4.0, 2000 + s);
        for y in 0..2 {
            let l = net.xent_loss(&x, y).unwrap();
            let correct = net.predict(&x).unwrap() == y;
            if (l < std::f64::consts::LN_2) == correct {
                agree += 1;
            }
        }
    }
    assert_eq!(agree, 1000);
}

#[test]
fn truncated_checkpoint_reports_offset() {
    let net = mlp(&[3, 5, 2], Activation::Relu, 7);
    let bytes = checkpoint::encode(&net);
    for cut in [bytes.len() - 1, bytes.len() / 2, 13] {
        match checkpoint::decode(&bytes[..cut]) {
            Err(Error::Truncated { offset, needed }) => {
                assert!(offset <= cut, "offset {offset} beyond cut {cut}");
                assert!(needed > 0);
                let msg = Error::Truncated { offset, needed }.to_string();
                assert!(msg.contains(&offset.to_string()));
            }
            other => panic!("cut {cut}: expected truncation error, got {:?}", other.map(|_| ())),
        }
    }
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(checkpoint::decode(&bad), Err(Error::BadMagic { .. })));
}

#[test]
fn wrong_input_dimension_is_rejected() {
    let net = mlp(&[3, 5, 2], Activation::Relu, 7);
    assert!(net.logits(&Tensor::from_vec(vec![0.0; 4])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cross_entropy_is_non_negative(seed in 0u64..1000, xs in prop::collection::vec(-10.0f64..10.0, 2), y in 0usize..2) {
        let net = build_network(&arch::mlp_2d(Activation::Relu), seed).unwrap();
        let l = net.xent_loss(&Tensor::from_vec(xs), y).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
    }

    #[test]
    fn encode_decode_is_identity(seed in 0u64..1000, hidden in 1usize..12) {
        let net = mlp(&[3, hidden, 4], Activation::Tanh, seed);
        let back = checkpoint::decode(&checkpoint::encode(&net)).unwrap();
        prop_assert_eq!(checkpoint::encode(&back), checkpoint::encode(&net));
    }
}
