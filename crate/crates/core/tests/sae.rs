// SPDX-License-Identifier: MIT OR Apache-2.0

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use traitscope::linalg::Matrix;
use traitscope::sae::{SaeModel, SaeTrainConfig, SparsityInput};
use traitscope::synthetic::{mean_l0, PlantedDictionary};
use traitscope::{Error, FeatureKind};

fn random_sae(d: usize, m: usize, seed: u64) -> SaeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = || rng.random_range(-1.0..1.0);
    SaeModel::new(
        2,
        Matrix::from_fn(d, m, |_, _| r()),
        Matrix::from_fn(m, d, |_, _| r()),
        (0..m).map(|_| r()).collect(),
        (0..d).map(|_| r()).collect(),
    )
    .unwrap()
}

#[test]
fn identity_encoder_rectifies() {
    let sae = SaeModel::new(0, Matrix::identity(2), Matrix::identity(2), vec![0.0; 2], vec![0.0; 2]).unwrap();
    assert_eq!(sae.encode(&[3.0, -1.0]).unwrap(), vec![3.0, 0.0]);
}

#[test]
fn input_at_b_dec_encodes_to_zero() {
    let sae = random_sae(4, 8, 1);
    let sae = SaeModel::new(0, sae.w_enc().clone(), sae.w_dec().clone(), vec![0.0; 8], sae.b_dec().to_vec()).unwrap();
    assert!(sae.encode(sae.b_dec()).unwrap().iter().all(|&a| a == 0.0));
}

#[test]
fn decode_basis_reads_out_rows() {
    let sae = random_sae(4, 8, 2);
    assert_eq!(sae.decode(&[0.0; 8]).unwrap(), sae.b_dec());
    for i in 0..8 {
        let mut e = vec![0.0; 8];
        e[i] = 1.0;
        let want: Vec<f64> = sae.w_dec().row(i).iter().zip(sae.b_dec()).map(|(w, b)| w + b).collect();
        assert_eq!(sae.decode(&e).unwrap(), want);
    }
}

#[test]
fn hand_computed_loss() {
    // d = 2, m = 2; z = (1, 2)
    let w_enc = Matrix::from_vec(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
    let w_dec = Matrix::from_vec(2, 2, vec![0.5, 0.0, 0.0, 0.25]).unwrap();
    let sae = SaeModel::new(0, w_enc, w_dec, vec![0.1, -0.2], vec![0.5, -0.5]).unwrap();
    let z = [1.0, 2.0];
    // centered (0.5, 2.5): pre = (0.5 + 1.25 + 0.1, -0.5 + 5 - 0.2) = (1.85, 4.3)
    // recon = (0.925 + 0.5, 1.075 - 0.5) = (1.425, 0.575)
    let recon = (1.0f64 - 1.425).powi(2) + (2.0f64 - 0.575).powi(2);
    // raw: (1 + 1 + 0.1, -1 + 4 - 0.2) = (2.1, 2.8)
    let raw_l1 = 2.1 + 2.8;
    let loss = sae.loss(&z, 0.5, SparsityInput::Raw).unwrap();
    assert_abs_diff_eq!(loss.recon, recon, epsilon = 1e-12);
    assert_abs_diff_eq!(loss.sparsity, raw_l1, epsilon = 1e-12);
    assert_abs_diff_eq!(loss.total, recon + 0.5 * raw_l1, epsilon = 1e-12);
    let centered = sae.loss(&z, 0.5, SparsityInput::Centered).unwrap();
    assert_abs_diff_eq!(centered.sparsity, 1.85 + 4.3, epsilon = 1e-12);
    assert_eq!(sae.loss(&z, 0.0, SparsityInput::Raw).unwrap().total, loss.recon);
}

#[test]
fn perfect_reconstruction_has_zero_loss() {
    let sae = SaeModel::new(0, Matrix::identity(3), Matrix::identity(3), vec![0.0; 3], vec![0.0; 3]).unwrap();
    let z = [0.5, 1.0, 2.0];
    let loss = sae.loss(&z, 0.0, SparsityInput::Raw).unwrap();
    assert_eq!((loss.recon, loss.total), (0.0, 0.0));
}

#[test]
fn feature_vectors_and_bounds() {
    let sae = random_sae(4, 8, 3);
    let f = sae.feature_vector(0).unwrap();
    assert_eq!(f.values, sae.w_dec().row(0));
    assert_eq!((f.kind, f.layer, f.index), (FeatureKind::Background, 2, Some(0)));
    assert!(matches!(sae.feature_vector(8), Err(Error::FeatureOutOfRange { index: 8, m: 8 })));
}

#[test]
fn registry_scale_index_needs_a_large_dictionary() {
    let small = random_sae(4, 8, 4);
    assert!(small.feature_vector(81363).is_err());
    let d = 2;
    let m = 81364;
    let big = SaeModel::new(0, Matrix::zeros(d, m), Matrix::zeros(m, d), vec![0.0; m], vec![0.0; d]).unwrap();
    assert!(big.feature_vector(81363).is_ok());
}

#[test]
fn narrow_dictionary_is_rejected() {
    let r = SaeModel::new(0, Matrix::zeros(4, 2), Matrix::zeros(2, 4), vec![0.0; 2], vec![0.0; 4]);
    assert!(r.is_err());
}

#[test]
fn save_load_save_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sae = random_sae(5, 9, 5).with_id("toy-sae");
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    sae.save(&a).unwrap();
    let loaded = SaeModel::load(&a).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded, sae);
}

#[test]
fn training_lowers_heldout_loss_and_is_seeded() {
    let planted = PlantedDictionary::generate(8, 4, 2000, 2, 9).unwrap();
    let config = SaeTrainConfig {
        alpha: 0.05,
        learning_rate: 0.05,
        steps: 400,
        n_features: 16,
        seed: 2,
        sparsity_input: SparsityInput::Centered,
        ..SaeTrainConfig::default()
    };
    let (a, report) = SaeModel::train(&planted.samples, &config).unwrap();
    assert!(report.final_heldout_loss < report.initial_heldout_loss);
    let (b, _) = SaeModel::train(&planted.samples, &config).unwrap();
    assert_eq!(a, b);
    let (c, _) = SaeModel::train(&planted.samples, &SaeTrainConfig { seed: 3, ..config }).unwrap();
    assert_ne!(a, c);
    assert!(mean_l0(&a, &planted.samples).unwrap() <= 16.0);
}

proptest! {
    #[test]
    fn encodings_are_nonnegative(seed in 0u64..1000, z in prop::collection::vec(-10.0f64..10.0, 6)) {
        let sae = random_sae(6, 12, seed);
        prop_assert!(sae.encode(&z).unwrap().iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn decode_is_affine(seed in 0u64..1000,
                        a1 in prop::collection::vec(0.0f64..5.0, 8),
                        a2 in prop::collection::vec(0.0f64..5.0, 8)) {
        let sae = random_sae(4, 8, seed);
        let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let lhs = sae.decode(&sum).unwrap();
        let d1 = sae.decode(&a1).unwrap();
        let d2 = sae.decode(&a2).unwrap();
        for k in 0..4 {
            prop_assert!((lhs[k] - (d1[k] + d2[k] - sae.b_dec()[k])).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_grows_with_alpha(seed in 0u64..1000, z in prop::collection::vec(-3.0f64..3.0, 4),
                             lo in 0.0f64..1.0, step in 0.0f64..1.0) {
        let sae = random_sae(4, 8, seed);
        for input in [SparsityInput::Raw, SparsityInput::Centered] {
            let a = sae.loss(&z, lo, input).unwrap();
            let b = sae.loss(&z, lo + step, input).unwrap();
            prop_assert!(b.total >= a.total);
            prop_assert!(a.recon >= 0.0 && a.sparsity >= 0.0);
        }
    }
}
