use std::fs;

use proptest::prelude::*;
use trupnet::data::synth_dataset;
use trupnet::model::binarize;
use trupnet::train::{Adam, TrainConfig, Trainer};
use trupnet::{rng, ModelConfig, ParamStore, Tensor, TransRUPNet};

fn trainer(seed: u64, augment: bool) -> Trainer {
    let model = TransRUPNet::new(ModelConfig::tiny(), seed).unwrap();
    let config = TrainConfig { lr: 1e-3, batch_size: 4, epochs: 10, seed, checkpoint_every: 0, augment };
    Trainer::new(model, config).unwrap()
}

#[test]
fn loss_goes_down_on_a_fixed_batch() {
    let data = synth_dataset(4, 32, 2).unwrap();
    let mut t = trainer(2, false);
    let first = t.train_epoch(&data, None).unwrap().mean_loss;
    let mut last = first;
    for _ in 0..9 {
        last = t.train_epoch(&data, None).unwrap().mean_loss;
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn train_log_has_one_row_per_step() {
    let data = synth_dataset(5, 32, 3).unwrap();
    let mut t = trainer(3, true);
    let mut log = Vec::new();
    t.train_epoch(&data, Some(&mut log)).unwrap();
    let text = String::from_utf8(log).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().all(|l| l.starts_with("1,")));
}

#[test]
fn model_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let model = TransRUPNet::new(ModelConfig::tiny().with_input_size(32, 48), 9).unwrap();
    model.save(dir.path()).unwrap();
    let back = TransRUPNet::load(dir.path()).unwrap();
    assert_eq!(back.config(), model.config());
    let x = Tensor::uniform(&[1, 3, 32, 48], 0.0, 1.0, &mut rng::seeded(1));
    assert_eq!(model.infer(&x).unwrap(), back.infer(&x).unwrap());
}

#[test]
fn corrupt_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(4, 32, 1).unwrap();
    let mut t = trainer(1, false);
    t.train_epoch(&data, None).unwrap();
    t.save_checkpoint(dir.path()).unwrap();
    assert!(Trainer::restore(dir.path()).is_ok());

    let tensors = dir.path().join("tensors");
    let victim = fs::read_dir(&tensors).unwrap().next().unwrap().unwrap().path();
    let mut bytes = fs::read(&victim).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&victim, &bytes).unwrap();
    assert!(Trainer::restore(dir.path()).is_err());
    assert!(TransRUPNet::load(&dir.path().join("missing")).is_err());
}

#[test]
fn predicted_masks_are_binary_and_match_threshold() {
    let model = TransRUPNet::new(ModelConfig::tiny(), 4).unwrap();
    let x = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng::seeded(4));
    let probs = model.infer(&x).unwrap();
    let mask = model.predict_mask(&x, 0.5).unwrap();
    assert_eq!(mask.shape(), &[2, 1, 32, 32]);
    for (&p, &m) in probs.data().iter().zip(mask.data()) {
        assert_eq!(m, (p >= 0.5) as u8 as f32);
    }
}

#[test]
fn inference_is_independent_of_batch_mates() {
    let model = TransRUPNet::new(ModelConfig::tiny(), 5).unwrap();
    let mut r = rng::seeded(5);
    let a = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut r);
    let b = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut r);
    let both = Tensor::new(vec![2, 3, 32, 32], [a.data(), b.data()].concat()).unwrap();
    let alone = model.infer(&a).unwrap();
    let batched = model.infer(&both).unwrap();
    let n = alone.numel();
    let worst = alone.data().iter().zip(&batched.data()[..n]).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
    assert!(worst < 1e-5, "{worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adam_moves_against_the_gradient(g in prop::collection::vec(-10.0f32..10.0, 1..16), lr in 1e-5f32..1e-1) {
        let mut params = ParamStore::new();
        let id = params.add("w", Tensor::zeros(&[g.len()]), true);
        let mut adam = Adam::new(&params, lr);
        let grad = Tensor::new(vec![g.len()], g.clone()).unwrap();
        adam.step(&mut params, &[(id, grad)]).unwrap();
        for (w, gi) in params.get(id).data().iter().zip(&g) {
            prop_assert!(w.is_finite());
            // first bias-corrected step is -lr * g / (|g| + eps)
            if gi.abs() > 1e-3 {
                prop_assert!(w * gi < 0.0);
                prop_assert!((w.abs() - lr).abs() <= lr * 1e-3);
            }
        }
    }

    #[test]
    fn binarize_is_monotone_in_threshold(p in prop::collection::vec(0.0f32..1.0, 1..64), t1 in 0.0f32..1.0, t2 in 0.0f32..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let probs = Tensor::new(vec![p.len()], p).unwrap();
        let a = binarize(&probs, lo);
        let b = binarize(&probs, hi);
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x >= y));
    }
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut params = ParamStore::new();
    let id = params.add("w", Tensor::ones(&[2]), true);
    let mut adam = Adam::new(&params, 1e-3);
    let bad = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
    assert!(adam.step(&mut params, &[(id, bad)]).is_err());
    assert_eq!(params.get(id).data(), &[1.0, 1.0]);
}
