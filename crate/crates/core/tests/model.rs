use perpcs::model::prompt::{free_form_example, task_example};
use perpcs::model::{
    eval_loss, train_full, train_lm, Adapter, BaseModel, DenseDelta, ModelConfig, NoHook, SlotRole, TokenBatch,
    TrainConfig,
};
use perpcs::tensor::OptimizerKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 16,
        layers: 2,
        heads: 2,
        ffn: 32,
        max_seq: 16,
        rank: 2,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn random_adapter(model: &BaseModel, seed: u64, scale: f64) -> Adapter<f32> {
    let mut a = Adapter::init(model.slots(), model.config.rank, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for p in &mut a.pairs {
        for x in p.b.data_mut() {
            *x = (rng.random::<f64>() * 2.0 - 1.0) as f32 * scale as f32;
        }
    }
    a
}

fn random_batch(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> TokenBatch {
    let seq: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
    TokenBatch::single(&seq).unwrap()
}

#[test]
fn zero_b_adapter_matches_base() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let adapter = Adapter::init(model.slots(), 2, 9);
    let batch = TokenBatch::single(&[1, 5, 9, 3]).unwrap();
    let base = model.logits(&batch, &mut NoHook).unwrap();
    let mut g = perpcs::tensor::Graph::inference();
    let w = model.weights.bind(&mut g, false).unwrap();
    let mut hook = adapter.bind(&mut g, false).unwrap();
    let out = model.forward_bound(&mut g, &w, &batch, &mut hook).unwrap();
    assert_eq!(g.value(out.logits), &base);
}

#[test]
fn merge_equals_attach_on_32_inputs() {
    let model = BaseModel::<f32>::new(ModelConfig::default()).unwrap();
    let adapter = random_adapter(&model, 1, 0.2);
    let merged = model.merge_adapter(&adapter).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..32 {
        let len = rng.random_range(2..=48);
        let batch = random_batch(&mut rng, 256, len);
        let a = merged.logits(&batch, &mut NoHook).unwrap();
        let mut g = perpcs::tensor::Graph::inference();
        let w = model.weights.bind(&mut g, false).unwrap();
        let mut hook = adapter.bind(&mut g, false).unwrap();
        let out = model.forward_bound(&mut g, &w, &batch, &mut hook).unwrap();
        worst = worst.max(a.max_abs_diff(g.value(out.logits)));
    }
    assert!(worst <= 1e-5, "max abs logit diff {worst}");
}

#[test]
fn dense_delta_matches_attach() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let adapter = random_adapter(&model, 2, 0.3);
    let dense = DenseDelta::from_adapter(&adapter).unwrap();
    let batch = TokenBatch::single(&[1, 7, 8, 9, 10]).unwrap();
    let a = model.logits(&batch, &mut dense.hook()).unwrap();
    let b = model.merge_adapter(&adapter).unwrap().logits(&batch, &mut NoHook).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-5);
}

#[test]
fn zero_merge_is_identity_and_double_merge_doubles() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let zero = Adapter::zeros(model.slots(), 2);
    assert_eq!(model.merge_adapter(&zero).unwrap(), model);

    let adapter = random_adapter(&model, 5, 0.3);
    let twice = model.merge_adapter(&adapter).unwrap().merge_adapter(&adapter).unwrap();
    let doubled = model.merge_adapter(&adapter.scaled(2.0)).unwrap();
    let once = model.merge_adapter(&adapter).unwrap();
    let batch = TokenBatch::single(&[1, 4, 4, 6]).unwrap();
    let l2 = twice.logits(&batch, &mut NoHook).unwrap();
    assert!(l2.max_abs_diff(&doubled.logits(&batch, &mut NoHook).unwrap()) <= 1e-5);
    assert!(l2.max_abs_diff(&once.logits(&batch, &mut NoHook).unwrap()) > 1e-4);
}

#[test]
fn merge_rejects_wrong_dims() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let other = BaseModel::<f32>::new(ModelConfig { d_model: 32, ..small() }).unwrap();
    let adapter = Adapter::zeros(other.slots(), 2);
    assert!(matches!(
        model.merge_adapter(&adapter),
        Err(perpcs::Error::DimMismatch { .. })
    ));
}

#[test]
fn causal_logits_ignore_future_tokens() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let a = model.logits(&TokenBatch::single(&[1, 5, 6, 7, 8]).unwrap(), &mut NoHook).unwrap();
    let b = model.logits(&TokenBatch::single(&[1, 5, 6, 20, 21]).unwrap(), &mut NoHook).unwrap();
    for t in 0..3 {
        assert_eq!(a.row(t), b.row(t));
    }
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn padding_does_not_change_real_positions() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let short = [1u32, 5, 6];
    let long = [1u32, 9, 9, 9, 9, 9];
    let alone = model.logits(&TokenBatch::single(&short).unwrap(), &mut NoHook).unwrap();
    let both = model
        .logits(&TokenBatch::from_sequences(&[&short, &long]).unwrap(), &mut NoHook)
        .unwrap();
    for t in 0..3 {
        let diff = alone.row(t).iter().zip(both.row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-6);
    }
}

#[test]
fn taps_do_not_change_logits() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let adapter = random_adapter(&model, 8, 0.2);
    let dense = DenseDelta::from_adapter(&adapter).unwrap();
    let batch = TokenBatch::from_sequences(&[&[1, 2, 3], &[1, 9, 10, 11]]).unwrap();
    let plain = model.logits(&batch, &mut dense.hook()).unwrap();
    let (tapped, taps) = model.logits_with_taps(&batch, &mut dense.hook()).unwrap();
    assert_eq!(plain, tapped);
    assert_eq!(taps.len(), model.slots().len());
    for (i, tap) in taps.iter().enumerate() {
        assert_eq!(tap.slot, i);
        assert_eq!(tap.values.shape(), &[8, model.slots()[i].input_dim]);
    }
}

#[test]
fn ffn_targets_get_hooks() {
    let cfg = ModelConfig {
        adapter_targets: vec![SlotRole::FfnUp, SlotRole::FfnDown],
        ..small()
    };
    let model = BaseModel::<f32>::new(cfg).unwrap();
    let adapter = random_adapter(&model, 3, 0.3);
    let batch = TokenBatch::single(&[1, 2, 3]).unwrap();
    let merged = model.merge_adapter(&adapter).unwrap().logits(&batch, &mut NoHook).unwrap();
    let dense = DenseDelta::from_adapter(&adapter).unwrap();
    let attached = model.logits(&batch, &mut dense.hook()).unwrap();
    assert!(merged.max_abs_diff(&attached) <= 1e-5);
    assert!(merged.max_abs_diff(&model.logits(&batch, &mut NoHook).unwrap()) > 1e-4);
}

#[test]
fn out_of_vocab_and_overlong_inputs_rejected() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    assert!(model.logits(&TokenBatch::single(&[40]).unwrap(), &mut NoHook).is_err());
    let long: Vec<u32> = vec![1; 17];
    assert!(model.logits(&TokenBatch::single(&long).unwrap(), &mut NoHook).is_err());
}

fn toy_data() -> Vec<perpcs::model::Example> {
    (0..12u32)
        .map(|i| {
            let x = 10 + i % 6;
            task_example(&[x, x + 1], &[20 + i % 3], &[])
        })
        .collect()
}

#[test]
fn lora_training_freezes_base_and_reduces_loss() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let before = model.hash().unwrap();
    let data = toy_data();
    let mut adapter = Adapter::init(model.slots(), 2, 1);
    let cfg = TrainConfig {
        batch_size: 12,
        steps: 30,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let report = train_lm(&model, &data, &cfg, &mut adapter).unwrap();
    assert_eq!(model.hash().unwrap(), before);
    assert_eq!(report.losses.len(), 30);
    assert!(report.last().unwrap() < report.first().unwrap());
}

#[test]
fn lr_zero_and_zero_steps_change_nothing() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let data = toy_data();
    let init = Adapter::init(model.slots(), 2, 1);
    let mut adapter = init.clone();
    let cfg = TrainConfig {
        steps: 1,
        lr: 0.0,
        optimizer: OptimizerKind::Sgd,
        ..TrainConfig::default()
    };
    train_lm(&model, &data, &cfg, &mut adapter).unwrap();
    assert_eq!(adapter, init);

    let mut full = model.clone();
    let none = train_full(&mut full, &data, &TrainConfig { steps: 0, ..cfg }).unwrap();
    assert!(none.losses.is_empty());
    assert_eq!(full, model);
}

#[test]
fn full_training_overfits_one_batch() {
    let mut model = BaseModel::<f32>::new(small()).unwrap();
    let data: Vec<_> = (0..4u32).map(|i| free_form_example(&[10 + i, 11 + i, 12 + i])).collect();
    let initial = eval_loss(&model, &data, 4, &mut NoHook).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        steps: 40,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    train_full(&mut model, &data, &cfg).unwrap();
    let after = eval_loss(&model, &data, 4, &mut NoHook).unwrap();
    assert!(after < initial, "{after} !< {initial}");
}

#[test]
fn training_is_deterministic() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let data = toy_data();
    let cfg = TrainConfig {
        batch_size: 4,
        steps: 5,
        ..TrainConfig::default()
    };
    let mut a = Adapter::init(model.slots(), 2, 7);
    let mut b = a.clone();
    train_lm(&model, &data, &cfg, &mut a).unwrap();
    train_lm(&model, &data, &cfg, &mut b).unwrap();
    assert_eq!(a, b);
}

#[test]
fn nan_weights_abort_training_with_step() {
    let mut model = BaseModel::<f32>::new(small()).unwrap();
    model.weights.blocks[0].wq.data_mut()[0] = 1e30;
    model.weights.blocks[0].wk.data_mut()[0] = 1e30;
    let mut adapter = Adapter::init(model.slots(), 2, 1);
    let err = train_lm(&model, &toy_data(), &TrainConfig::default(), &mut adapter).unwrap_err();
    assert!(matches!(err, perpcs::Error::NonFiniteLoss { step: 0, .. }), "{err}");
}

#[test]
fn checkpoint_round_trip_preserves_slots() {
    let cfg = ModelConfig {
        adapter_targets: vec![SlotRole::Value, SlotRole::FfnDown],
        ..small()
    };
    let model = BaseModel::<f32>::new(cfg).unwrap();
    let (bytes, hash) = model.to_bytes().unwrap();
    let back = BaseModel::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.slots(), model.slots());
    assert_eq!(back.hash().unwrap(), hash);
    assert_eq!(back.to_bytes().unwrap().0, bytes);

    let adapter = random_adapter(&model, 2, 0.1);
    let (abytes, _) = adapter.to_bytes(&hash).unwrap();
    let (aback, mhash) = Adapter::<f32>::from_bytes(&abytes).unwrap();
    assert_eq!((aback, mhash), (adapter, hash));

    let mut bad = bytes.clone();
    bad[100] ^= 0x40;
    assert!(BaseModel::<f32>::from_bytes(&bad).is_err());
}
