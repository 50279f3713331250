use perpcs::model::{Adapter, BaseModel, DenseDelta, LoraPair, ModelConfig, NoHook, TokenBatch};
use perpcs::pool::{
    compact_header_bytes, decompose, gated_forward_delta, materialize, GateVector, Piece, PiecePool, Recipe,
    RecipeEntry, RecipeSlot, ShareMask, SharerContribution, WeightedPieceHook,
};
use perpcs::tensor::Tensor;
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
        seed: 1,
        ..ModelConfig::default()
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-0.5f32..0.5))
}

fn contribution(model: &BaseModel, hash: &str, sharer: u32, seed: u64) -> SharerContribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapter = Adapter::<f32>::zeros(model.slots(), model.config.rank);
    for p in &mut adapter.pairs {
        p.a = random_tensor(&mut rng, p.a.shape());
        p.b = random_tensor(&mut rng, p.b.shape());
    }
    let pieces = decompose(&adapter, sharer, model.slots()).unwrap();
    let gates = model
        .slots()
        .iter()
        .map(|s| GateVector::new(sharer, s.index, random_tensor(&mut rng, &[s.input_dim]).into_data()))
        .collect();
    SharerContribution {
        sharer,
        model_hash: hash.to_string(),
        history_size: 10 + sharer as usize,
        embedding: vec![sharer as f32, 1.0],
        pieces,
        gates,
    }
}

fn pool_of(model: &BaseModel, ids: &[u32], masks: Option<&[ShareMask]>) -> PiecePool {
    let hash = model.hash().unwrap();
    let cs = ids.iter().map(|&i| contribution(model, &hash, i, i as u64 * 7 + 1)).collect();
    PiecePool::build(&hash, model.slots(), model.config.rank, cs, masks).unwrap()
}

fn uniform_recipe(pool: &PiecePool, ids: &[u32]) -> Recipe {
    let w = 1.0 / ids.len() as f32;
    Recipe {
        target_user: 99,
        pool_hash: pool.hash().to_string(),
        slots: (0..pool.slots().len())
            .map(|l| RecipeSlot {
                l,
                entries: ids.iter().map(|&s| RecipeEntry { sharer: s, weight: w }).collect(),
            })
            .collect(),
    }
}

#[test]
fn full_ratio_puts_every_sharer_everywhere() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let pool = pool_of(&model, &[3, 1, 2], None);
    assert_eq!(pool.sharers().iter().map(|s| s.id).collect::<Vec<_>>(), vec![1, 2, 3]);
    for l in 0..pool.slots().len() {
        assert_eq!(pool.members(l).count(), 3);
    }
}

#[test]
fn share_ratio_rounds_slot_count() {
    assert_eq!(ShareMask::count(0.2, 16), 3);
    assert_eq!(ShareMask::count(0.01, 16), 1);
    assert_eq!(ShareMask::count(1.0, 16), 16);
    let m = ShareMask::draw(5, 0.2, 16, 42).unwrap();
    assert_eq!(m.slots.len(), 3);
    assert_eq!(m, ShareMask::draw(5, 0.2, 16, 42).unwrap());
    assert!(ShareMask::draw(5, 0.0, 16, 42).is_err());

    let cfg = ModelConfig {
        layers: 4,
        ..small()
    };
    let model = BaseModel::<f32>::new(cfg).unwrap();
    let masks: Vec<_> = [1, 2].iter().map(|&s| ShareMask::draw(s, 0.2, 16, 42).unwrap()).collect();
    let pool = pool_of(&model, &[1, 2], Some(&masks));
    for (s, m) in pool.sharers().iter().zip(&masks) {
        assert_eq!(s.shared_slots(), m.slots);
    }
}

#[test]
fn empty_and_mismatched_pools_rejected() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let hash = model.hash().unwrap();
    assert!(PiecePool::build(&hash, model.slots(), 2, vec![], None).is_err());
    let stale = contribution(&model, "00", 1, 1);
    assert!(matches!(
        PiecePool::build(&hash, model.slots(), 2, vec![stale], None),
        Err(perpcs::Error::HashMismatch { .. })
    ));
    let dup = vec![contribution(&model, &hash, 1, 1), contribution(&model, &hash, 1, 2)];
    assert!(PiecePool::build(&hash, model.slots(), 2, dup, None).is_err());
}

#[test]
fn save_load_save_is_byte_identical() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let masks: Vec<_> = [4, 8].iter().map(|&s| ShareMask::draw(s, 0.5, 8, 3).unwrap()).collect();
    let pool = pool_of(&model, &[4, 8], Some(&masks));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.bin");
    pool.save(&path).unwrap();
    let back = PiecePool::load(&path).unwrap();
    assert_eq!(back, pool);
    assert_eq!(back.to_bytes(), pool.to_bytes());
    back.verify().unwrap();

    let bytes = pool.to_bytes();
    assert!(PiecePool::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(PiecePool::from_bytes(&bytes[..6]).is_err());
    let mut wrong_version = bytes.to_vec();
    wrong_version[4] = 9;
    assert!(matches!(
        PiecePool::from_bytes(&wrong_version),
        Err(perpcs::Error::VersionMismatch { .. })
    ));
}

#[test]
fn pool_hash_tracks_every_tensor_byte() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let hash = model.hash().unwrap();
    let base = contribution(&model, &hash, 1, 5);
    let reference = PiecePool::build(&hash, model.slots(), 2, vec![base.clone()], None).unwrap();
    let same = PiecePool::build(&hash, model.slots(), 2, vec![base.clone()], None).unwrap();
    assert_eq!(reference.hash(), same.hash());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let mut c = base.clone();
        let slot = rng.random_range(0..c.pieces.len());
        let t = if rng.random_bool(0.5) {
            &mut c.pieces[slot].pair.a
        } else {
            &mut c.pieces[slot].pair.b
        };
        let i = rng.random_range(0..t.len());
        let x = t.data()[i];
        t.data_mut()[i] = f32::from_bits(x.to_bits() ^ (1 << rng.random_range(0..23)));
        let p = PiecePool::build(&hash, model.slots(), 2, vec![c], None).unwrap();
        assert_ne!(p.hash(), reference.hash());
    }
    let mut bytes = reference.to_bytes().to_vec();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(matches!(
        PiecePool::from_bytes(&bytes),
        Err(perpcs::Error::HashMismatch { .. })
    ));
}

#[test]
fn materialize_single_and_cancelling() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let hash = model.hash().unwrap();
    let one = contribution(&model, &hash, 1, 3);
    let mut two = one.clone();
    two.sharer = 2;
    for p in &mut two.pieces {
        p.sharer = 2;
        p.pair.b = p.pair.b.scale(-1.0);
    }
    two.gates = two.gates.iter().map(|g| GateVector::new(2, g.slot, g.raw().to_vec())).collect();
    let pool = PiecePool::build(&hash, model.slots(), 2, vec![one.clone(), two], None).unwrap();

    let single = materialize(&uniform_recipe(&pool, &[1]), &pool).unwrap();
    for (l, d) in single.deltas.iter().enumerate() {
        assert_eq!(d.as_ref().unwrap(), &one.pieces[l].pair.delta().unwrap());
    }
    let cancel = materialize(&uniform_recipe(&pool, &[1, 2]), &pool).unwrap();
    for d in cancel.deltas.iter().flatten() {
        assert!(d.data().iter().all(|&x| x.abs() < 1e-7));
    }
}

#[test]
fn materialize_matches_dense_sum_and_piecewise_forward() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let pool = pool_of(&model, &[1, 2, 3], None);
    let weights = [0.5f32, 0.3, 0.2];
    let mut recipe = uniform_recipe(&pool, &[1, 2, 3]);
    for s in &mut recipe.slots {
        for (e, &w) in s.entries.iter_mut().zip(&weights) {
            e.weight = w;
        }
    }
    let dense = materialize(&recipe, &pool).unwrap();
    for (l, slot) in pool.slots().iter().enumerate() {
        // brute force: Σ_s w_s Σ_k B[i,k] A[k,j] in f64
        let mut worst = 0.0f64;
        for i in 0..slot.output_dim {
            for j in 0..slot.input_dim {
                let mut want = 0.0f64;
                for (s, &w) in [1u32, 2, 3].iter().zip(&weights) {
                    let p = &pool.sharer(*s).unwrap().piece(l).unwrap().pair;
                    let dot: f64 = (0..2).map(|k| p.b.row(i)[k] as f64 * p.a.row(k)[j] as f64).sum();
                    want += w as f64 * dot;
                }
                let got = dense.deltas[l].as_ref().unwrap().row(i)[j] as f64;
                worst = worst.max((got - want).abs());
            }
        }
        assert!(worst <= 1e-6, "slot {l}: {worst}");
    }
    let batch = TokenBatch::single(&[1, 8, 9, 10, 11]).unwrap();
    let a = model.logits(&batch, &mut dense.hook()).unwrap();
    let b = model.logits(&batch, &mut WeightedPieceHook::new(&recipe, &pool).unwrap()).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-5);
    assert!(a.max_abs_diff(&model.logits(&batch, &mut NoHook).unwrap()) > 1e-4);
}

#[test]
fn recipe_validation_catches_bad_recipes() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let masks = vec![ShareMask::full(1, 8), ShareMask { sharer: 2, ratio: 0.125, slots: vec![3] }];
    let pool = pool_of(&model, &[1, 2], Some(&masks));
    uniform_recipe(&pool, &[1]).validate(&pool).unwrap();
    assert!(uniform_recipe(&pool, &[2]).validate(&pool).is_err());
    let mut stale = uniform_recipe(&pool, &[1]);
    stale.pool_hash = "ab".repeat(32);
    assert!(matches!(materialize(&stale, &pool), Err(perpcs::Error::HashMismatch { .. })));
    let mut unnormalized = uniform_recipe(&pool, &[1]);
    unnormalized.slots[0].entries[0].weight = 0.9;
    assert!(unnormalized.validate(&pool).is_err());
    let mut empty = uniform_recipe(&pool, &[1]);
    empty.slots[2].entries.clear();
    let dense = materialize(&empty, &pool).unwrap();
    assert!(dense.deltas[2].is_none());
}

#[test]
fn recipe_text_and_compact_round_trip() {
    let model = BaseModel::<f32>::new(small()).unwrap();
    let pool = pool_of(&model, &[1, 2, 3], None);
    let recipe = uniform_recipe(&pool, &[1, 2, 3]);
    assert_eq!(Recipe::from_json(&recipe.to_json().unwrap()).unwrap(), recipe);
    let bytes = recipe.to_compact().unwrap();
    assert_eq!(bytes.len(), compact_header_bytes(8) + 8 * 8 * 3);
    assert_eq!(Recipe::from_compact(&bytes).unwrap(), recipe);
    assert!(Recipe::from_compact(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn recipe_storage_ratio_matches_closed_form() {
    let cfg = ModelConfig::default();
    let slots = cfg.slots();
    let (l, k, r) = (slots.len(), 3usize, cfg.rank);
    let recipe = Recipe {
        target_user: 0,
        pool_hash: "00".repeat(32),
        slots: (0..l)
            .map(|l| RecipeSlot {
                l,
                entries: (0..k as u32).map(|s| RecipeEntry { sharer: s, weight: 1.0 / 3.0 }).collect(),
            })
            .collect(),
    };
    let recipe_payload = recipe.to_compact().unwrap().len() - compact_header_bytes(l);
    assert_eq!(recipe_payload, l * k * 8);
    let adapter = Adapter::<f32>::zeros(&slots, r);
    let adapter_payload = adapter.param_count() * 4;
    let closed: usize = slots.iter().map(|s| r * (s.input_dim + s.output_dim) * 4).sum();
    assert_eq!(adapter_payload, closed);
    assert_eq!(closed, 32_768);
    assert_eq!(recipe_payload, 384);
    assert_eq!(adapter_payload as f64 / recipe_payload as f64, 32_768.0 / 384.0);
}

#[test]
fn gated_delta_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rnd = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let a = rnd(&[3, 5]);
    let b = rnd(&[4, 3]);
    let g = rnd(&[5]).into_data();
    let v = rnd(&[5]).into_data();
    let piece = Piece {
        sharer: 0,
        slot: 0,
        pair: LoraPair { a: a.clone(), b: b.clone() },
    };
    let got = gated_forward_delta(&piece, &GateVector::new(0, 0, g.clone()), &v).unwrap();
    let dw = b.matmul(&a).unwrap();
    let gv: f64 = g.iter().zip(&v).map(|(x, y)| x * y).sum();
    let s = 1.0 / (1.0 + (-gv).exp());
    for i in 0..4 {
        let want: f64 = (0..5).map(|j| dw.row(i)[j] * v[j]).sum::<f64>() * s;
        assert!((got[i] - want).abs() <= 1e-6);
    }
}

#[test]
fn dense_delta_of_zero_adapter_is_zero() {
    let cfg = small();
    let adapter = Adapter::<f32>::zeros(&cfg.slots(), 2);
    let d = DenseDelta::from_adapter(&adapter).unwrap();
    assert!(d.deltas.iter().flatten().all(|t| t.data().iter().all(|&x| x == 0.0)));
}
