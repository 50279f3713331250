use perpcs::assembler::{
    assemble, peft_retrieval_baseline, score_slot, select_and_weight, AssemblyConfig, ScoreTable, SelectionMode,
};
use perpcs::instrument::Counters;
use perpcs::model::{ActivationTap, Adapter, BaseModel, DenseDelta, Example, ModelConfig, NoHook, ScoringSpan, TokenBatch};
use perpcs::pool::{decompose, materialize, unit_or_zero, GateVector, PiecePool, SharerContribution, WeightedPieceHook};
use perpcs::tensor::Tensor;
use perpcs::Error;
use proptest::prelude::*;
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

fn random_adapter(model: &BaseModel, seed: u64) -> Adapter<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Adapter::<f32>::zeros(model.slots(), model.config.rank);
    for p in &mut a.pairs {
        p.a = Tensor::from_fn(p.a.shape(), |_| rng.random_range(-0.3f32..0.3));
        p.b = Tensor::from_fn(p.b.shape(), |_| rng.random_range(-0.3f32..0.3));
    }
    a
}

fn contribution(model: &BaseModel, hash: &str, sharer: u32, adapter: &Adapter<f32>, gates: Vec<Vec<f32>>) -> SharerContribution {
    SharerContribution {
        sharer,
        model_hash: hash.to_string(),
        history_size: 10,
        embedding: vec![1.0, sharer as f32],
        pieces: decompose(adapter, sharer, model.slots()).unwrap(),
        gates: gates
            .into_iter()
            .enumerate()
            .map(|(l, g)| GateVector::new(sharer, l, g))
            .collect(),
    }
}

fn random_gates(model: &BaseModel, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    model
        .slots()
        .iter()
        .map(|s| (0..s.input_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

fn random_pool(model: &BaseModel, ids: &[u32]) -> (PiecePool, Vec<Adapter<f32>>) {
    let hash = model.hash().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let adapters: Vec<Adapter<f32>> = ids.iter().map(|&i| random_adapter(model, 100 + i as u64)).collect();
    let cs = ids
        .iter()
        .zip(&adapters)
        .map(|(&i, a)| contribution(model, &hash, i, a, random_gates(model, &mut rng)))
        .collect();
    let pool = PiecePool::build(&hash, model.slots(), model.config.rank, cs, None).unwrap();
    (pool, adapters)
}

/// Free-form style items: `[1, body.., 2]` scored over the body.
fn history(n: usize, seed: u64) -> Vec<(Example, ScoringSpan)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(3..8);
            let mut tokens = vec![1u32];
            tokens.extend((0..len).map(|_| rng.random_range(4..32u32)));
            tokens.push(2);
            (Example { tokens, loss_from: 1 }, ScoringSpan::free_form(len))
        })
        .collect()
}

fn cfg(k: usize, batch_size: usize) -> AssemblyConfig {
    AssemblyConfig {
        k,
        mode: SelectionMode::TopkAgg,
        batch_size,
    }
}

fn tap_of(slot: usize, rows: Vec<Vec<f64>>) -> ActivationTap<f64> {
    let n = rows[0].len();
    let seq = rows.len();
    ActivationTap {
        slot,
        batch: 1,
        seq,
        values: Tensor::new(vec![seq, n], rows.concat()).unwrap(),
    }
}

#[test]
fn task_span_covers_answer_tokens() {
    let s = ScoringSpan::task(5, 3);
    assert_eq!((s.begin, s.end), (6, 9));
    assert_eq!(s.positions().map(|t| t + 1).collect::<Vec<_>>(), vec![6, 7, 8, 9]);
    let f = ScoringSpan::free_form(4);
    assert_eq!((f.begin, f.end), (1, 5));
}

#[test]
fn parallel_and_orthogonal_scores() {
    let g = vec![0.0, 2.0, 0.0];
    let h = vec![1.0, 0.0, 0.0];
    let rows: Vec<Vec<f64>> = [0.5, 1.0, 3.0, 7.0].iter().map(|c| vec![0.0, *c, 0.0]).collect();
    let t = score_slot(&tap_of(0, rows), &[(7, &g), (3, &h)], &[ScoringSpan { begin: 1, end: 4 }]).unwrap();
    assert_eq!(t.scores, vec![(3, 0.0), (7, 4.0)]);
}

#[test]
fn span_outside_sequence_rejected() {
    let g = vec![1.0, 0.0];
    let tap = tap_of(0, vec![vec![1.0, 0.0]; 3]);
    assert!(score_slot(&tap, &[(0, &g)], &[ScoringSpan { begin: 2, end: 4 }]).is_err());
}

#[test]
fn selection_orders_and_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = ScoreTable {
        slot: 0,
        scores: vec![(1, 0.9), (2, 0.5), (3, 0.1)],
    };
    let sel = select_and_weight(&t, &cfg(2, 8), 16, &mut rng).unwrap();
    assert_eq!(sel.iter().map(|e| e.0).collect::<Vec<_>>(), vec![1, 2]);

    let t = ScoreTable {
        slot: 0,
        scores: vec![(4, 2.0), (9, 1.0)],
    };
    let sel = select_and_weight(&t, &cfg(2, 8), 16, &mut rng).unwrap();
    assert!((sel[0].1 - 0.5621765008857981).abs() < 1e-12);
    assert!((sel[1].1 - 0.4378234991142019).abs() < 1e-12);

    let sel = select_and_weight(&t, &cfg(1, 8), 16, &mut rng).unwrap();
    assert_eq!(sel, vec![(4, 1.0)]);

    let sel = select_and_weight(&t, &cfg(5, 8), 16, &mut rng).unwrap();
    assert_eq!(sel.len(), 2);

    let tie = ScoreTable {
        slot: 0,
        scores: vec![(2, 1.0), (5, 1.0), (8, 1.0)],
    };
    let sel = select_and_weight(&tie, &cfg(2, 8), 16, &mut rng).unwrap();
    assert_eq!(sel.iter().map(|e| e.0).collect::<Vec<_>>(), vec![2, 5]);

    let empty = ScoreTable { slot: 0, scores: vec![] };
    assert!(select_and_weight(&empty, &cfg(2, 8), 16, &mut rng).is_err());
}

#[test]
fn ablation_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = ScoreTable {
        slot: 0,
        scores: vec![(1, 8.0), (2, 4.0), (3, 0.0)],
    };
    let uni = AssemblyConfig {
        mode: SelectionMode::Uniform,
        ..cfg(1, 8)
    };
    let sel = select_and_weight(&t, &uni, 16, &mut rng).unwrap();
    assert_eq!(sel.len(), 3);
    assert!(sel.iter().all(|e| (e.1 - 1.0 / 3.0).abs() < 1e-15));

    let sample = AssemblyConfig {
        mode: SelectionMode::TopkSample { seed: 1 },
        ..cfg(2, 8)
    };
    for _ in 0..20 {
        let sel = select_and_weight(&t, &sample, 16, &mut rng).unwrap();
        assert_eq!(sel.len(), 1);
        assert!(sel[0].0 == 1 || sel[0].0 == 2);
        assert_eq!(sel[0].1, 1.0);
    }

    let full = AssemblyConfig {
        mode: SelectionMode::ToppAgg { p: 1.0 },
        ..cfg(1, 8)
    };
    assert_eq!(select_and_weight(&t, &full, 16, &mut rng).unwrap().len(), 3);
    assert!(AssemblyConfig {
        mode: SelectionMode::ToppAgg { p: 0.0 },
        ..cfg(1, 8)
    }
    .validate()
    .is_err());
    assert!(cfg(0, 8).validate().is_err());
}

fn table_strategy() -> impl Strategy<Value = ScoreTable> {
    prop::collection::vec(-20.0f64..20.0, 1..12).prop_map(|xs| ScoreTable {
        slot: 0,
        scores: xs.into_iter().enumerate().map(|(i, a)| (i as u32, a)).collect(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn top_p_is_monotone_and_normalized(t in table_strategy(), p1 in 0.01f64..1.0, dp in 0.0f64..1.0, k in 1usize..6) {
        let p2 = (p1 + dp).min(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let at = |p: f64, rng: &mut ChaCha8Rng| {
            let c = AssemblyConfig { mode: SelectionMode::ToppAgg { p }, ..cfg(1, 8) };
            select_and_weight(&t, &c, 16, rng).unwrap()
        };
        let a = at(p1, &mut rng);
        let b = at(p2, &mut rng);
        prop_assert!(a.iter().all(|x| b.iter().any(|y| y.0 == x.0)));
        for sel in [&a, &b, &select_and_weight(&t, &cfg(k, 8), 16, &mut rng).unwrap()] {
            let total: f64 = sel.iter().map(|e| e.1).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(sel.iter().all(|e| e.1 > 0.0));
        }
    }

    #[test]
    fn ranking_ignores_activation_scale(c in 0.01f64..100.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let gates: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<(u32, &[f64])> = gates.iter().enumerate().map(|(i, g)| (i as u32, g.as_slice())).collect();
        let span = [ScoringSpan { begin: 1, end: 5 }];
        let a = score_slot(&tap_of(0, rows.clone()), &refs, &span).unwrap();
        let scaled = rows.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        let b = score_slot(&tap_of(0, scaled), &refs, &span).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x.1 - y.1).abs() < 1e-9);
        }
    }
}

#[test]
fn singleton_pool_reproduces_the_sharer() {
    let model = BaseModel::new(small()).unwrap();
    let (pool, adapters) = random_pool(&model, &[4]);
    let hash = model.hash().unwrap();
    let items = history(5, 1);
    let asm = assemble(9, &items, &model, &hash, &pool, &cfg(3, 2)).unwrap();
    assert_eq!(asm.batches, 3);
    for s in &asm.recipe.slots {
        assert_eq!(s.entries.len(), 1);
        assert_eq!((s.entries[0].sharer, s.entries[0].weight), (4, 1.0));
    }
    let batch = TokenBatch::from_sequences(&[&[1, 5, 9, 12, 30]]).unwrap();
    let ours = model.logits(&batch, &mut materialize(&asm.recipe, &pool).unwrap().hook()).unwrap();
    let theirs = model.logits(&batch, &mut DenseDelta::from_adapter(&adapters[0]).unwrap().hook()).unwrap();
    assert!(ours.max_abs_diff(&theirs) <= 1e-5);
}

#[test]
fn recipe_matches_piecewise_application() {
    let model = BaseModel::new(small()).unwrap();
    let (pool, _) = random_pool(&model, &[1, 2, 3, 5, 8]);
    let hash = model.hash().unwrap();
    let asm = assemble(11, &history(6, 2), &model, &hash, &pool, &cfg(3, 4)).unwrap();
    assert!(asm.recipe.slots.iter().all(|s| s.entries.len() == 3));
    let batch = TokenBatch::from_sequences(&[&[1, 5, 9, 12, 30, 7], &[1, 3, 3]]).unwrap();
    let dense = model.logits(&batch, &mut materialize(&asm.recipe, &pool).unwrap().hook()).unwrap();
    let piecewise = model.logits(&batch, &mut WeightedPieceHook::new(&asm.recipe, &pool).unwrap()).unwrap();
    assert!(dense.max_abs_diff(&piecewise) <= 1e-5);
}

#[test]
fn repeated_batches_average_to_the_same_recipe() {
    let model = BaseModel::new(small()).unwrap();
    let (pool, _) = random_pool(&model, &[1, 2, 3, 4]);
    let hash = model.hash().unwrap();
    let once = history(4, 3);
    let twice: Vec<_> = once.iter().chain(&once).cloned().collect();
    let a = assemble(0, &once, &model, &hash, &pool, &cfg(2, 4)).unwrap();
    let b = assemble(0, &twice, &model, &hash, &pool, &cfg(2, 4)).unwrap();
    assert_eq!(b.batches, 2);
    for (x, y) in a.recipe.slots.iter().zip(&b.recipe.slots) {
        assert_eq!(x.entries.len(), y.entries.len());
        for (p, q) in x.entries.iter().zip(&y.entries) {
            assert_eq!(p.sharer, q.sharer);
            assert!((p.weight - q.weight).abs() < 1e-6);
        }
    }
}

#[test]
fn assembly_is_deterministic_and_training_free() {
    let model = BaseModel::new(small()).unwrap();
    let (pool, _) = random_pool(&model, &[1, 2, 3]);
    let hash = model.hash().unwrap();
    let items = history(7, 4);
    let before = Counters::now();
    let a = assemble(3, &items, &model, &hash, &pool, &cfg(2, 3)).unwrap();
    assert_eq!(before.since(), Counters::default());
    let b = assemble(3, &items, &model, &hash, &pool, &cfg(2, 3)).unwrap();
    assert_eq!(a.recipe.to_compact().unwrap(), b.recipe.to_compact().unwrap());
}

#[test]
fn hash_mismatch_and_empty_history_rejected() {
    let model = BaseModel::new(small()).unwrap();
    let (pool, _) = random_pool(&model, &[1, 2]);
    let err = assemble(0, &history(2, 5), &model, "not-the-hash", &pool, &cfg(1, 4)).unwrap_err();
    assert!(matches!(err, Error::HashMismatch { .. }));
    let hash = model.hash().unwrap();
    assert!(assemble(0, &[], &model, &hash, &pool, &cfg(1, 4)).is_err());
}

/// Gates of `aligned` point along the summed unit activations it will see;
/// every other gate is orthogonal to all of them.
fn planted_pool(model: &BaseModel, items: &[(Example, ScoringSpan)], aligned: u32, others: &[u32]) -> PiecePool {
    let hash = model.hash().unwrap();
    let adapter = random_adapter(model, 77);
    let seqs: Vec<&[u32]> = items.iter().map(|(e, _)| e.tokens.as_slice()).collect();
    let batch = TokenBatch::from_sequences(&seqs).unwrap();
    let (_, taps) = model
        .logits_with_taps(&batch, &mut DenseDelta::from_adapter(&adapter).unwrap().hook())
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut good = Vec::new();
    let mut bad: Vec<Vec<Vec<f32>>> = vec![Vec::new(); others.len()];
    for tap in &taps {
        let units: Vec<Vec<f64>> = items
            .iter()
            .enumerate()
            .flat_map(|(i, (_, s))| s.positions().map(move |t| (i, t)))
            .map(|(i, t)| unit_or_zero(tap.token(i, t)).iter().map(|&x| x as f64).collect())
            .collect();
        let n = units[0].len();
        let sum: Vec<f64> = (0..n).map(|j| units.iter().map(|u| u[j]).sum()).collect();
        good.push(sum.iter().map(|&x| x as f32).collect());
        // orthonormal basis of the activations, then project it out
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for u in &units {
            let mut v = u.clone();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.iter().map(|x| x / norm).collect());
            }
        }
        for g in bad.iter_mut() {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            g.push(v.iter().map(|&x| x as f32).collect());
        }
    }
    let mut cs = vec![contribution(model, &hash, aligned, &adapter, good)];
    for (&id, gates) in others.iter().zip(bad) {
        cs.push(contribution(model, &hash, id, &random_adapter(model, id as u64), gates));
    }
    PiecePool::build(&hash, model.slots(), model.config.rank, cs, None).unwrap()
}

#[test]
fn planted_sharer_is_recovered_at_every_slot() {
    let model = BaseModel::new(small()).unwrap();
    let items = history(3, 6);
    let pool = planted_pool(&model, &items, 5, &[1, 2, 3, 4, 6, 7]);
    let hash = model.hash().unwrap();
    let asm = assemble(0, &items, &model, &hash, &pool, &cfg(1, 8)).unwrap();
    for s in &asm.recipe.slots {
        assert_eq!(s.entries.len(), 1);
        assert_eq!(s.entries[0].sharer, 5, "slot {}", s.l);
    }
    for t in &asm.score_tables {
        let best = t.scores.iter().find(|s| s.0 == 5).unwrap().1;
        assert!(t.scores.iter().filter(|s| s.0 != 5).all(|s| s.1.abs() < 1e-3 && s.1 < best));
    }
}

#[test]
fn peft_retrieval_weights() {
    let model = BaseModel::new(small()).unwrap();
    let deltas: Vec<DenseDelta<f32>> = (0..3)
        .map(|i| DenseDelta::from_adapter(&random_adapter(&model, i)).unwrap())
        .collect();
    let e = [vec![1.0f32, 1.0, 0.0], vec![0.0, 1.0, 0.0], vec![2.0, 0.0, 1.0]];
    let sharers: Vec<(u32, &[f32], &DenseDelta<f32>)> =
        (0..3).map(|i| (10 + i as u32, e[i].as_slice(), &deltas[i])).collect();
    let target = [1.0f32, 0.0, 0.0];

    let (d, w) = peft_retrieval_baseline(&target, &sharers, 3).unwrap();
    let want = [(12, 0.4468235840542486), (10, 0.37049629339479356), (11, 0.1826801225509577)];
    for (got, want) in w.iter().zip(want) {
        assert_eq!(got.0, want.0);
        assert!((got.1 - want.1).abs() < 1e-6);
    }
    let slot0 = d.deltas[0].as_ref().unwrap();
    let mut expect = deltas[2].deltas[0].as_ref().unwrap().scale(want[0].1 as f32);
    expect.add_scaled(want[1].1 as f32, deltas[0].deltas[0].as_ref().unwrap()).unwrap();
    expect.add_scaled(want[2].1 as f32, deltas[1].deltas[0].as_ref().unwrap()).unwrap();
    assert!(slot0.max_abs_diff(&expect) < 1e-6);

    let (d1, w1) = peft_retrieval_baseline(&target, &sharers, 1).unwrap();
    assert_eq!(w1, vec![(12, 1.0)]);
    assert_eq!(d1, deltas[2]);

    let (_, same) = peft_retrieval_baseline(&e[1], &sharers, 2).unwrap();
    assert_eq!(same[0].0, 11);
    assert!(peft_retrieval_baseline(&target, &sharers, 4).is_err());
}

#[test]
fn base_forward_unchanged_by_empty_recipe_slots() {
    let model = BaseModel::new(small()).unwrap();
    let (pool, _) = random_pool(&model, &[1]);
    let mut recipe = assemble(0, &history(2, 7), &model, &model.hash().unwrap(), &pool, &cfg(1, 4))
        .unwrap()
        .recipe;
    for s in &mut recipe.slots {
        s.entries.clear();
    }
    let batch = TokenBatch::from_sequences(&[&[1, 4, 5]]).unwrap();
    let a = model.logits(&batch, &mut materialize(&recipe, &pool).unwrap().hook()).unwrap();
    let b = model.logits(&batch, &mut NoHook).unwrap();
    assert_eq!(a, b);
}
