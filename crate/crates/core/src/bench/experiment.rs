//! End-to-end runs: method comparison, sweeps and efficiency.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::eval::{predict, score_predictions, Evaluation};
use super::metrics::MetricReport;
use super::synth::{SplitCounts, SyntheticCorpus, TaskSpec};
use crate::assembler::{assemble, peft_retrieval_baseline, Assembly, AssemblyConfig, SelectionMode};
use crate::error::{Error, Result};
use crate::instrument::Counters;
use crate::model::{Adapter, BaseModel, DenseDelta, ModelConfig, TrainConfig};
use crate::pipeline::{
    embed_profile, embed_user, select_sharers, train_sharer, train_user_adapter, BaseTrainConfig, Candidate,
    ClusterResult, SelectionStrategy, SharerArtifacts, UserRecord,
};
use crate::pool::{compact_header_bytes, materialize, PiecePool, Recipe, ShareMask, SharerContribution};

/// Storage ratio at full model size; printed for context only.
pub const REFERENCE_STORAGE_RATIO: f64 = 38.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SharingConfig {
    pub num_sharers: usize,
    pub strategy: SelectionStrategy,
    pub share_ratio: f64,
}

impl Default for SharingConfig {
    fn default() -> Self {
        Self {
            num_sharers: 40,
            strategy: SelectionStrategy::HistoryCluster,
            share_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// History records prepended in the retrieval rows.
    pub retrieve: usize,
    /// Neighbours combined by the whole-adapter retrieval baseline.
    pub peft_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { retrieve: 1, peft_k: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub sharer_counts: Vec<usize>,
    pub strategies: Vec<SelectionStrategy>,
    pub share_ratios: Vec<f64>,
    /// Upper-exclusive history-size edges between activity buckets.
    pub activity_edges: Vec<usize>,
    /// Threshold for the top-p ablation.
    pub top_p: f64,
    /// Targets timed by the efficiency benchmark.
    pub efficiency_users: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sharer_counts: vec![10, 20, 30, 40, 50],
            strategies: SelectionStrategy::ALL.to_vec(),
            share_ratios: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            activity_edges: vec![20, 30, 40],
            top_p: 0.9,
            efficiency_users: 5,
        }
    }
}

/// Everything that determines a run besides file locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub splits: SplitCounts,
    /// `vocab_size` is replaced by the generated vocabulary's size.
    pub model: ModelConfig,
    pub base: BaseTrainConfig,
    /// Sharer adapters; the per-target oracle uses the same settings.
    pub adapter: TrainConfig,
    pub gate: TrainConfig,
    pub sharing: SharingConfig,
    pub assembly: AssemblyConfig,
    pub eval: EvalConfig,
    pub sweeps: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskSpec::default(),
            splits: SplitCounts::default(),
            model: ModelConfig::default(),
            base: BaseTrainConfig::default(),
            adapter: TrainConfig {
                batch_size: 8,
                steps: 100,
                lr: 5e-3,
                ..TrainConfig::default()
            },
            gate: TrainConfig {
                batch_size: 8,
                steps: 50,
                lr: 2e-2,
                ..TrainConfig::default()
            },
            sharing: SharingConfig::default(),
            assembly: AssemblyConfig::default(),
            eval: EvalConfig::default(),
            sweeps: SweepConfig::default(),
        }
    }
}

/// SplitMix64 finaliser, used to derive per-stage seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let mut m = self.model.clone();
        m.vocab_size = self.task.vocab()?.len();
        m.validate()?;
        for t in [&self.base.pretrain, &self.base.adapt, &self.adapter, &self.gate] {
            t.validate()?;
        }
        if !(0.0..=1.0).contains(&self.base.retrieval_prob) || !(0.0..1.0).contains(&self.base.holdout) {
            return Err(Error::Config("retrieval_prob must be in [0, 1] and holdout in [0, 1)".into()));
        }
        self.assembly.validate()?;
        let s = &self.sharing;
        if s.num_sharers == 0 || s.num_sharers > self.splits.sharer_candidates {
            return Err(Error::Config(format!(
                "num_sharers {} must be in 1..={}",
                s.num_sharers, self.splits.sharer_candidates
            )));
        }
        if !(s.share_ratio > 0.0 && s.share_ratio <= 1.0) {
            return Err(Error::Config(format!("share_ratio {} must be in (0, 1]", s.share_ratio)));
        }
        if self.eval.peft_k == 0 || self.eval.peft_k > s.num_sharers {
            return Err(Error::Config("peft_k must be in 1..=num_sharers".into()));
        }
        let w = &self.sweeps;
        if w.share_ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::Config("sweep share ratios must be in (0, 1]".into()));
        }
        if w.sharer_counts.iter().any(|&n| n == 0) {
            return Err(Error::Config("sweep sharer counts must be positive".into()));
        }
        if w.activity_edges.windows(2).any(|e| e[0] >= e[1]) {
            return Err(Error::Config("activity edges must be strictly increasing".into()));
        }
        if !(w.top_p > 0.0 && w.top_p <= 1.0) {
            return Err(Error::Config("top_p must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn corpus_seed(&self) -> u64 {
        mix_seed(self.seed, 0xC0)
    }

    /// Model config with vocabulary size and init seed filled in.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            seed: mix_seed(self.seed, self.model.seed),
            ..self.model.clone()
        }
    }

    fn reseed(&self, t: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: mix_seed(self.seed, t.seed),
            ..t.clone()
        }
    }

    pub fn base_train(&self) -> BaseTrainConfig {
        BaseTrainConfig {
            pretrain: self.reseed(&self.base.pretrain),
            adapt: self.reseed(&self.base.adapt),
            ..self.base.clone()
        }
    }

    pub fn adapter_train(&self) -> TrainConfig {
        self.reseed(&self.adapter)
    }

    pub fn gate_train(&self) -> TrainConfig {
        self.reseed(&self.gate)
    }

    pub fn selection_seed(&self) -> u64 {
        mix_seed(self.seed, 0x5E1)
    }

    pub fn pool_seed(&self) -> u64 {
        mix_seed(self.seed, 0x9001)
    }

    /// Assembly settings with any sampling seed tied to the run seed.
    pub fn assembly_config(&self, mode: SelectionMode) -> AssemblyConfig {
        let mode = match mode {
            SelectionMode::TopkSample { seed } => SelectionMode::TopkSample {
                seed: mix_seed(self.seed, seed),
            },
            m => m,
        };
        AssemblyConfig {
            mode,
            ..self.assembly.clone()
        }
    }
}

/// One line of a result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep: String,
    pub point: String,
    pub task: String,
    pub method: String,
    pub metrics: MetricReport,
}

pub const CSV_HEADER: &str = "sweep,point,task,method,queries,accuracy,macro_f1,mae,rmse,rouge_1,rouge_l";

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Rows as CSV under [`CSV_HEADER`]; numbers use six decimals.
pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.sweep,
            r.point,
            r.task,
            r.method,
            m.count,
            cell(m.accuracy),
            cell(m.macro_f1),
            cell(m.mae),
            cell(m.rmse),
            cell(m.rouge_1),
            cell(m.rouge_l)
        );
    }
    out
}

/// `sweep → method → [(point, headline metric)]`, for external plotting.
pub fn plot_series(rows: &[ResultRow]) -> BTreeMap<String, BTreeMap<String, Vec<(String, f64)>>> {
    let mut out: BTreeMap<String, BTreeMap<String, Vec<(String, f64)>>> = BTreeMap::new();
    for r in rows {
        out.entry(r.sweep.clone())
            .or_default()
            .entry(r.method.clone())
            .or_default()
            .push((r.point.clone(), r.metrics.primary()));
    }
    out
}

pub mod methods {
    pub const NON_PERSONALIZED: &str = "non-personalized";
    pub const RETRIEVAL: &str = "retrieval";
    pub const PEFT_RETRIEVAL: &str = "peft-retrieval";
    pub const PER_PCS: &str = "per-pcs";
    pub const PER_PCS_RETRIEVAL: &str = "per-pcs+retrieval";
    pub const OPPU: &str = "oppu-oracle";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTiming {
    pub user_id: u32,
    pub history_size: usize,
    pub train_secs: f64,
    pub assemble_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub users: Vec<UserTiming>,
    pub mean_train_secs: f64,
    pub mean_assemble_secs: f64,
    /// Training time over assembly time.
    pub time_ratio: f64,
    pub optimizer_steps_during_assembly: u64,
    pub tapes_during_assembly: u64,
    /// Raw f32 bytes of one full per-user adapter.
    pub adapter_bytes: usize,
    /// Mean compact recipe size over the timed users.
    pub recipe_bytes: f64,
    /// `L·k·8 + header`.
    pub closed_form_recipe_bytes: usize,
    pub storage_ratio: f64,
    pub reference_storage_ratio: f64,
}

impl EfficiencyReport {
    pub fn summary(&self) -> String {
        format!(
            "train {:.3}s vs assemble {:.4}s per user ({:.1}x faster); adapter {} B vs recipe {:.0} B \
             (closed form {} B), storage ratio {:.1}x here, {:.0}x reference at full size",
            self.mean_train_secs,
            self.mean_assemble_secs,
            self.time_ratio,
            self.adapter_bytes,
            self.recipe_bytes,
            self.closed_form_recipe_bytes,
            self.storage_ratio,
            self.reference_storage_ratio
        )
    }
}

/// Shared state for one run: the data, the base model and every sharer or
/// oracle adapter trained so far.
pub struct Workbench<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data: &'a SyntheticCorpus,
    pub base: &'a BaseModel,
    pub base_hash: String,
    pub candidates: Vec<Candidate>,
    pub sharers: BTreeMap<u32, SharerArtifacts>,
    pub oppu: BTreeMap<u32, Adapter<f32>>,
    threads: rayon::ThreadPool,
}

impl<'a> Workbench<'a> {
    pub fn new(cfg: &'a ExperimentConfig, data: &'a SyntheticCorpus, base: &'a BaseModel, workers: usize) -> Result<Self> {
        let threads = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        let users = data.corpus.select(&data.split.sharer_candidates)?;
        let candidates = threads.install(|| {
            use rayon::prelude::*;
            users
                .par_iter()
                .map(|u| {
                    Ok(Candidate {
                        user_id: u.user_id,
                        history_size: u.items.len(),
                        history_embedding: embed_user(base, u, &data.vocab)?.vector,
                        profile_embedding: embed_profile(base, u, &data.vocab)?.vector,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Self {
            cfg,
            data,
            base,
            base_hash: base.hash()?,
            candidates,
            sharers: BTreeMap::new(),
            oppu: BTreeMap::new(),
            threads,
        })
    }

    pub fn targets(&self) -> Result<Vec<&'a UserRecord>> {
        self.data.corpus.select(&self.data.split.targets)
    }

    pub fn select(&self, count: usize, strategy: SelectionStrategy) -> Result<ClusterResult> {
        select_sharers(&self.candidates, count, strategy, self.cfg.selection_seed())
    }

    pub fn par_map<T: Send, R: Send>(&self, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>>
    where
        T: Sync,
    {
        use rayon::prelude::*;
        self.threads.install(|| items.par_iter().map(&f).collect())
    }

    /// Trains adapters and gates for any of `ids` not yet cached.
    pub fn ensure_sharers(&mut self, ids: &[u32]) -> Result<()> {
        let missing: Vec<&UserRecord> = ids
            .iter()
            .filter(|id| !self.sharers.contains_key(id))
            .map(|&id| self.data.corpus.user(id))
            .collect::<Result<_>>()?;
        let (ad, gate) = (self.cfg.adapter_train(), self.cfg.gate_train());
        let trained = self.par_map(&missing, |u| train_sharer(self.base, u, &self.data.vocab, &ad, &gate))?;
        for t in trained {
            self.sharers.insert(t.user_id, t);
        }
        Ok(())
    }

    fn candidate(&self, id: u32) -> Result<&Candidate> {
        self.candidates
            .iter()
            .find(|c| c.user_id == id)
            .ok_or_else(|| Error::invalid(format!("user {id} is not a sharer candidate")))
    }

    /// Pool over trained sharers `ids`, each sharing a `ratio` of slots.
    pub fn build_pool(&self, ids: &[u32], ratio: f64) -> Result<PiecePool> {
        let num_slots = self.base.slots().len();
        let mut contributions = Vec::with_capacity(ids.len());
        let mut masks = Vec::with_capacity(ids.len());
        for &id in ids {
            let art = self
                .sharers
                .get(&id)
                .ok_or_else(|| Error::invalid(format!("sharer {id} has not been trained")))?;
            let c = self.candidate(id)?;
            contributions.push(SharerContribution {
                sharer: id,
                model_hash: self.base_hash.clone(),
                history_size: c.history_size,
                embedding: c.history_embedding.clone(),
                pieces: art.pieces.clone(),
                gates: art.gates.clone(),
            });
            masks.push(ShareMask::draw(id, ratio, num_slots, self.cfg.pool_seed())?);
        }
        let masks = (ratio < 1.0).then_some(masks.as_slice());
        PiecePool::build(&self.base_hash, self.base.slots(), self.base.config.rank, contributions, masks)
    }

    pub fn assemble_targets(&self, pool: &PiecePool, cfg: &AssemblyConfig) -> Result<Vec<Assembly>> {
        let targets = self.targets()?;
        self.par_map(&targets, |u| {
            assemble(u.user_id, &u.scoring_items(&self.data.vocab), self.base, &self.base_hash, pool, cfg)
        })
    }

    pub fn ensure_oppu(&mut self) -> Result<()> {
        let missing: Vec<&UserRecord> = self.targets()?.into_iter().filter(|u| !self.oppu.contains_key(&u.user_id)).collect();
        let ad = self.cfg.adapter_train();
        let trained = self.par_map(&missing, |u| {
            Ok((u.user_id, train_user_adapter(self.base, u, &self.data.vocab, &ad)?))
        })?;
        self.oppu.extend(trained);
        Ok(())
    }

    /// Target models from recipes; no optimizer step or tape is allowed.
    pub fn recipe_models(&self, pool: &PiecePool, recipes: &[Recipe]) -> Result<Vec<BaseModel>> {
        let start = Counters::now();
        let models = recipes
            .iter()
            .map(|r| self.base.merge_delta(&materialize(r, pool)?))
            .collect::<Result<Vec<_>>>()?;
        let used = start.since();
        if used != Counters::default() {
            return Err(Error::Contract("recipe materialization trained something".into()));
        }
        Ok(models)
    }

    fn oppu_models(&self) -> Result<Vec<BaseModel>> {
        self.targets()?
            .iter()
            .map(|u| {
                let ad = self
                    .oppu
                    .get(&u.user_id)
                    .ok_or_else(|| Error::invalid(format!("no oracle adapter for user {}", u.user_id)))?;
                self.base.merge_adapter(ad)
            })
            .collect()
    }

    fn peft_retrieval_models(&self, sharer_ids: &[u32]) -> Result<Vec<BaseModel>> {
        let mut whole = Vec::with_capacity(sharer_ids.len());
        for &id in sharer_ids {
            let art = self
                .sharers
                .get(&id)
                .ok_or_else(|| Error::invalid(format!("sharer {id} has not been trained")))?;
            whole.push((id, self.candidate(id)?.history_embedding.clone(), DenseDelta::from_adapter(&art.adapter)?));
        }
        let refs: Vec<(u32, &[f32], &DenseDelta<f32>)> = whole.iter().map(|(id, e, d)| (*id, e.as_slice(), d)).collect();
        let targets = self.targets()?;
        self.par_map(&targets, |u| {
            let e = embed_user(self.base, u, &self.data.vocab)?;
            let (delta, _) = peft_retrieval_baseline(&e.vector, &refs, self.cfg.eval.peft_k)?;
            self.base.merge_delta(&delta)
        })
    }

    fn evaluate(&self, users: &[&UserRecord], models: &[&BaseModel], retrieve: usize) -> Result<Evaluation> {
        let runs: Vec<(&UserRecord, &BaseModel)> = users.iter().copied().zip(models.iter().copied()).collect();
        let preds = self.par_map(&runs, |(u, m)| predict(m, u, &self.cfg.task, &self.data.vocab, retrieve))?;
        Ok(score_predictions(users, preds, self.cfg.task.kind))
    }

    fn row(&self, sweep: &str, point: impl Into<String>, method: &str, e: &Evaluation) -> ResultRow {
        ResultRow {
            sweep: sweep.into(),
            point: point.into(),
            task: self.cfg.task.kind.name().into(),
            method: method.into(),
            metrics: e.aggregate.clone(),
        }
    }

    /// The six-method comparison on all targets.
    pub fn run_matrix(&mut self, pool: &PiecePool, recipes: &[Recipe]) -> Result<Vec<ResultRow>> {
        self.ensure_oppu()?;
        let targets = self.targets()?;
        let sharer_ids: Vec<u32> = pool.sharers().iter().map(|s| s.id).collect();
        let base_models: Vec<&BaseModel> = targets.iter().map(|_| self.base).collect();
        let pcs = self.recipe_models(pool, recipes)?;
        let peft = self.peft_retrieval_models(&sharer_ids)?;
        let oppu = self.oppu_models()?;
        let m = self.cfg.eval.retrieve;
        let runs: [(&str, Vec<&BaseModel>, usize); 6] = [
            (methods::NON_PERSONALIZED, base_models.clone(), 0),
            (methods::RETRIEVAL, base_models, m),
            (methods::PEFT_RETRIEVAL, peft.iter().collect(), 0),
            (methods::PER_PCS, pcs.iter().collect(), 0),
            (methods::PER_PCS_RETRIEVAL, pcs.iter().collect(), m),
            (methods::OPPU, oppu.iter().collect(), 0),
        ];
        runs.iter()
            .map(|(name, models, r)| Ok(self.row("matrix", "default", name, &self.evaluate(&targets, models, *r)?)))
            .collect()
    }

    fn per_pcs_row(&self, sweep: &str, point: String, pool: &PiecePool, cfg: &AssemblyConfig) -> Result<ResultRow> {
        let recipes: Vec<Recipe> = self.assemble_targets(pool, cfg)?.into_iter().map(|a| a.recipe).collect();
        let models = self.recipe_models(pool, &recipes)?;
        let targets = self.targets()?;
        let e = self.evaluate(&targets, &models.iter().collect::<Vec<_>>(), 0)?;
        Ok(self.row(sweep, point, methods::PER_PCS, &e))
    }

    /// Sharer count, selection strategy, share ratio, activity level and
    /// assembly ablations. `pool` and `recipes` are the default run's.
    pub fn run_sweeps(&mut self, pool: &PiecePool, recipes: &[Recipe]) -> Result<Vec<ResultRow>> {
        let cfg = self.cfg;
        let s = &cfg.sharing;
        let default_asm = cfg.assembly_config(cfg.assembly.mode);
        let mut rows = Vec::new();

        for &n in &cfg.sweeps.sharer_counts {
            if n > self.candidates.len() {
                continue;
            }
            let ids = self.select(n, s.strategy)?.sharers();
            self.ensure_sharers(&ids)?;
            let p = self.build_pool(&ids, s.share_ratio)?;
            rows.push(self.per_pcs_row("sharer-count", n.to_string(), &p, &default_asm)?);
        }

        for &st in &cfg.sweeps.strategies {
            let ids = self.select(s.num_sharers, st)?.sharers();
            self.ensure_sharers(&ids)?;
            let p = self.build_pool(&ids, s.share_ratio)?;
            rows.push(self.per_pcs_row("strategy", st.name().to_string(), &p, &default_asm)?);
        }

        let default_ids: Vec<u32> = pool.sharers().iter().map(|x| x.id).collect();
        for &r in &cfg.sweeps.share_ratios {
            let p = self.build_pool(&default_ids, r)?;
            rows.push(self.per_pcs_row("share-ratio", format!("{r:.1}"), &p, &default_asm)?);
        }

        self.ensure_oppu()?;
        let targets = self.targets()?;
        let pcs = self.recipe_models(pool, recipes)?;
        let oppu = self.oppu_models()?;
        let edges = &cfg.sweeps.activity_edges;
        for (b, label) in bucket_labels(edges, cfg.task.min_history, cfg.task.max_history).into_iter().enumerate() {
            let idx: Vec<usize> = (0..targets.len()).filter(|&i| bucket_of(edges, targets[i].items.len()) == b).collect();
            if idx.is_empty() {
                continue;
            }
            let users: Vec<&UserRecord> = idx.iter().map(|&i| targets[i]).collect();
            for (name, models) in [
                (methods::NON_PERSONALIZED, idx.iter().map(|_| self.base).collect::<Vec<_>>()),
                (methods::PER_PCS, idx.iter().map(|&i| &pcs[i]).collect()),
                (methods::OPPU, idx.iter().map(|&i| &oppu[i]).collect()),
            ] {
                let e = self.evaluate(&users, &models, 0)?;
                rows.push(self.row("activity", label.clone(), name, &e));
            }
        }

        let modes = [
            ("full", cfg.assembly.mode),
            ("w/o-attention", SelectionMode::Uniform),
            ("topp-agg", SelectionMode::ToppAgg { p: cfg.sweeps.top_p }),
            ("topk-sampling", SelectionMode::TopkSample { seed: 0 }),
        ];
        for (label, mode) in modes {
            rows.push(self.per_pcs_row("ablation", label.to_string(), pool, &cfg.assembly_config(mode))?);
        }
        Ok(rows)
    }

    /// Single-threaded timing of oracle training against assembly.
    pub fn measure_efficiency(&self, pool: &PiecePool) -> Result<EfficiencyReport> {
        let targets = self.targets()?;
        let n = self.cfg.sweeps.efficiency_users.clamp(1, targets.len());
        let acfg = self.cfg.assembly_config(self.cfg.assembly.mode);
        let ad = self.cfg.adapter_train();
        let mut users = Vec::with_capacity(n);
        let mut recipe_bytes = 0usize;
        let mut steps = 0;
        let mut tapes = 0;
        for u in &targets[..n] {
            let items = u.scoring_items(&self.data.vocab);
            let start = Counters::now();
            let t = Instant::now();
            let asm = assemble(u.user_id, &items, self.base, &self.base_hash, pool, &acfg)?;
            let assemble_secs = t.elapsed().as_secs_f64();
            let used = start.since();
            steps += used.optimizer_steps;
            tapes += used.tapes;
            recipe_bytes += asm.recipe.to_compact()?.len();
            let t = Instant::now();
            train_user_adapter(self.base, u, &self.data.vocab, &ad)?;
            users.push(UserTiming {
                user_id: u.user_id,
                history_size: u.items.len(),
                train_secs: t.elapsed().as_secs_f64(),
                assemble_secs,
            });
        }
        let mean = |f: fn(&UserTiming) -> f64| users.iter().map(f).sum::<f64>() / n as f64;
        let mean_train_secs = mean(|u| u.train_secs);
        let mean_assemble_secs = mean(|u| u.assemble_secs);
        let adapter_bytes = Adapter::<f32>::zeros(self.base.slots(), self.base.config.rank).param_count() * 4;
        let recipe_bytes = recipe_bytes as f64 / n as f64;
        let l = self.base.slots().len();
        Ok(EfficiencyReport {
            users,
            mean_train_secs,
            mean_assemble_secs,
            time_ratio: mean_train_secs / mean_assemble_secs,
            optimizer_steps_during_assembly: steps,
            tapes_during_assembly: tapes,
            adapter_bytes,
            recipe_bytes,
            closed_form_recipe_bytes: l * self.cfg.assembly.k * 8 + compact_header_bytes(l),
            storage_ratio: adapter_bytes as f64 / recipe_bytes,
            reference_storage_ratio: REFERENCE_STORAGE_RATIO,
        })
    }
}

/// Bucket index for a history size given upper-exclusive edges.
pub fn bucket_of(edges: &[usize], size: usize) -> usize {
    edges.iter().take_while(|&&e| size >= e).count()
}

pub fn bucket_labels(edges: &[usize], min: usize, max: usize) -> Vec<String> {
    let mut bounds = vec![min];
    bounds.extend(edges.iter().copied());
    (0..=edges.len())
        .map(|i| {
            let lo = bounds[i];
            if i < edges.len() {
                format!("{lo}-{}", edges[i] - 1)
            } else {
                format!("{lo}-{max}")
            }
        })
        .collect()
}
