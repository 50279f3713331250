//! Stage runner behind the `perpcs` binary.

pub mod config;
pub mod error;
pub mod manifest;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use perpcs::assembler::AssemblyConfig;
use perpcs::bench::experiment::{plot_series, to_csv, EfficiencyReport, ExperimentConfig, ResultRow, Workbench};
use perpcs::bench::synth::{generate_corpus, Prototype, SyntheticCorpus};
use perpcs::container::sha256_hex;
use perpcs::model::{Adapter, BaseModel, Vocab};
use perpcs::pipeline::{
    adapt_base, train_gates, train_user_adapter, ClusterResult, Corpus, SharerArtifacts,
    SplitManifest, UserRecord,
};
use perpcs::pool::{decompose, GateVector, PiecePool, Recipe};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use config::RunConfig;
pub use error::{exit, exit_code, CliError};
pub use manifest::ArtifactManifest;

pub const STAGES: [&str; 9] = [
    "gen-data",
    "adapt-base",
    "train-sharers",
    "train-gates",
    "build-pool",
    "assemble",
    "evaluate",
    "sweep",
    "bench",
];

#[derive(Debug, Clone)]
pub struct Options {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub force: bool,
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

/// Results gathered by `run-all`.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub matrix: Vec<ResultRow>,
    pub sweeps: Vec<ResultRow>,
    pub efficiency: EfficiencyReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GateFile {
    sharer: u32,
    model_hash: String,
    gates: Vec<Vec<f32>>,
}

fn uname(prefix: &str, id: u32) -> String {
    format!("{prefix}/u{id:05}")
}

fn jsonl_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(v)? + "\n").into_bytes())
}

pub struct Runner {
    opts: Options,
    exp: ExperimentConfig,
    manifest: ArtifactManifest,
}

impl Runner {
    pub fn new(opts: Options) -> Result<Self> {
        opts.config.validate()?;
        std::fs::create_dir_all(&opts.out_dir)
            .with_context(|| format!("creating {}", opts.out_dir.display()))?;
        let manifest = ArtifactManifest::load_or_default(&opts.out_dir)?;
        let exp = opts.config.experiment();
        Ok(Self { opts, exp, manifest })
    }

    pub fn out_dir(&self) -> &Path {
        &self.opts.out_dir
    }

    pub fn manifest(&self) -> &ArtifactManifest {
        &self.manifest
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.opts.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn key(&self, stage: &str, cfg: serde_json::Value, inputs: &[String]) -> String {
        let hashes: Vec<(&String, Option<&String>)> =
            inputs.iter().map(|n| (n, self.manifest.artifacts.get(n).map(|a| &a.hash))).collect();
        let v = json!({ "stage": stage, "config": cfg, "inputs": hashes });
        sha256_hex(v.to_string().as_bytes())
    }

    fn should_run(&self, stage: &str, key: &str) -> bool {
        if !self.opts.force && self.manifest.is_current(&self.opts.out_dir, stage, key) {
            self.say(format!("{stage}: up to date"));
            return false;
        }
        true
    }

    fn put(&mut self, name: &str, path: &str, kind: &str, bytes: &[u8], stage: &str, key: &str) -> Result<()> {
        self.manifest.put(&self.opts.out_dir, name, path, kind, bytes, stage, key)
    }

    fn finish(&mut self, stage: &str, key: &str, outputs: Vec<String>) -> Result<Outcome> {
        self.manifest.finish_stage(stage, key, outputs);
        self.manifest.save(&self.opts.out_dir)?;
        Ok(Outcome::Ran)
    }

    fn get(&self, name: &str, stage: &'static str) -> Result<Vec<u8>> {
        self.manifest.get(&self.opts.out_dir, name, stage)
    }

    fn threads(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.opts.workers.max(1))
            .build()
            .context("building worker pool")
    }

    // ---- loaders ----

    pub fn load_data(&self) -> Result<SyntheticCorpus> {
        let text = String::from_utf8(self.get("corpus", "gen-data")?)?;
        let users = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str::<UserRecord>)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let split: SplitManifest = serde_json::from_slice(&self.get("split", "gen-data")?)?;
        let vocab = Vocab::from_json(std::str::from_utf8(&self.get("vocab", "gen-data")?)?)?;
        let prototypes: Vec<Prototype> = serde_json::from_slice(&self.get("prototypes", "gen-data")?)?;
        Ok(SyntheticCorpus {
            corpus: Corpus::new(users)?,
            split,
            vocab,
            prototypes,
        })
    }

    pub fn load_base(&self) -> Result<(BaseModel, String)> {
        let base = BaseModel::from_bytes(&self.get("base", "adapt-base")?)?;
        let hash = base.hash()?;
        Ok((base, hash))
    }

    fn load_selection(&self) -> Result<ClusterResult> {
        Ok(serde_json::from_slice(&self.get("selection", "train-sharers")?)?)
    }

    fn load_adapter(&self, name: &str, stage: &'static str, base_hash: &str) -> Result<Adapter<f32>> {
        let (adapter, model_hash) = Adapter::from_bytes(&self.get(name, stage)?)?;
        if model_hash != base_hash {
            return Err(perpcs::Error::HashMismatch {
                expected: base_hash.to_string(),
                found: model_hash,
            }
            .into());
        }
        Ok(adapter)
    }

    fn load_sharer(&self, id: u32, base: &BaseModel, base_hash: &str) -> Result<SharerArtifacts> {
        let adapter = self.load_adapter(&uname("adapter", id), "train-sharers", base_hash)?;
        let gf: GateFile = serde_json::from_slice(&self.get(&uname("gates", id), "train-gates")?)?;
        if gf.model_hash != base_hash {
            return Err(perpcs::Error::HashMismatch {
                expected: base_hash.to_string(),
                found: gf.model_hash,
            }
            .into());
        }
        let pieces = decompose(&adapter, id, base.slots())?;
        let gates = gf.gates.into_iter().enumerate().map(|(l, g)| GateVector::new(id, l, g)).collect();
        Ok(SharerArtifacts {
            user_id: id,
            adapter,
            pieces,
            gates,
        })
    }

    /// Key tying sweep-trained sharers to the settings that produced them.
    fn sharer_cache_key(&self, base_hash: &str) -> String {
        let e = &self.exp;
        let v = json!({ "seed": e.seed, "adapter": e.adapter, "gate": e.gate, "base": base_hash });
        sha256_hex(v.to_string().as_bytes())
    }

    /// Pool sharers plus sweep-trained sharers from a matching earlier run.
    fn load_sharer_cache(&self, wb: &mut Workbench<'_>, pool: &PiecePool) -> Result<()> {
        for s in pool.sharers() {
            let a = self.load_sharer(s.id, wb.base, &wb.base_hash)?;
            wb.sharers.insert(s.id, a);
        }
        let cache_key = self.sharer_cache_key(&wb.base_hash);
        for name in self.manifest.of_kind("gates") {
            let rec = &self.manifest.artifacts[&name];
            if rec.command != "sweep" || rec.config_hash != cache_key {
                continue;
            }
            let id: u32 = name.trim_start_matches("gates/u").parse()?;
            if !wb.sharers.contains_key(&id) {
                let s = self.load_sharer(id, wb.base, &wb.base_hash)?;
                wb.sharers.insert(id, s);
            }
        }
        Ok(())
    }

    fn save_new_sharers(&mut self, wb: &Workbench<'_>, pool: &PiecePool) -> Result<Vec<String>> {
        let key = self.sharer_cache_key(&wb.base_hash);
        let key = key.as_str();
        let stage = "sweep";
        let mut outs = Vec::new();
        for (id, s) in &wb.sharers {
            let (an, gn) = (uname("adapter", *id), uname("gates", *id));
            if pool.sharer(*id).is_some() {
                continue;
            }
            let (bytes, _) = s.adapter.to_bytes(&wb.base_hash)?;
            self.put(&an, &format!("sharers/u{id:05}.ppad"), "sharer-adapter", &bytes, stage, key)?;
            let gf = GateFile {
                sharer: *id,
                model_hash: wb.base_hash.clone(),
                gates: s.gates.iter().map(|g| g.raw().to_vec()).collect(),
            };
            self.put(&gn, &format!("gates/u{id:05}.json"), "gates", &pretty(&gf)?, stage, key)?;
            outs.push(an);
            outs.push(gn);
        }
        Ok(outs)
    }

    pub fn load_pool(&self, base_hash: &str) -> Result<PiecePool> {
        let pool = PiecePool::from_bytes(&self.get("pool", "build-pool")?)?;
        if pool.model_hash() != base_hash {
            return Err(perpcs::Error::HashMismatch {
                expected: base_hash.to_string(),
                found: pool.model_hash().to_string(),
            }
            .into());
        }
        Ok(pool)
    }

    pub fn load_recipe(&self, id: u32) -> Result<Recipe> {
        Ok(Recipe::from_json(std::str::from_utf8(&self.get(&uname("recipe", id), "assemble")?)?)?)
    }

    fn load_recipes(&self, data: &SyntheticCorpus) -> Result<Vec<Recipe>> {
        data.split.targets.iter().map(|&id| self.load_recipe(id)).collect()
    }

    fn recipe_inputs(&self, data: &SyntheticCorpus) -> Vec<String> {
        data.split.targets.iter().map(|&id| uname("recipe", id)).collect()
    }

    // ---- stages ----

    pub fn gen_data(&mut self) -> Result<Outcome> {
        const S: &str = "gen-data";
        let e = &self.exp;
        let key = self.key(S, json!({ "seed": e.seed, "task": e.task, "splits": e.splits }), &[]);
        if !self.should_run(S, &key) {
            return Ok(Outcome::Skipped);
        }
        let syn = generate_corpus(&e.task, &e.splits, e.corpus_seed())?;
        self.put("corpus", "data/corpus.jsonl", "corpus", &jsonl_bytes(&syn.corpus.users)?, S, &key)?;
        self.put("split", "data/split.json", "split", &pretty(&syn.split)?, S, &key)?;
        self.put("vocab", "data/vocab.json", "vocab", &pretty(&syn.vocab)?, S, &key)?;
        self.put("prototypes", "data/prototypes.json", "prototypes", &pretty(&syn.prototypes)?, S, &key)?;
        self.say(format!(
            "{S}: {} users ({} base, {} sharer candidates, {} targets), vocabulary {}",
            syn.corpus.users.len(),
            syn.split.base.len(),
            syn.split.sharer_candidates.len(),
            syn.split.targets.len(),
            syn.vocab.len()
        ));
        let outs = ["corpus", "split", "vocab", "prototypes"].map(String::from).to_vec();
        self.finish(S, &key, outs)
    }

    pub fn adapt_base(&mut self) -> Result<Outcome> {
        const S: &str = "adapt-base";
        let e = &self.exp;
        let inputs = ["corpus", "split", "vocab"].map(String::from).to_vec();
        let key = self.key(S, json!({ "seed": e.seed, "model": e.model, "base": e.base }), &inputs);
        if !self.should_run(S, &key) {
            return Ok(Outcome::Skipped);
        }
        let data = self.load_data()?;
        let model = BaseModel::new(e.model_config(data.vocab.len()))?;
        let users = data.corpus.select(&data.split.base)?;
        let (base, report) = adapt_base(&model, &users, &data.split, &data.vocab, &e.base_train())?;
        let (bytes, _) = base.to_bytes()?;
        self.put("base", "base/base.ppmd", "base-model", &bytes, S, &key)?;
        self.put("base-report", "base/report.json", "report", &pretty(&report)?, S, &key)?;
        self.say(format!(
            "{S}: held-out task loss {:.4} -> {:.4} after the merged task adapter",
            report.heldout_before_adapt, report.heldout_after_adapt
        ));
        self.finish(S, &key, vec!["base".into(), "base-report".into()])
    }

    pub fn train_sharers(&mut self) -> Result<Outcome> {
        const S: &str = "train-sharers";
        let e = &self.exp;
        let inputs = vec!["base".to_string(), "corpus".to_string(), "split".to_string()];
        let key = self.key(
            S,
            json!({ "seed": e.seed, "adapter": e.adapter, "num_sharers": e.sharing.num_sharers, "strategy": e.sharing.strategy }),
            &inputs,
        );
        if !self.should_run(S, &key) {
            return Ok(Outcome::Skipped);
        }
        let data = self.load_data()?;
        let (base, base_hash) = self.load_base()?;
        let exp = self.exp.clone();
        let wb = Workbench::new(&exp, &data, &base, self.opts.workers)?;
        let sel = wb.select(exp.sharing.num_sharers, exp.sharing.strategy)?;
        let ids = sel.sharers();
        let users: Vec<&UserRecord> = data.corpus.select(&ids)?;
        let cfg = exp.adapter_train();
        let adapters = wb.par_map(&users, |u| train_user_adapter(&base, u, &data.vocab, &cfg))?;
        let mut outs = vec!["selection".to_string()];
        self.put("selection", "sharers/selection.json", "selection", &pretty(&sel)?, S, &key)?;
        for (id, a) in ids.iter().zip(&adapters) {
            let (bytes, _) = a.to_bytes(&base_hash)?;
            let name = uname("adapter", *id);
            self.put(&name, &format!("sharers/u{id:05}.ppad"), "sharer-adapter", &bytes, S, &key)?;
            outs.push(name);
        }
        self.say(format!("{S}: {} sharers selected by {}", ids.len(), exp.sharing.strategy.name()));
        self.finish(S, &key, outs)
    }

    pub fn train_gates(&mut self) -> Result<Outcome> {
        const S: &str = "train-gates";
        let sel = self.load_selection()?;
        let ids = sel.sharers();
        let mut inputs = vec!["base".to_string(), "corpus".to_string(), "selection".to_string()];
        inputs.extend(ids.iter().map(|&id| uname("adapter", id)));
        let key = self.key(S, json!({ "seed": self.exp.seed, "gate": self.exp.gate }), &inputs);
        if !self.should_run(S, &key) {
            return Ok(Outcome::Skipped);
        }
        let data = self.load_data()?;
        let (base, base_hash) = self.load_base()?;
        let cfg = self.exp.gate_train();
        let mut jobs = Vec::with_capacity(ids.len());
        for &id in &ids {
            let adapter = self.load_adapter(&uname("adapter", id), "train-sharers", &base_hash)?;
            jobs.push((id, decompose(&adapter, id, base.slots())?));
        }
        let threads = self.threads()?;
        let gates: Vec<Vec<GateVector<f32>>> = threads.install(|| {
            use rayon::prelude::*;
            jobs.par_iter()
                .map(|(id, pieces)| -> Result<_> { Ok(train_gates(&base, pieces, data.corpus.user(*id)?, &data.vocab, &cfg)?) })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut outs = Vec::new();
        for ((id, _), g) in jobs.iter().zip(gates) {
            let gf = GateFile {
                sharer: *id,
                model_hash: base_hash.clone(),
                gates: g.iter().map(|v| v.raw().to_vec()).collect(),
            };
            let name = uname("gates", *id);
            self.put(&name, &format!("gates/u{id:05}.json"), "gates", &pretty(&gf)?, S, &key)?;
            outs.push(name);
        }
        self.say(format!("{S}: gates trained for {} sharers", ids.len()));
        self.finish(S, &key, outs)
    }

    pub fn build_pool(&mut self) -> Result<Outcome> {
        const S: &str = "build-pool";
        let sel = self.load_selection()?;
        let ids = sel.sharers();
        let mut inputs = vec!["base".to_string(), "selection".to_string()];
        inputs.extend(ids.iter().flat_map(|&id| [uname("adapter", id), uname("gates", id)]));
        let key = self.key(S, json!({ "seed": self.exp.seed, "share_ratio": self.exp.sharing.share_ratio }), &inputs);
        if !self.should_run(S, &key) {
            return Ok(Outcome::Skipped);
        }
        let data = self.load_data()?;
        let (base, base_hash) = self.load_base()?;
        let exp = self.exp.clone();
        let mut wb = Workbench::new(&exp, &data, &base, self.opts.workers)?;
        for &id in &ids {
            let s = self.load_sharer(id, &base, &base_hash)?;
            wb.sharers.insert(id, s);
        }
        let pool = wb.build_pool(&ids, exp.sharing.share_ratio)?;
        pool.verify()?;
        let pieces: usize = (0..base.slots().len()).map(|l| pool.members(l).count()).sum();
        self.put("pool", "pool/pool.ppcs", "pool", pool.to_bytes(), S, &key)?;
        self.say(format!("{S}: {} sharers, {pieces} pieces, hash {}", ids.len(), &pool.hash()[..12]));
        self.finish(S, &key, vec!["pool".into()])
    }

    pub fn assemble(&mut self) -> Result<Outcome> {
        const S: &str = "assemble";
        let inputs = ["base", "pool", "corpus", "split"].map(String::from).to_vec();
        let key = self.key(S, json!({ "seed": self.exp.seed, "assembly": self.exp.assembly }), &inputs);
        if !self.should_run(S, &key) {
            return Ok(Outcome::Skipped);
        }
        let data = self.load_data()?;
        let (base, base_hash) = self.load_base()?;
        let pool = self.load_pool(&base_hash)?;
        let exp = self.exp.clone();
        let wb = Workbench::new(&exp, &data, &base, self.opts.workers)?;
        let acfg: AssemblyConfig = exp.assembly_config(exp.assembly.mode);
        let assemblies = wb.assemble_targets(&pool, &acfg)?;
        let mut outs = Vec::new();
        for a in &assemblies {
            a.recipe.validate(&pool).map_err(|e| CliError::Postcondition(e.to_string()))?;
            let id = a.recipe.target_user;
            for (prefix, path, kind, bytes) in [
                ("recipe", format!("recipes/u{id:05}.json"), "recipe", (a.recipe.to_json()? + "\n").into_bytes()),
                ("recipe-bin", format!("recipes/u{id:05}.bin"), "recipe-compact", a.recipe.to_compact()?),
                ("scores", format!("recipes/u{id:05}.scores.json"), "score-tables", pretty(&a.score_tables)?),
            ] {
                let name = uname(prefix, id);
                self.put(&name, &path, kind, &bytes, S, &key)?;
                outs.push(name);
            }
        }
        self.say(format!("{S}: {} recipes", assemblies.len()));
        self.finish(S, &key, outs)
    }

    fn oppu_cache(&self, wb: &mut Workbench<'_>) -> Result<()> {
        for id in wb.data.split.targets.clone() {
            let name = uname("oppu", id);
            if self.manifest.has(&name) {
                let a = self.load_adapter(&name, "evaluate", &wb.base_hash)?;
                wb.oppu.insert(id, a);
            }
        }
        Ok(())
    }

    fn save_oppu(&mut self, wb: &Workbench<'_>, stage: &str, key: &str) -> Result<Vec<String>> {
        let mut outs = Vec::new();
        for (id, a) in &wb.oppu {
            let name = uname("oppu", *id);
            let (bytes, _) = a.to_bytes(&wb.base_hash)?;
            self.put(&name, &format!("oppu/u{id:05}.ppad"), "oracle-adapter", &bytes, stage, key)?;
            outs.push(name);
        }
        Ok(outs)
    }

    pub fn evaluate(&mut self) -> Result<Outcome> {
        const S: &str = "evaluate";
        let data = self.load_data()?;
        let mut inputs = ["base", "pool", "corpus", "split"].map(String::from).to_vec();
        inputs.extend(self.recipe_inputs(&data));
        let e = &self.exp;
        let key = self.key(S, json!({ "seed": e.seed, "eval": e.eval, "adapter": e.adapter }), &inputs);
        if !self.should_run(S, &key) {
            return Ok(Outcome::Skipped);
        }
        let (base, base_hash) = self.load_base()?;
        let pool = self.load_pool(&base_hash)?;
        let recipes = self.load_recipes(&data)?;
        let exp = self.exp.clone();
        let mut wb = Workbench::new(&exp, &data, &base, self.opts.workers)?;
        for s in pool.sharers() {
            let a = self.load_sharer(s.id, &base, &base_hash)?;
            wb.sharers.insert(s.id, a);
        }
        let rows = wb.run_matrix(&pool, &recipes)?;
        check_rows(&rows)?;
        let mut outs = self.save_oppu(&wb, S, &key)?;
        self.put("results", "reports/results.csv", "csv", to_csv(&rows).as_bytes(), S, &key)?;
        self.put("matrix", "reports/matrix.json", "report", &pretty(&rows)?, S, &key)?;
        outs.extend(["results".to_string(), "matrix".to_string()]);
        self.say(format!("{S}:\n{}", table(&rows)));
        self.finish(S, &key, outs)
    }

    pub fn sweep(&mut self) -> Result<Outcome> {
        const S: &str = "sweep";
        let data = self.load_data()?;
        let mut inputs = ["base", "pool", "corpus", "split"].map(String::from).to_vec();
        inputs.extend(self.recipe_inputs(&data));
        let e = &self.exp;
        let key = self.key(
            S,
            json!({ "seed": e.seed, "sweeps": e.sweeps, "sharing": e.sharing, "assembly": e.assembly,
                    "adapter": e.adapter, "gate": e.gate, "eval": e.eval }),
            &inputs,
        );
        if !self.should_run(S, &key) {
            return Ok(Outcome::Skipped);
        }
        let (base, base_hash) = self.load_base()?;
        let pool = self.load_pool(&base_hash)?;
        let recipes = self.load_recipes(&data)?;
        let exp = self.exp.clone();
        let mut wb = Workbench::new(&exp, &data, &base, self.opts.workers)?;
        self.load_sharer_cache(&mut wb, &pool)?;
        self.oppu_cache(&mut wb)?;
        let rows = wb.run_sweeps(&pool, &recipes)?;
        check_rows(&rows)?;
        let mut outs = self.save_new_sharers(&wb, &pool)?;
        self.put("sweeps", "reports/sweeps.csv", "csv", to_csv(&rows).as_bytes(), S, &key)?;
        self.put("sweep-rows", "reports/sweeps.json", "report", &pretty(&rows)?, S, &key)?;
        self.put("plot-data", "reports/plot_data.json", "plot-data", &pretty(&plot_series(&rows))?, S, &key)?;
        outs.extend(["sweeps", "sweep-rows", "plot-data"].map(String::from));
        self.say(format!("{S}:\n{}", table(&rows)));
        self.finish(S, &key, outs)
    }

    pub fn bench(&mut self) -> Result<Outcome> {
        const S: &str = "bench";
        let inputs = ["base", "pool", "corpus", "split"].map(String::from).to_vec();
        let e = &self.exp;
        let key = self.key(
            S,
            json!({ "seed": e.seed, "efficiency_users": e.sweeps.efficiency_users, "assembly": e.assembly, "adapter": e.adapter }),
            &inputs,
        );
        if !self.should_run(S, &key) {
            return Ok(Outcome::Skipped);
        }
        let data = self.load_data()?;
        let (base, base_hash) = self.load_base()?;
        let pool = self.load_pool(&base_hash)?;
        let exp = self.exp.clone();
        let wb = Workbench::new(&exp, &data, &base, 1)?;
        let report = wb.measure_efficiency(&pool)?;
        if report.optimizer_steps_during_assembly != 0 || report.tapes_during_assembly != 0 {
            return Err(CliError::Postcondition("assembly recorded training activity".into()).into());
        }
        self.put("efficiency", "reports/efficiency.json", "report", &pretty(&report)?, S, &key)?;
        self.say(format!("{S}: {}", report.summary()));
        self.finish(S, &key, vec!["efficiency".into()])
    }

    pub fn run_stage(&mut self, stage: &str) -> Result<Outcome> {
        match stage {
            "gen-data" => self.gen_data(),
            "adapt-base" => self.adapt_base(),
            "train-sharers" => self.train_sharers(),
            "train-gates" => self.train_gates(),
            "build-pool" => self.build_pool(),
            "assemble" => self.assemble(),
            "evaluate" => self.evaluate(),
            "sweep" => self.sweep(),
            "bench" => self.bench(),
            other => Err(CliError::Config(format!("unknown stage {other}")).into()),
        }
    }

    pub fn run_all(&mut self) -> Result<RunSummary> {
        for s in STAGES {
            self.run_stage(s)?;
        }
        self.summary()
    }

    /// Reports written by the evaluate, sweep and bench stages.
    pub fn summary(&self) -> Result<RunSummary> {
        Ok(RunSummary {
            matrix: serde_json::from_slice(&self.get("matrix", "evaluate")?)?,
            sweeps: serde_json::from_slice(&self.get("sweep-rows", "sweep")?)?,
            efficiency: serde_json::from_slice(&self.get("efficiency", "bench")?)?,
        })
    }

    /// Per-slot `(sharer, weight)` listing for one target.
    pub fn inspect_recipe(&self, user: u32) -> Result<String> {
        let recipe = self.load_recipe(user)?;
        let (base, _) = self.load_base()?;
        let mut out = String::new();
        let _ = writeln!(out, "target {}  pool {}", recipe.target_user, &recipe.pool_hash[..16]);
        let _ = writeln!(out, "{:>4}  {:>5}  {:<6}  entries", "slot", "layer", "role");
        for (slot, s) in base.slots().iter().zip(&recipe.slots) {
            let entries: Vec<String> = s.entries.iter().map(|e| format!("{}:{:.4}", e.sharer, e.weight)).collect();
            let shown = if entries.is_empty() { "-".to_string() } else { entries.join("  ") };
            let _ = writeln!(out, "{:>4}  {:>5}  {:<6}  {shown}", s.l, slot.layer, slot.role.name());
        }
        let distinct: BTreeSet<u32> = recipe.slots.iter().flat_map(|s| s.entries.iter().map(|e| e.sharer)).collect();
        let _ = writeln!(
            out,
            "{} entries from {} sharers, {} bytes compact",
            recipe.entry_count(),
            distinct.len(),
            recipe.to_compact()?.len()
        );
        Ok(out)
    }
}

fn check_rows(rows: &[ResultRow]) -> Result<()> {
    for r in rows {
        let m = &r.metrics;
        let unit = [m.accuracy, m.macro_f1, m.rouge_1, m.rouge_l];
        let ok = unit.iter().flatten().all(|v| (0.0..=1.0).contains(v))
            && match (m.mae, m.rmse) {
                (Some(a), Some(b)) => a >= 0.0 && b + 1e-12 >= a,
                _ => true,
            };
        if !ok {
            return Err(CliError::Postcondition(format!("metrics out of range for {} {}", r.sweep, r.method)).into());
        }
    }
    Ok(())
}

/// Aligned text table of result rows.
pub fn table(rows: &[ResultRow]) -> String {
    let f = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    let mut out = format!(
        "{:<13} {:<16} {:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "sweep", "point", "method", "acc", "f1", "mae", "rmse", "r1", "rl"
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{:<13} {:<16} {:<18} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            r.sweep,
            r.point,
            r.method,
            f(m.accuracy),
            f(m.macro_f1),
            f(m.mae),
            f(m.rmse),
            f(m.rouge_1),
            f(m.rouge_l)
        );
    }
    out
}
