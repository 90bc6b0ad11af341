//! Stage-by-stage execution against an output directory, and the end-to-end
//! run that chains every stage and writes a MANIFEST.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendFactory, Client, CostLedger, GoldTable, LedgerSnapshot};
use crate::config::{EmbeddingKind, RunConfig, Seeds};
use crate::dataset::{load_dataset, sample_low_resource, write_dataset, DatasetSplit, LoadOptions, SplitName};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_atomic, write_json_pretty, write_jsonl};
use crate::metrics::{breakdown_by_category, load_turn_records, EvalMode, SynonymTable, TurnRecord};
use crate::pipeline::{
    collect_demonstrations, export_training_sequences, first_pass_dialogue, map_dialogues,
    second_pass_dialogue, turn_records, CollectedTurn, Collection, ExportSummary, PredictionRecord,
    Settings,
};
use crate::prompt::PromptFamily;
use crate::report::{format_report, CostSummary, ReportFormat, RunReport};
use crate::retriever::{
    build_index, export_retriever_pairs, payloads_from_split, EmbeddingBackend, HashEmbedding,
    HttpEmbedding, Index,
};
use crate::schema::SchemaTable;
use crate::state::Dialogue;

pub const TRAIN_POOL: &str = "train_pool.jsonl";
pub const INDEX: &str = "index.jsonl";
pub const COLLECTION: &str = "collection.jsonl";
pub const TRAIN_SEQUENCES: &str = "train_sequences.jsonl";
pub const RETRIEVER_PAIRS: &str = "retriever_pairs.jsonl";
pub const FIRST_PASS: &str = "first_pass.jsonl";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const LEDGER: &str = "ledger.json";
pub const MANIFEST: &str = "MANIFEST.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageState {
    Completed,
    CompletedWithErrors,
    Failed,
    Interrupted,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub name: String,
    pub status: StageState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub style: PromptFamily,
    pub k: usize,
    pub width: usize,
    pub fraction: f64,
    pub seeds: Seeds,
    /// Previous state shown for the target turn while collecting hypotheses.
    pub collection_prev_state: String,
    /// Previous state shown for the target turn in the second pass.
    pub second_pass_prev_state: String,
    pub demo_ids: Vec<String>,
    pub stages: Vec<StageStatus>,
    pub complete: bool,
    pub failed_turns: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub export: Option<ExportSummary>,
    pub outputs: Vec<String>,
}

impl Manifest {
    fn new(cfg: &RunConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            style: cfg.style,
            k: cfg.k(),
            width: cfg.width(),
            fraction: cfg.fraction,
            seeds: cfg.seeds.clone(),
            collection_prev_state: "gold".into(),
            second_pass_prev_state: "corrected".into(),
            demo_ids: Vec::new(),
            stages: Vec::new(),
            complete: false,
            failed_turns: 0,
            export: None,
            outputs: Vec::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageStatus> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Shared state for stage commands: config, interrupt flag and cost ledger.
pub struct Session {
    pub cfg: RunConfig,
    pub settings: Settings,
    pub interrupt: Arc<AtomicBool>,
    pub ledger: Arc<CostLedger>,
}

impl Session {
    pub fn new(cfg: RunConfig) -> Self {
        Self {
            settings: Settings::from(&cfg),
            cfg,
            interrupt: Arc::new(AtomicBool::new(false)),
            ledger: CostLedger::new(),
        }
    }

    pub fn with_interrupt(mut self, flag: Arc<AtomicBool>) -> Self {
        self.interrupt = flag;
        self
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn interrupted(&self) -> bool {
        self.interrupt.load(Ordering::SeqCst)
    }

    pub fn schema(&self) -> Result<SchemaTable> {
        SchemaTable::load(&self.cfg.schema)
    }

    pub fn synonyms(&self) -> Result<SynonymTable> {
        match &self.cfg.synonyms {
            Some(p) => SynonymTable::load(p),
            None => Ok(SynonymTable::new()),
        }
    }

    fn load_split(&self, path: &Path, name: SplitName, schema: &SchemaTable) -> Result<DatasetSplit> {
        let opts = LoadOptions {
            name,
            strict_consistency: self.cfg.strict_consistency,
        };
        let loaded = load_dataset(path, schema, &opts)?;
        for w in &loaded.warnings {
            log::warn!("{}: {w}", path.display());
        }
        Ok(loaded.split)
    }

    pub fn train(&self, schema: &SchemaTable) -> Result<DatasetSplit> {
        self.load_split(&self.cfg.train, SplitName::Train, schema)
    }

    pub fn eval(&self, schema: &SchemaTable) -> Result<DatasetSplit> {
        self.load_split(&self.cfg.eval, SplitName::Test, schema)
    }

    pub fn sample_pool(&self, train: &DatasetSplit) -> Result<DatasetSplit> {
        sample_low_resource(train, self.cfg.fraction, self.cfg.seeds.split)
    }

    fn require(&self, stage: &str, file: &str, needs: &str) -> Result<PathBuf> {
        let path = self.out(file);
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::StageDependency {
                stage: stage.into(),
                what: path.display().to_string(),
                needs: needs.into(),
            })
        }
    }

    pub fn stored_pool(&self, stage: &str, schema: &SchemaTable) -> Result<DatasetSplit> {
        let path = self.require(stage, TRAIN_POOL, "split")?;
        self.load_split(&path, SplitName::Train, schema)
    }

    pub fn stored_index(&self, stage: &str, pool: &DatasetSplit) -> Result<Index> {
        let path = self.require(stage, INDEX, "index")?;
        Index::load(&path, pool, self.settings.width)
    }

    pub fn stored_collection(&self, stage: &str) -> Result<Collection> {
        let path = self.require(stage, COLLECTION, "collect")?;
        Ok(Collection::from_turns(read_jsonl::<CollectedTurn>(&path)?))
    }

    pub fn stored_records(&self, stage: &str, file: &str, needs: &str) -> Result<Vec<PredictionRecord>> {
        read_jsonl(&self.require(stage, file, needs)?)
    }

    pub fn embedder(&self) -> Result<Arc<dyn EmbeddingBackend>> {
        let spec = &self.cfg.backends.embedding;
        Ok(match spec.kind {
            EmbeddingKind::Hash => Arc::new(HashEmbedding::new(spec.dim, spec.seed)),
            EmbeddingKind::Http => {
                let url = spec
                    .url
                    .as_deref()
                    .ok_or_else(|| Error::Config("backends.embedding.url is required".into()))?;
                let key = match &spec.api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        Error::Config(format!("environment variable {var} (API key) is not set"))
                    })?),
                    None => None,
                };
                Arc::new(HttpEmbedding::new(url, spec.model.clone(), key, spec.dim))
            }
        })
    }

    pub fn gold_table(&self, schema: &SchemaTable, splits: &[&DatasetSplit]) -> Arc<GoldTable> {
        let mut gold = GoldTable::new(schema.clone());
        for s in splits {
            gold.add_split(s);
        }
        Arc::new(gold)
    }

    pub fn inference_client(&self, factory: &BackendFactory, name: &str) -> Result<Client> {
        let backend = factory.build(&self.cfg.inference_kind()?)?;
        Ok(Client::new(name, backend, self.cfg.backends.inference.params, Arc::clone(&self.ledger)))
    }

    pub fn correction_client(&self, factory: &BackendFactory) -> Result<Client> {
        let backend = factory.build(&self.cfg.correction_kind()?)?;
        Ok(Client::new(
            "correction",
            backend,
            self.cfg.backends.correction.params,
            Arc::clone(&self.ledger),
        ))
    }

    pub fn write_ledger(&self, file: &str) -> Result<LedgerSnapshot> {
        let snap = self.ledger.snapshot();
        write_json_pretty(&self.out(file), &snap)?;
        Ok(snap)
    }

    fn sorted_dialogues<'a>(&self, split: &'a DatasetSplit) -> Vec<&'a Dialogue> {
        let mut ds: Vec<&Dialogue> = split.dialogues.iter().collect();
        ds.sort_by(|a, b| a.dialogue_id.cmp(&b.dialogue_id));
        ds
    }

    /// First pass over every evaluation dialogue. `None` marks dialogues not
    /// started because of an interrupt.
    pub fn first_pass(
        &self,
        eval: &DatasetSplit,
        index: &Index,
        embedder: &dyn EmbeddingBackend,
        client: &Client,
        schema: &SchemaTable,
    ) -> Result<(Vec<PredictionRecord>, bool)> {
        let ds = self.sorted_dialogues(eval);
        let parts = map_dialogues(&ds, self.cfg.max_concurrency, &self.interrupt, |d| {
            first_pass_dialogue(d, index, embedder, client, schema, &self.settings)
        })?;
        let complete = parts.iter().all(Option::is_some);
        Ok((parts.into_iter().flatten().flatten().collect(), complete))
    }

    pub fn second_pass(
        &self,
        eval: &DatasetSplit,
        first: Vec<PredictionRecord>,
        index: &Index,
        client: &Client,
        schema: &SchemaTable,
    ) -> Result<(Vec<PredictionRecord>, bool)> {
        let mut by_dialogue: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
        for r in first {
            by_dialogue.entry(r.dialogue_id.clone()).or_default().push(r);
        }
        let mut jobs: Vec<(&Dialogue, Vec<PredictionRecord>)> = Vec::new();
        for (id, recs) in by_dialogue {
            let d = eval.dialogue(&id).ok_or(Error::UnknownDialogue(id))?;
            jobs.push((d, recs));
        }
        let ds: Vec<&Dialogue> = jobs.iter().map(|(d, _)| *d).collect();
        let recs: BTreeMap<&str, &Vec<PredictionRecord>> =
            jobs.iter().map(|(d, r)| (d.dialogue_id.as_str(), r)).collect();
        let parts = map_dialogues(&ds, self.cfg.max_concurrency, &self.interrupt, |d| {
            second_pass_dialogue(d, recs[d.dialogue_id.as_str()].clone(), index, client, schema, &self.settings)
        })?;
        let complete = parts.iter().all(Option::is_some);
        Ok((parts.into_iter().flatten().flatten().collect(), complete))
    }

    /// Reports for both passes with a per-category breakdown; categories are
    /// relative to the domains of `train_pool`.
    pub fn evaluate(
        &self,
        records: &[TurnRecord],
        eval: &DatasetSplit,
        train_pool: &DatasetSplit,
        syn: &SynonymTable,
        ledger: Option<&LedgerSnapshot>,
    ) -> Result<RunReport> {
        let domains = train_pool.domain_set.clone();
        Ok(RunReport {
            first: breakdown_by_category(records, eval, &domains, syn, EvalMode::First)?,
            final_pass: breakdown_by_category(records, eval, &domains, syn, EvalMode::Final)?,
            cost: ledger.map(CostSummary::from_ledger),
        })
    }

    pub fn write_report(&self, report: &RunReport) -> Result<()> {
        write_atomic(&self.out(REPORT_JSON), format_report(report, ReportFormat::Json)?.as_bytes())?;
        write_atomic(&self.out(REPORT_TXT), format_report(report, ReportFormat::Table)?.as_bytes())
    }
}

fn check_disjoint(train: &DatasetSplit, eval: &DatasetSplit) -> Result<()> {
    let ids: HashSet<&str> = train.dialogues.iter().map(|d| d.dialogue_id.as_str()).collect();
    match eval.dialogues.iter().find(|d| ids.contains(d.dialogue_id.as_str())) {
        Some(d) => Err(Error::Inconsistent(format!(
            "dialogue {} appears in both the training and evaluation files",
            d.dialogue_id
        ))),
        None => Ok(()),
    }
}

/// Results of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub manifest: Manifest,
    pub predictions: Vec<PredictionRecord>,
    pub export: Option<ExportSummary>,
    pub ledger: LedgerSnapshot,
}

struct Tracker<'a> {
    session: &'a Session,
    manifest: Manifest,
}

impl Tracker<'_> {
    fn write(&self) {
        if let Err(e) = write_json_pretty(&self.session.out(MANIFEST), &self.manifest) {
            log::error!("could not write manifest: {e}");
        }
    }

    fn push(&mut self, name: &str, status: StageState, detail: Option<String>) {
        self.manifest.stages.push(StageStatus {
            name: name.to_string(),
            status,
            detail,
        });
    }

    fn output(&mut self, file: &str) {
        self.manifest.outputs.push(file.to_string());
    }

    /// Run one stage, recording its status; failures and interrupts write the
    /// manifest and end the run.
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        if self.session.interrupted() {
            self.push(name, StageState::Interrupted, None);
            self.write();
            return Err(Error::Interrupted);
        }
        log::info!("stage {name}");
        match f(self) {
            Ok(v) => {
                if self.manifest.stage(name).is_none() {
                    self.push(name, StageState::Completed, None);
                }
                Ok(v)
            }
            Err(Error::Interrupted) => {
                self.push(name, StageState::Interrupted, Some("partial output written".into()));
                self.write();
                Err(Error::Interrupted)
            }
            Err(e) => {
                self.push(name, StageState::Failed, Some(e.to_string()));
                self.write();
                Err(Error::stage(name, e))
            }
        }
    }
}

/// Chain every stage: split, index, collect (+ export), first pass, second
/// pass, evaluation. Outputs go to `cfg.output_dir`; the MANIFEST records the
/// status of each stage, also when the run stops early.
pub fn run_experiment(session: &Session) -> Result<RunOutcome> {
    let cfg = &session.cfg;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let mut tr = Tracker {
        session,
        manifest: Manifest::new(cfg),
    };

    let (schema, syn) = tr.stage("schema", |_| Ok((session.schema()?, session.synonyms()?)))?;
    let (train, eval) = tr.stage("datasets", |_| {
        let train = session.train(&schema)?;
        let eval = session.eval(&schema)?;
        check_disjoint(&train, &eval)?;
        Ok((train, eval))
    })?;
    let pool = tr.stage("split", |t| {
        let pool = session.sample_pool(&train)?;
        write_dataset(&session.out(TRAIN_POOL), &pool)?;
        t.output(TRAIN_POOL);
        Ok(pool)
    })?;
    let embedder = session.embedder()?;
    let mut index = tr.stage("index", |t| {
        let index = build_index(payloads_from_split(&pool, session.settings.width)?, embedder.as_ref())?;
        index.save(&session.out(INDEX))?;
        t.output(INDEX);
        Ok(index)
    })?;
    let factory = BackendFactory::new(session.gold_table(&schema, &[&train, &eval]));
    let (collect_client, inference, correction) = tr.stage("backends", |_| {
        Ok((
            session.inference_client(&factory, "collect")?,
            session.inference_client(&factory, "inference")?,
            session.correction_client(&factory)?,
        ))
    })?;

    let result = run_passes(
        &mut tr, session, &schema, &syn, &pool, &eval, &mut index, &embedder, &collect_client, &inference,
        &correction,
    );
    if let Err(e) = factory.flush() {
        log::error!("could not write recordings: {e}");
    }
    let (report, predictions, export) = result?;
    let ledger = session.write_ledger(LEDGER)?;
    tr.output(LEDGER);
    tr.manifest.complete = true;
    tr.write();
    Ok(RunOutcome {
        report,
        manifest: tr.manifest,
        predictions,
        export,
        ledger,
    })
}

type Passes = (RunReport, Vec<PredictionRecord>, Option<ExportSummary>);

#[allow(clippy::too_many_arguments)]
fn run_passes(
    tr: &mut Tracker<'_>,
    session: &Session,
    schema: &SchemaTable,
    syn: &SynonymTable,
    pool: &DatasetSplit,
    eval: &DatasetSplit,
    index: &mut Index,
    embedder: &Arc<dyn EmbeddingBackend>,
    collect_client: &Client,
    inference: &Client,
    correction: &Client,
) -> Result<Passes> {
    let cfg = &session.cfg;
    let collection = tr.stage("collect", |t| {
        let c = collect_demonstrations(
            pool,
            collect_client,
            schema,
            &session.settings,
            cfg.seeds.demos,
            cfg.max_concurrency,
            &session.interrupt,
        )?;
        write_jsonl(&session.out(COLLECTION), &c.turns)?;
        t.output(COLLECTION);
        t.manifest.demo_ids = c.demo_ids.clone();
        if c.failures() > 0 {
            t.push(
                "collect",
                StageState::CompletedWithErrors,
                Some(format!("{} training turns failed", c.failures())),
            );
        }
        Ok(c)
    })?;
    index.attach_hypotheses(&collection.hypotheses());

    let export = if cfg.export_training {
        Some(tr.stage("export", |t| {
            let (seqs, summary) = export_training_sequences(pool, index, schema, &session.settings)?;
            write_jsonl(&session.out(TRAIN_SEQUENCES), &seqs)?;
            t.output(TRAIN_SEQUENCES);
            t.manifest.export = Some(summary.clone());
            Ok(summary)
        })?)
    } else {
        tr.push("export", StageState::Skipped, None);
        None
    };

    let first = tr.stage("first-pass", |t| {
        let (records, complete) = session.first_pass(eval, index, embedder.as_ref(), inference, schema)?;
        write_jsonl(&session.out(FIRST_PASS), &records)?;
        t.output(FIRST_PASS);
        if !complete {
            return Err(Error::Interrupted);
        }
        let failed = records.iter().filter(|r| r.error.is_some()).count();
        if failed > 0 {
            t.push(
                "first-pass",
                StageState::CompletedWithErrors,
                Some(format!("{failed} turns flagged")),
            );
        }
        Ok(records)
    })?;

    let predictions = tr.stage("second-pass", |t| {
        let (records, complete) = session.second_pass(eval, first, index, correction, schema)?;
        write_jsonl(&session.out(PREDICTIONS), &records)?;
        t.output(PREDICTIONS);
        if !complete {
            return Err(Error::Interrupted);
        }
        let failed = records.iter().filter(|r| r.error.is_some()).count();
        t.manifest.failed_turns = failed;
        if failed > 0 {
            t.push(
                "second-pass",
                StageState::CompletedWithErrors,
                Some(format!("{failed} turns flagged")),
            );
        }
        Ok(records)
    })?;

    let report = tr.stage("evaluate", |t| {
        let ledger = session.ledger.snapshot();
        let report = session.evaluate(&turn_records(&predictions), eval, pool, syn, Some(&ledger))?;
        session.write_report(&report)?;
        t.output(REPORT_JSON);
        t.output(REPORT_TXT);
        Ok(report)
    })?;
    Ok((report, predictions, export))
}

/// Stage commands used by the CLI. Each reads its inputs from the output
/// directory and fails with a stage-dependency error when they are missing.
pub mod stages {
    use super::*;

    pub fn split(s: &Session) -> Result<String> {
        let schema = s.schema()?;
        let train = s.train(&schema)?;
        let pool = s.sample_pool(&train)?;
        write_dataset(&s.out(TRAIN_POOL), &pool)?;
        Ok(format!(
            "kept {} of {} training dialogues ({} turns) -> {}",
            pool.dialogues.len(),
            train.dialogues.len(),
            pool.turn_count(),
            s.out(TRAIN_POOL).display()
        ))
    }

    pub fn index(s: &Session) -> Result<String> {
        let schema = s.schema()?;
        let pool = s.stored_pool("index", &schema)?;
        let embedder = s.embedder()?;
        let index = build_index(payloads_from_split(&pool, s.settings.width)?, embedder.as_ref())?;
        index.save(&s.out(INDEX))?;
        Ok(format!("indexed {} turns -> {}", index.len(), s.out(INDEX).display()))
    }

    fn gold_factory(s: &Session, schema: &SchemaTable, pool: &DatasetSplit) -> Result<BackendFactory> {
        let eval = s.eval(schema)?;
        Ok(BackendFactory::new(s.gold_table(schema, &[pool, &eval])))
    }

    pub fn collect(s: &Session) -> Result<String> {
        let schema = s.schema()?;
        let pool = s.stored_pool("collect", &schema)?;
        let factory = gold_factory(s, &schema, &pool)?;
        let client = s.inference_client(&factory, "collect")?;
        let c = collect_demonstrations(
            &pool,
            &client,
            &schema,
            &s.settings,
            s.cfg.seeds.demos,
            s.cfg.max_concurrency,
            &s.interrupt,
        );
        factory.flush()?;
        let c = c?;
        write_jsonl(&s.out(COLLECTION), &c.turns)?;
        s.write_ledger("ledger-collect.json")?;
        Ok(format!(
            "collected {} turns ({} failed) with demos {:?} -> {}",
            c.turns.len(),
            c.failures(),
            c.demo_ids,
            s.out(COLLECTION).display()
        ))
    }

    pub fn export_train(s: &Session) -> Result<String> {
        let schema = s.schema()?;
        let pool = s.stored_pool("export-train", &schema)?;
        let mut index = s.stored_index("export-train", &pool)?;
        let collection = s.stored_collection("export-train")?;
        index.attach_hypotheses(&collection.hypotheses());
        let (seqs, summary) = export_training_sequences(&pool, &index, &schema, &s.settings)?;
        write_jsonl(&s.out(TRAIN_SEQUENCES), &seqs)?;
        Ok(format!(
            "exported {} sequences, skipped {} of {} training turns -> {}",
            summary.exported,
            summary.skipped,
            summary.training_turns,
            s.out(TRAIN_SEQUENCES).display()
        ))
    }

    pub fn export_pairs(s: &Session) -> Result<String> {
        let schema = s.schema()?;
        let pool = s.stored_pool("export-retriever-pairs", &schema)?;
        let n = export_retriever_pairs(
            &pool,
            s.settings.width,
            s.cfg.retriever_pairs_per_anchor,
            s.cfg.seeds.demos,
            &s.out(RETRIEVER_PAIRS),
        )?;
        Ok(format!("wrote {n} pairs -> {}", s.out(RETRIEVER_PAIRS).display()))
    }

    pub fn first_pass(s: &Session) -> Result<String> {
        let schema = s.schema()?;
        let pool = s.stored_pool("first-pass", &schema)?;
        let index = s.stored_index("first-pass", &pool)?;
        let eval = s.eval(&schema)?;
        let factory = BackendFactory::new(s.gold_table(&schema, &[&pool, &eval]));
        let client = s.inference_client(&factory, "inference")?;
        let embedder = s.embedder()?;
        let result = s.first_pass(&eval, &index, embedder.as_ref(), &client, &schema);
        factory.flush()?;
        let (records, complete) = result?;
        write_jsonl(&s.out(FIRST_PASS), &records)?;
        s.write_ledger("ledger-first-pass.json")?;
        if !complete {
            return Err(Error::Interrupted);
        }
        let failed = records.iter().filter(|r| r.error.is_some()).count();
        if failed > 0 {
            return Err(Error::Backend(format!(
                "{failed} turns flagged with backend errors; see {}",
                s.out(FIRST_PASS).display()
            )));
        }
        Ok(format!("first pass: {} turns -> {}", records.len(), s.out(FIRST_PASS).display()))
    }

    pub fn second_pass(s: &Session) -> Result<String> {
        let first = s.stored_records("second-pass", FIRST_PASS, "first-pass")?;
        let schema = s.schema()?;
        let pool = s.stored_pool("second-pass", &schema)?;
        let mut index = s.stored_index("second-pass", &pool)?;
        let collection = s.stored_collection("second-pass")?;
        index.attach_hypotheses(&collection.hypotheses());
        let eval = s.eval(&schema)?;
        let factory = BackendFactory::new(s.gold_table(&schema, &[&pool, &eval]));
        let client = s.correction_client(&factory)?;
        let result = s.second_pass(&eval, first, &index, &client, &schema);
        factory.flush()?;
        let (records, complete) = result?;
        write_jsonl(&s.out(PREDICTIONS), &records)?;
        s.write_ledger("ledger-second-pass.json")?;
        if !complete {
            return Err(Error::Interrupted);
        }
        let failed = records.iter().filter(|r| r.error.is_some()).count();
        if failed > 0 {
            return Err(Error::Backend(format!(
                "{failed} turns flagged with backend errors; see {}",
                s.out(PREDICTIONS).display()
            )));
        }
        Ok(format!("second pass: {} turns -> {}", records.len(), s.out(PREDICTIONS).display()))
    }

    /// Merge the per-stage ledgers found in the output directory.
    pub fn merged_ledger(s: &Session) -> Result<Option<LedgerSnapshot>> {
        let whole = s.out(LEDGER);
        if whole.exists() {
            return crate::io::read_json(&whole).map(Some);
        }
        let mut merged: Option<LedgerSnapshot> = None;
        for name in ["ledger-collect.json", "ledger-first-pass.json", "ledger-second-pass.json"] {
            let path = s.out(name);
            if !path.exists() {
                continue;
            }
            let part: LedgerSnapshot = crate::io::read_json(&path)?;
            let m = merged.get_or_insert_with(LedgerSnapshot::default);
            for (k, v) in part.backends {
                m.backends.insert(k, v);
            }
            m.calls.extend(part.calls);
        }
        Ok(merged)
    }

    /// Evaluate a predictions file (default: the second-pass output, else the
    /// first-pass output) and write the report files.
    pub fn evaluate(s: &Session, predictions: Option<&Path>) -> Result<RunReport> {
        let path = match predictions {
            Some(p) => p.to_path_buf(),
            None => {
                let p = s.out(PREDICTIONS);
                if p.exists() {
                    p
                } else {
                    s.require("evaluate", FIRST_PASS, "first-pass")?
                }
            }
        };
        let records = load_turn_records(&path)?;
        let schema = s.schema()?;
        let eval = s.eval(&schema)?;
        let pool = match s.stored_pool("evaluate", &schema) {
            Ok(p) => p,
            Err(Error::StageDependency { .. }) => s.sample_pool(&s.train(&schema)?)?,
            Err(e) => return Err(e),
        };
        let ledger = merged_ledger(s)?;
        let report = s.evaluate(&records, &eval, &pool, &s.synonyms()?, ledger.as_ref())?;
        std::fs::create_dir_all(&s.cfg.output_dir).map_err(|e| Error::io(&s.cfg.output_dir, e))?;
        s.write_report(&report)?;
        Ok(report)
    }

    pub fn stored_report(s: &Session) -> Result<RunReport> {
        let path = s.require("report", REPORT_JSON, "evaluate")?;
        crate::io::read_json(&path)
    }
}
