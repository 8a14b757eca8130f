//! Training, evaluation, the ablation/sweep suite, and attention-trace
//! dumping.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{self, DatasetSplit, QuestionType, Scene};
use crate::encode::{scene_graph_indices, ObjectIndices, RawRegion};
use crate::model::{
    self, forward, loss_and_metrics, AttentionTrace, ModelConfig, SampleInput,
};
use crate::tensor::{adam_defaults, load_checkpoint, save_checkpoint, ParamStore, Tape};
use crate::vocab::{load_or_init_embeddings, Vocabulary};
use crate::{Error, Result, Scalar};

/// Full training configuration. The defaults mirror the reference
/// schedule (learning rate 0.0003, batch 128, 25 epochs); `desk()` is
/// the small-scale preset used by the test harness.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: Scalar,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Early-stop patience in epochs without validation improvement.
    pub patience: usize,
    /// Global gradient-norm clip.
    pub grad_clip: Scalar,
    pub freeze_embeddings: bool,
    /// Gaussian noise scale on derived region features.
    pub noise_scale: Scalar,
    /// Stop once validation accuracy reaches this value.
    pub target_val_accuracy: Option<f64>,
    /// Optional GloVe-style text vector file for embedding init.
    pub embedding_file: Option<std::path::PathBuf>,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            learning_rate: 0.0003,
            batch_size: 128,
            epochs: 25,
            seed: 1,
            patience: 12,
            grad_clip: 8.0,
            freeze_embeddings: false,
            noise_scale: 0.02,
            target_val_accuracy: None,
            embedding_file: None,
            verbose: false,
        }
    }
}

impl TrainConfig {
    /// Small single-core preset: batch 32, up to 200 epochs with early
    /// stopping.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 200,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("hyperparameters must be positive".into()));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

/// Answer labels: the sorted union of the ontology answer set and the
/// answers observed in the data.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerVocab {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn build(observed: impl IntoIterator<Item = String>) -> Self {
        let mut answers: Vec<String> = data::answer_tokens();
        answers.extend(observed);
        answers.sort();
        answers.dedup();
        let index = answers
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        AnswerVocab { answers, index }
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn index_of(&self, answer: &str) -> Result<usize> {
        self.index
            .get(answer)
            .copied()
            .ok_or_else(|| Error::Data(format!("answer {answer:?} not in answer vocabulary")))
    }

    pub fn token(&self, idx: usize) -> &str {
        &self.answers[idx]
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::from(self.answers.clone())
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let arr = value
            .as_array()
            .ok_or_else(|| Error::Data("answer vocabulary must be an array".into()))?;
        let answers: Vec<String> = arr
            .iter()
            .map(|v| {
                v.as_str()
                    .map(String::from)
                    .ok_or_else(|| Error::Data("answer entries must be strings".into()))
            })
            .collect::<Result<_>>()?;
        let index = answers
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        Ok(AnswerVocab { answers, index })
    }
}

/// One question fully prepared for the network.
#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub scene_id: u64,
    pub question_index: usize,
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub regions: Vec<RawRegion>,
    pub graph: Vec<ObjectIndices>,
    pub label: usize,
    pub answer: String,
    pub qtype: QuestionType,
    pub requires_graph: bool,
    pub graph_probe: bool,
}

impl EncodedSample {
    pub fn input(&self) -> SampleInput<'_> {
        SampleInput {
            token_ids: &self.token_ids,
            regions: &self.regions,
            graph: &self.graph,
        }
    }
}

/// Build the question vocabulary from the training split plus the
/// ontology terms the scene-graph encoder needs.
pub fn build_question_vocab(split: &DatasetSplit) -> Vocabulary {
    let mut corpus: Vec<Vec<String>> = vec![data::ontology_tokens()];
    for scene in &split.scenes {
        for q in &scene.questions {
            corpus.push(q.tokens.clone());
        }
    }
    Vocabulary::build(corpus)
}

pub fn build_answer_vocab(split: &DatasetSplit) -> AnswerVocab {
    AnswerVocab::build(
        split
            .scenes
            .iter()
            .flat_map(|s| s.questions.iter().map(|q| q.answer.clone())),
    )
}

/// Prepare every question of a split: tokenized ids, derived region
/// features, and scene-graph indices (shared per scene).
pub fn encode_split(
    split: &DatasetSplit,
    vocab: &Vocabulary,
    answers: &AnswerVocab,
    cfg: &ModelConfig,
    noise_scale: Scalar,
    seed: u64,
) -> Result<Vec<EncodedSample>> {
    let mut out = Vec::with_capacity(split.question_count());
    for scene in &split.scenes {
        let regions = data::derive_region_features(scene, cfg.feature_width, noise_scale, seed)?;
        let graph = scene_graph_indices(scene, vocab)?;
        for (qi, q) in scene.questions.iter().enumerate() {
            out.push(EncodedSample {
                scene_id: scene.scene_id,
                question_index: qi,
                tokens: q.tokens.clone(),
                token_ids: vocab.encode(&q.tokens),
                regions: regions.clone(),
                graph: graph.clone(),
                label: answers.index_of(&q.answer)?,
                answer: q.answer.clone(),
                qtype: q.qtype,
                requires_graph: q.requires_graph,
                graph_probe: q.is_graph_probe(),
            });
        }
    }
    Ok(out)
}

/// Accuracy breakdown plus loss/time curves.
#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_type: BTreeMap<String, TypeAccuracy>,
    /// Accuracy over relation-probe questions, when any are present.
    pub graph_probe: Option<TypeAccuracy>,
    pub mean_loss: f64,
    pub loss_curve: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TypeAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Metrics {
    /// Question-count-weighted mean of the per-type accuracies; equals
    /// the overall accuracy by construction.
    pub fn weighted_type_mean(&self) -> f64 {
        let total: usize = self.per_type.values().map(|t| t.total).sum();
        if total == 0 {
            return 0.0;
        }
        let correct: usize = self.per_type.values().map(|t| t.correct).sum();
        correct as f64 / total as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("type,correct,total,accuracy\n");
        for (name, t) in &self.per_type {
            out.push_str(&format!("{name},{},{},{:.4}\n", t.correct, t.total, t.accuracy));
        }
        if let Some(p) = &self.graph_probe {
            out.push_str(&format!(
                "graph-probe,{},{},{:.4}\n",
                p.correct, p.total, p.accuracy
            ));
        }
        out.push_str(&format!(
            "overall,{},{},{:.4}\n",
            self.correct, self.total, self.overall_accuracy
        ));
        out
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>9}\n",
            "type", "correct", "total", "accuracy"
        ));
        for (name, t) in &self.per_type {
            out.push_str(&format!(
                "{:<12} {:>8} {:>8} {:>8.2}%\n",
                name,
                t.correct,
                t.total,
                100.0 * t.accuracy
            ));
        }
        if let Some(p) = &self.graph_probe {
            out.push_str(&format!(
                "{:<12} {:>8} {:>8} {:>8.2}%\n",
                "graph-probe", p.correct, p.total, 100.0 * p.accuracy
            ));
        }
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8.2}%\n",
            "overall",
            self.correct,
            self.total,
            100.0 * self.overall_accuracy
        ));
        out
    }
}

/// Evaluate a parameter snapshot over prepared samples. Never mutates
/// parameters.
pub fn evaluate(store: &ParamStore, cfg: &ModelConfig, samples: &[EncodedSample]) -> Result<Metrics> {
    let started = Instant::now();
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let mut by_type: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut probe = (0usize, 0usize);
    for sample in samples {
        let mut tape = Tape::new();
        let out = forward(&mut tape, store, cfg, &sample.input())?;
        let (loss, is_correct) = loss_and_metrics(&mut tape, &out, sample.label)?;
        loss_sum += tape.value(loss).item() as f64;
        let entry = by_type
            .entry(sample.qtype.label().to_string())
            .or_insert((0, 0));
        entry.1 += 1;
        if is_correct {
            entry.0 += 1;
            correct += 1;
        }
        if sample.graph_probe {
            probe.1 += 1;
            if is_correct {
                probe.0 += 1;
            }
        }
    }
    let total = samples.len();
    let per_type = by_type
        .into_iter()
        .map(|(name, (c, t))| {
            (
                name,
                TypeAccuracy {
                    correct: c,
                    total: t,
                    accuracy: if t == 0 { 0.0 } else { c as f64 / t as f64 },
                },
            )
        })
        .collect();
    let mean_loss = if total == 0 { 0.0 } else { loss_sum / total as f64 };
    Ok(Metrics {
        overall_accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        correct,
        total,
        per_type,
        graph_probe: (probe.1 > 0).then_some(TypeAccuracy {
            correct: probe.0,
            total: probe.1,
            accuracy: probe.0 as f64 / probe.1 as f64,
        }),
        mean_loss,
        loss_curve: vec![mean_loss],
        epoch_seconds: vec![started.elapsed().as_secs_f64()],
    })
}

/// Everything `train` returns: the best-validation snapshot plus curves.
pub struct TrainOutcome {
    pub store: ParamStore,
    pub config: ModelConfig,
    pub question_vocab: Vocabulary,
    pub answers: AnswerVocab,
    pub best_epoch: usize,
    pub best_val: Metrics,
    pub loss_curve: Vec<Scalar>,
    pub epoch_seconds: Vec<f64>,
    pub val_accuracy_history: Vec<f64>,
    pub epochs_run: usize,
}

/// Mini-batch cross-entropy training with Adam. Deterministic given the
/// seed: fixed shuffle order, single-threaded accumulation. The best
/// checkpoint by validation accuracy is retained.
pub fn train(
    cfg: &TrainConfig,
    train_split: &DatasetSplit,
    val_split: &DatasetSplit,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_split.question_count() == 0 {
        return Err(Error::Contract("training split is empty".into()));
    }
    let question_vocab = build_question_vocab(train_split);
    let answers = build_answer_vocab(train_split);
    let mut model_cfg = cfg.model.clone();
    model_cfg.answer_count = answers.len();
    model_cfg.validate()?;

    let embeddings = load_or_init_embeddings(
        &question_vocab,
        model_cfg.embed_width,
        cfg.embedding_file.as_deref(),
        model_cfg.seed,
    )?;
    let mut store = ParamStore::new();
    model::register_model_params(&mut store, &model_cfg, &embeddings)?;

    let train_samples = encode_split(
        train_split,
        &question_vocab,
        &answers,
        &model_cfg,
        cfg.noise_scale,
        cfg.seed,
    )?;
    let val_samples = encode_split(
        val_split,
        &question_vocab,
        &answers,
        &model_cfg,
        cfg.noise_scale,
        cfg.seed,
    )?;

    let mut loss_curve: Vec<Scalar> = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut val_history = Vec::new();
    let mut best: Option<(usize, Metrics, ParamStore)> = None;
    let mut since_best = 0usize;
    let mut epochs_run = 0usize;

    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    'outer: for epoch in 0..cfg.epochs {
        let epoch_started = Instant::now();
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &si in batch {
                let sample = &train_samples[si];
                let out = forward(&mut tape, &store, &model_cfg, &sample.input())?;
                let (loss, _) = loss_and_metrics(&mut tape, &out, sample.label)?;
                losses.push(loss);
            }
            let mut sum = losses[0];
            for &l in &losses[1..] {
                sum = tape.add(sum, l)?;
            }
            let mean = tape.scale(sum, 1.0 / batch.len() as Scalar);
            let loss_value = tape.value(mean).item();
            if !loss_value.is_finite() {
                return Err(Error::TrainAbort {
                    epoch,
                    batch: batch_idx,
                    step: store.step_count() + 1,
                });
            }
            tape.backward_into(mean, &mut store)?;
            if cfg.freeze_embeddings {
                store.zero_grad_entry(crate::encode::names::EMBED_TABLE)?;
            }
            store.clip_grad_norm(cfg.grad_clip);
            store.adam_step(
                cfg.learning_rate,
                adam_defaults::BETA1,
                adam_defaults::BETA2,
                adam_defaults::EPSILON,
            );
            loss_curve.push(loss_value);
        }
        epochs_run = epoch + 1;

        let val_metrics = evaluate(&store, &model_cfg, &val_samples)?;
        val_history.push(val_metrics.overall_accuracy);
        epoch_seconds.push(epoch_started.elapsed().as_secs_f64());
        if cfg.verbose {
            eprintln!(
                "epoch {:>3}  loss {:.4}  val {:.4}",
                epoch,
                loss_curve.last().copied().unwrap_or_default(),
                val_metrics.overall_accuracy
            );
        }

        let improved = best
            .as_ref()
            .map(|(_, m, _)| val_metrics.overall_accuracy > m.overall_accuracy)
            .unwrap_or(true);
        if improved {
            best = Some((epoch, val_metrics.clone(), store.snapshot_values()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(target) = cfg.target_val_accuracy {
            if val_metrics.overall_accuracy >= target {
                break 'outer;
            }
        }
        if since_best > cfg.patience {
            break;
        }
    }

    let (best_epoch, mut best_val, best_store) = best.expect("at least one epoch ran");
    best_val.loss_curve = loss_curve.iter().map(|&l| l as f64).collect();
    best_val.epoch_seconds = epoch_seconds.clone();
    Ok(TrainOutcome {
        store: best_store,
        config: model_cfg,
        question_vocab,
        answers,
        best_epoch,
        best_val,
        loss_curve,
        epoch_seconds,
        val_accuracy_history: val_history,
        epochs_run,
    })
}

const CKPT_CONFIG_KEY: &str = "model_config";
const CKPT_QVOCAB_KEY: &str = "question_vocab";
const CKPT_ANSWERS_KEY: &str = "answer_vocab";

/// Persist a trained model with its config and vocabularies.
pub fn save_model_checkpoint(
    store: &ParamStore,
    cfg: &ModelConfig,
    question_vocab: &Vocabulary,
    answers: &AnswerVocab,
    path: &Path,
) -> Result<()> {
    let extra = json!({
        CKPT_CONFIG_KEY: cfg,
        CKPT_QVOCAB_KEY: question_vocab.to_json(),
        CKPT_ANSWERS_KEY: answers.to_json(),
    });
    save_checkpoint(store, extra, path)
}

pub fn load_model_checkpoint(
    path: &Path,
) -> Result<(ParamStore, ModelConfig, Vocabulary, AnswerVocab)> {
    let (store, extra) = load_checkpoint(path)?;
    let cfg: ModelConfig = serde_json::from_value(extra[CKPT_CONFIG_KEY].clone())
        .map_err(|e| Error::Checkpoint(format!("missing model config: {e}")))?;
    let qvocab = Vocabulary::from_json(&extra[CKPT_QVOCAB_KEY])
        .map_err(|e| Error::Checkpoint(format!("bad question vocabulary: {e}")))?;
    let answers = AnswerVocab::from_json(&extra[CKPT_ANSWERS_KEY])
        .map_err(|e| Error::Checkpoint(format!("bad answer vocabulary: {e}")))?;
    // sanity: every registered parameter the config implies must exist
    if store.param_count() != model::param_count(&cfg, qvocab.len()) {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters but the config implies {}",
            store.param_count(),
            model::param_count(&cfg, qvocab.len())
        )));
    }
    Ok((store, cfg, qvocab, answers))
}

/// Dump one sample's attention trace as JSON: per-step, per-branch
/// distributions plus the token list, object list with boxes, prediction
/// and gold answer.
pub fn dump_attention(
    store: &ParamStore,
    cfg: &ModelConfig,
    question_vocab: &Vocabulary,
    answers: &AnswerVocab,
    split: &DatasetSplit,
    scene_id: u64,
    question_index: usize,
    noise_scale: Scalar,
    seed: u64,
) -> Result<serde_json::Value> {
    let scene: &Scene = split
        .scenes
        .iter()
        .find(|s| s.scene_id == scene_id)
        .ok_or_else(|| Error::Data(format!("unknown scene id {scene_id}")))?;
    let question = scene.questions.get(question_index).ok_or_else(|| {
        Error::Data(format!(
            "scene {scene_id} has no question index {question_index}"
        ))
    })?;
    let regions = data::derive_region_features(scene, cfg.feature_width, noise_scale, seed)?;
    let graph = scene_graph_indices(scene, question_vocab)?;
    let token_ids = question_vocab.encode(&question.tokens);
    let mut tape = Tape::new();
    let out = forward(
        &mut tape,
        store,
        cfg,
        &SampleInput {
            token_ids: &token_ids,
            regions: &regions,
            graph: &graph,
        },
    )?;
    let trace = AttentionTrace {
        sample_id: format!("{scene_id}:{question_index}"),
        predicted: answers.token(out.dist.predicted).to_string(),
        gold: question.answer.clone(),
        records: out.records,
    };
    let objects: Vec<serde_json::Value> = scene
        .objects
        .iter()
        .map(|o| {
            json!({
                "id": o.id,
                "name": o.name,
                "attributes": o.attributes,
                "box": o.box_,
            })
        })
        .collect();
    Ok(json!({
        "sample_id": trace.sample_id,
        "tokens": question.tokens,
        "objects": objects,
        "predicted": trace.predicted,
        "gold": trace.gold,
        "records": trace.records,
    }))
}

/// One ablation configuration's median results.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub sd: bool,
    pub sgkb: bool,
    pub val_accuracy: f64,
    pub graph_probe_accuracy: f64,
    pub per_seed_val: Vec<f64>,
    pub per_seed_probe: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub cells: usize,
    pub val_accuracy: f64,
    pub per_seed_val: Vec<f64>,
}

/// Ablation grid plus cell-count sweep, trained on identical data with
/// identical seeds, reporting per-configuration medians.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub ablation: Vec<AblationRow>,
    pub sweep: Vec<SweepRow>,
    pub seeds: Vec<u64>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    if v.is_empty() {
        return 0.0;
    }
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

impl SuiteReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("# Suite report\n\n");
        out.push_str(&format!(
            "Synthetic desk-scale corpus, median over {} seeds. Accuracies are\nnot comparable to results on the real GQA task.\n\n",
            self.seeds.len()
        ));
        out.push_str("## Ablation (validation)\n\n");
        out.push_str("| # | OKB | SD | SGKB | Val | Graph-probe |\n");
        out.push_str("|---|-----|----|------|-----|-------------|\n");
        for (i, row) in self.ablation.iter().enumerate() {
            out.push_str(&format!(
                "| {} | O | {} | {} | {:.2} | {:.2} |\n",
                i + 1,
                if row.sd { "O" } else { "X" },
                if row.sgkb { "O" } else { "X" },
                100.0 * row.val_accuracy,
                100.0 * row.graph_probe_accuracy,
            ));
        }
        out.push_str("\n## Cell-count sweep (validation)\n\n");
        out.push_str("| cells | Val |\n|-------|-----|\n");
        for row in &self.sweep {
            out.push_str(&format!(
                "| {} | {:.2} |\n",
                row.cells,
                100.0 * row.val_accuracy
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,cells,sd,sgkb,val_accuracy,graph_probe_accuracy\n");
        for row in &self.ablation {
            out.push_str(&format!(
                "ablation,,{},{},{:.4},{:.4}\n",
                row.sd, row.sgkb, row.val_accuracy, row.graph_probe_accuracy
            ));
        }
        for row in &self.sweep {
            out.push_str(&format!("sweep,{},,,{:.4},\n", row.cells, row.val_accuracy));
        }
        out
    }
}

/// Train the four ablation configurations (SD x SGKB) and the cell-count
/// sweep over identical data and seeds.
pub fn run_suite(
    base: &TrainConfig,
    train_split: &DatasetSplit,
    val_split: &DatasetSplit,
    seeds: &[u64],
) -> Result<SuiteReport> {
    let mut ablation = Vec::new();
    let grid = [
        (false, false),
        (true, false),
        (false, true),
        (true, true),
    ];
    let mut full_row_val: Vec<f64> = Vec::new();
    for &(sd, sgkb) in &grid {
        let mut vals = Vec::new();
        let mut probes = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.seed = seed;
            cfg.model.use_sd_fusion = sd;
            cfg.model.use_sgkb_branch = sgkb;
            let outcome = train(&cfg, train_split, val_split)?;
            vals.push(outcome.best_val.overall_accuracy);
            probes.push(
                outcome
                    .best_val
                    .graph_probe
                    .map(|p| p.accuracy)
                    .unwrap_or(0.0),
            );
        }
        if sd && sgkb {
            full_row_val = vals.clone();
        }
        ablation.push(AblationRow {
            sd,
            sgkb,
            val_accuracy: median(&vals),
            graph_probe_accuracy: median(&probes),
            per_seed_val: vals,
            per_seed_probe: probes,
        });
    }

    let mut sweep = Vec::new();
    for cells in 1..=4usize {
        let vals = if cells == base.model.cells && !full_row_val.is_empty() {
            full_row_val.clone()
        } else {
            let mut vals = Vec::new();
            for &seed in seeds {
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.model.seed = seed;
                cfg.model.cells = cells;
                cfg.model.use_sd_fusion = true;
                cfg.model.use_sgkb_branch = true;
                let outcome = train(&cfg, train_split, val_split)?;
                vals.push(outcome.best_val.overall_accuracy);
            }
            vals
        };
        sweep.push(SweepRow {
            cells,
            val_accuracy: median(&vals),
            per_seed_val: vals,
        });
    }
    Ok(SuiteReport {
        ablation,
        sweep,
        seeds: seeds.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GenConfig;

    fn tiny_dataset() -> (DatasetSplit, DatasetSplit) {
        let cfg = GenConfig {
            scenes: 12,
            questions_per_type: 1,
            ..GenConfig::default()
        };
        let mut splits = data::generate_dataset(&cfg).unwrap();
        let val = splits.remove(1);
        let train = splits.remove(0);
        (train, val)
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d: 8,
                cells: 2,
                fusion_rank: 8,
                embed_width: 6,
                feature_width: 8,
                max_objects: 6,
                ..ModelConfig::default()
            },
            batch_size: 8,
            epochs: 2,
            learning_rate: 0.001,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn paper_defaults_are_pinned() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.learning_rate, 0.0003);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.epochs, 25);
        assert_eq!(TrainConfig::desk().batch_size, 32);
    }

    #[test]
    fn train_runs_and_returns_curves() {
        let (train_split, val_split) = tiny_dataset();
        let outcome = train(&tiny_train_config(), &train_split, &val_split).unwrap();
        assert!(!outcome.loss_curve.is_empty());
        assert_eq!(outcome.epoch_seconds.len(), outcome.epochs_run);
        assert!(outcome.best_val.total > 0);
    }

    #[test]
    fn same_seed_same_loss_at_step_10_bitwise() {
        let (train_split, val_split) = tiny_dataset();
        let mut cfg = tiny_train_config();
        cfg.batch_size = 2;
        cfg.epochs = 1;
        let a = train(&cfg, &train_split, &val_split).unwrap();
        let b = train(&cfg, &train_split, &val_split).unwrap();
        assert!(a.loss_curve.len() >= 10);
        assert_eq!(
            a.loss_curve[9].to_bits(),
            b.loss_curve[9].to_bits(),
            "losses diverged: {} vs {}",
            a.loss_curve[9],
            b.loss_curve[9]
        );
    }

    #[test]
    fn evaluate_is_pure_and_weighted_mean_matches() {
        let (train_split, val_split) = tiny_dataset();
        let cfg = tiny_train_config();
        let outcome = train(&cfg, &train_split, &val_split).unwrap();
        let samples = encode_split(
            &val_split,
            &outcome.question_vocab,
            &outcome.answers,
            &outcome.config,
            cfg.noise_scale,
            cfg.seed,
        )
        .unwrap();
        let m1 = evaluate(&outcome.store, &outcome.config, &samples).unwrap();
        let m2 = evaluate(&outcome.store, &outcome.config, &samples).unwrap();
        assert_eq!(m1.overall_accuracy, m2.overall_accuracy);
        assert_eq!(m1.correct, m2.correct);
        assert!((m1.overall_accuracy - m1.weighted_type_mean()).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let (train_split, val_split) = tiny_dataset();
        let cfg = tiny_train_config();
        let outcome = train(&cfg, &train_split, &val_split).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rxup");
        save_model_checkpoint(
            &outcome.store,
            &outcome.config,
            &outcome.question_vocab,
            &outcome.answers,
            &path,
        )
        .unwrap();
        let (store2, cfg2, qvocab2, answers2) = load_model_checkpoint(&path).unwrap();
        assert_eq!(cfg2, outcome.config);
        assert_eq!(qvocab2.tokens(), outcome.question_vocab.tokens());
        assert_eq!(answers2, outcome.answers);

        let samples = encode_split(
            &val_split,
            &qvocab2,
            &answers2,
            &cfg2,
            cfg.noise_scale,
            cfg.seed,
        )
        .unwrap();
        let m1 = evaluate(&outcome.store, &outcome.config, &samples).unwrap();
        let m2 = evaluate(&store2, &cfg2, &samples).unwrap();
        assert_eq!(m1.correct, m2.correct);
    }

    #[test]
    fn dump_attention_has_record_per_step_per_branch() {
        let (train_split, val_split) = tiny_dataset();
        let cfg = tiny_train_config();
        let outcome = train(&cfg, &train_split, &val_split).unwrap();
        let scene_id = val_split.scenes[0].scene_id;
        let dump = dump_attention(
            &outcome.store,
            &outcome.config,
            &outcome.question_vocab,
            &outcome.answers,
            &val_split,
            scene_id,
            0,
            cfg.noise_scale,
            cfg.seed,
        )
        .unwrap();
        let records = dump["records"].as_array().unwrap();
        assert_eq!(records.len(), 2 * outcome.config.cells);
        for r in records {
            let qa: Vec<f64> = r["question_attention"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_f64().unwrap())
                .collect();
            assert!((qa.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        // unknown sample id
        assert!(matches!(
            dump_attention(
                &outcome.store,
                &outcome.config,
                &outcome.question_vocab,
                &outcome.answers,
                &val_split,
                99_999_999,
                0,
                cfg.noise_scale,
                cfg.seed,
            )
            .unwrap_err(),
            Error::Data(_)
        ));
    }

    #[test]
    fn answer_vocab_round_trip() {
        let answers = AnswerVocab::build(vec!["yes".to_string(), "zebra".to_string()]);
        let back = AnswerVocab::from_json(&answers.to_json()).unwrap();
        assert_eq!(answers, back);
        assert!(answers.index_of("zebra").is_ok());
        assert!(answers.index_of("nope").is_err());
    }
}
