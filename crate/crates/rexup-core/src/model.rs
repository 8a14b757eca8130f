//! Full network assembly: two parallel cell branches over the two
//! knowledge bases, final memory concatenation, and the answer
//! classifier.

use serde::{Deserialize, Serialize};

use crate::cell::{self, AttentionRecord, CellParams};
use crate::encode::{self, ObjectIndices, RawRegion};
use crate::tensor::{ParamStore, Tape, Var};
use crate::vocab::EmbeddingTable;
use crate::{Error, Result, Scalar};

/// Architecture settings. `fusion_rank` defaults to `4 * d`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub cells: usize,
    pub fusion_rank: usize,
    pub answer_count: usize,
    pub use_sgkb_branch: bool,
    pub use_sd_fusion: bool,
    pub embed_width: usize,
    pub feature_width: usize,
    pub max_question_len: usize,
    pub max_objects: usize,
    pub gate_bias_init: Scalar,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = 64;
        ModelConfig {
            d,
            cells: 4,
            fusion_rank: 4 * d,
            answer_count: 0,
            use_sgkb_branch: true,
            use_sd_fusion: true,
            embed_width: 32,
            feature_width: 32,
            max_question_len: 16,
            max_objects: 8,
            gate_bias_init: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells < 1 {
            return Err(Error::Config("cells must be >= 1".into()));
        }
        if self.d < 2 {
            return Err(Error::Config("d must be >= 2".into()));
        }
        if self.use_sd_fusion && self.fusion_rank == 0 {
            return Err(Error::Config("fusion rank must be >= 1".into()));
        }
        if self.answer_count < 2 {
            return Err(Error::Config("answer vocabulary must have >= 2 entries".into()));
        }
        if self.feature_width < 8 {
            return Err(Error::Config("feature width must be >= 8".into()));
        }
        Ok(())
    }

    /// Width of the concatenated final memory.
    pub fn memory_width(&self) -> usize {
        if self.use_sgkb_branch {
            2 * self.d
        } else {
            self.d
        }
    }
}

/// Probabilities over the answer vocabulary; `predicted` is the argmax
/// with ties going to the lowest index.
#[derive(Clone, Debug)]
pub struct AnswerDistribution {
    pub probabilities: Vec<Scalar>,
    pub predicted: usize,
}

impl AnswerDistribution {
    fn from_logits(logits: &[Scalar]) -> Self {
        let max = logits.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
        let exps: Vec<Scalar> = logits.iter().map(|&v| (v - max).exp()).collect();
        let sum: Scalar = exps.iter().sum();
        let probabilities: Vec<Scalar> = exps.iter().map(|e| e / sum).collect();
        let mut predicted = 0;
        for (i, &p) in probabilities.iter().enumerate() {
            if p > probabilities[predicted] {
                predicted = i;
            }
        }
        AnswerDistribution {
            probabilities,
            predicted,
        }
    }
}

/// Per-sample attention trace with the prediction outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub sample_id: String,
    pub predicted: String,
    pub gold: String,
    pub records: Vec<AttentionRecord>,
}

/// One sample's raw inputs. `graph` may be empty when the scene-graph
/// branch is disabled.
pub struct SampleInput<'a> {
    pub token_ids: &'a [usize],
    pub regions: &'a [RawRegion],
    pub graph: &'a [ObjectIndices],
}

/// Everything one forward pass produces.
pub struct ForwardOutput {
    pub dist: AnswerDistribution,
    pub records: Vec<AttentionRecord>,
    pub logits: Var,
}

mod names {
    pub const CLS_WQ: &str = "cls/w_q";
    pub const CLS_BQ: &str = "cls/b_q";
    pub const CLS_W1: &str = "cls/w1";
    pub const CLS_B1: &str = "cls/b1";
    pub const CLS_W2: &str = "cls/w2";
    pub const CLS_B2: &str = "cls/b2";
}

/// Register every parameter of the model into a fresh store.
pub fn register_model_params(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    embeddings: &EmbeddingTable,
) -> Result<()> {
    cfg.validate()?;
    if embeddings.width != cfg.embed_width {
        return Err(Error::Config(format!(
            "embedding width {} does not match config {}",
            embeddings.width, cfg.embed_width
        )));
    }
    store.insert(encode::names::EMBED_TABLE, embeddings.matrix.clone())?;
    encode::register_params(store, cfg.d, cfg.embed_width, cfg.feature_width, cfg.seed)?;
    cell::register_branch_params(
        store,
        "okb",
        cfg.d,
        cfg.cells,
        cfg.fusion_rank,
        cfg.use_sd_fusion,
        cfg.gate_bias_init,
        cfg.seed,
    )?;
    if cfg.use_sgkb_branch {
        cell::register_branch_params(
            store,
            "sgkb",
            cfg.d,
            cfg.cells,
            cfg.fusion_rank,
            false,
            cfg.gate_bias_init,
            cfg.seed,
        )?;
    }
    let d = cfg.d;
    let cls_in = cfg.memory_width() + d;
    store.insert_xavier(names::CLS_WQ, d, 2 * d, cfg.seed)?;
    store.insert_zeros(names::CLS_BQ, &[d])?;
    store.insert_xavier(names::CLS_W1, d, cls_in, cfg.seed)?;
    store.insert_zeros(names::CLS_B1, &[d])?;
    store.insert_xavier(names::CLS_W2, cfg.answer_count, d, cfg.seed)?;
    store.insert_zeros(names::CLS_B2, &[cfg.answer_count])?;
    Ok(())
}

/// Expected total scalar parameter count for a config over a vocabulary
/// of `vocab_size` tokens.
pub fn param_count(cfg: &ModelConfig, vocab_size: usize) -> usize {
    let (d, e, f, a) = (cfg.d, cfg.embed_width, cfg.feature_width, cfg.answer_count);
    let embed = vocab_size * e;
    let lstm = 2 * 4 * (d * e + d * d + d);
    let words_proj = d * 2 * d + d;
    let okb_enc = d * (f + 6) + d;
    let sg_enc = d * 3 * e + d;
    let branch = |with_fusion: bool| {
        let per_cell = cfg.cells * (d * 2 * d + d);
        let reason = (d * 2 * d + d) + (d + 1);
        let extract = 2 * (d * d + d) + (d * 2 * d + d) + (d * d + d) + (d + 1);
        let fusion = if with_fusion {
            2 * d * cfg.fusion_rank + cfg.fusion_rank * d
        } else {
            0
        };
        let update = (d * 2 * d + d) + (d + 1);
        per_cell + reason + extract + fusion + update + 2 * d
    };
    let cls = (d * 2 * d + d) + (d * (cfg.memory_width() + d) + d) + (a * d + a);
    let mut total = embed + lstm + words_proj + okb_enc + sg_enc + branch(cfg.use_sd_fusion) + cls;
    if cfg.use_sgkb_branch {
        total += branch(false);
    }
    total
}

fn run_branch(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    branch: &str,
    q: Var,
    words: Var,
    kb: &encode::KnowledgeBase,
    with_fusion: bool,
    records: &mut Vec<AttentionRecord>,
) -> Result<Var> {
    let mut state = CellParams::initial_state(tape, store, branch)?;
    for step in 1..=cfg.cells {
        let params = CellParams::fetch(tape, store, branch, step, cfg.cells, with_fusion)?;
        let (next, record) = cell::run_cell(tape, &state, q, words, kb, step, &params)?;
        records.push(record);
        state = next;
    }
    Ok(state.memory)
}

/// Run the full network over one sample.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    input: &SampleInput,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    let table = tape.param(store, encode::names::EMBED_TABLE)?;
    let question = encode::encode_question(
        tape,
        store,
        table,
        input.token_ids,
        cfg.d,
        cfg.max_question_len,
    )?;
    let mut records = Vec::with_capacity(2 * cfg.cells);

    let okb = encode::encode_object_regions(tape, store, input.regions, cfg.max_objects)?;
    let okb = encode::pad_kb(tape, okb, cfg.max_objects)?;
    let m_okb = run_branch(
        tape,
        store,
        cfg,
        "okb",
        question.sentence,
        question.words,
        &okb,
        cfg.use_sd_fusion,
        &mut records,
    )?;

    let m_p = if cfg.use_sgkb_branch {
        let sgkb = encode::encode_scene_graph(tape, store, table, input.graph, cfg.embed_width)?;
        let sgkb = encode::pad_kb(tape, sgkb, cfg.max_objects)?;
        let m_sg = run_branch(
            tape,
            store,
            cfg,
            "sgkb",
            question.sentence,
            question.words,
            &sgkb,
            false,
            &mut records,
        )?;
        tape.concat_last(m_okb, m_sg)?
    } else {
        m_okb
    };

    let w_q = tape.param(store, names::CLS_WQ)?;
    let b_q = tape.param(store, names::CLS_BQ)?;
    let qp = tape.matmul(w_q, question.sentence)?;
    let q_proj = tape.add(qp, b_q)?;
    let cls_in = tape.concat_last(m_p, q_proj)?;

    let w1 = tape.param(store, names::CLS_W1)?;
    let b1 = tape.param(store, names::CLS_B1)?;
    let h_pre = tape.matmul(w1, cls_in)?;
    let h_pre = tape.add(h_pre, b1)?;
    let h = tape.tanh(h_pre);
    let w2 = tape.param(store, names::CLS_W2)?;
    let b2 = tape.param(store, names::CLS_B2)?;
    let logits_pre = tape.matmul(w2, h)?;
    let logits = tape.add(logits_pre, b2)?;

    let dist = AnswerDistribution::from_logits(tape.value(logits).data());
    Ok(ForwardOutput {
        dist,
        records,
        logits,
    })
}

/// Cross-entropy loss node for a forward pass plus the correctness flag.
pub fn loss_and_metrics(
    tape: &mut Tape,
    output: &ForwardOutput,
    label: usize,
) -> Result<(Var, bool)> {
    let loss = tape.softmax_cross_entropy(output.logits, label)?;
    Ok((loss, output.dist.predicted == label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{load_or_init_embeddings, Vocabulary};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 6,
            cells: 2,
            fusion_rank: 3,
            answer_count: 4,
            use_sgkb_branch: true,
            use_sd_fusion: true,
            embed_width: 5,
            feature_width: 8,
            max_question_len: 8,
            max_objects: 4,
            gate_bias_init: 1.0,
            seed: 21,
        }
    }

    fn tiny_world() -> (Vocabulary, ModelConfig, ParamStore) {
        let vocab = Vocabulary::build(vec![vec![
            "what", "color", "is", "the", "dog", "ball", "red", "blue", "holding",
        ]]);
        let cfg = tiny_config();
        let emb = load_or_init_embeddings(&vocab, cfg.embed_width, None, cfg.seed).unwrap();
        let mut store = ParamStore::new();
        register_model_params(&mut store, &cfg, &emb).unwrap();
        (vocab, cfg, store)
    }

    fn tiny_input(vocab: &Vocabulary) -> (Vec<usize>, Vec<RawRegion>, Vec<ObjectIndices>) {
        let token_ids = vocab.encode(&[
            "what".into(),
            "color".into(),
            "is".into(),
            "the".into(),
            "dog".into(),
        ]);
        let regions = vec![
            RawRegion {
                feature: vec![0.25; 8],
                box_: [0.1, 0.1, 0.3, 0.3, 0.2, 0.2],
            },
            RawRegion {
                feature: vec![-0.5; 8],
                box_: [0.5, 0.5, 0.9, 0.8, 0.4, 0.3],
            },
        ];
        let graph = vec![
            ObjectIndices {
                name: vocab.lookup("dog"),
                attributes: vec![vocab.lookup("red")],
                relations: vec![(vocab.lookup("holding"), vocab.lookup("ball"))],
            },
            ObjectIndices {
                name: vocab.lookup("ball"),
                attributes: vec![vocab.lookup("blue")],
                relations: vec![],
            },
        ];
        (token_ids, regions, graph)
    }

    #[test]
    fn default_cell_count_is_four() {
        assert_eq!(ModelConfig::default().cells, 4);
    }

    #[test]
    fn forward_produces_unit_distribution_and_full_trace() {
        let (vocab, cfg, store) = tiny_world();
        let (token_ids, regions, graph) = tiny_input(&vocab);
        let mut tape = Tape::new();
        let out = forward(
            &mut tape,
            &store,
            &cfg,
            &SampleInput {
                token_ids: &token_ids,
                regions: &regions,
                graph: &graph,
            },
        )
        .unwrap();
        let sum: Scalar = out.dist.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(out.dist.probabilities.len(), cfg.answer_count);
        // 2 cells x 2 branches
        assert_eq!(out.records.len(), 4);
        assert!(out.records.iter().any(|r| r.branch == "okb"));
        assert!(out.records.iter().any(|r| r.branch == "sgkb"));
    }

    #[test]
    fn single_branch_when_sgkb_disabled() {
        let (vocab, mut cfg, _) = tiny_world();
        cfg.use_sgkb_branch = false;
        let emb = load_or_init_embeddings(&vocab, cfg.embed_width, None, cfg.seed).unwrap();
        let mut store = ParamStore::new();
        register_model_params(&mut store, &cfg, &emb).unwrap();
        let (token_ids, regions, _) = tiny_input(&vocab);
        let mut tape = Tape::new();
        let out = forward(
            &mut tape,
            &store,
            &cfg,
            &SampleInput {
                token_ids: &token_ids,
                regions: &regions,
                graph: &[],
            },
        )
        .unwrap();
        assert_eq!(out.records.len(), cfg.cells);
        assert!(out.records.iter().all(|r| r.branch == "okb"));
    }

    #[test]
    fn param_count_matches_registry() {
        for (sgkb, sd) in [(false, false), (false, true), (true, false), (true, true)] {
            let (vocab, mut cfg, _) = tiny_world();
            cfg.use_sgkb_branch = sgkb;
            cfg.use_sd_fusion = sd;
            let emb = load_or_init_embeddings(&vocab, cfg.embed_width, None, cfg.seed).unwrap();
            let mut store = ParamStore::new();
            register_model_params(&mut store, &cfg, &emb).unwrap();
            assert_eq!(
                store.param_count(),
                param_count(&cfg, vocab.len()),
                "sgkb={sgkb} sd={sd}"
            );
        }
    }

    #[test]
    fn sgkb_toggle_changes_exactly_the_sg_names() {
        let (vocab, cfg, store_on) = tiny_world();
        let mut cfg_off = cfg.clone();
        cfg_off.use_sgkb_branch = false;
        let emb = load_or_init_embeddings(&vocab, cfg.embed_width, None, cfg.seed).unwrap();
        let mut store_off = ParamStore::new();
        register_model_params(&mut store_off, &cfg_off, &emb).unwrap();

        let on: std::collections::BTreeSet<String> =
            store_on.names().map(String::from).collect();
        let off: std::collections::BTreeSet<String> =
            store_off.names().map(String::from).collect();
        let extra: Vec<&String> = on.difference(&off).collect();
        assert!(extra.iter().all(|n| n.starts_with("sgkb/")));
        // classifier w1 differs in shape but exists in both
        assert!(off.difference(&on).next().is_none());
    }

    #[test]
    fn loss_of_uniform_prediction_is_ln_answer_count() {
        let (vocab, cfg, mut store) = tiny_world();
        // zero the classifier output layer: logits all equal
        store.value_mut(names::CLS_W2).unwrap().data_mut().fill(0.0);
        store.value_mut(names::CLS_B2).unwrap().data_mut().fill(0.0);
        let (token_ids, regions, graph) = tiny_input(&vocab);
        let mut tape = Tape::new();
        let out = forward(
            &mut tape,
            &store,
            &cfg,
            &SampleInput {
                token_ids: &token_ids,
                regions: &regions,
                graph: &graph,
            },
        )
        .unwrap();
        let (loss, _) = loss_and_metrics(&mut tape, &out, 1).unwrap();
        let want = (cfg.answer_count as Scalar).ln();
        assert!((tape.value(loss).item() - want).abs() < 1e-9);
    }

    #[test]
    fn argmax_tie_breaks_to_lowest_index() {
        let dist = AnswerDistribution::from_logits(&[1.0, 3.0, 3.0, 0.0]);
        assert_eq!(dist.predicted, 1);
    }

    #[test]
    fn forward_is_deterministic() {
        let (vocab, cfg, store) = tiny_world();
        let (token_ids, regions, graph) = tiny_input(&vocab);
        let run = || {
            let mut tape = Tape::new();
            let out = forward(
                &mut tape,
                &store,
                &cfg,
                &SampleInput {
                    token_ids: &token_ids,
                    regions: &regions,
                    graph: &graph,
                },
            )
            .unwrap();
            out.dist.probabilities
        };
        assert_eq!(run(), run());
    }
}
