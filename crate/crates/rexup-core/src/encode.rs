//! Input encoders: question bi-LSTM, object-region projection, and
//! scene-graph text aggregation.
//!
//! The encoders turn one sample's raw inputs into the three tensors the
//! reasoning cells consume: contextual question words `[U, d]`, the
//! question sentence vector `[2d]`, and a knowledge base `[O, d]` in one
//! of two variants.

use crate::data::Scene;
use crate::tensor::{ParamStore, Tape, Var};
use crate::vocab::Vocabulary;
use crate::{Error, Result, Scalar};

/// Which branch a knowledge base feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KbVariant {
    ObjectRegion,
    SceneGraph,
}

/// Encoded question: per-word states `[U, d]` and the sentence vector
/// `[2d]` (concatenation of the final backward and forward recurrent
/// states).
pub struct QuestionEncoding {
    pub words: Var,
    pub sentence: Var,
    pub len: usize,
}

/// Per-object feature rows `[O, d]` plus a row-validity mask. Masked
/// rows are zero and receive zero attention downstream.
pub struct KnowledgeBase {
    pub rows: Var,
    pub mask: Vec<bool>,
    pub variant: KbVariant,
}

impl KnowledgeBase {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// One detected region: a feature vector and a normalized box given as
/// `x1, y1, x2, y2, width, height`.
#[derive(Clone, Debug)]
pub struct RawRegion {
    pub feature: Vec<Scalar>,
    pub box_: [Scalar; 6],
}

impl RawRegion {
    pub fn validate(&self) -> Result<()> {
        let b = &self.box_;
        if b.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Validation(format!(
                "box coordinates out of [0,1]: {b:?}"
            )));
        }
        if b[0] > b[2] || b[1] > b[3] {
            return Err(Error::Validation(format!("box corners inverted: {b:?}")));
        }
        Ok(())
    }
}

/// Parameter names used by the encoders.
pub mod names {
    pub const LSTM_DIRS: [&str; 2] = ["fwd", "bwd"];
    pub const LSTM_GATES: [&str; 4] = ["i", "f", "o", "g"];

    pub fn lstm_wx(dir: &str, gate: &str) -> String {
        format!("question/lstm/{dir}/w_x{gate}")
    }
    pub fn lstm_wh(dir: &str, gate: &str) -> String {
        format!("question/lstm/{dir}/w_h{gate}")
    }
    pub fn lstm_b(dir: &str, gate: &str) -> String {
        format!("question/lstm/{dir}/b_{gate}")
    }
    pub const WORDS_PROJ_W: &str = "question/words_proj/w";
    pub const WORDS_PROJ_B: &str = "question/words_proj/b";
    pub const OKB_W: &str = "okb_enc/w";
    pub const OKB_B: &str = "okb_enc/b";
    pub const SG_W: &str = "sg_enc/w";
    pub const SG_B: &str = "sg_enc/b";
    pub const EMBED_TABLE: &str = "embed/table";
}

/// Register all encoder parameters. `embed_width` is the word-embedding
/// width, `feature_width` the raw region-feature width.
pub fn register_params(
    store: &mut ParamStore,
    d: usize,
    embed_width: usize,
    feature_width: usize,
    seed: u64,
) -> Result<()> {
    for dir in names::LSTM_DIRS {
        for gate in names::LSTM_GATES {
            store.insert_xavier(&names::lstm_wx(dir, gate), d, embed_width, seed)?;
            store.insert_xavier(&names::lstm_wh(dir, gate), d, d, seed)?;
            store.insert_zeros(&names::lstm_b(dir, gate), &[d])?;
        }
    }
    store.insert_xavier(names::WORDS_PROJ_W, d, 2 * d, seed)?;
    store.insert_zeros(names::WORDS_PROJ_B, &[d])?;
    store.insert_xavier(names::OKB_W, d, feature_width + 6, seed)?;
    store.insert_zeros(names::OKB_B, &[d])?;
    store.insert_xavier(names::SG_W, d, 3 * embed_width, seed)?;
    store.insert_zeros(names::SG_B, &[d])?;
    Ok(())
}

struct LstmGateParams {
    w_x: Var,
    w_h: Var,
    b: Var,
}

struct LstmDirParams {
    gates: [LstmGateParams; 4],
}

fn lstm_params(tape: &mut Tape, store: &ParamStore, dir: &str) -> Result<LstmDirParams> {
    let mut gates = Vec::with_capacity(4);
    for gate in names::LSTM_GATES {
        gates.push(LstmGateParams {
            w_x: tape.param(store, &names::lstm_wx(dir, gate))?,
            w_h: tape.param(store, &names::lstm_wh(dir, gate))?,
            b: tape.param(store, &names::lstm_b(dir, gate))?,
        });
    }
    Ok(LstmDirParams {
        gates: gates
            .try_into()
            .map_err(|_| Error::Config("gate count".into()))?,
    })
}

fn lstm_step(tape: &mut Tape, p: &LstmDirParams, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let mut acts = Vec::with_capacity(4);
    for gp in &p.gates {
        let xa = tape.matmul(gp.w_x, x)?;
        let ha = tape.matmul(gp.w_h, h)?;
        let s = tape.add(xa, ha)?;
        acts.push(tape.add(s, gp.b)?);
    }
    let i = tape.sigmoid(acts[0]);
    let f = tape.sigmoid(acts[1]);
    let o = tape.sigmoid(acts[2]);
    let g = tape.tanh(acts[3]);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Run the bi-LSTM over embedded tokens. Per-word states are the
/// concatenated directional states projected to `d`; the sentence vector
/// is the concatenation of the final backward and forward states (width
/// `2d`).
pub fn encode_question(
    tape: &mut Tape,
    store: &ParamStore,
    table: Var,
    token_ids: &[usize],
    d: usize,
    max_len: usize,
) -> Result<QuestionEncoding> {
    if token_ids.is_empty() {
        return Err(Error::Contract("encode_question: empty token list".into()));
    }
    if token_ids.len() > max_len {
        return Err(Error::Contract(format!(
            "encode_question: {} tokens exceeds maximum {max_len}",
            token_ids.len()
        )));
    }
    let embedded = tape.gather_rows(table, token_ids)?;
    let u = token_ids.len();

    let fwd = lstm_params(tape, store, "fwd")?;
    let bwd = lstm_params(tape, store, "bwd")?;
    let zeros = tape.leaf(crate::tensor::Tensor::zeros(&[d]));

    let mut h_fwd = Vec::with_capacity(u);
    let (mut h, mut c) = (zeros, zeros);
    for t in 0..u {
        let x = tape.select_row(embedded, t)?;
        let (hn, cn) = lstm_step(tape, &fwd, x, h, c)?;
        h_fwd.push(hn);
        h = hn;
        c = cn;
    }
    let mut h_bwd = vec![zeros; u];
    let (mut h, mut c) = (zeros, zeros);
    for t in (0..u).rev() {
        let x = tape.select_row(embedded, t)?;
        let (hn, cn) = lstm_step(tape, &bwd, x, h, c)?;
        h_bwd[t] = hn;
        h = hn;
        c = cn;
    }

    let proj_w = tape.param(store, names::WORDS_PROJ_W)?;
    let proj_b = tape.param(store, names::WORDS_PROJ_B)?;
    let mut words = Vec::with_capacity(u);
    for t in 0..u {
        let both = tape.concat_last(h_fwd[t], h_bwd[t])?;
        let p = tape.matmul(proj_w, both)?;
        words.push(tape.add(p, proj_b)?);
    }
    let words = tape.stack_rows(&words)?;
    // the backward pass ends at position 1, the forward pass at position U
    let sentence = tape.concat_last(h_bwd[0], h_fwd[u - 1])?;
    Ok(QuestionEncoding {
        words,
        sentence,
        len: u,
    })
}

/// Project raw regions into the object-region knowledge base: each row is
/// `W [feature ++ box] + b`.
pub fn encode_object_regions(
    tape: &mut Tape,
    store: &ParamStore,
    regions: &[RawRegion],
    max_regions: usize,
) -> Result<KnowledgeBase> {
    if regions.is_empty() {
        return Err(Error::Contract("encode_object_regions: no regions".into()));
    }
    if regions.len() > max_regions {
        return Err(Error::Contract(format!(
            "encode_object_regions: {} regions exceeds cap {max_regions}",
            regions.len()
        )));
    }
    let f = regions[0].feature.len();
    let mut data = Vec::with_capacity(regions.len() * (f + 6));
    for r in regions {
        r.validate()?;
        if r.feature.len() != f {
            return Err(Error::dimension(
                "encode_object_regions",
                format!("feature widths differ: {} vs {f}", r.feature.len()),
            ));
        }
        data.extend_from_slice(&r.feature);
        data.extend_from_slice(&r.box_);
    }
    let input = tape.leaf(crate::tensor::Tensor::from_vec(
        &[regions.len(), f + 6],
        data,
    )?);
    let w = tape.param(store, names::OKB_W)?;
    let b = tape.param(store, names::OKB_B)?;
    let wt = tape.transpose(w)?;
    let proj = tape.matmul(input, wt)?;
    let rows = tape.add(proj, b)?;
    Ok(KnowledgeBase {
        rows,
        mask: vec![true; regions.len()],
        variant: KbVariant::ObjectRegion,
    })
}

/// Embedding-table row indices describing one scene object for the
/// scene-graph encoder: its name, its attributes, and its outgoing
/// relations as `(relation, target name)` pairs.
#[derive(Clone, Debug)]
pub struct ObjectIndices {
    pub name: usize,
    pub attributes: Vec<usize>,
    pub relations: Vec<(usize, usize)>,
}

/// Resolve a scene into embedding indices, validating edge endpoints.
pub fn scene_graph_indices(scene: &Scene, vocab: &Vocabulary) -> Result<Vec<ObjectIndices>> {
    let pos: std::collections::HashMap<usize, usize> = scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| (o.id, i))
        .collect();
    let mut out: Vec<ObjectIndices> = scene
        .objects
        .iter()
        .map(|o| ObjectIndices {
            name: vocab.lookup(&o.name),
            attributes: o.attributes.iter().map(|a| vocab.lookup(a)).collect(),
            relations: Vec::new(),
        })
        .collect();
    for e in &scene.edges {
        let (Some(&src), Some(&tgt)) = (pos.get(&e.source), pos.get(&e.target)) else {
            return Err(Error::Graph(format!(
                "edge {} -{}-> {} references a missing object",
                e.source, e.relation, e.target
            )));
        };
        let tgt_name = vocab.lookup(&scene.objects[tgt].name);
        out[src]
            .relations
            .push((vocab.lookup(&e.relation), tgt_name));
    }
    Ok(out)
}

/// Build the scene-graph knowledge base. Per object: name embedding,
/// mean of attribute embeddings, and mean over outgoing relations of
/// `mean(relation embedding, target name embedding)`, concatenated and
/// projected to `d`. Empty attribute or relation sets contribute zero
/// vectors.
pub fn encode_scene_graph(
    tape: &mut Tape,
    store: &ParamStore,
    table: Var,
    objects: &[ObjectIndices],
    embed_width: usize,
) -> Result<KnowledgeBase> {
    if objects.is_empty() {
        return Err(Error::Contract("encode_scene_graph: no objects".into()));
    }
    let w = tape.param(store, names::SG_W)?;
    let b = tape.param(store, names::SG_B)?;
    let mut rows = Vec::with_capacity(objects.len());
    for obj in objects {
        let name = {
            let g = tape.gather_rows(table, &[obj.name])?;
            tape.select_row(g, 0)?
        };
        let attr = mean_of_rows(tape, table, &obj.attributes, embed_width)?;
        let rel = if obj.relations.is_empty() {
            tape.leaf(crate::tensor::Tensor::zeros(&[embed_width]))
        } else {
            let mut parts = Vec::with_capacity(obj.relations.len());
            for &(rel_idx, tgt_idx) in &obj.relations {
                let pair = tape.gather_rows(table, &[rel_idx, tgt_idx])?;
                let r = tape.select_row(pair, 0)?;
                let t = tape.select_row(pair, 1)?;
                let s = tape.add(r, t)?;
                parts.push(tape.scale(s, 0.5));
            }
            mean_of_vars(tape, &parts)?
        };
        let na = tape.concat_last(name, attr)?;
        let feat = tape.concat_last(na, rel)?;
        let p = tape.matmul(w, feat)?;
        rows.push(tape.add(p, b)?);
    }
    let rows = tape.stack_rows(&rows)?;
    Ok(KnowledgeBase {
        rows,
        mask: vec![true; objects.len()],
        variant: KbVariant::SceneGraph,
    })
}

fn mean_of_rows(tape: &mut Tape, table: Var, indices: &[usize], width: usize) -> Result<Var> {
    if indices.is_empty() {
        return Ok(tape.leaf(crate::tensor::Tensor::zeros(&[width])));
    }
    let rows = tape.gather_rows(table, indices)?;
    let uniform = tape.leaf(crate::tensor::Tensor::filled(
        &[indices.len()],
        1.0 / indices.len() as Scalar,
    ));
    tape.weighted_sum(uniform, rows)
}

fn mean_of_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / vars.len() as Scalar))
}

/// Pad a knowledge base with zero rows (masked invalid) up to `max_o`.
pub fn pad_kb(tape: &mut Tape, kb: KnowledgeBase, max_o: usize) -> Result<KnowledgeBase> {
    let o = kb.mask.len();
    if o >= max_o {
        return Ok(kb);
    }
    let d = tape.value(kb.rows).cols();
    let zeros = tape.leaf(crate::tensor::Tensor::zeros(&[max_o - o, d]));
    let rows = tape.concat_rows(kb.rows, zeros)?;
    let mut mask = kb.mask;
    mask.resize(max_o, false);
    Ok(KnowledgeBase {
        rows,
        mask,
        variant: kb.variant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Edge, Scene, SceneObject};
    use crate::tensor::Tensor;

    fn store_with_encoders(d: usize, e: usize, f: usize) -> ParamStore {
        let mut store = ParamStore::new();
        register_params(&mut store, d, e, f, 11).unwrap();
        store
    }

    #[test]
    fn question_sentence_width_is_2d() {
        let d = 4;
        let store = store_with_encoders(d, 3, 8);
        let mut tape = Tape::new();
        let table = tape.leaf(
            Tensor::from_vec(&[5, 3], (0..15).map(|i| i as Scalar * 0.1).collect()).unwrap(),
        );
        let enc = encode_question(&mut tape, &store, table, &[2, 3, 4], d, 16).unwrap();
        assert_eq!(tape.value(enc.sentence).shape(), &[2 * d]);
        assert_eq!(tape.value(enc.words).shape(), &[3, d]);
    }

    #[test]
    fn question_single_token() {
        let d = 4;
        let store = store_with_encoders(d, 3, 8);
        let mut tape = Tape::new();
        let table = tape.leaf(
            Tensor::from_vec(&[5, 3], (0..15).map(|i| i as Scalar * 0.1).collect()).unwrap(),
        );
        let enc = encode_question(&mut tape, &store, table, &[2], d, 16).unwrap();
        assert_eq!(enc.len, 1);
        assert_eq!(tape.value(enc.words).shape(), &[1, d]);
        assert_eq!(tape.value(enc.sentence).len(), 2 * d);
    }

    #[test]
    fn question_empty_is_contract_error() {
        let store = store_with_encoders(4, 3, 8);
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(&[5, 3]));
        assert!(matches!(
            encode_question(&mut tape, &store, table, &[], 4, 16).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn object_regions_zero_input_gives_bias() {
        let d = 4;
        let mut store = store_with_encoders(d, 3, 8);
        store
            .value_mut(names::OKB_B)
            .unwrap()
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let region = RawRegion {
            feature: vec![0.0; 8],
            box_: [0.0; 6],
        };
        let kb = encode_object_regions(&mut tape, &store, &[region], 100).unwrap();
        assert_eq!(tape.value(kb.rows).row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(kb.variant, KbVariant::ObjectRegion);
    }

    #[test]
    fn object_regions_box_out_of_range() {
        let store = store_with_encoders(4, 3, 8);
        let mut tape = Tape::new();
        let region = RawRegion {
            feature: vec![0.0; 8],
            box_: [0.0, 0.0, 1.5, 1.0, 0.5, 0.5],
        };
        assert!(matches!(
            encode_object_regions(&mut tape, &store, &[region], 100).unwrap_err(),
            Error::Validation(_)
        ));
    }

    #[test]
    fn object_regions_empty_is_contract_error() {
        let store = store_with_encoders(4, 3, 8);
        let mut tape = Tape::new();
        assert!(matches!(
            encode_object_regions(&mut tape, &store, &[], 100).unwrap_err(),
            Error::Contract(_)
        ));
    }

    fn two_object_scene() -> Scene {
        Scene {
            scene_id: 1,
            objects: vec![
                SceneObject {
                    id: 0,
                    name: "dog".into(),
                    attributes: vec!["brown".into()],
                    box_: [0.1, 0.1, 0.3, 0.3],
                },
                SceneObject {
                    id: 1,
                    name: "ball".into(),
                    attributes: vec![],
                    box_: [0.6, 0.6, 0.8, 0.8],
                },
            ],
            edges: vec![Edge {
                source: 0,
                relation: "left-of".into(),
                target: 1,
            }],
            questions: vec![],
        }
    }

    /// Hand-averaging oracle: name "dog" = [1,0], attribute "brown" =
    /// [0,1], relation "left-of" = [1,1] to subject "ball" = [2,0] gives
    /// relation feature mean([1,1],[2,0]) = [1.5,0.5] and concatenated
    /// row [1,0, 0,1, 1.5,0.5].
    #[test]
    fn scene_graph_row_matches_hand_average() {
        let e = 2;
        let d = 6; // = 3e so the projection can be identity
        let vocab = Vocabulary::build(vec![vec!["dog", "ball", "brown", "left-of"]]);
        let mut store = ParamStore::new();
        register_params(&mut store, d, e, 8, 11).unwrap();
        let w = store.value_mut(names::SG_W).unwrap();
        w.data_mut().fill(0.0);
        for i in 0..6 {
            w.data_mut()[i * 6 + i] = 1.0;
        }
        store.value_mut(names::SG_B).unwrap().data_mut().fill(0.0);

        let mut table = Tensor::zeros(&[vocab.len(), e]);
        let set = |t: &mut Tensor, idx: usize, v: [Scalar; 2]| {
            t.row_mut(idx).copy_from_slice(&v);
        };
        set(&mut table, vocab.lookup("dog"), [1.0, 0.0]);
        set(&mut table, vocab.lookup("brown"), [0.0, 1.0]);
        set(&mut table, vocab.lookup("left-of"), [1.0, 1.0]);
        set(&mut table, vocab.lookup("ball"), [2.0, 0.0]);

        let scene = two_object_scene();
        let indices = scene_graph_indices(&scene, &vocab).unwrap();
        let mut tape = Tape::new();
        let table = tape.leaf(table);
        let kb = encode_scene_graph(&mut tape, &store, table, &indices, e).unwrap();
        let row = tape.value(kb.rows).row(0);
        let want = [1.0, 0.0, 0.0, 1.0, 1.5, 0.5];
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "row {row:?}");
        }
        // the ball has no attributes and no outgoing relations
        let ball = tape.value(kb.rows).row(1);
        assert_eq!(&ball[2..6], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(kb.variant, KbVariant::SceneGraph);
    }

    #[test]
    fn scene_graph_attr_and_relation_order_invariant() {
        let e = 4;
        let d = 5;
        let vocab = Vocabulary::build(vec![vec![
            "dog", "ball", "cat", "red", "big", "near", "holding",
        ]]);
        let mut store = ParamStore::new();
        register_params(&mut store, d, e, 8, 13).unwrap();
        let table_t = {
            let mut t = Tensor::zeros(&[vocab.len(), e]);
            for i in 0..t.len() {
                t.data_mut()[i] = ((i * 37 % 11) as Scalar) * 0.1 - 0.5;
            }
            t
        };
        let base = ObjectIndices {
            name: vocab.lookup("dog"),
            attributes: vec![vocab.lookup("red"), vocab.lookup("big")],
            relations: vec![
                (vocab.lookup("near"), vocab.lookup("ball")),
                (vocab.lookup("holding"), vocab.lookup("cat")),
            ],
        };
        let mut flipped = base.clone();
        flipped.attributes.reverse();
        flipped.relations.reverse();

        let run = |obj: &ObjectIndices| {
            let mut tape = Tape::new();
            let table = tape.leaf(table_t.clone());
            let kb = encode_scene_graph(&mut tape, &store, table, std::slice::from_ref(obj), e)
                .unwrap();
            tape.value(kb.rows).clone()
        };
        let a = run(&base);
        let b = run(&flipped);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dangling_edge_is_graph_error() {
        let vocab = Vocabulary::build(vec![vec!["dog", "ball", "left-of"]]);
        let mut scene = two_object_scene();
        scene.edges[0].target = 99;
        assert!(matches!(
            scene_graph_indices(&scene, &vocab).unwrap_err(),
            Error::Graph(_)
        ));
    }

    #[test]
    fn pad_kb_extends_mask_with_zero_rows() {
        let store = store_with_encoders(4, 3, 8);
        let mut tape = Tape::new();
        let region = RawRegion {
            feature: vec![0.5; 8],
            box_: [0.1, 0.1, 0.2, 0.2, 0.1, 0.1],
        };
        let kb = encode_object_regions(&mut tape, &store, &[region], 100).unwrap();
        let padded = pad_kb(&mut tape, kb, 3).unwrap();
        assert_eq!(padded.mask, vec![true, false, false]);
        assert_eq!(tape.value(padded.rows).shape(), &[3, 4]);
        assert!(tape.value(padded.rows).row(2).iter().all(|&v| v == 0.0));
    }
}
