//! One reasoning step: the reason, extract, and update gates, in both
//! branch variants, including super-diagonal fusion.
//!
//! A cell takes the question encoding and a knowledge base, attends over
//! question words (reason), attends over knowledge-base rows guided by
//! the reasoning state (extract), and gates the extracted information
//! into the memory state (update). Gate weights are shared across the P
//! steps of a branch except the per-cell question projection; the two
//! branches have fully independent cell parameters.

use serde::{Deserialize, Serialize};

use crate::encode::{KbVariant, KnowledgeBase};
use crate::tensor::{ParamStore, Tape, Var};
use crate::{Error, Result, Scalar};

/// Reasoning state `r_i` and memory state `m_i`, both width `d`.
#[derive(Clone, Copy)]
pub struct CellState {
    pub reasoning: Var,
    pub memory: Var,
}

/// The two attention distributions one cell step produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub step: usize,
    pub branch: String,
    pub question_attention: Vec<Scalar>,
    pub kb_attention: Vec<Scalar>,
}

/// CP-decomposed third-order fusion tensor: left/right factors `[d, R]`
/// and the output factor `[R, d]`.
pub struct FusionParams {
    pub left: Var,
    pub right: Var,
    pub out: Var,
    pub rank: usize,
}

/// Tape handles for one cell step's parameters.
pub struct CellParams {
    pub w_q: Var,
    pub b_q: Var,
    pub w_rq: Var,
    pub b_rq: Var,
    pub w_ra: Var,
    pub b_ra: Var,
    pub w_m: Var,
    pub b_m: Var,
    pub w_s: Var,
    pub b_s: Var,
    pub w_c: Var,
    pub b_c: Var,
    pub w_e: Var,
    pub b_e: Var,
    pub w_logit: Var,
    pub b_logit: Var,
    pub fusion: Option<FusionParams>,
    pub w_u: Var,
    pub b_u: Var,
    pub w_gate: Var,
    pub b_gate: Var,
}

/// Parameter-name scheme for a branch's cells. `branch` is `okb` or
/// `sgkb`.
pub mod names {
    pub fn cell_wq(branch: &str, i: usize) -> String {
        format!("{branch}/cell{i}/w_q")
    }
    pub fn cell_bq(branch: &str, i: usize) -> String {
        format!("{branch}/cell{i}/b_q")
    }
    pub fn shared(branch: &str, name: &str) -> String {
        format!("{branch}/{name}")
    }
}

/// Register all parameters for one branch: `cells` question projections
/// plus the shared gate weights. `with_fusion` adds the super-diagonal
/// factor matrices (object-region branch with SD fusion enabled).
pub fn register_branch_params(
    store: &mut ParamStore,
    branch: &str,
    d: usize,
    cells: usize,
    fusion_rank: usize,
    with_fusion: bool,
    gate_bias_init: Scalar,
    seed: u64,
) -> Result<()> {
    if cells == 0 {
        return Err(Error::Config("cell count must be >= 1".into()));
    }
    for i in 1..=cells {
        store.insert_xavier(&names::cell_wq(branch, i), d, 2 * d, seed)?;
        store.insert_zeros(&names::cell_bq(branch, i), &[d])?;
    }
    let s = |n: &str| names::shared(branch, n);
    store.insert_xavier(&s("reason/w_rq"), d, 2 * d, seed)?;
    store.insert_zeros(&s("reason/b_rq"), &[d])?;
    store.insert_xavier_vec(&s("reason/w_ra"), d, seed)?;
    store.insert_zeros(&s("reason/b_ra"), &[1])?;
    store.insert_xavier(&s("extract/w_m"), d, d, seed)?;
    store.insert_zeros(&s("extract/b_m"), &[d])?;
    store.insert_xavier(&s("extract/w_s"), d, d, seed)?;
    store.insert_zeros(&s("extract/b_s"), &[d])?;
    store.insert_xavier(&s("extract/w_c"), d, 2 * d, seed)?;
    store.insert_zeros(&s("extract/b_c"), &[d])?;
    store.insert_xavier(&s("extract/w_e"), d, d, seed)?;
    store.insert_zeros(&s("extract/b_e"), &[d])?;
    store.insert_xavier_vec(&s("extract/w_logit"), d, seed)?;
    store.insert_zeros(&s("extract/b_logit"), &[1])?;
    if with_fusion {
        if fusion_rank == 0 {
            return Err(Error::Config("fusion rank must be >= 1".into()));
        }
        store.insert_xavier(&s("fuse/left"), d, fusion_rank, seed)?;
        store.insert_xavier(&s("fuse/right"), d, fusion_rank, seed)?;
        store.insert_xavier(&s("fuse/out"), fusion_rank, d, seed)?;
    }
    store.insert_xavier(&s("update/w_u"), d, 2 * d, seed)?;
    store.insert_zeros(&s("update/b_u"), &[d])?;
    store.insert_xavier_vec(&s("update/w_gate"), d, seed)?;
    store.insert_const(&s("update/b_gate"), &[1], gate_bias_init)?;
    // learned step-0 state
    store.insert_zeros(&s("r0"), &[d])?;
    store.insert_zeros(&s("m0"), &[d])?;
    Ok(())
}

impl CellParams {
    /// Fetch the parameters for cell `cell_index` (1-based) of `branch`.
    pub fn fetch(
        tape: &mut Tape,
        store: &ParamStore,
        branch: &str,
        cell_index: usize,
        cells: usize,
        with_fusion: bool,
    ) -> Result<CellParams> {
        if cell_index == 0 || cell_index > cells {
            return Err(Error::Contract(format!(
                "cell index {cell_index} outside 1..={cells}"
            )));
        }
        let s = |n: &str| names::shared(branch, n);
        let fusion = if with_fusion {
            let left = tape.param(store, &s("fuse/left"))?;
            let rank = tape.value(left).shape()[1];
            Some(FusionParams {
                left,
                right: tape.param(store, &s("fuse/right"))?,
                out: tape.param(store, &s("fuse/out"))?,
                rank,
            })
        } else {
            None
        };
        Ok(CellParams {
            w_q: tape.param(store, &names::cell_wq(branch, cell_index))?,
            b_q: tape.param(store, &names::cell_bq(branch, cell_index))?,
            w_rq: tape.param(store, &s("reason/w_rq"))?,
            b_rq: tape.param(store, &s("reason/b_rq"))?,
            w_ra: tape.param(store, &s("reason/w_ra"))?,
            b_ra: tape.param(store, &s("reason/b_ra"))?,
            w_m: tape.param(store, &s("extract/w_m"))?,
            b_m: tape.param(store, &s("extract/b_m"))?,
            w_s: tape.param(store, &s("extract/w_s"))?,
            b_s: tape.param(store, &s("extract/b_s"))?,
            w_c: tape.param(store, &s("extract/w_c"))?,
            b_c: tape.param(store, &s("extract/b_c"))?,
            w_e: tape.param(store, &s("extract/w_e"))?,
            b_e: tape.param(store, &s("extract/b_e"))?,
            w_logit: tape.param(store, &s("extract/w_logit"))?,
            b_logit: tape.param(store, &s("extract/b_logit"))?,
            fusion,
            w_u: tape.param(store, &s("update/w_u"))?,
            b_u: tape.param(store, &s("update/b_u"))?,
            w_gate: tape.param(store, &s("update/w_gate"))?,
            b_gate: tape.param(store, &s("update/b_gate"))?,
        })
    }

    /// Learned initial state of a branch.
    pub fn initial_state(tape: &mut Tape, store: &ParamStore, branch: &str) -> Result<CellState> {
        Ok(CellState {
            reasoning: tape.param(store, &names::shared(branch, "r0"))?,
            memory: tape.param(store, &names::shared(branch, "m0"))?,
        })
    }
}

/// Attend over question words: positional question projection, previous
/// reasoning state mixed in, per-word scores, softmax, and the weighted
/// sum that becomes the new reasoning state.
pub fn reason_gate(
    tape: &mut Tape,
    q: Var,
    words: Var,
    prev: &CellState,
    params: &CellParams,
) -> Result<(Var, Var)> {
    let qp = tape.matmul(params.w_q, q)?;
    let q_i = tape.add(qp, params.b_q)?;
    let cat = tape.concat_last(prev.reasoning, q_i)?;
    let rqp = tape.matmul(params.w_rq, cat)?;
    let rq = tape.add(rqp, params.b_rq)?;
    let scaled = tape.mul(words, rq)?;
    let scores = tape.matmul(scaled, params.w_ra)?;
    let ra = tape.add(scores, params.b_ra)?;
    let rv = tape.softmax_rows(ra, None)?;
    let r_i = tape.weighted_sum(rv, words)?;
    Ok((r_i, rv))
}

/// Attend over knowledge-base rows. The memory interaction and concat
/// projection are shared by both variants; the reasoning interaction is
/// an elementwise product for the scene-graph variant and super-diagonal
/// fusion for the object-region variant (falling back to the elementwise
/// product when fusion is disabled).
pub fn extract_gate(
    tape: &mut Tape,
    r_i: Var,
    m_prev: Var,
    kb: &KnowledgeBase,
    params: &CellParams,
) -> Result<(Var, Var)> {
    let mp = tape.matmul(params.w_m, m_prev)?;
    let mem = tape.add(mp, params.b_m)?;
    let wst = tape.transpose(params.w_s)?;
    let kbp = tape.matmul(kb.rows, wst)?;
    let kbp = tape.add(kbp, params.b_s)?;
    let si = tape.mul(kbp, mem)?;
    let cat = tape.concat_last(si, kb.rows)?;
    let wct = tape.transpose(params.w_c)?;
    let sip = tape.matmul(cat, wct)?;
    let si2 = tape.add(sip, params.b_c)?;

    let interacted = match (kb.variant, &params.fusion) {
        (KbVariant::ObjectRegion, Some(fusion)) => {
            superdiagonal_fuse_rows(tape, r_i, si2, fusion)?
        }
        (KbVariant::SceneGraph, Some(_)) => {
            return Err(Error::Config(
                "scene-graph branch does not take fusion parameters".into(),
            ))
        }
        _ => tape.mul(si2, r_i)?,
    };
    let wet = tape.transpose(params.w_e)?;
    let eap = tape.matmul(interacted, wet)?;
    let ea_vec = tape.add(eap, params.b_e)?;

    let scores = tape.matmul(ea_vec, params.w_logit)?;
    let logits = tape.add(scores, params.b_logit)?;
    let ev = tape.softmax_rows(logits, Some(&kb.mask))?;
    let e_i = tape.weighted_sum(ev, kb.rows)?;
    Ok((e_i, ev))
}

/// Rank-R super-diagonal (CP) bilinear map of two `d` vectors:
/// `z = Outᵀ ((Leftᵀ x) ⊙ (Rightᵀ y))`.
pub fn superdiagonal_fuse(tape: &mut Tape, x: Var, y: Var, theta: &FusionParams) -> Result<Var> {
    if theta.rank == 0 {
        return Err(Error::Config("fusion rank must be >= 1".into()));
    }
    let lt = tape.transpose(theta.left)?;
    let rt = tape.transpose(theta.right)?;
    let lx = tape.matmul(lt, x)?;
    let ry = tape.matmul(rt, y)?;
    let h = tape.mul(lx, ry)?;
    let ot = tape.transpose(theta.out)?;
    tape.matmul(ot, h)
}

/// [`superdiagonal_fuse`] of `x` against every row of `rows` at once.
fn superdiagonal_fuse_rows(
    tape: &mut Tape,
    x: Var,
    rows: Var,
    theta: &FusionParams,
) -> Result<Var> {
    if theta.rank == 0 {
        return Err(Error::Config("fusion rank must be >= 1".into()));
    }
    let lt = tape.transpose(theta.left)?;
    let lx = tape.matmul(lt, x)?;
    let v = tape.matmul(rows, theta.right)?;
    let h = tape.mul(v, lx)?;
    tape.matmul(h, theta.out)
}

/// Blend the candidate memory into the previous one through a scalar
/// gate on the reasoning state.
pub fn update_gate(
    tape: &mut Tape,
    e_i: Var,
    r_i: Var,
    m_prev: Var,
    params: &CellParams,
) -> Result<Var> {
    let cat = tape.concat_last(e_i, m_prev)?;
    let mp = tape.matmul(params.w_u, cat)?;
    let m_cand = tape.add(mp, params.b_u)?;
    let gp = tape.dot(params.w_gate, r_i)?;
    let gate_logit = tape.add(gp, params.b_gate)?;
    let gate = tape.sigmoid(gate_logit);
    let one = tape.scalar(1.0);
    let inv = tape.sub(one, gate)?;
    let keep = tape.mul(m_prev, gate)?;
    let take = tape.mul(m_cand, inv)?;
    tape.add(keep, take)
}

/// One full reasoning step: reason, extract, update, in order. Returns
/// the new state and the step's attention record.
pub fn run_cell(
    tape: &mut Tape,
    state: &CellState,
    q: Var,
    words: Var,
    kb: &KnowledgeBase,
    step: usize,
    params: &CellParams,
) -> Result<(CellState, AttentionRecord)> {
    let (r_i, rv) = reason_gate(tape, q, words, state, params)?;
    let (e_i, ev) = extract_gate(tape, r_i, state.memory, kb, params)?;
    let m_i = update_gate(tape, e_i, r_i, state.memory, params)?;

    let rv_vals = tape.value(rv).data().to_vec();
    let ev_vals = tape.value(ev).data().to_vec();
    debug_assert!(
        (rv_vals.iter().sum::<Scalar>() - 1.0).abs() < 1e-6,
        "rv must sum to 1"
    );
    debug_assert!(
        (ev_vals.iter().sum::<Scalar>() - 1.0).abs() < 1e-6,
        "ev must sum to 1"
    );
    debug_assert!(
        kb.mask
            .iter()
            .zip(&ev_vals)
            .all(|(&m, &v)| m || v == 0.0),
        "masked slots must be exactly 0"
    );
    let record = AttentionRecord {
        step,
        branch: match kb.variant {
            KbVariant::ObjectRegion => "okb".to_string(),
            KbVariant::SceneGraph => "sgkb".to_string(),
        },
        question_attention: rv_vals,
        kb_attention: ev_vals,
    };
    Ok((
        CellState {
            reasoning: r_i,
            memory: m_i,
        },
        record,
    ))
}
