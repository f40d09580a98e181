//! Maps collaborative embeddings into token space through personalized
//! meta-network mappings and splices them into prompt embeddings.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::error::{CkfError, Result};
use crate::numerics::{Bindings, ParamStore, Tape, Tensor, Var};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Separate user-side and item-side meta-networks.
    MetaNetwork,
    /// One linear map shared by users and items.
    SharedGeneric,
    /// Two linear maps, one per side.
    SeparateGeneric,
    /// No collaborative injection.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub h: usize,
    pub d_cf: usize,
    pub d_llm: usize,
    pub w2_std: f64,
}

pub const USER_META: &str = "fusion.user_meta";
pub const ITEM_META: &str = "fusion.item_meta";
pub const SHARED_MAP: &str = "fusion.shared_map";
pub const USER_MAP: &str = "fusion.user_map";
pub const ITEM_MAP: &str = "fusion.item_map";

/// Attention-pooled history and its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    pub p: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Dot-product attention of `query` over `history`:
/// α = softmax(query·hⱼ), p = Σ αⱼ hⱼ.
pub fn attention_pool(query: &[f64], history: &[&[f64]]) -> Result<Pooled> {
    if history.is_empty() {
        return Err(CkfError::contract("attention_pool needs a nonempty history"));
    }
    let scores: Vec<f64> = history
        .iter()
        .map(|h| {
            if h.len() != query.len() {
                return Err(CkfError::Dimension {
                    op: "attention_pool",
                    left: vec![query.len()],
                    right: vec![h.len()],
                });
            }
            Ok(query.iter().zip(*h).map(|(a, b)| a * b).sum())
        })
        .collect::<Result<_>>()?;
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let alpha: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut p = vec![0.0; query.len()];
    for (a, h) in alpha.iter().zip(history) {
        for (pi, hi) in p.iter_mut().zip(*h) {
            *pi += a * hi;
        }
    }
    Ok(Pooled { p, alpha })
}

/// Pool, or the query itself when there is no history.
pub fn pool_or_self(query: &[f64], history: &[&[f64]]) -> Result<Vec<f64>> {
    if history.is_empty() {
        Ok(query.to_vec())
    } else {
        Ok(attention_pool(query, history)?.p)
    }
}

/// Adds the fusion parameters for `cfg.mode`.
pub fn init_fusion(cfg: &FusionConfig, params: &mut ParamStore, rng: &mut SplitMix64) -> Result<()> {
    let (dc, dl) = (cfg.d_cf, cfg.d_llm);
    let meta = |params: &mut ParamStore, prefix: &str, rng: &mut SplitMix64| -> Result<()> {
        params.insert(
            format!("{prefix}.W1"),
            Tensor::randn(&[dc, cfg.h], 1.0 / (dc as f64).sqrt(), rng),
        )?;
        params.insert(format!("{prefix}.b1"), Tensor::zeros(&[1, cfg.h]))?;
        params.insert(
            format!("{prefix}.W2"),
            Tensor::randn(&[cfg.h, dc * dl], cfg.w2_std, rng),
        )?;
        params.insert(format!("{prefix}.b2"), Tensor::zeros(&[1, dc * dl]))?;
        Ok(())
    };
    let linear = |params: &mut ParamStore, prefix: &str, rng: &mut SplitMix64| -> Result<()> {
        params.insert(format!("{prefix}.W"), Tensor::randn(&[dc, dl], cfg.w2_std, rng))?;
        params.insert(format!("{prefix}.b"), Tensor::zeros(&[1, dl]))?;
        Ok(())
    };
    match cfg.mode {
        FusionMode::MetaNetwork => {
            meta(params, USER_META, rng)?;
            meta(params, ITEM_META, rng)
        }
        FusionMode::SharedGeneric => linear(params, SHARED_MAP, rng),
        FusionMode::SeparateGeneric => {
            linear(params, USER_MAP, rng)?;
            linear(params, ITEM_MAP, rng)
        }
        FusionMode::None => Ok(()),
    }
}

/// w = reshape(ReLU(p·W1 + b1)·W2 + b2, d_cf × d_llm).
pub fn generate_mapping(tape: &mut Tape, p: Var, prefix: &str, b: &Bindings) -> Result<Var> {
    let w1 = b.get(&format!("{prefix}.W1"))?;
    let h = tape.matmul(p, w1)?;
    let h = tape.add_row(h, b.get(&format!("{prefix}.b1"))?)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, b.get(&format!("{prefix}.W2"))?)?;
    let out = tape.add_row(out, b.get(&format!("{prefix}.b2"))?)?;
    let d_cf = tape.value(w1).rows();
    let d_llm = tape.value(out).cols() / d_cf;
    tape.reshape(out, vec![d_cf, d_llm])
}

/// eᵖ = e·w.
pub fn project(tape: &mut Tape, e: Var, w: Var) -> Result<Var> {
    tape.matmul(e, w)
}

/// e·W + b for a generic mapper.
pub fn generic_map(tape: &mut Tape, e: Var, prefix: &str, b: &Bindings) -> Result<Var> {
    let y = tape.matmul(e, b.get(&format!("{prefix}.W"))?)?;
    tape.add_row(y, b.get(&format!("{prefix}.b"))?)
}

/// Inputs for one example's collaborative vectors (all 1×d_cf rows).
#[derive(Debug, Clone, PartialEq)]
pub struct CollabInputs {
    pub e_u: Vec<f64>,
    pub p_u: Vec<f64>,
    pub e_v: Vec<f64>,
    pub p_v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    User,
    Item,
}

/// One side's projected vector from its CF row `e` and pooled row `p`, or
/// `None` when the mode injects nothing.
pub fn side_vector(
    tape: &mut Tape,
    mode: FusionMode,
    side: Side,
    e: &[f64],
    p: &[f64],
    b: &Bindings,
) -> Result<Option<Var>> {
    let e = tape.constant(Tensor::row(e));
    Ok(match mode {
        FusionMode::None => None,
        FusionMode::MetaNetwork => {
            let p = tape.constant(Tensor::row(p));
            let w = generate_mapping(tape, p, if side == Side::User { USER_META } else { ITEM_META }, b)?;
            Some(project(tape, e, w)?)
        }
        FusionMode::SharedGeneric => Some(generic_map(tape, e, SHARED_MAP, b)?),
        FusionMode::SeparateGeneric => Some(generic_map(
            tape,
            e,
            if side == Side::User { USER_MAP } else { ITEM_MAP },
            b,
        )?),
    })
}

/// Projected user and item vectors under `mode`, or `None` when the mode
/// injects nothing.
pub fn collab_vectors(tape: &mut Tape, mode: FusionMode, x: &CollabInputs, b: &Bindings) -> Result<Option<(Var, Var)>> {
    let u = side_vector(tape, mode, Side::User, &x.e_u, &x.p_u, b)?;
    let v = side_vector(tape, mode, Side::Item, &x.e_v, &x.p_v, b)?;
    Ok(u.zip(v))
}

thread_local! {
    static INJECT_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`inject`] calls made on this thread.
pub fn inject_call_count() -> usize {
    INJECT_CALLS.with(Cell::get)
}

/// Token-table rows for `ids` with the user and item placeholder rows
/// replaced by the projected vectors.
pub fn inject(
    tape: &mut Tape,
    ids: &[usize],
    positions: (Option<usize>, Option<usize>),
    token_table: Var,
    vectors: Option<(Var, Var)>,
) -> Result<Var> {
    INJECT_CALLS.with(|c| c.set(c.get() + 1));
    let base = tape.gather(token_table, ids)?;
    match (positions, vectors) {
        ((None, None), None) => Ok(base),
        ((Some(pu), Some(pv)), Some((eu, ev))) => tape.replace_rows(base, &[(pu, eu), (pv, ev)]),
        _ => Err(CkfError::contract(
            "placeholder positions and collaborative vectors do not match",
        )),
    }
}
