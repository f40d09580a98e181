use super::bank::{MultiLoraBank, Proj};
use super::config::LmConfig;
use crate::corpus::Task;
use crate::error::{CkfError, Result};
use crate::numerics::{Bindings, ParamStore, Tape, Tensor, Var};
use crate::rng::SplitMix64;

pub const TOK_EMB: &str = "lm.tok_emb";
pub const POS_EMB: &str = "lm.pos_emb";
const LN_EPS: f64 = 1e-5;

fn layer_name(layer: usize, rest: &str) -> String {
    format!("lm.layer{layer}.{rest}")
}

/// Random frozen backbone: embeddings, L pre-norm blocks, final norm.
pub fn init_backbone(cfg: &LmConfig, rng: &mut SplitMix64) -> Result<ParamStore> {
    cfg.validate()?;
    if cfg.vocab == 0 {
        return Err(CkfError::config("lm.vocab", "vocabulary size unknown"));
    }
    let (d, ff, s) = (cfg.d_llm, cfg.d_ff(), cfg.weight_std());
    let mut p = ParamStore::new();
    p.insert(TOK_EMB, Tensor::randn(&[cfg.vocab, d], cfg.emb_std(), rng))?;
    p.insert(POS_EMB, Tensor::randn(&[cfg.max_len, d], cfg.emb_std() * 0.1, rng))?;
    for l in 0..cfg.n_layers {
        for proj in Proj::ALL {
            p.insert(
                layer_name(l, &format!("{}.W", proj.name())),
                Tensor::randn(&[d, d], s, rng),
            )?;
        }
        p.insert(layer_name(l, "ffn.W1"), Tensor::randn(&[d, ff], s, rng))?;
        p.insert(layer_name(l, "ffn.b1"), Tensor::zeros(&[1, ff]))?;
        p.insert(
            layer_name(l, "ffn.W2"),
            Tensor::randn(&[ff, d], 1.0 / (ff as f64).sqrt(), rng),
        )?;
        p.insert(layer_name(l, "ffn.b2"), Tensor::zeros(&[1, d]))?;
        for n in ["g1", "g2"] {
            p.insert(layer_name(l, &format!("norm.{n}")), Tensor::full(&[1, d], 1.0))?;
        }
        for n in ["b1", "b2"] {
            p.insert(layer_name(l, &format!("norm.{n}")), Tensor::zeros(&[1, d]))?;
        }
    }
    p.insert("lm.final_norm.g", Tensor::full(&[1, d], 1.0))?;
    p.insert("lm.final_norm.b", Tensor::zeros(&[1, d]))?;
    Ok(p)
}

/// `x·W`, plus `(x·A)·B` when an adapter is given.
pub fn lora_apply(tape: &mut Tape, x: Var, w: Var, adapter: Option<(Var, Var)>) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    match adapter {
        None => Ok(base),
        Some((a, b)) => {
            let xa = tape.matmul(x, a)?;
            let delta = tape.matmul(xa, b)?;
            tape.add(base, delta)
        }
    }
}

fn adapter_vars(
    b: &Bindings,
    bank: &MultiLoraBank,
    layer: usize,
    proj: Proj,
    task: Task,
) -> Result<Option<(Var, Var)>> {
    match bank.adapter(layer, proj, task)? {
        None => Ok(None),
        Some(n) => Ok(Some((b.get(&n.a)?, b.get(&n.b)?))),
    }
}

/// Causal multi-head self-attention for one layer.
pub fn mha_forward(
    tape: &mut Tape,
    x: Var,
    layer: usize,
    task: Task,
    cfg: &LmConfig,
    bank: &MultiLoraBank,
    b: &Bindings,
) -> Result<Var> {
    let proj = |p: Proj, input: Var, tape: &mut Tape| -> Result<Var> {
        let w = b.get(&layer_name(layer, &format!("{}.W", p.name())))?;
        let ad = adapter_vars(b, bank, layer, p, task)?;
        lora_apply(tape, input, w, ad)
    };
    let q = proj(Proj::Q, x, tape)?;
    let k = proj(Proj::K, x, tape)?;
    let v = proj(Proj::V, x, tape)?;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let a = tape.causal_softmax(s)?;
        heads.push(tape.matmul(a, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    proj(Proj::O, cat, tape)
}

/// Final-normed hidden states (T×d) for a token-embedding sequence.
pub fn forward_hidden(
    tape: &mut Tape,
    embs: Var,
    task: Task,
    cfg: &LmConfig,
    bank: &MultiLoraBank,
    b: &Bindings,
) -> Result<Var> {
    let t = tape.value(embs).rows();
    if t > cfg.max_len {
        return Err(CkfError::contract(format!(
            "sequence length {t} exceeds max_len {}",
            cfg.max_len
        )));
    }
    let positions: Vec<usize> = (0..t).collect();
    let pos = tape.gather(b.get(POS_EMB)?, &positions)?;
    let mut x = tape.add(embs, pos)?;
    for l in 0..cfg.n_layers {
        let g1 = b.get(&layer_name(l, "norm.g1"))?;
        let b1 = b.get(&layer_name(l, "norm.b1"))?;
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let att = mha_forward(tape, h, l, task, cfg, bank, b)?;
        x = tape.add(x, att)?;

        let g2 = b.get(&layer_name(l, "norm.g2"))?;
        let b2 = b.get(&layer_name(l, "norm.b2"))?;
        let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let f = tape.matmul(h, b.get(&layer_name(l, "ffn.W1"))?)?;
        let f = tape.add_row(f, b.get(&layer_name(l, "ffn.b1"))?)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, b.get(&layer_name(l, "ffn.W2"))?)?;
        let f = tape.add_row(f, b.get(&layer_name(l, "ffn.b2"))?)?;
        x = tape.add(x, f)?;
    }
    tape.layer_norm(x, b.get("lm.final_norm.g")?, b.get("lm.final_norm.b")?, LN_EPS)
}

/// Tied-output logits for the selected rows of `hidden`.
pub fn logits_at(tape: &mut Tape, hidden: Var, rows: &[usize], b: &Bindings) -> Result<Var> {
    let h = tape.gather(hidden, rows)?;
    tape.matmul_nt(h, b.get(TOK_EMB)?)
}

/// Full T×V logits.
pub fn forward(
    tape: &mut Tape,
    embs: Var,
    task: Task,
    cfg: &LmConfig,
    bank: &MultiLoraBank,
    b: &Bindings,
) -> Result<Var> {
    let h = forward_hidden(tape, embs, task, cfg, bank, b)?;
    tape.matmul_nt(h, b.get(TOK_EMB)?)
}

/// Plain token-embedding lookup.
pub fn embed(tape: &mut Tape, ids: &[usize], b: &Bindings) -> Result<Var> {
    tape.gather(b.get(TOK_EMB)?, ids)
}

/// Sum over layers and ordered task pairs of the squared off-diagonal
/// entries of each q-side cross-Gram A₁ᵀA₂. Zero with fewer than two
/// q-owning tasks.
pub fn orth_loss(tape: &mut Tape, bank: &MultiLoraBank, b: &Bindings) -> Result<Var> {
    let mut terms = Vec::new();
    for l in 0..bank.n_layers {
        let names = bank.q_a_names(l);
        let vars: Vec<Var> = names.iter().map(|(_, n)| b.get(n)).collect::<Result<_>>()?;
        let transposed: Vec<Var> = vars.iter().map(|&a| tape.transpose(a)).collect();
        for (i, &ti) in transposed.iter().enumerate() {
            for (j, &vj) in vars.iter().enumerate() {
                if i != j {
                    let g = tape.matmul(ti, vj)?;
                    terms.push(tape.offdiag_sq_sum(g)?);
                }
            }
        }
    }
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return Ok(tape.constant(Tensor::scalar(0.0))),
    };
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}
