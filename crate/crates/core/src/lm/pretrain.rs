use super::bank::{BankMode, MultiLoraBank};
use super::config::LmConfig;
use super::transformer::{embed, forward};
use crate::corpus::Task;
use crate::error::{CkfError, Result};
use crate::numerics::{AdamW, AdamWConfig, Bindings, ParamStore, Tape};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Next-token training of the whole backbone on token sequences (each
/// starting with BOS). Returns the mean loss of each step.
pub fn pretrain_backbone(
    params: &mut ParamStore,
    cfg: &LmConfig,
    sequences: &[Vec<usize>],
    pc: &PretrainConfig,
) -> Result<Vec<f64>> {
    let usable: Vec<&Vec<usize>> = sequences.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(CkfError::contract("pretraining needs sequences of at least two tokens"));
    }
    let bank = MultiLoraBank::new(BankMode::None, &[Task::Rp], cfg.n_layers)?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: pc.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut rng = SplitMix64::derive(pc.seed, "pretrain");
    let mut losses = Vec::with_capacity(pc.steps);
    for step in 0..pc.steps {
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, params, |n| n.starts_with("lm."));
        let mut total = None;
        for _ in 0..pc.batch {
            let seq = usable[rng.below(usable.len())];
            let seq = &seq[..seq.len().min(cfg.max_len + 1)];
            let inputs = &seq[..seq.len() - 1];
            let x = embed(&mut tape, inputs, &b)?;
            let logits = forward(&mut tape, x, Task::Rp, cfg, &bank, &b)?;
            let mask = vec![true; inputs.len()];
            let l = tape.cross_entropy(logits, &seq[1..], &mask)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let loss = tape.scale(total.expect("batch >= 1"), 1.0 / pc.batch as f64);
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(CkfError::Numeric(format!("pretraining loss {lv} at step {step}")));
        }
        losses.push(lv);
        let grads = tape.backward(loss)?;
        let named: Vec<(String, _)> = b
            .iter()
            .filter_map(|(n, v)| grads.get(v).map(|g| (n.to_string(), g.clone())))
            .collect();
        opt.step(params, named.iter().map(|(n, g)| (n.as_str(), g)), |_| false)?;
    }
    Ok(losses)
}
