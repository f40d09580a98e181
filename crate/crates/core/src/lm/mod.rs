//! Micro decoder-only transformer with the low-rank adapter bank.

mod bank;
mod config;
mod pretrain;
mod transformer;

pub use bank::{AdapterNames, BankMode, MultiLoraBank, Proj};
pub use config::LmConfig;
pub use pretrain::{pretrain_backbone, PretrainConfig};
pub use transformer::{
    embed, forward, forward_hidden, init_backbone, logits_at, lora_apply, mha_forward, orth_loss, POS_EMB, TOK_EMB,
};

/// Adapter parameters in the bank: 2·d·r per adapter.
pub fn adapter_param_count(bank: &MultiLoraBank, d_llm: usize, rank: usize) -> usize {
    bank.all_adapters().len() * 2 * d_llm * rank
}
