use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{LossForm, Variant};
use crate::collab::CfEmbeddings;
use crate::corpus::{answer_ids, render_prompt, RenderedPrompt, Task, TaskExample, Vocab};
use crate::error::{CkfError, Result};
use crate::fusion::{self, pool_or_self, CollabInputs, FusionConfig, FusionMode};
use crate::lm::{self, forward, init_backbone, LmConfig, MultiLoraBank, TOK_EMB};
use crate::numerics::{Bindings, ParamStore, Tape, Tensor, Var};
use crate::rng::SplitMix64;

pub const STEP_KEY: &str = "train.step";
pub const RNG_KEY: &str = "train.rng_state";

/// Everything needed to rebuild a model around its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub lm: LmConfig,
    pub h: usize,
    pub w2_std: f64,
    pub d_cf: usize,
    pub variant: Variant,
    pub tasks: Vec<Task>,
}

/// Frozen backbone, adapter bank and fusion networks.
#[derive(Debug, Clone, PartialEq)]
pub struct CkfModel {
    pub spec: ModelSpec,
    pub bank: MultiLoraBank,
    pub fusion: FusionConfig,
    pub params: ParamStore,
}

/// Read-only inputs shared by every example.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub titles: &'a [String],
    pub vocab: &'a Vocab,
    pub cf: &'a CfEmbeddings,
}

impl CkfModel {
    /// Fresh model. A given `backbone` is used as is; otherwise one is
    /// drawn from `seed`.
    pub fn init(spec: ModelSpec, backbone: Option<ParamStore>, seed: u64) -> Result<Self> {
        spec.lm.validate()?;
        if spec.h == 0 {
            return Err(CkfError::config("fusion.h", "must be at least 1"));
        }
        let params = match backbone {
            Some(p) => p,
            None => init_backbone(&spec.lm, &mut SplitMix64::derive(seed, "backbone"))?,
        };
        let mut model = Self::assemble(spec, params)?;
        let mut rng = SplitMix64::derive(seed, "adapters");
        model.bank.init(
            &mut model.params,
            model.spec.lm.d_llm,
            model.spec.lm.rank,
            model.spec.lm.lora_std(),
            &mut rng,
        )?;
        let mut rng = SplitMix64::derive(seed, "fusion");
        fusion::init_fusion(&model.fusion, &mut model.params, &mut rng)?;
        Ok(model)
    }

    /// Wraps existing parameters (for example a loaded checkpoint).
    pub fn assemble(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let vs = spec.variant.spec();
        if vs.single_task && spec.tasks.len() != 1 {
            return Err(CkfError::config("train.tasks", "variant S trains exactly one task"));
        }
        let bank = MultiLoraBank::new(vs.bank, &spec.tasks, spec.lm.n_layers)?;
        let fusion = FusionConfig {
            mode: vs.fusion,
            h: spec.h,
            d_cf: spec.d_cf,
            d_llm: spec.lm.d_llm,
            w2_std: spec.w2_std,
        };
        Ok(Self {
            spec,
            bank,
            fusion,
            params,
        })
    }

    pub fn loss_form(&self) -> LossForm {
        self.spec.variant.spec().loss
    }

    /// Whether prompts carry collaborative placeholders at inference.
    pub fn injects(&self) -> bool {
        self.fusion.mode != FusionMode::None
    }

    /// Names that receive gradients when training `task`.
    pub fn trainable_for(&self, task: Task) -> Result<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        for ad in self.bank.task_adapters(task)? {
            out.insert(ad.a);
            out.insert(ad.b);
        }
        out.extend(
            self.params
                .names()
                .filter(|n| n.starts_with("fusion."))
                .map(str::to_string),
        );
        if self.spec.lm.train_token_table {
            out.insert(TOK_EMB.to_string());
        }
        Ok(out)
    }

    /// Every parameter trained by some task, with its scalar count.
    pub fn trainable_params(&self) -> Result<(usize, Vec<(String, usize)>)> {
        let mut names = BTreeSet::new();
        for &t in &self.bank.tasks {
            names.extend(self.trainable_for(t)?);
        }
        let listing: Vec<(String, usize)> = names
            .into_iter()
            .map(|n| {
                let len = self.params.get(&n)?.len();
                Ok((n, len))
            })
            .collect::<Result<_>>()?;
        Ok((listing.iter().map(|(_, n)| n).sum(), listing))
    }

    pub fn adapter_param_count(&self) -> usize {
        lm::adapter_param_count(&self.bank, self.spec.lm.d_llm, self.spec.lm.rank)
    }

    /// Model parameters plus step counter and PRNG state.
    pub fn checkpoint(&self, step: u64, rng_state: u64) -> Result<ParamStore> {
        let mut p = self.params.clone();
        p.insert(STEP_KEY, Tensor::scalar(step as f64))?;
        p.insert(
            RNG_KEY,
            Tensor::row(&[(rng_state >> 32) as f64, (rng_state & 0xffff_ffff) as f64]),
        )?;
        Ok(p)
    }

    /// Inverse of [`CkfModel::checkpoint`]: the model, step and PRNG state.
    pub fn from_checkpoint(spec: ModelSpec, mut p: ParamStore) -> Result<(Self, u64, u64)> {
        let step = p.remove(STEP_KEY).map_or(0, |t| t.item() as u64);
        let rng = p
            .remove(RNG_KEY)
            .map_or(0, |t| ((t.data()[0] as u64) << 32) | t.data()[1] as u64);
        Ok((Self::assemble(spec, p)?, step, rng))
    }

    /// Prompt embeddings: plain lookup for the text-only prompt, fused
    /// placeholders for the injected one.
    pub fn embed_prompt(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        ids: &[usize],
        injected: Option<(&RenderedPrompt, &CollabInputs)>,
    ) -> Result<Var> {
        match injected {
            None => lm::embed(tape, ids, b),
            Some((prompt, x)) => {
                let vectors = fusion::collab_vectors(tape, self.fusion.mode, x, b)?;
                let table = b.get(TOK_EMB)?;
                fusion::inject(tape, ids, (prompt.user_pos, prompt.item_pos), table, vectors)
            }
        }
    }

    /// Logits for `prompt ++ suffix`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        task: Task,
        prompt: &[usize],
        suffix: &[usize],
        injected: Option<(&RenderedPrompt, &CollabInputs)>,
    ) -> Result<Var> {
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(suffix);
        let embs = self.embed_prompt(tape, b, &ids, injected)?;
        forward(tape, embs, task, &self.spec.lm, &self.bank, b)
    }

    /// Mean answer-token cross-entropy of one prompt. Only positions that
    /// predict an answer token are supervised.
    pub fn answer_loss(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        task: Task,
        prompt: &[usize],
        answer: &[usize],
        injected: Option<(&RenderedPrompt, &CollabInputs)>,
    ) -> Result<Var> {
        if answer.is_empty() || prompt.is_empty() {
            return Err(CkfError::contract("answer loss needs a prompt and an answer"));
        }
        let logits = self.logits(tape, b, task, prompt, &answer[..answer.len() - 1], injected)?;
        let (targets, mask) = answer_targets(prompt.len(), answer);
        tape.cross_entropy(logits, &targets, &mask)
    }
}

/// Targets and mask over `prompt_len + answer.len() - 1` positions: the
/// last prompt position predicts the first answer token and so on.
pub(crate) fn answer_targets(prompt_len: usize, answer: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let n = prompt_len + answer.len() - 1;
    let mut targets = vec![0; n];
    let mut mask = vec![false; n];
    for (k, &a) in answer.iter().enumerate() {
        targets[prompt_len - 1 + k] = a;
        mask[prompt_len - 1 + k] = true;
    }
    (targets, mask)
}

/// One example rendered for training or scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub task: Task,
    pub user: usize,
    pub text_only: Vec<usize>,
    pub injected: Option<RenderedPrompt>,
    pub answer: Vec<usize>,
    pub collab: Option<CollabInputs>,
}

impl Prepared {
    pub fn injected_pair(&self) -> Option<(&RenderedPrompt, &CollabInputs)> {
        self.injected.as_ref().zip(self.collab.as_ref())
    }
}

/// Renders both prompts and computes the pooled collaborative inputs.
pub fn prepare(model: &CkfModel, ctx: &Context<'_>, ex: &TaskExample) -> Result<Prepared> {
    let t1 = render_prompt(ex, ctx.titles, ctx.vocab, false)?;
    let (injected, collab) = if model.injects() {
        let t2 = render_prompt(ex, ctx.titles, ctx.vocab, true)?;
        let hist: Vec<&[f64]> = ex
            .history
            .iter()
            .map(|&v| ctx.cf.lookup_item(v))
            .collect::<Result<_>>()?;
        let e_u = ctx.cf.lookup_user(ex.user)?.to_vec();
        let e_v = ctx.cf.lookup_item(ex.focus_item())?.to_vec();
        let p_u = pool_or_self(&e_u, &hist)?;
        let p_v = pool_or_self(&e_v, &hist)?;
        (Some(t2), Some(CollabInputs { e_u, p_u, e_v, p_v }))
    } else {
        (None, None)
    };
    Ok(Prepared {
        task: ex.task,
        user: ex.user,
        text_only: t1.ids,
        injected,
        answer: answer_ids(ex, ctx.titles, ctx.vocab)?,
        collab,
    })
}

/// Loss of one task-homogeneous batch and its logged components.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub loss_t1: Option<f64>,
    pub loss_t2: Option<f64>,
    pub loss_orth: f64,
}

fn mean_of(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = tape.add(acc, x)?;
    }
    Ok(tape.scale(acc, 1.0 / xs.len() as f64))
}

/// Combined objective for `batch` at curriculum weight `beta`.
pub fn batch_loss(
    tape: &mut Tape,
    model: &CkfModel,
    b: &Bindings,
    batch: &[&Prepared],
    beta: f64,
    lambda_orth: f64,
) -> Result<BatchLoss> {
    let task = match batch.first() {
        Some(p) => p.task,
        None => return Err(CkfError::contract("empty batch")),
    };
    if let Some(p) = batch.iter().find(|p| p.task != task) {
        return Err(CkfError::contract(format!("mixed-task batch: {task} and {}", p.task)));
    }
    let form = model.loss_form();
    let want_t1 = matches!(form, LossForm::Curriculum | LossForm::TextOnly);
    let want_t2 = matches!(form, LossForm::Curriculum | LossForm::InjectedOnly);

    let l1 = if want_t1 {
        let parts: Vec<Var> = batch
            .iter()
            .map(|p| model.answer_loss(tape, b, task, &p.text_only, &p.answer, None))
            .collect::<Result<_>>()?;
        Some(mean_of(tape, &parts)?)
    } else {
        None
    };
    let l2 = if want_t2 {
        let parts: Vec<Var> = batch
            .iter()
            .map(|p| {
                let pair = p
                    .injected_pair()
                    .ok_or_else(|| CkfError::contract("example was prepared without collaborative inputs"))?;
                model.answer_loss(tape, b, task, &pair.0.ids, &p.answer, Some(pair))
            })
            .collect::<Result<_>>()?;
        Some(mean_of(tape, &parts)?)
    } else {
        None
    };
    let orth = lm::orth_loss(tape, &model.bank, b)?;

    let main = match (form, l1, l2) {
        (LossForm::Curriculum, Some(a), Some(c)) => {
            let a = tape.scale(a, beta);
            let c = tape.scale(c, 1.0 - beta);
            tape.add(a, c)?
        }
        (LossForm::TextOnly, Some(a), _) => a,
        (LossForm::InjectedOnly, _, Some(c)) => c,
        _ => unreachable!("loss form selects its prompts"),
    };
    let weighted = tape.scale(orth, lambda_orth);
    let total = tape.add(main, weighted)?;
    Ok(BatchLoss {
        total,
        loss_t1: l1.map(|v| tape.value(v).item()),
        loss_t2: l2.map(|v| tape.value(v).item()),
        loss_orth: tape.value(orth).item(),
    })
}
