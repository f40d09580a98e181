use super::model::answer_targets;
use super::*;
use crate::corpus::{build_examples, Corpus, ExampleOptions, Partition, Sampler};
use crate::fusion::inject_call_count;
use crate::numerics::{finite_diff_check, Bindings, Tape, Tensor};
use crate::rng::SplitMix64;
use crate::testutil::{ctx, random_cf, tiny_corpus, tiny_model};

fn prepared(
    model: &CkfModel,
    corpus: &Corpus,
    cf: &crate::collab::CfEmbeddings,
    task: Task,
    n: usize,
) -> Vec<Prepared> {
    let exs = build_examples(
        corpus,
        Partition::Train,
        task,
        &ExampleOptions::default(),
        Sampler::Uniform,
    )
    .unwrap();
    exs.iter()
        .take(n)
        .map(|e| prepare(model, &ctx(corpus, cf), e).unwrap())
        .collect()
}

fn randomize_b(model: &mut CkfModel, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for ad in model.bank.all_adapters() {
        let shape = model.params.get(&ad.b).unwrap().shape().to_vec();
        model.params.set(&ad.b, Tensor::randn(&shape, 0.3, &mut rng)).unwrap();
    }
}

#[test]
fn beta_endpoints_and_midpoints() {
    let s = BetaSchedule::new(0.125, 400).unwrap();
    assert_eq!(s.beta(400), 0.5);
    assert!((s.beta(0) - 1.0 / (1.0 + (-8.0f64).exp())).abs() < 1e-12);
    assert!((s.beta(0) - 0.999665).abs() < 1e-6);
    let s = BetaSchedule::new(0.5, 400).unwrap();
    assert!((s.beta(200) - 0.7311).abs() < 1e-4);
}

#[test]
fn beta_strictly_decreasing() {
    let s = BetaSchedule::new(0.125, 1000).unwrap();
    for i in 0..1000 {
        let (a, b) = (s.beta(i), s.beta(i + 1));
        assert!(a > b && b > 0.0 && a <= 1.0, "step {i}");
    }
}

#[test]
fn literal_beta_parse_starts_low() {
    let mut s = BetaSchedule::new(0.125, 100).unwrap();
    s.literal = true;
    let b0 = 1.0 / (1.0 + (-1.0f64).exp() / 0.125);
    assert!((s.beta(0) - b0).abs() < 1e-15);
    assert!(s.beta(0) < 0.26);
}

#[test]
fn beta_rejects_bad_tau() {
    assert!(matches!(BetaSchedule::new(0.0, 10), Err(CkfError::Config { .. })));
    assert!(BetaSchedule::new(0.1, 0).is_err());
}

#[test]
fn variant_dispatch_table() {
    use crate::fusion::FusionMode as F;
    use crate::lm::BankMode as B;
    use LossForm as L;
    let table = [
        (Variant::Ckf, F::MetaNetwork, B::MultiLora, L::Curriculum, false),
        (Variant::Nck, F::None, B::MultiLora, L::TextOnly, false),
        (Variant::Npm, F::SharedGeneric, B::MultiLora, L::Curriculum, false),
        (Variant::Tlm, F::SeparateGeneric, B::MultiLora, L::Curriculum, false),
        (Variant::Nml, F::MetaNetwork, B::SingleShared, L::Curriculum, false),
        (Variant::Nen, F::MetaNetwork, B::MultiLora, L::InjectedOnly, false),
        (Variant::S, F::MetaNetwork, B::MultiLora, L::Curriculum, true),
    ];
    assert_eq!(table.len(), Variant::ALL.len());
    for (v, f, b, l, single) in table {
        let s = v.spec();
        assert_eq!((s.fusion, s.bank, s.loss, s.single_task), (f, b, l, single), "{v}");
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(format!("CKF-{v}").parse::<Variant>().unwrap(), v);
    }
    assert!("XYZ".parse::<Variant>().is_err());
}

#[test]
fn config_validation_names_fields() {
    let bad = |c: TrainConfig| match c.validate() {
        Err(CkfError::Config { field, .. }) => field,
        other => panic!("{other:?}"),
    };
    assert_eq!(
        bad(TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        }),
        "train.tau"
    );
    assert_eq!(
        bad(TrainConfig {
            batch: 0,
            ..TrainConfig::default()
        }),
        "train.batch"
    );
    assert_eq!(
        bad(TrainConfig {
            variant: Variant::S,
            ..TrainConfig::default()
        }),
        "train.tasks"
    );
    TrainConfig {
        variant: Variant::S,
        tasks: vec![Task::Ctr],
        ..TrainConfig::default()
    }
    .validate()
    .unwrap();
}

#[test]
fn loss_endpoints_match_components() {
    let corpus = tiny_corpus(false);
    let cf = random_cf(&corpus, 8, 1);
    let mut model = tiny_model(&corpus, Variant::Ckf, &[Task::Rp, Task::Ctr], 2);
    randomize_b(&mut model, 3);
    let exs = prepared(&model, &corpus, &cf, Task::Rp, 4);
    let batch: Vec<&Prepared> = exs.iter().collect();
    for (beta, lam) in [(1.0, 1.0), (0.0, 1.0), (0.3, 0.5)] {
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, &model.params, |_| false);
        let l = batch_loss(&mut tape, &model, &b, &batch, beta, lam).unwrap();
        let total = tape.value(l.total).item();
        let (l1, l2) = (l.loss_t1.unwrap(), l.loss_t2.unwrap());
        assert!(total.is_finite() && total > 0.0);
        assert!(l.loss_orth > 0.0);
        let want = beta * l1 + (1.0 - beta) * l2 + lam * l.loss_orth;
        assert!((total - want).abs() < 1e-12, "beta {beta}: {total} vs {want}");
    }
}

#[test]
fn loss_forms_follow_variant() {
    let corpus = tiny_corpus(false);
    let cf = random_cf(&corpus, 8, 1);
    for (v, t1, t2) in [
        (Variant::Nck, true, false),
        (Variant::Nen, false, true),
        (Variant::Npm, true, true),
    ] {
        let model = tiny_model(&corpus, v, &[Task::Rp, Task::Ctr], 2);
        let exs = prepared(&model, &corpus, &cf, Task::Ctr, 3);
        let batch: Vec<&Prepared> = exs.iter().collect();
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, &model.params, |_| false);
        let l = batch_loss(&mut tape, &model, &b, &batch, 0.5, 1.0).unwrap();
        assert_eq!((l.loss_t1.is_some(), l.loss_t2.is_some()), (t1, t2), "{v}");
        let total = tape.value(l.total).item();
        let main = l.loss_t1.or(l.loss_t2).unwrap();
        if !(t1 && t2) {
            assert!((total - main - l.loss_orth).abs() < 1e-12);
        }
    }
}

#[test]
fn mixed_task_batch_rejected() {
    let corpus = tiny_corpus(false);
    let cf = random_cf(&corpus, 8, 1);
    let model = tiny_model(&corpus, Variant::Ckf, &[Task::Rp, Task::Ctr], 2);
    let a = prepared(&model, &corpus, &cf, Task::Rp, 1);
    let c = prepared(&model, &corpus, &cf, Task::Ctr, 1);
    let mut tape = Tape::new();
    let b = Bindings::bind(&mut tape, &model.params, |_| false);
    let r = batch_loss(&mut tape, &model, &b, &[&a[0], &c[0]], 0.5, 1.0);
    assert!(matches!(r, Err(CkfError::Contract(_))));
    assert!(matches!(
        batch_loss(&mut tape, &model, &b, &[], 0.5, 1.0),
        Err(CkfError::Contract(_))
    ));
}

#[test]
fn prompt_positions_are_not_supervised() {
    let (targets, mask) = answer_targets(5, &[7, 8]);
    assert_eq!(mask, vec![false, false, false, false, true, true]);
    assert_eq!(&targets[4..], &[7, 8]);
    let mut rng = SplitMix64::new(4);
    let logits = Tensor::randn(&[6, 9], 1.0, &mut rng);
    let mut other = targets.clone();
    for (t, m) in other.iter_mut().zip(&mask) {
        if !m {
            *t = 3;
        }
    }
    let mut tape = Tape::new();
    let lv = tape.constant(logits);
    let a = tape.cross_entropy(lv, &targets, &mask).unwrap();
    let b = tape.cross_entropy(lv, &other, &mask).unwrap();
    assert_eq!(tape.value(a).item(), tape.value(b).item());
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let corpus = tiny_corpus(false);
    let cf = random_cf(&corpus, 8, 5);
    let mut model = tiny_model(&corpus, Variant::Ckf, &[Task::Rp, Task::Ctr], 6);
    randomize_b(&mut model, 7);
    let exs = prepared(&model, &corpus, &cf, Task::Rp, 2);
    let batch: Vec<&Prepared> = exs.iter().collect();
    let names = model.trainable_for(Task::Rp).unwrap();
    assert!(names.iter().any(|n| n.starts_with("fusion.user_meta")));
    for name in &names {
        let x0 = model.params.get(name).unwrap().clone();
        let check = finite_diff_check(
            |tape, x| {
                let b = Bindings::bind(tape, &model.params, |_| false).with(name, x);
                Ok(batch_loss(tape, &model, &b, &batch, 0.4, 1.0)?.total)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-4, "{name}: {check:?}");
    }
}

fn small_train_cfg(variant: Variant, tasks: &[Task]) -> TrainConfig {
    TrainConfig {
        variant,
        tasks: tasks.to_vec(),
        epochs: 1,
        batch: 4,
        lr: 1e-3,
        seed: 11,
        max_per_user: Some(2),
        max_valid: Some(6),
        ..TrainConfig::default()
    }
}

fn run(variant: Variant, tasks: &[Task], cfg: &TrainConfig) -> (CkfModel, TrainReport, Vec<StepLog>) {
    let corpus = tiny_corpus(false);
    let cf = random_cf(&corpus, 8, 1);
    let mut model = tiny_model(&corpus, variant, tasks, 2);
    let data = build_train_data(&corpus, &ctx(&corpus, &cf), &model, cfg, &ExampleOptions::default()).unwrap();
    let mut logs = Vec::new();
    let report = train(&mut model, &data, cfg, |s| {
        logs.push(s.clone());
        Ok(())
    })
    .unwrap();
    (model, report, logs)
}

#[test]
fn single_task_step_leaves_other_q_adapters_alone() {
    let corpus = tiny_corpus(false);
    let cf = random_cf(&corpus, 8, 1);
    let mut model = tiny_model(&corpus, Variant::Ckf, &[Task::Rp, Task::Ctr], 2);
    randomize_b(&mut model, 9);
    let before = model.params.clone();
    let cfg = small_train_cfg(Variant::Ckf, &[Task::Rp, Task::Ctr]);
    let mut data = build_train_data(&corpus, &ctx(&corpus, &cf), &model, &cfg, &ExampleOptions::default()).unwrap();
    data.train.retain(|p| p.task == Task::Rp);
    data.train.truncate(cfg.batch);
    data.valid.clear();
    let report = train(&mut model, &data, &cfg, |_| Ok(())).unwrap();
    assert_eq!(report.steps, 1);
    let changed = |n: &str| before.get(n).unwrap() != model.params.get(n).unwrap();
    let (rp, ctr) = (Task::Rp.index(), Task::Ctr.index());
    for m in ["A", "B"] {
        assert!(changed(&format!("lora.task{rp}.layer0.q.{m}")));
        assert!(!changed(&format!("lora.task{ctr}.layer0.q.{m}")));
        for p in ["k", "v", "o"] {
            assert!(changed(&format!("lora.shared.layer0.{p}.{m}")));
        }
    }
    for n in before.names() {
        if n.starts_with("lm.") {
            assert!(!changed(n), "{n} is frozen");
        }
    }
}

#[test]
fn training_is_deterministic_and_logged() {
    let tasks = [Task::Rp, Task::Ctr, Task::TopK];
    let cfg = small_train_cfg(Variant::Ckf, &tasks);
    let (m1, r1, logs) = run(Variant::Ckf, &tasks, &cfg);
    let (m2, r2, _) = run(Variant::Ckf, &tasks, &cfg);
    assert_eq!(m1.params.fingerprint(), m2.params.fingerprint());
    assert_eq!(r1, r2);
    assert_eq!(logs.len(), r1.steps);
    // round-robin: consecutive batches switch task while all queues last
    assert_eq!(logs[0].task, Task::Rp);
    assert_eq!(logs[1].task, Task::Ctr);
    assert_eq!(logs[2].task, Task::TopK);
    assert!(logs.windows(2).all(|w| w[0].beta > w[1].beta));
    let line = serde_json::to_string(&logs[0]).unwrap();
    for key in ["step", "task", "beta", "loss_t1", "loss_t2", "loss_orth", "total"] {
        assert!(line.contains(&format!("\"{key}\"")), "{line}");
    }
}

#[test]
fn single_task_variant_builds_one_q_set() {
    let cfg = small_train_cfg(Variant::S, &[Task::Ctr]);
    let (model, _, logs) = run(Variant::S, &[Task::Ctr], &cfg);
    assert!(logs.iter().all(|l| l.task == Task::Ctr));
    let q_sets: Vec<&str> = model.params.names().filter(|n| n.ends_with(".q.A")).collect();
    assert_eq!(q_sets, vec![format!("lora.task{}.layer0.q.A", Task::Ctr.index())]);
}

#[test]
fn text_only_variant_never_injects() {
    let tasks = [Task::Rp, Task::Ctr];
    let before = inject_call_count();
    let (model, _, logs) = run(Variant::Nck, &tasks, &small_train_cfg(Variant::Nck, &tasks));
    assert_eq!(inject_call_count(), before);
    assert!(logs.iter().all(|l| l.loss_t2.is_none()));
    assert_eq!(model.params.count("fusion."), 0);
}

#[test]
fn shared_adapter_variant_has_one_set() {
    let tasks = [Task::Rp, Task::Ctr, Task::TopK];
    let model = tiny_model(&tiny_corpus(false), Variant::Nml, &tasks, 1);
    assert_eq!(model.bank.adapters_per_layer(), 4);
    assert!(model.params.names().all(|n| !n.starts_with("lora.task")));
    let (count, listing) = model.trainable_params().unwrap();
    let adapters = model.adapter_param_count();
    assert_eq!(adapters, 4 * 2 * 16 * 2);
    assert_eq!(count, adapters + model.params.count("fusion."));
    assert!(listing.iter().all(|(n, _)| !n.starts_with("lm.")));
}

#[test]
fn checkpoint_carries_step_and_rng() {
    let corpus = tiny_corpus(false);
    let model = tiny_model(&corpus, Variant::Ckf, &[Task::Rp], 1);
    let state = 0xdead_beef_1234_5678u64;
    let ck = model.checkpoint(42, state).unwrap();
    let (back, step, rng) = CkfModel::from_checkpoint(model.spec.clone(), ck).unwrap();
    assert_eq!((step, rng), (42, state));
    assert_eq!(back, model);
}
