//! Phase drivers: CTC training (reference / finetune / from-scratch
//! baselines) and representation learning against a frozen reference.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::eval::{evaluate_items, EvalOptions};
use crate::frontend::{make_batches, spec_augment, Batch, LoadedItem, Vocabulary};
use crate::losses::{ctc_loss, encrl_loss};
use crate::model::{
    init_from_slice, save_checkpoint, CheckpointMeta, ForwardCtx, Model, ModelConfig,
};
use crate::tensor::tape::Tape;
use crate::training::optim::{clip_grad_norm, lr_at, AdamW, OptimizerState};
use crate::training::runlog::{fmt_float, RunLog};
use crate::training::{set_global_seed, Phase, Seeds, TrainConfig};

#[derive(Debug, Clone)]
pub struct TrainData {
    pub items: Vec<LoadedItem>,
    pub eval_items: Option<Vec<LoadedItem>>,
    pub vocab: Vocabulary,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: RunLog,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    pub final_wer: Option<f64>,
    pub epoch_wers: Vec<Option<f64>>,
    pub final_path: PathBuf,
    pub best_path: PathBuf,
}

/// Which source layers initialize a shallower finetune target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SliceSpec {
    First,
    Last,
    Indices(Vec<usize>),
}

impl SliceSpec {
    pub fn resolve(&self, target_layers: usize, source_layers: usize) -> Result<Vec<usize>> {
        if target_layers > source_layers {
            return Err(Error::Config(format!(
                "cannot slice {target_layers} layers out of a {source_layers}-layer source"
            )));
        }
        match self {
            SliceSpec::First => Ok((0..target_layers).collect()),
            SliceSpec::Last => Ok((source_layers - target_layers..source_layers).collect()),
            SliceSpec::Indices(idx) => {
                if idx.len() != target_layers {
                    return Err(Error::Config(format!(
                        "{} slice indices given for {target_layers} target layers",
                        idx.len()
                    )));
                }
                Ok(idx.clone())
            }
        }
    }
}

pub struct FinetuneSetup<'a> {
    /// Encoder source, typically the representation-learning checkpoint.
    pub source: &'a Model<f32>,
    /// Target depth; None keeps the source depth.
    pub layers: Option<usize>,
    pub slice: SliceSpec,
    /// Force a freshly initialized classifier even when shapes match.
    pub fresh_head: bool,
}

fn augmented_epoch_items(
    items: &[LoadedItem],
    cfg: &TrainConfig,
    seeds: &mut Seeds,
) -> Vec<LoadedItem> {
    match &cfg.spec_augment {
        None => items.to_vec(),
        Some(sa) => items
            .iter()
            .map(|item| LoadedItem {
                features: spec_augment(&item.features, sa, &mut seeds.specaug),
                tokens: item.tokens.clone(),
                transcript: item.transcript.clone(),
            })
            .collect(),
    }
}

fn header_record(log: &mut RunLog, phase: Phase, cfg: &TrainConfig, n_items: usize) {
    log.record(&[
        ("phase", phase.as_str().into()),
        ("seed", cfg.seed.to_string()),
        ("epochs", cfg.epochs().to_string()),
        ("budget.z", cfg.z.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("peak_lr", fmt_float(cfg.peak_lr)),
        ("warmup_steps", cfg.warmup_steps.to_string()),
        ("decay_gamma", cfg.decay_gamma.to_string()),
        ("weight_decay", fmt_float(cfg.weight_decay)),
        ("items", n_items.to_string()),
    ]);
    if phase == Phase::Finetune {
        // budget arithmetic: each finetuned model costs Z/3 epochs against a
        // from-scratch budget of Z, a 3x saving per model
        log.record(&[
            ("phase", phase.as_str().into()),
            ("budget.finetune_epochs", cfg.epochs().to_string()),
            ("budget.scratch_equiv", cfg.z.to_string()),
            ("budget.speedup", "3".into()),
        ]);
    }
}

struct EpochSummary {
    train_loss: f64,
    wer: Option<f64>,
}

fn finish(
    model: Model<f32>,
    vocab: &Vocabulary,
    phase: Phase,
    cfg: &TrainConfig,
    out_dir: &Path,
    log: RunLog,
    summaries: &[EpochSummary],
    best_epoch: usize,
    notes: Vec<String>,
) -> Result<TrainOutcome> {
    let final_path = out_dir.join("final.ckpt");
    let mut meta = CheckpointMeta::new(
        phase.as_str(),
        summaries.len(),
        cfg.seed,
        vocab.symbols_string(),
    );
    meta.notes = notes;
    save_checkpoint(&model, &meta, &final_path)?;
    log.save(&out_dir.join("run.log"))?;
    let last = summaries.last().expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        log,
        epochs_run: summaries.len(),
        best_epoch,
        final_train_loss: last.train_loss,
        final_wer: last.wer,
        epoch_wers: summaries.iter().map(|s| s.wer).collect(),
        final_path,
        best_path: out_dir.join("best.ckpt"),
    })
}

/// CTC training shared by the reference phase, finetuning, and from-scratch
/// baselines. Saves `best.ckpt` (lowest eval WER, or lowest train loss when
/// no eval set is given), `final.ckpt`, and `run.log` under `out_dir`.
fn ctc_train_loop(
    mut model: Model<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    phase: Phase,
    out_dir: &Path,
    mut notes: Vec<String>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.items.is_empty() {
        return Err(Error::Data("empty training manifest".into()));
    }
    if model.config.vocab_size != data.vocab.size() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match data vocabulary size {}",
            model.config.vocab_size,
            data.vocab.size()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut seeds = set_global_seed(cfg.seed);
    let mut log = RunLog::new();
    header_record(&mut log, phase, cfg, data.items.len());

    let optimizer = AdamW::new(cfg.weight_decay);
    let mut state = OptimizerState::for_params(&model.params);
    let mut global_step = 0usize;
    let mut best_metric = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut summaries: Vec<EpochSummary> = Vec::new();
    let eval_opts = EvalOptions::default();

    for epoch in 1..=cfg.epochs() {
        let epoch_items = augmented_epoch_items(&data.items, cfg, &mut seeds);
        let batches = make_batches(
            &epoch_items,
            cfg.batch_size,
            cfg.sort_by_length,
            Some(&mut seeds.data),
        )?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            global_step += 1;
            let lr = lr_at(global_step, cfg.peak_lr, cfg.warmup_steps, cfg.decay_gamma);
            let loss = ctc_step(&mut model, batch, lr, &optimizer, &mut state, cfg, &mut seeds)?;
            loss_sum += loss;
            log.record(&[
                ("step", global_step.to_string()),
                ("phase", phase.as_str().into()),
                ("lr", fmt_float(lr)),
                ("loss.total", fmt_float(loss)),
            ]);
        }
        let train_loss = loss_sum / batches.len() as f64;

        let wer = match &data.eval_items {
            Some(items) => Some(evaluate_items(&model, &data.vocab, items, &eval_opts)?.wer),
            None => None,
        };
        let mut fields = vec![
            ("epoch", epoch.to_string()),
            ("phase", phase.as_str().to_string()),
            ("train_loss", fmt_float(train_loss)),
        ];
        if let Some(w) = wer {
            fields.push(("wer", format!("{w:.6}")));
        }
        log.record(&fields.iter().map(|(k, v)| (*k, v.clone())).collect::<Vec<_>>());

        let metric = wer.unwrap_or(train_loss);
        if metric < best_metric {
            best_metric = metric;
            best_epoch = epoch;
            let mut meta = CheckpointMeta::new(
                phase.as_str(),
                epoch,
                cfg.seed,
                data.vocab.symbols_string(),
            );
            meta.notes = notes.clone();
            save_checkpoint(&model, &meta, &out_dir.join("best.ckpt"))?;
        }
        summaries.push(EpochSummary { train_loss, wer });
    }

    log.record(&[
        ("completed", "1".into()),
        ("phase", phase.as_str().into()),
        ("epochs_run", summaries.len().to_string()),
        ("best_epoch", best_epoch.to_string()),
    ]);
    notes.push(format!("best_epoch={best_epoch}"));
    finish(
        model, &data.vocab, phase, cfg, out_dir, log, &summaries, best_epoch, notes,
    )
}

fn ctc_step(
    model: &mut Model<f32>,
    batch: &Batch,
    lr: f64,
    optimizer: &AdamW,
    state: &mut OptimizerState<f32>,
    cfg: &TrainConfig,
    seeds: &mut Seeds,
) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true)?;
    let mut ctx = ForwardCtx::train(&mut seeds.dropout);
    let enc = model.forward_encoder(
        &tape,
        &bound,
        &batch.features,
        &batch.feature_lengths,
        &mut ctx,
    )?;
    let logits = model.forward_classifier(&tape, &bound, enc.hidden)?;
    let log_probs = tape.log_softmax(logits, 2)?;
    let ctc = ctc_loss(
        &tape,
        log_probs,
        &enc.lengths,
        &batch.targets,
        &batch.target_lengths,
        batch.l_max,
    )?;
    tape.backward(ctc.mean)?;
    model.params.zero_grads();
    model.params.absorb_grads(&tape, &bound)?;
    if let Some(max_norm) = cfg.grad_clip {
        clip_grad_norm(&mut model.params, max_norm);
    }
    optimizer.step(&mut model.params, state, lr);
    Ok(tape.item_of(ctc.mean)? as f64)
}

/// Train an N-layer model with CTC for Z epochs; also used for from-scratch
/// baselines of any depth.
pub fn train_reference(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &TrainData,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let mut seeds = set_global_seed(cfg.seed);
    let mut model_cfg = model_cfg.clone();
    model_cfg.vocab_size = data.vocab.size();
    let model = Model::build(model_cfg, &mut seeds.init)?;
    ctc_train_loop(model, data, cfg, Phase::Reference, out_dir, Vec::new())
}

/// Representation learning: train a fresh `student_layers`-deep encoder (and
/// classifier) to match the frozen reference's features and embeddings. The
/// transcription decoder plays no part; no CTC loss is evaluated.
pub fn train_encrl(
    cfg: &TrainConfig,
    reference: &Model<f32>,
    student_layers: usize,
    data: &TrainData,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.items.is_empty() {
        return Err(Error::Data("empty training manifest".into()));
    }
    if reference.config.vocab_size != data.vocab.size() {
        return Err(Error::Config(format!(
            "reference vocab_size {} does not match data vocabulary size {}",
            reference.config.vocab_size,
            data.vocab.size()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut seeds = set_global_seed(cfg.seed);
    let mut log = RunLog::new();
    header_record(&mut log, Phase::Encrl, cfg, data.items.len());
    if 2 * student_layers > reference.config.n_layers {
        log.record(&[
            ("warning", "depth_ratio".into()),
            (
                "detail",
                format!(
                    "student_layers={} exceeds half of reference {}",
                    student_layers, reference.config.n_layers
                ),
            ),
        ]);
    }

    let reference_snapshot: Vec<Vec<u32>> = reference
        .params
        .iter()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect();

    let student_cfg = reference.config.with_layers(student_layers);
    let mut student = Model::build(student_cfg, &mut seeds.init)?;
    let optimizer = AdamW::new(cfg.weight_decay);
    let mut state = OptimizerState::for_params(&student.params);
    let mut global_step = 0usize;
    let mut best_metric = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut summaries: Vec<EpochSummary> = Vec::new();

    for epoch in 1..=cfg.epochs() {
        let epoch_items = augmented_epoch_items(&data.items, cfg, &mut seeds);
        let batches = make_batches(
            &epoch_items,
            cfg.batch_size,
            cfg.sort_by_length,
            Some(&mut seeds.data),
        )?;
        let mut loss_sum = 0.0;
        let mut ref_grads_clean = true;
        for batch in &batches {
            global_step += 1;
            let lr = lr_at(global_step, cfg.peak_lr, cfg.warmup_steps, cfg.decay_gamma);

            let tape = Tape::new();
            let ref_bound = reference.bind(&tape, false)?;
            let stu_bound = student.bind(&tape, true)?;
            let features = tape.constant(batch.features.clone())?;

            // reference runs in eval mode; student trains
            let enc_ref = reference.forward_encoder_vars(
                &tape,
                &ref_bound,
                features,
                &batch.feature_lengths,
                &mut ForwardCtx::eval(),
            )?;
            let mut ctx = ForwardCtx::train(&mut seeds.dropout);
            let enc_stu = student.forward_encoder_vars(
                &tape,
                &stu_bound,
                features,
                &batch.feature_lengths,
                &mut ctx,
            )?;
            debug_assert_eq!(enc_ref.lengths, enc_stu.lengths);
            let b_ref = reference.forward_classifier(&tape, &ref_bound, enc_ref.hidden)?;
            let b_stu = student.forward_classifier(&tape, &stu_bound, enc_stu.hidden)?;

            let t_sub = tape.shape_of(enc_stu.hidden)[1];
            let pad_mask = student.pad_mask(&tape, &enc_stu.lengths, t_sub)?;
            let loss = encrl_loss(
                &tape,
                enc_ref.hidden,
                enc_stu.hidden,
                b_ref,
                b_stu,
                pad_mask,
                &enc_stu.lengths,
                cfg.loss_mode,
                cfg.loss_weights,
                cfg.clip_temperature,
            )?;
            tape.backward(loss.total)?;
            student.params.zero_grads();
            student.params.absorb_grads(&tape, &stu_bound)?;
            if let Some(max_norm) = cfg.grad_clip {
                clip_grad_norm(&mut student.params, max_norm);
            }
            optimizer.step(&mut student.params, &mut state, lr);

            // frozen contract: the reference never receives gradients
            ref_grads_clean &= (0..reference.params.len())
                .all(|i| tape.grad(ref_bound.var(crate::tensor::tape::ParamId(i))).is_none());

            let total = tape.item_of(loss.total)? as f64;
            loss_sum += total;
            let mut fields = vec![
                ("step", global_step.to_string()),
                ("phase", "encrl".to_string()),
                ("lr", fmt_float(lr)),
                ("loss.total", fmt_float(total)),
            ];
            for (name, var) in &loss.components {
                let key = match *name {
                    "clip" => "loss.clip",
                    "mse" => "loss.mse",
                    "mae" => "loss.mae",
                    other => other,
                };
                fields.push((key, fmt_float(tape.item_of(*var)? as f64)));
            }
            log.record(&fields.iter().map(|(k, v)| (*k, v.clone())).collect::<Vec<_>>());
        }
        let train_loss = loss_sum / batches.len() as f64;
        log.record(&[
            ("epoch", epoch.to_string()),
            ("phase", "encrl".into()),
            ("train_loss", fmt_float(train_loss)),
            ("ref_grads_zero", if ref_grads_clean { "1" } else { "0" }.into()),
        ]);
        if !ref_grads_clean {
            return Err(Error::Usage(
                "frozen reference received gradients during representation learning".into(),
            ));
        }
        if train_loss < best_metric {
            best_metric = train_loss;
            best_epoch = epoch;
            let meta = CheckpointMeta::new("encrl", epoch, cfg.seed, data.vocab.symbols_string());
            save_checkpoint(&student, &meta, &out_dir.join("best.ckpt"))?;
        }
        summaries.push(EpochSummary {
            train_loss,
            wer: None,
        });
    }

    // bit-exactness of the frozen reference across the whole run
    let unchanged = reference
        .params
        .iter()
        .zip(&reference_snapshot)
        .all(|(p, snap)| {
            p.value.data().len() == snap.len()
                && p.value.data().iter().zip(snap).all(|(v, s)| v.to_bits() == *s)
        });
    log.record(&[
        ("completed", "1".into()),
        ("phase", "encrl".into()),
        ("epochs_run", summaries.len().to_string()),
        ("best_epoch", best_epoch.to_string()),
        ("reference_unchanged", if unchanged { "1" } else { "0" }.into()),
    ]);
    if !unchanged {
        return Err(Error::Usage(
            "reference parameters changed during representation learning".into(),
        ));
    }
    finish(
        student,
        &data.vocab,
        Phase::Encrl,
        cfg,
        out_dir,
        log,
        &summaries,
        best_epoch,
        Vec::new(),
    )
}

/// Attach the CTC head and finetune. The classifier transfers from the
/// source when the vocabulary (and so its shape) matches and `fresh_head` is
/// not set; otherwise it starts fresh.
pub fn finetune(
    cfg: &TrainConfig,
    setup: FinetuneSetup,
    data: &TrainData,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let mut seeds = set_global_seed(cfg.seed);
    let target_layers = setup.layers.unwrap_or(setup.source.config.n_layers);
    let indices = setup
        .slice
        .resolve(target_layers, setup.source.config.n_layers)?;

    let mut target_cfg = setup.source.config.with_layers(target_layers);
    target_cfg.vocab_size = data.vocab.size();
    let mut model = Model::build(target_cfg, &mut seeds.init)?;
    let report = init_from_slice(&mut model, setup.source, &indices)?;
    if setup.fresh_head {
        model.reinit_classifier(&mut seeds.init);
    }

    let mut notes = vec![format!("slice_indices={indices:?}")];
    if setup.fresh_head {
        notes.push("classifier=fresh (forced)".into());
    } else if report.fresh.iter().any(|n| n.starts_with("classifier.")) {
        notes.push("classifier=fresh (vocab mismatch)".into());
    } else {
        notes.push("classifier=reused".into());
    }
    for name in &report.fresh {
        notes.push(format!("fresh_init={name}"));
    }
    ctc_train_loop(model, data, cfg, Phase::Finetune, out_dir, notes)
}
