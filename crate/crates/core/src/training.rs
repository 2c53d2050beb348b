//! Base-model training: warmup learning-rate schedule, Adam, the training
//! loop and its loss-curve/checkpoint side effects.

use crate::checkpoint::Checkpoint;
use crate::data::{make_batches, Corpus};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::{Path, PathBuf};

/// Training hyperparameters.
///
/// [`TrainConfig::desk`] are the minutes-scale defaults; the published
/// full-scale recipe stays expressible through [`TrainConfig::paper_scale`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: u64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f32,
    pub token_batch_budget: usize,
    pub checkpoint_interval: u64,
    pub checkpoints_to_average: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            steps: 4000,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            label_smoothing: 0.1,
            token_batch_budget: 2000,
            checkpoint_interval: 500,
            checkpoints_to_average: 3,
            seed: 42,
        }
    }

    /// The full-scale recipe: 8k warmup, 100k steps, ~25k-token batches,
    /// last 5 checkpoints averaged at a 1,500-step interval.
    pub fn paper_scale() -> Self {
        TrainConfig {
            steps: 100_000,
            warmup_steps: 8_000,
            token_batch_budget: 25_000,
            checkpoint_interval: 1_500,
            checkpoints_to_average: 5,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup must be at least one step".into()));
        }
        if self.checkpoints_to_average == 0 {
            return Err(Error::Config("must average at least one checkpoint".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint interval must be positive".into()));
        }
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warmup:
/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn lr_schedule(step: u64, warmup: u64, d_model: usize) -> f64 {
    let s = step as f64;
    let w = warmup as f64;
    (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

/// Bias-corrected Adam moments, one slot per parameter tensor.
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> AdamState {
        AdamState {
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update over all parameters. Missing gradients count as zero.
pub fn adam_step(
    params: &[(String, Tensor)],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (idx, (_, p)) in params.iter().enumerate() {
        let grad = p.grad();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let mut data = p.to_vec();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]) as f64;
            let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
            let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            data[i] = (data[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
        p.set_data(data);
    }
}

#[derive(Debug)]
pub struct TrainResult {
    /// `(step, loss, lr)` per training step.
    pub loss_curve: Vec<(u64, f64, f64)>,
    pub checkpoint_paths: Vec<PathBuf>,
    /// Teacher-forced next-token accuracy on the dev split, in percent.
    pub final_dev_accuracy: f64,
}

/// Train the model in place. Checkpoints and `loss_curve.csv` are written
/// under `out_dir` when given; a non-finite loss aborts with the step
/// number.
pub fn train(
    model: &mut TransformerModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if model.frozen() {
        return Err(Error::Frozen("training a frozen model is rejected".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let params = model.named_parameters();
    let mut adam = AdamState::new(&params);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6472_6f70_6f75_74u64);
    let d_model = model.config().d_model;
    let max_len = model.config().max_len;

    let mut curve = Vec::with_capacity(cfg.steps as usize);
    let mut checkpoint_paths = Vec::new();
    let mut epoch = 0u64;
    let mut batches = make_batches(&corpus.train, cfg.token_batch_budget, max_len, cfg.seed)?;
    let mut cursor = 0usize;
    for step in 1..=cfg.steps {
        if cursor >= batches.len() {
            epoch += 1;
            batches = make_batches(
                &corpus.train,
                cfg.token_batch_budget,
                max_len,
                cfg.seed.wrapping_add(epoch),
            )?;
            cursor = 0;
        }
        let batch = &batches[cursor];
        cursor += 1;

        let loss = model.training_loss(batch, cfg.label_smoothing, &mut dropout_rng)?;
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        loss.backward()?;
        let lr = lr_schedule(step, cfg.warmup_steps, d_model);
        adam_step(&params, &mut adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        model.zero_grads();
        curve.push((step, loss_value as f64, lr));

        if step % cfg.checkpoint_interval == 0 {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("ckpt-{step:07}.bin"));
                Checkpoint::from_model(model, step).save(&path)?;
                checkpoint_paths.push(path);
            }
        }
    }

    if let Some(dir) = out_dir {
        Checkpoint::from_model(model, cfg.steps).save(&dir.join("model.bin"))?;
        write_loss_curve(&dir.join("loss_curve.csv"), &curve)?;
    }

    let dev_batches = make_batches(&corpus.dev, cfg.token_batch_budget, max_len, 0)?;
    let final_dev_accuracy = model.teacher_forced_accuracy(&dev_batches)?;
    Ok(TrainResult { loss_curve: curve, checkpoint_paths, final_dev_accuracy })
}

pub fn write_loss_curve(path: &Path, curve: &[(u64, f64, f64)]) -> Result<()> {
    let mut text = String::from("step,loss,lr\n");
    for (step, loss, lr) in curve {
        text.push_str(&format!("{step},{loss:.6},{lr:.8}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
