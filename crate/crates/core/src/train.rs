//! Next-token training loop, evaluation and step records.

use crate::data::{Batch, Batcher};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::tensor::{Graph, Var};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    /// Distillation against teacher pseudo-labels.
    Stage1,
    /// Continual training on true next-token labels.
    Stage2,
}

/// One optimizer step. Loss components are `None` outside distillation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub l_i: Option<f64>,
    pub l_s: Option<f64>,
    pub l_h: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub tokens_per_sec: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub final_perplexity: Option<f64>,
}

impl TrainReport {
    /// Mean total loss over records `[from, to)`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let w = &self.records[from..to];
        w.iter().map(|r| r.total).sum::<f64>() / w.len() as f64
    }
}

/// Newline-delimited JSON writer: a header line echoing the run config,
/// then one line per step record.
pub struct NdjsonSink<W: Write> {
    out: W,
}

impl<W: Write> NdjsonSink<W> {
    pub fn new<H: Serialize>(mut out: W, header: &H) -> Result<Self> {
        serde_json::to_writer(&mut out, header)?;
        out.write_all(b"\n")?;
        Ok(NdjsonSink { out })
    }

    pub fn record(&mut self, r: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, r)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Mean next-token cross-entropy of `logits[.., vocab]` against `targets`.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let logp = g.log_softmax(logits)?;
    let picked = g.pick(logp, targets)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// Builds the next-token loss of `model` on `batch` without stepping.
pub fn lm_loss(g: &mut Graph, model: &TransformerModel, batch: &Batch) -> Result<(Var, crate::model::ForwardPass)> {
    let pass = model.forward(g, &batch.tokens)?;
    let loss = cross_entropy(g, pass.logits, &batch.targets)?;
    Ok((loss, pass))
}

/// One next-token cross-entropy step: forward, backward, AdamW update.
pub fn lm_step(
    model: &mut TransformerModel,
    batch: &Batch,
    optim: &mut AdamW,
    lr: f64,
    step: u64,
    stage: Stage,
) -> Result<StepRecord> {
    let start = Instant::now();
    let mut g = Graph::new();
    let (loss, pass) = lm_loss(&mut g, model, batch)?;
    g.backward(loss)?;
    model.accumulate_grads(&g, &pass)?;
    optim.step(model.named_params_mut(), lr)?;
    model.zero_grad();
    let total = g.value(loss).item()?;
    Ok(StepRecord {
        step,
        stage,
        l_i: None,
        l_s: None,
        l_h: None,
        total,
        lr,
        tokens_per_sec: batch.tokens.ids.len() as f64 / start.elapsed().as_secs_f64(),
    })
}

/// Runs `steps` next-token steps under a fresh optimizer and cosine schedule.
pub fn train_lm(
    model: &mut TransformerModel,
    batcher: &Batcher,
    steps: u64,
    optim_cfg: &AdamWConfig,
    stage: Stage,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainReport> {
    let schedule = CosineSchedule::new(optim_cfg.lr, steps, optim_cfg.warmup_ratio)?;
    let mut optim = AdamW::new(optim_cfg.clone());
    let mut report = TrainReport::default();
    for (step, batch) in (0..steps).zip(batcher.stream()) {
        let lr = schedule.lr_at(step)?;
        let rec = lm_step(model, &batch, &mut optim, lr, step, stage)?;
        sink(&rec)?;
        report.records.push(rec);
    }
    Ok(report)
}

/// `exp` of the mean next-token cross-entropy over every full batch of
/// `batcher`'s first (unshuffled) epoch.
pub fn perplexity(model: &TransformerModel, batcher: &Batcher) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batcher.epoch(0) {
        let mut g = Graph::inference();
        let (loss, _) = lm_loss(&mut g, model, &batch)?;
        let n = batch.targets.len();
        total += g.value(loss).item()? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Input("no evaluation batches".into()));
    }
    Ok((total / count as f64).exp())
}
