//! Two-stage training of a shared-attention student.
//!
//! Stage 1 fits the student to a frozen teacher with
//! `α·L_I + β·L_S + γ·L_H`:
//!
//! * `L_I`: mean over shared blocks of the MSE between student and teacher
//!   residual streams at the last layer of each block;
//! * `L_S`: KL divergence between the softmax distributions of the two
//!   models' logits, averaged over positions;
//! * `L_H`: cross-entropy of the student against the teacher's argmax.
//!
//! Stage 2 continues on true next-token labels.

use crate::data::{Batch, Batcher};
use crate::error::{Error, Result};
use crate::model::{ForwardPass, SharingPlan, TransformerModel};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::tensor::{Graph, Tensor, Var};
use crate::train::{cross_entropy, lm_step, perplexity, Stage, StepRecord, TrainReport};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Argument order of the soft-label KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(σ(S) ‖ σ(T))`, the form used by default.
    #[default]
    StudentTeacher,
    /// `KL(σ(T) ‖ σ(S))`, the conventional distillation direction.
    TeacherStudent,
}

fn default_alpha() -> f64 {
    0.25
}
fn default_beta() -> f64 {
    0.25
}
fn default_gamma() -> f64 {
    0.5
}
fn default_k() -> usize {
    2
}
fn default_stage1() -> f64 {
    1.0
}
fn default_stage2() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Shared block size used when building plans.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Early layers skipped before the first shared block.
    #[serde(default)]
    pub b: usize,
    #[serde(default = "default_stage1")]
    pub stage1_epochs: f64,
    #[serde(default = "default_stage2")]
    pub stage2_epochs: f64,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: default_alpha(),
            beta: default_beta(),
            gamma: default_gamma(),
            k: default_k(),
            b: 0,
            stage1_epochs: default_stage1(),
            stage2_epochs: default_stage2(),
            kl_direction: KlDirection::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with a positive sum, got {w:?}"
            )));
        }
        if self.stage1_epochs < 0.0 || self.stage2_epochs < 0.0 {
            return Err(Error::Config("stage epochs must be non-negative".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("block size k must be >= 2, got {}", self.k)));
        }
        Ok(())
    }
}

/// Teacher logits and residual streams from a gradient-free pass.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    pub logits: Tensor,
    pub hidden: Vec<Tensor>,
}

pub fn teacher_outputs(teacher: &TransformerModel, batch: &Batch) -> Result<TeacherOutputs> {
    let mut g = Graph::inference();
    let pass = teacher.forward(&mut g, &batch.tokens)?;
    Ok(TeacherOutputs {
        logits: g.value(pass.logits).detached(),
        hidden: pass.hidden.iter().map(|&h| g.value(h).detached()).collect(),
    })
}

/// Mean MSE between student and teacher hidden states at the plan's
/// alignment points. Returns the loss node and `true` when the plan has no
/// shared block (the loss is then a constant zero).
pub fn intermediate_loss(
    g: &mut Graph,
    student_hidden: &[Var],
    teacher_hidden: &[Var],
    plan: &SharingPlan,
) -> Result<(Var, bool)> {
    let points = plan.alignment_points();
    if points.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), true));
    }
    let mut acc: Option<Var> = None;
    for &j in &points {
        let (s, t) = (
            *student_hidden
                .get(j)
                .ok_or_else(|| Error::Contract(format!("no student hidden state {j}")))?,
            *teacher_hidden
                .get(j)
                .ok_or_else(|| Error::Contract(format!("no teacher hidden state {j}")))?,
        );
        let diff = g.sub(s, t)?;
        let sq = g.mul(diff, diff)?;
        let mse = g.mean(sq);
        acc = Some(match acc {
            None => mse,
            Some(a) => g.add(a, mse)?,
        });
    }
    Ok((g.scale(acc.unwrap(), 1.0 / points.len() as f64), false))
}

fn positions(g: &Graph, logits: Var) -> usize {
    let s = g.shape(logits);
    s[..s.len() - 1].iter().product()
}

/// KL divergence between the vocab distributions, averaged over positions.
/// The teacher side is expected to be a constant node.
pub fn soft_label_loss(g: &mut Graph, student: Var, teacher: Var, dir: KlDirection) -> Result<Var> {
    if g.shape(student) != g.shape(teacher) {
        return Err(Error::shape("soft_label_loss", g.shape(student), g.shape(teacher)));
    }
    let n = positions(g, student);
    let ls = g.log_softmax(student)?;
    let lt = g.log_softmax(teacher)?;
    let (lp, lq) = match dir {
        KlDirection::StudentTeacher => (ls, lt),
        KlDirection::TeacherStudent => (lt, ls),
    };
    let p = g.exp(lp);
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Row-wise argmax over the last axis; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let v = *t.shape().last().expect("argmax of a scalar");
    t.data()
        .chunks(v)
        .map(|row| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Cross-entropy of the student against the teacher's argmax labels.
pub fn hard_label_loss(g: &mut Graph, student: Var, teacher: Var) -> Result<Var> {
    if g.shape(student) != g.shape(teacher) {
        return Err(Error::shape("hard_label_loss", g.shape(student), g.shape(teacher)));
    }
    let labels = argmax_rows(g.value(teacher));
    cross_entropy(g, student, &labels)
}

/// Graph nodes of one Stage-1 objective.
#[derive(Clone, Debug)]
pub struct Stage1Losses {
    pub pass: ForwardPass,
    pub l_i: Var,
    pub l_s: Var,
    pub l_h: Var,
    pub total: Var,
    /// Set when the plan has no shared block and `L_I` is identically zero.
    pub l_i_vacuous: bool,
}

/// Records the student forward pass and the weighted Stage-1 loss on `g`.
pub fn stage1_losses(
    g: &mut Graph,
    student: &TransformerModel,
    teacher: &TeacherOutputs,
    batch: &Batch,
    cfg: &DistillConfig,
) -> Result<Stage1Losses> {
    let pass = student.forward(g, &batch.tokens)?;
    let plan = student.plan();
    let points = plan.alignment_points();
    let mut teacher_hidden: Vec<Var> = Vec::with_capacity(teacher.hidden.len());
    for (j, h) in teacher.hidden.iter().enumerate() {
        // Only alignment points are read; the rest stay off the tape.
        let v = if points.contains(&j) {
            g.constant(h.clone())
        } else {
            pass.hidden[j]
        };
        teacher_hidden.push(v);
    }
    let (l_i, l_i_vacuous) = intermediate_loss(g, &pass.hidden, &teacher_hidden, plan)?;
    let t_logits = g.constant(teacher.logits.clone());
    let l_s = soft_label_loss(g, pass.logits, t_logits, cfg.kl_direction)?;
    let l_h = hard_label_loss(g, pass.logits, t_logits)?;
    let wi = g.scale(l_i, cfg.alpha);
    let ws = g.scale(l_s, cfg.beta);
    let wh = g.scale(l_h, cfg.gamma);
    let sum = g.add(wi, ws)?;
    let total = g.add(sum, wh)?;
    Ok(Stage1Losses {
        pass,
        l_i,
        l_s,
        l_h,
        total,
        l_i_vacuous,
    })
}

/// One distillation step: teacher pseudo-labels, weighted loss, backward
/// through the student only, AdamW update.
#[allow(clippy::too_many_arguments)]
pub fn stage1_step(
    student: &mut TransformerModel,
    teacher: &TransformerModel,
    batch: &Batch,
    cfg: &DistillConfig,
    optim: &mut AdamW,
    lr: f64,
    step: u64,
) -> Result<StepRecord> {
    let start = Instant::now();
    let t_out = teacher_outputs(teacher, batch)?;
    let mut g = Graph::new();
    let losses = stage1_losses(&mut g, student, &t_out, batch, cfg)?;
    g.backward(losses.total)?;
    student.accumulate_grads(&g, &losses.pass)?;
    optim.step(student.named_params_mut(), lr)?;
    student.zero_grad();
    let val = |v: Var| g.value(v).item();
    Ok(StepRecord {
        step,
        stage: Stage::Stage1,
        l_i: Some(val(losses.l_i)?),
        l_s: Some(val(losses.l_s)?),
        l_h: Some(val(losses.l_h)?),
        total: val(losses.total)?,
        lr,
        tokens_per_sec: batch.tokens.ids.len() as f64 / start.elapsed().as_secs_f64(),
    })
}

/// Continual training on true labels.
pub fn stage2_step(
    student: &mut TransformerModel,
    batch: &Batch,
    optim: &mut AdamW,
    lr: f64,
    step: u64,
) -> Result<StepRecord> {
    lm_step(student, batch, optim, lr, step, Stage::Stage2)
}

/// Outcome of [`run_distillation`].
#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub report: TrainReport,
    /// Validation perplexity after Stage 1, when a validation set was given.
    pub stage1_perplexity: Option<f64>,
}

/// Stage 1 for `stage1_epochs`, then Stage 2 for `stage2_epochs`, each with
/// a fresh AdamW and its own cosine schedule. Step numbers run on across
/// both stages.
pub fn run_distillation(
    student: &mut TransformerModel,
    teacher: &TransformerModel,
    train: &Batcher,
    validation: Option<&Batcher>,
    cfg: &DistillConfig,
    optim_cfg: &AdamWConfig,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    optim_cfg.validate()?;
    let mut report = TrainReport::default();
    let mut batches = train.stream();
    let mut step = 0u64;

    let s1 = if cfg.stage1_epochs > 0.0 {
        train.steps_for_epochs(cfg.stage1_epochs)
    } else {
        0
    };
    let schedule = CosineSchedule::new(optim_cfg.lr, s1, optim_cfg.warmup_ratio)?;
    let mut optim = AdamW::new(optim_cfg.clone());
    for i in 0..s1 {
        let batch = batches.next().expect("batch stream is endless");
        let rec = stage1_step(student, teacher, &batch, cfg, &mut optim, schedule.lr_at(i)?, step)?;
        sink(&rec)?;
        report.records.push(rec);
        step += 1;
    }
    let stage1_perplexity = validation.map(|v| perplexity(student, v)).transpose()?;

    let s2 = if cfg.stage2_epochs > 0.0 {
        train.steps_for_epochs(cfg.stage2_epochs)
    } else {
        0
    };
    let schedule = CosineSchedule::new(optim_cfg.lr, s2, optim_cfg.warmup_ratio)?;
    let mut optim = AdamW::new(optim_cfg.clone());
    for i in 0..s2 {
        let batch = batches.next().expect("batch stream is endless");
        let rec = stage2_step(student, &batch, &mut optim, schedule.lr_at(i)?, step)?;
        sink(&rec)?;
        report.records.push(rec);
        step += 1;
    }
    report.final_perplexity = validation.map(|v| perplexity(student, v)).transpose()?;
    Ok(DistillOutcome {
        report,
        stage1_perplexity,
    })
}
