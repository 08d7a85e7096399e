//! Parameter, FLOP and wall-clock accounting for dense vs shared models.

use crate::data::Batch;
use crate::distill::{stage1_step, DistillConfig};
use crate::error::{Error, Result};
use crate::model::{build_student, removed_parameters, ModelConfig, SharingPlan, TokenBatch, TransformerModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;
use crate::tensor::Graph;
use crate::train::{lm_step, Stage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Mutex;
use std::time::Instant;

/// Forward FLOPs of one layer over a full sequence, at 2 FLOPs per
/// multiply-accumulate. Softmax is charged 5 FLOPs per score
/// (max, subtract, exp, sum, divide).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub q_proj: u64,
    pub k_proj: u64,
    pub v_proj: u64,
    pub qk: u64,
    pub softmax: u64,
    pub av: u64,
    pub o_proj: u64,
    pub mlp: u64,
}

impl LayerFlops {
    pub fn dense(c: &ModelConfig, seq: usize) -> Self {
        let (s, d, kv, ff) = (seq as u64, c.d_model as u64, c.kv_dim() as u64, c.d_ff as u64);
        let (h, dh) = (c.n_heads as u64, c.d_head() as u64);
        LayerFlops {
            q_proj: 2 * s * d * d,
            k_proj: 2 * s * d * kv,
            v_proj: 2 * s * d * kv,
            qk: 2 * h * s * s * dh,
            softmax: 5 * h * s * s,
            av: 2 * h * s * s * dh,
            o_proj: 2 * s * d * d,
            mlp: 3 * 2 * s * d * ff,
        }
    }

    /// A shared layer skips everything that produces attention probabilities.
    pub fn shared(c: &ModelConfig, seq: usize) -> Self {
        LayerFlops {
            q_proj: 0,
            k_proj: 0,
            qk: 0,
            softmax: 0,
            ..Self::dense(c, seq)
        }
    }

    pub fn total(&self) -> u64 {
        self.q_proj + self.k_proj + self.v_proj + self.qk + self.softmax + self.av + self.o_proj + self.mlp
    }
}

/// Whole-model forward FLOPs over one sequence of `seq_len` tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub seq_len: usize,
    pub per_layer: Vec<LayerFlops>,
    pub lm_head: u64,
    pub baseline: u64,
    pub shared: u64,
}

impl FlopReport {
    pub fn saving_fraction(&self) -> f64 {
        1.0 - self.shared as f64 / self.baseline as f64
    }

    pub fn per_token(&self) -> (f64, f64) {
        let s = self.seq_len as f64;
        (self.baseline as f64 / s, self.shared as f64 / s)
    }
}

/// Baseline (dense) and shared forward FLOPs for `plan` on `config`.
pub fn analytic_flops(config: &ModelConfig, plan: &SharingPlan, seq_len: usize) -> Result<FlopReport> {
    config.validate()?;
    if plan.n_layers() != config.n_layers {
        return Err(Error::Contract(format!(
            "plan covers {} layers but the config has {}",
            plan.n_layers(),
            config.n_layers
        )));
    }
    let dense = LayerFlops::dense(config, seq_len);
    let per_layer: Vec<LayerFlops> = (0..config.n_layers)
        .map(|j| {
            if plan.is_root(j) {
                dense
            } else {
                LayerFlops::shared(config, seq_len)
            }
        })
        .collect();
    let lm_head = 2 * (seq_len * config.d_model * config.vocab_size) as u64;
    Ok(FlopReport {
        seq_len,
        baseline: dense.total() * config.n_layers as u64 + lm_head,
        shared: per_layer.iter().map(LayerFlops::total).sum::<u64>() + lm_head,
        per_layer,
        lm_head,
    })
}

/// Median and interquartile range of repeated timings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub median: f64,
    pub iqr: f64,
    pub repeats: usize,
    pub samples: Vec<f64>,
}

impl Measurement {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let mut s = samples.clone();
        s.sort_by(f64::total_cmp);
        Measurement {
            median: quantile(&s, 0.5),
            iqr: quantile(&s, 0.75) - quantile(&s, 0.25),
            repeats: s.len(),
            samples,
        }
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

static BENCH_LOCK: Mutex<()> = Mutex::new(());

/// Runs `f` alone on a one-thread pool; concurrent calls queue up.
pub fn single_worker<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let _guard = BENCH_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn random_tokens(vocab: usize, batch: usize, seq: usize, seed: u64) -> Result<TokenBatch> {
    let mut r = rng::stream(seed, "bench-tokens");
    TokenBatch::new(batch, seq, (0..batch * seq).map(|_| r.random_range(0..vocab)).collect())
}

fn random_batch(vocab: usize, batch: usize, seq: usize, seed: u64) -> Result<Batch> {
    let mut r = rng::stream(seed, "bench-targets");
    Ok(Batch {
        tokens: random_tokens(vocab, batch, seq, seed)?,
        targets: (0..batch * seq).map(|_| r.random_range(0..vocab)).collect(),
    })
}

fn check_repeats(repeats: usize) -> Result<()> {
    if repeats < 5 {
        return Err(Error::Contract(format!("need at least 5 repeats, got {repeats}")));
    }
    Ok(())
}

const WARMUP_RUNS: usize = 2;

/// Forward-pass tokens/sec: two discarded warmup runs, then `repeats` timed
/// runs on one worker.
pub fn measure_throughput(
    model: &TransformerModel,
    seq_len: usize,
    batch: usize,
    repeats: usize,
) -> Result<Measurement> {
    check_repeats(repeats)?;
    let tokens = random_tokens(model.config().vocab_size, batch, seq_len, 0)?;
    single_worker(|| -> Result<Measurement> {
        let mut samples = Vec::with_capacity(repeats);
        for i in 0..WARMUP_RUNS + repeats {
            let start = Instant::now();
            let mut g = Graph::inference();
            std::hint::black_box(model.forward(&mut g, &tokens)?);
            let secs = start.elapsed().as_secs_f64();
            if i >= WARMUP_RUNS {
                samples.push((batch * seq_len) as f64 / secs);
            }
        }
        Ok(Measurement::from_samples(samples))
    })?
}

/// Seconds per optimizer step. With a `teacher`, each step is a Stage-1
/// distillation step and includes the teacher forward pass; otherwise it is
/// a plain next-token step. The model is cloned, so the caller's copy is
/// left untouched.
pub fn measure_train_step(
    model: &TransformerModel,
    teacher: Option<&TransformerModel>,
    seq_len: usize,
    batch: usize,
    repeats: usize,
) -> Result<Measurement> {
    check_repeats(repeats)?;
    let data = random_batch(model.config().vocab_size, batch, seq_len, 0)?;
    let mut m = model.clone();
    let cfg = DistillConfig::default();
    single_worker(move || -> Result<Measurement> {
        let mut optim = AdamW::new(AdamWConfig::default());
        let mut samples = Vec::with_capacity(repeats);
        for i in 0..WARMUP_RUNS + repeats {
            let start = Instant::now();
            match teacher {
                Some(t) => stage1_step(&mut m, t, &data, &cfg, &mut optim, 1e-4, i as u64)?,
                None => lm_step(&mut m, &data, &mut optim, 1e-4, i as u64, Stage::Pretrain)?,
            };
            if i >= WARMUP_RUNS {
                samples.push(start.elapsed().as_secs_f64());
            }
        }
        Ok(Measurement::from_samples(samples))
    })?
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub baseline: usize,
    pub student: usize,
    pub removed: usize,
    pub removed_percent: f64,
}

impl ParamCounts {
    pub fn new(config: &ModelConfig, plan: &SharingPlan) -> Self {
        let baseline = config.dense_parameter_count();
        let removed = removed_parameters(config, plan);
        ParamCounts {
            baseline,
            student: baseline - removed,
            removed,
            removed_percent: 100.0 * removed as f64 / baseline as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub seq_len: usize,
    pub batch: usize,
    pub repeats: usize,
}

/// Step time with and without the teacher forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTiming {
    pub baseline_sec_per_step: Measurement,
    pub student_sec_per_step: Measurement,
    pub speedup_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: ModelConfig,
    pub plan: SharingPlan,
    pub settings: BenchSettings,
    pub params: ParamCounts,
    pub flops: FlopReport,
    pub baseline_tokens_per_sec: Measurement,
    pub student_tokens_per_sec: Measurement,
    pub inference_speedup_percent: f64,
    pub training: TrainTiming,
    pub distill_training: TrainTiming,
}

fn timing(base: Measurement, student: Measurement) -> TrainTiming {
    TrainTiming {
        speedup_percent: 100.0 * (base.median / student.median - 1.0),
        baseline_sec_per_step: base,
        student_sec_per_step: student,
    }
}

/// Full comparison of a dense baseline against `student`. The distillation
/// variant times a dense twin and the student both fed by `baseline` as
/// teacher.
pub fn bench_report(
    baseline: &TransformerModel,
    student: &TransformerModel,
    settings: BenchSettings,
) -> Result<BenchReport> {
    if !baseline.plan().is_identity() {
        return Err(Error::Contract("baseline must be a dense model".into()));
    }
    if baseline.config() != student.config() {
        return Err(Error::Contract("baseline and student configs differ".into()));
    }
    let c = baseline.config();
    let plan = student.plan();
    let (s, b, r) = (settings.seq_len, settings.batch, settings.repeats);
    let base_tps = measure_throughput(baseline, s, b, r)?;
    let stud_tps = measure_throughput(student, s, b, r)?;
    let dense_twin = build_student(baseline, &SharingPlan::identity(c.n_layers))?;
    Ok(BenchReport {
        config: c.clone(),
        plan: plan.clone(),
        params: ParamCounts::new(c, plan),
        flops: analytic_flops(c, plan, s)?,
        inference_speedup_percent: 100.0 * (stud_tps.median / base_tps.median - 1.0),
        baseline_tokens_per_sec: base_tps,
        student_tokens_per_sec: stud_tps,
        training: timing(
            measure_train_step(baseline, None, s, b, r)?,
            measure_train_step(student, None, s, b, r)?,
        ),
        distill_training: timing(
            measure_train_step(&dense_twin, Some(baseline), s, b, r)?,
            measure_train_step(student, Some(baseline), s, b, r)?,
        ),
        settings,
    })
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.params;
        writeln!(
            f,
            "plan: {} of {} layers shared ({:.1}%)",
            self.plan.shared_count(),
            self.plan.n_layers(),
            100.0 * self.plan.sharing_ratio()
        )?;
        writeln!(
            f,
            "params: baseline {}  student {}  removed {} ({:.2}%)",
            p.baseline, p.student, p.removed, p.removed_percent
        )?;
        let (fb, fs) = self.flops.per_token();
        writeln!(
            f,
            "forward FLOPs/token: baseline {:.0}  shared {:.0}  saving {:.2}%",
            fb,
            fs,
            100.0 * self.flops.saving_fraction()
        )?;
        writeln!(f, "{:<24}{:>14}{:>14}{:>10}", "", "baseline", "student", "gain")?;
        writeln!(
            f,
            "{:<24}{:>14.1}{:>14.1}{:>9.1}%",
            "inference tok/s",
            self.baseline_tokens_per_sec.median,
            self.student_tokens_per_sec.median,
            self.inference_speedup_percent
        )?;
        for (name, t) in [
            ("train s/step", &self.training),
            ("distill s/step", &self.distill_training),
        ] {
            writeln!(
                f,
                "{:<24}{:>14.5}{:>14.5}{:>9.1}%",
                name, t.baseline_sec_per_step.median, t.student_sec_per_step.median, t.speedup_percent
            )?;
        }
        write!(
            f,
            "(median of {} repeats after {WARMUP_RUNS} warmup runs, batch {}, seq {})",
            self.settings.repeats, self.settings.batch, self.settings.seq_len
        )
    }
}

/// Figures published for the TinyLlama sharing configurations.
#[derive(Clone, Copy, Debug)]
pub struct PublishedRow {
    pub label: &'static str,
    pub shared_indices: &'static [usize],
    pub removed_millions: f64,
    pub removed_percent: f64,
    pub inference_gain_percent: f64,
    pub training_gain_percent: f64,
}

pub const TINYLLAMA_ROWS: [PublishedRow; 3] = [
    PublishedRow {
        label: "23%",
        shared_indices: &[2, 5, 4, 3, 7],
        removed_millions: 24.0,
        removed_percent: 2.14,
        inference_gain_percent: 9.0,
        training_gain_percent: 14.0,
    },
    PublishedRow {
        label: "41%",
        shared_indices: &[2, 5, 4, 3, 7, 6, 18, 9],
        removed_millions: 43.0,
        removed_percent: 3.86,
        inference_gain_percent: 15.0,
        training_gain_percent: 25.0,
    },
    PublishedRow {
        label: "77%",
        shared_indices: &[2, 5, 4, 3, 7, 6, 18, 9, 8, 11, 12, 1, 17, 10, 14, 13, 16],
        removed_millions: 80.0,
        removed_percent: 7.29,
        inference_gain_percent: 42.0,
        training_gain_percent: 46.0,
    },
];

/// Shared-index list published for the 12-layer, 160M-parameter model.
pub const LLAMA_160M_SHARED: [usize; 4] = [4, 6, 8, 10];

/// Published-configuration label for a shared-layer count on the TinyLlama
/// depth, e.g. `"paper-23%"` for the five-layer list.
pub fn published_label(n_layers: usize, shared: &[usize]) -> Option<String> {
    let mut s = shared.to_vec();
    s.sort_unstable();
    TINYLLAMA_ROWS.iter().find_map(|r| {
        let mut p = r.shared_indices.to_vec();
        p.sort_unstable();
        (n_layers == 22 && p == s).then(|| format!("paper-{}", r.label))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub label: String,
    pub shared_layers: usize,
    pub sharing_ratio: f64,
    pub removed: usize,
    pub removed_percent: f64,
    pub published_removed_millions: f64,
    pub published_removed_percent: f64,
    pub published_inference_gain_percent: f64,
    pub published_training_gain_percent: f64,
    /// Relative deviation of `removed` from the published count.
    pub deviation: f64,
    pub flag: Option<String>,
}

/// Parameter-removal arithmetic for each published configuration on
/// `config`. Rows whose index list disagrees with the published count by
/// more than 5% carry a flag naming the layer count that would match.
pub fn table3(config: &ModelConfig) -> Result<Vec<Table3Row>> {
    config.validate()?;
    let per_layer = config.qk_params_per_layer() as f64;
    let baseline = config.dense_parameter_count() as f64;
    TINYLLAMA_ROWS
        .iter()
        .map(|r| {
            let plan = SharingPlan::from_shared_indices(config.n_layers, r.shared_indices)?;
            let removed = removed_parameters(config, &plan);
            let published = r.removed_millions * 1e6;
            let deviation = (removed as f64 - published) / published;
            let flag = (deviation.abs() > 0.05).then(|| {
                let layers = (published / per_layer).round() as usize;
                format!(
                    "{} listed indices remove {:.1}M; the published {:.0}M ({:.2}%) matches {} layers ({:.1}M, ratio {:.1}%)",
                    r.shared_indices.len(),
                    removed as f64 / 1e6,
                    r.removed_millions,
                    r.removed_percent,
                    layers,
                    layers as f64 * per_layer / 1e6,
                    100.0 * layers as f64 / config.n_layers as f64
                )
            });
            Ok(Table3Row {
                label: r.label.to_string(),
                shared_layers: plan.shared_count(),
                sharing_ratio: plan.sharing_ratio(),
                removed,
                removed_percent: 100.0 * removed as f64 / baseline,
                published_removed_millions: r.removed_millions,
                published_removed_percent: r.removed_percent,
                published_inference_gain_percent: r.inference_gain_percent,
                published_training_gain_percent: r.training_gain_percent,
                deviation,
                flag,
            })
        })
        .collect()
}
