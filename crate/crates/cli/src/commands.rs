use crate::config::{PlanSource, RunConfig};
use crate::error::{CliError, CliResult};
use echoatt::analysis::{attention_similarity, build_plan, select_unchanged_layers};
use echoatt::bench::{bench_report, published_label, table3, Table3Row};
use echoatt::data::{load_corpus, BatchPlan};
use echoatt::distill::run_distillation;
use echoatt::model::{build_student, checkpoint};
use echoatt::train::{perplexity, train_lm, NdjsonSink, Stage};
use echoatt::{Batcher, Corpus, Error, SharingPlan, SimilarityReport, TokenBatch, TransformerModel};
use serde::Serialize;
use serde_json::json;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

/// A loaded config plus where its outputs go.
pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    /// Loads `config`, applies the `ECHOATT_SEED` override and resolves the
    /// output directory (`--out`, then the config's `out_dir`, then `out`).
    pub fn new(config: &Path, out: Option<PathBuf>, seed_env: Option<String>) -> CliResult<Self> {
        require(config)?;
        let mut cfg = RunConfig::load(config)?;
        if let Some(s) = seed_env {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("ECHOATT_SEED `{s}` is not an unsigned integer")))?;
        }
        let out = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| "out".into());
        Ok(Ctx { cfg, out })
    }

    fn out_file(&self, name: &str) -> CliResult<PathBuf> {
        std::fs::create_dir_all(&self.out)?;
        Ok(self.out.join(name))
    }

    fn corpus(&self) -> CliResult<Corpus> {
        let d = self.cfg.data()?;
        for p in &d.paths {
            require(p)?;
        }
        Ok(load_corpus(
            &d.paths,
            d.tokenizer.build()?,
            d.val_fraction,
            self.cfg.seed,
        )?)
    }

    /// Shuffled training batcher and an in-order validation batcher.
    fn batchers(&self, corpus: Corpus) -> CliResult<(Batcher, Batcher)> {
        let plan = self.cfg.data()?.batch.clone();
        let val_plan = BatchPlan {
            shuffle: false,
            ..plan.clone()
        };
        let train = Batcher::new(corpus.train, plan, self.cfg.seed)?;
        let val = Batcher::new(corpus.validation, val_plan, self.cfg.seed)?;
        Ok((train, val))
    }

    /// Loads a checkpoint whose architecture must equal the config's.
    fn checkpoint(&self, path: &Path) -> CliResult<TransformerModel> {
        require(path)?;
        let (model, _) = checkpoint::load(path)?;
        if model.config() != &self.cfg.model {
            return Err(CliError::ArchitectureMismatch(format!(
                "{} holds {:?}, config has {:?}",
                path.display(),
                model.config(),
                self.cfg.model
            )));
        }
        Ok(model)
    }

    fn dense_checkpoint(&self, path: &Path) -> CliResult<TransformerModel> {
        let model = self.checkpoint(path)?;
        if !model.plan().is_identity() {
            return Err(CliError::PlanMismatch(format!(
                "{} is a shared-attention model; a dense model is required",
                path.display()
            )));
        }
        Ok(model)
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn ndjson_sink(path: &Path, header: &serde_json::Value) -> CliResult<NdjsonSink<BufWriter<File>>> {
    Ok(NdjsonSink::new(BufWriter::new(File::create(path)?), header)?)
}

fn finish_ndjson(sink: NdjsonSink<BufWriter<File>>, summary: &serde_json::Value) -> CliResult<()> {
    let mut w = sink.into_inner();
    serde_json::to_writer(&mut w, summary)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn train_teacher(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let (train, val) = ctx.batchers(ctx.corpus()?)?;
    let mut model = TransformerModel::new(cfg.model.clone(), SharingPlan::identity(cfg.model.n_layers), cfg.seed)?;
    let steps = train.steps_for_epochs(cfg.teacher.epochs);
    let ndjson = ctx.out_file("teacher.ndjson")?;
    let header = json!({
        "command": "train-teacher",
        "seed": cfg.seed,
        "model": cfg.model,
        "batch": train.plan(),
        "epochs": cfg.teacher.epochs,
        "steps": steps,
        "optimizer": cfg.teacher.optimizer,
    });
    let mut sink = ndjson_sink(&ndjson, &header)?;
    let report = train_lm(
        &mut model,
        &train,
        steps,
        &cfg.teacher.optimizer,
        Stage::Pretrain,
        &mut |r| sink.record(r),
    )?;
    let ppl = perplexity(&model, &val)?;
    finish_ndjson(sink, &json!({ "final_perplexity": ppl }))?;
    let ckpt = ctx.out_file("teacher.ckpt")?;
    checkpoint::save(&ckpt, &model, None)?;
    let last = report.records.last().map_or(f64::NAN, |r| r.total);
    println!(
        "trained {steps} steps, final loss {last:.4}, validation perplexity {ppl:.4}\nwrote {} and {}",
        ckpt.display(),
        ndjson.display()
    );
    Ok(())
}

/// The first `samples` non-overlapping windows of the validation stream.
fn analysis_windows(val: &[usize], samples: usize, seq: usize) -> CliResult<Vec<TokenBatch>> {
    if val.len() < samples * seq {
        return Err(Error::Input(format!(
            "validation split has {} tokens; {samples} windows of {seq} need {}",
            val.len(),
            samples * seq
        ))
        .into());
    }
    val.chunks_exact(seq)
        .take(samples)
        .map(|w| Ok(TokenBatch::new(1, seq, w.to_vec())?))
        .collect()
}

pub fn analyze(ctx: &Ctx, checkpoint_path: &Path) -> CliResult<()> {
    let model = ctx.dense_checkpoint(checkpoint_path)?;
    let corpus = ctx.corpus()?;
    let a = &ctx.cfg.analysis;
    let windows = analysis_windows(&corpus.validation, a.samples, a.seq_len)?;
    let report = attention_similarity(&model, &windows)?;
    report.write_json(BufWriter::new(File::create(ctx.out_file("report.json")?)?))?;
    report.write_pairwise_csv(BufWriter::new(File::create(ctx.out_file("pairwise.csv")?)?))?;
    report.write_per_layer_csv(BufWriter::new(File::create(ctx.out_file("per_layer.csv")?)?))?;
    println!("layer  avg_similarity");
    for (j, v) in report.per_layer_avg.iter().enumerate() {
        println!("{j:>5}  {v:.6}");
    }
    println!(
        "wrote report.json, pairwise.csv, per_layer.csv to {}",
        ctx.out.display()
    );
    Ok(())
}

pub struct PlanArgs {
    pub report: Option<PathBuf>,
    pub k: Option<usize>,
    pub b: Option<usize>,
    pub indices: Option<Vec<usize>>,
}

pub fn plan(ctx: &Ctx, args: PlanArgs) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let n = cfg.model.n_layers;
    let explicit = args.indices.or_else(|| match &cfg.plan {
        PlanSource::Explicit { indices } => Some(indices.clone()),
        PlanSource::Auto => None,
    });
    let (plan, selection) = if let Some(indices) = explicit {
        let plan = SharingPlan::from_shared_indices(n, &indices).map_err(|e| CliError::PlanMismatch(e.to_string()))?;
        (plan, None)
    } else {
        let path = args.report.ok_or_else(|| {
            CliError::Usage("plan needs --report or --indices (or an explicit plan in the config)".into())
        })?;
        require(&path)?;
        let report: SimilarityReport = serde_json::from_reader(File::open(&path)?)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        if report.n_layers != n {
            return Err(CliError::PlanMismatch(format!(
                "report covers {} layers, model has {n}",
                report.n_layers
            )));
        }
        let selection = select_unchanged_layers(&report)?;
        let k = args.k.unwrap_or(cfg.distill.k);
        let b = args.b.unwrap_or(cfg.distill.b);
        (build_plan(&selection.unchanged, n, k, b)?, Some(selection))
    };
    let label = published_label(n, &plan.shared_layers());
    write_json(&ctx.out_file("plan.json")?, &plan)?;
    if let Some(sel) = &selection {
        println!("unchanged layers: {:?}", sel.unchanged);
        if !sel.rejected.is_empty() {
            println!("rejected interior low-similarity layers: {:?}", sel.rejected);
        }
        if let Some(w) = &sel.warning {
            println!("warning: {w}");
        }
    }
    println!(
        "shared layers {:?}: {} of {n} ({:.1}%){}",
        plan.shared_layers(),
        plan.shared_count(),
        100.0 * plan.sharing_ratio(),
        label.map(|l| format!(" [{l}]")).unwrap_or_default()
    );
    Ok(())
}

fn load_plan(path: &Path, n_layers: usize) -> CliResult<SharingPlan> {
    require(path)?;
    let plan: SharingPlan =
        serde_json::from_reader(File::open(path)?).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    if plan.n_layers() != n_layers {
        return Err(CliError::PlanMismatch(format!(
            "plan covers {} layers, model has {n_layers}",
            plan.n_layers()
        )));
    }
    Ok(plan)
}

pub fn distill(ctx: &Ctx, teacher_path: &Path, plan_path: &Path) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let teacher = ctx.dense_checkpoint(teacher_path)?;
    let plan = load_plan(plan_path, cfg.model.n_layers)?;
    let (train, val) = ctx.batchers(ctx.corpus()?)?;
    let mut student = build_student(&teacher, &plan)?;
    let ndjson = ctx.out_file("train.ndjson")?;
    let header = json!({
        "command": "distill",
        "seed": cfg.seed,
        "model": cfg.model,
        "plan": plan,
        "batch": train.plan(),
        "distill": cfg.distill,
        "optimizer": cfg.optimizer,
    });
    let mut sink = ndjson_sink(&ndjson, &header)?;
    let outcome = run_distillation(
        &mut student,
        &teacher,
        &train,
        Some(&val),
        &cfg.distill,
        &cfg.optimizer,
        &mut |r| sink.record(r),
    )?;
    let teacher_ppl = perplexity(&teacher, &val)?;
    let summary = json!({
        "teacher_perplexity": teacher_ppl,
        "stage1_perplexity": outcome.stage1_perplexity,
        "final_perplexity": outcome.report.final_perplexity,
    });
    finish_ndjson(sink, &summary)?;
    let ckpt = ctx.out_file("student.ckpt")?;
    checkpoint::save(&ckpt, &student, None)?;
    let fmt = |p: Option<f64>| p.map_or("n/a".into(), |p| format!("{p:.4}"));
    println!(
        "teacher perplexity {teacher_ppl:.4}, after stage 1 {}, after stage 2 {}\nwrote {} and {}",
        fmt(outcome.stage1_perplexity),
        fmt(outcome.report.final_perplexity),
        ckpt.display(),
        ndjson.display()
    );
    Ok(())
}

pub fn eval(ctx: &Ctx, checkpoint_path: &Path) -> CliResult<()> {
    let model = ctx.checkpoint(checkpoint_path)?;
    let (_, val) = ctx.batchers(ctx.corpus()?)?;
    let ppl = perplexity(&model, &val)?;
    let out = json!({
        "checkpoint": checkpoint_path.display().to_string(),
        "perplexity": ppl,
        "validation_tokens": val.tokens_per_epoch(),
        "n_layers": model.config().n_layers,
        "shared_layers": model.plan().shared_layers(),
        "parameters": model.parameter_count(),
    });
    write_json(&ctx.out_file("eval.json")?, &out)?;
    println!("validation perplexity {ppl:.4}");
    Ok(())
}

pub fn bench(ctx: &Ctx, baseline: &Path, student: &Path) -> CliResult<()> {
    let base = ctx.dense_checkpoint(baseline)?;
    let stud = ctx.checkpoint(student)?;
    let report = bench_report(&base, &stud, ctx.cfg.bench.clone())?;
    write_json(&ctx.out_file("bench.json")?, &report)?;
    println!("{report}");
    Ok(())
}

pub fn table3_rows(ctx: &Ctx) -> CliResult<Vec<Table3Row>> {
    Ok(table3(&ctx.cfg.model)?)
}

pub fn print_table3(rows: &[Table3Row]) {
    println!(
        "{:<6} {:>6} {:>7} {:>12} {:>9} {:>10} {:>9} {:>9} {:>9}",
        "row", "shared", "ratio", "removed", "removed%", "published", "pub%", "inf.gain", "trn.gain"
    );
    for r in rows {
        println!(
            "{:<6} {:>6} {:>6.1}% {:>11.1}M {:>8.2}% {:>9.0}M {:>8.2}% {:>8.0}% {:>8.0}%",
            r.label,
            r.shared_layers,
            100.0 * r.sharing_ratio,
            r.removed as f64 / 1e6,
            r.removed_percent,
            r.published_removed_millions,
            r.published_removed_percent,
            r.published_inference_gain_percent,
            r.published_training_gain_percent,
        );
    }
    for r in rows {
        if let Some(f) = &r.flag {
            println!("flag {}: {f}", r.label);
        }
    }
}
