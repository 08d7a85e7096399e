//! Cross-layer attention similarity and sharing-plan construction.

use crate::error::{Error, Result};
use crate::model::{SharingPlan, TokenBatch, TransformerModel};
use crate::tensor::Graph;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;

/// `dot(u, v) / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", &[u.len()], &[v.len()]));
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// Running sums of per-sample pairwise cosines. Merging is associative, so
/// partial accumulators from independent workers combine in any grouping.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityAccumulator {
    n_layers: usize,
    seq_len: Option<usize>,
    sums: Vec<f64>,
    n_samples: usize,
}

impl SimilarityAccumulator {
    pub fn new(n_layers: usize) -> Self {
        SimilarityAccumulator {
            n_layers,
            seq_len: None,
            sums: vec![0.0; n_layers * n_layers],
            n_samples: 0,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    fn check_seq(&mut self, seq: usize) -> Result<()> {
        match self.seq_len {
            Some(s) if s != seq => Err(Error::Input(format!(
                "samples must share one sequence length, got {s} and {seq}"
            ))),
            _ => {
                self.seq_len = Some(seq);
                Ok(())
            }
        }
    }

    /// Adds one sample: `layers[j]` is layer `j`'s flattened attention.
    pub fn add_sample(&mut self, layers: &[&[f64]], seq: usize) -> Result<()> {
        if layers.len() != self.n_layers {
            return Err(Error::Contract(format!(
                "sample has {} layers, accumulator expects {}",
                layers.len(),
                self.n_layers
            )));
        }
        self.check_seq(seq)?;
        let n = self.n_layers;
        for i in 0..n {
            for j in i + 1..n {
                let c = cosine_similarity(layers[i], layers[j])?;
                self.sums[i * n + j] += c;
                self.sums[j * n + i] += c;
            }
        }
        self.n_samples += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &SimilarityAccumulator) -> Result<()> {
        if other.n_layers != self.n_layers {
            return Err(Error::Contract("cannot merge accumulators of different depth".into()));
        }
        if let Some(s) = other.seq_len {
            self.check_seq(s)?;
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        self.n_samples += other.n_samples;
        Ok(())
    }

    pub fn finish(&self) -> Result<SimilarityReport> {
        if self.n_samples == 0 {
            return Err(Error::Input("no samples accumulated".into()));
        }
        let n = self.n_layers;
        let mut pairwise = vec![vec![0.0; n]; n];
        for (i, row) in pairwise.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = if i == j {
                    1.0
                } else {
                    self.sums[i * n + j] / self.n_samples as f64
                };
            }
        }
        let per_layer_avg = pairwise
            .iter()
            .enumerate()
            .map(|(i, row)| {
                if n < 2 {
                    return 1.0;
                }
                let s: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| x).sum();
                s / (n - 1) as f64
            })
            .collect();
        Ok(SimilarityReport {
            n_layers: n,
            pairwise,
            per_layer_avg,
            n_samples: self.n_samples,
            seq_len: self.seq_len.unwrap_or(0),
        })
    }
}

/// Mean pairwise cosine similarity of layers' attention probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub n_layers: usize,
    pub pairwise: Vec<Vec<f64>>,
    /// Row means of `pairwise`, diagonal excluded.
    pub per_layer_avg: Vec<f64>,
    pub n_samples: usize,
    pub seq_len: usize,
}

impl SimilarityReport {
    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// Upper triangle (`i < j`), one `i,j,value` row per pair.
    pub fn write_pairwise_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "value"])?;
        for i in 0..self.n_layers {
            for j in i + 1..self.n_layers {
                w.serialize((i, j, self.pairwise[i][j]))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_per_layer_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "avg_similarity"])?;
        for (i, v) in self.per_layer_avg.iter().enumerate() {
            w.serialize((i, v))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Accumulates every row of `batch` as a separate sample.
fn accumulate_batch(model: &TransformerModel, batch: &TokenBatch) -> Result<SimilarityAccumulator> {
    let n = model.config().n_layers;
    let mut acc = SimilarityAccumulator::new(n);
    let mut g = Graph::inference();
    let pass = model.forward(&mut g, batch)?;
    let per_sample = g.value(pass.trace.attention[0]).numel() / batch.batch;
    for b in 0..batch.batch {
        let span = b * per_sample..(b + 1) * per_sample;
        let layers: Vec<&[f64]> = pass.trace.attention.iter().map(|&a| &g.data(a)[span.clone()]).collect();
        acc.add_sample(&layers, batch.seq)?;
    }
    Ok(acc)
}

/// Similarity report of a dense model over `batches`.
///
/// Each sample's `[heads, seq, seq]` probabilities are flattened into one
/// vector per layer; masked zeros are included. Batches are processed in
/// parallel on the current rayon pool and merged in input order, so the
/// result does not depend on the worker count.
pub fn attention_similarity(model: &TransformerModel, batches: &[TokenBatch]) -> Result<SimilarityReport> {
    if !model.plan().is_identity() {
        return Err(Error::Contract("similarity analysis needs a dense model".into()));
    }
    if let Some(first) = batches.first() {
        if let Some(bad) = batches.iter().find(|b| b.seq != first.seq) {
            return Err(Error::Input(format!(
                "samples must share one sequence length, got {} and {}",
                first.seq, bad.seq
            )));
        }
    }
    let parts: Vec<SimilarityAccumulator> = batches
        .par_iter()
        .map(|b| accumulate_batch(model, b))
        .collect::<Result<_>>()?;
    let mut acc = SimilarityAccumulator::new(model.config().n_layers);
    for p in &parts {
        acc.merge(p)?;
    }
    acc.finish()
}

/// Result of the max-gap cutoff.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    /// Low-similarity layers that form a prefix or suffix of the stack.
    pub unchanged: Vec<usize>,
    /// Low-similarity layers dropped because they sit inside the stack.
    pub rejected: Vec<usize>,
    /// Set when every layer has the same average and there is no gap.
    pub warning: Option<String>,
}

/// Sorts `per_layer_avg` ascending (ties by layer index), splits at the
/// largest gap between neighbours, and keeps the low side restricted to a
/// prefix and/or suffix of the layer range. Equal gaps resolve to the one
/// nearest the low end.
pub fn select_unchanged_layers(report: &SimilarityReport) -> Result<LayerSelection> {
    let avg = &report.per_layer_avg;
    let n = avg.len();
    if n < 2 {
        return Err(Error::Contract(format!("max-gap selection needs >= 2 layers, got {n}")));
    }
    if avg.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("per-layer averages must be finite".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| avg[a].total_cmp(&avg[b]).then(a.cmp(&b)));
    let mut cut = 0;
    let mut best = 0.0;
    for p in 0..n - 1 {
        let gap = avg[order[p + 1]] - avg[order[p]];
        if gap > best {
            best = gap;
            cut = p;
        }
    }
    if best == 0.0 {
        return Ok(LayerSelection {
            warning: Some("all per-layer averages are equal; no cutoff gap".into()),
            ..Default::default()
        });
    }
    let low: BTreeSet<usize> = order[..=cut].iter().copied().collect();
    let prefix = (0..n).take_while(|j| low.contains(j)).count();
    let suffix_start = n - (0..n).rev().take_while(|j| low.contains(j)).count();
    let (unchanged, rejected) = low.into_iter().partition(|&j| j < prefix || j >= suffix_start);
    Ok(LayerSelection {
        unchanged,
        rejected,
        warning: None,
    })
}

/// Groups inner layers into shared blocks of at most `k`.
///
/// Layers in `unchanged` and the first `b` layers keep private attention.
/// The remaining layers are split into maximal runs of consecutive indices,
/// and each run is chunked left to right into blocks of `k`; the first layer
/// of a block is its root. A trailing block of one layer stays unshared.
pub fn build_plan(unchanged: &[usize], n_layers: usize, k: usize, b: usize) -> Result<SharingPlan> {
    if k < 2 {
        return Err(Error::Contract(format!("block size k must be >= 2, got {k}")));
    }
    if n_layers == 0 {
        return Err(Error::Contract("plan needs at least one layer".into()));
    }
    if let Some(&j) = unchanged.iter().find(|&&j| j >= n_layers) {
        return Err(Error::Contract(format!(
            "unchanged layer {j} out of range for {n_layers} layers"
        )));
    }
    let fixed: BTreeSet<usize> = unchanged.iter().copied().chain(0..b.min(n_layers)).collect();
    let mut source_of: Vec<usize> = (0..n_layers).collect();
    let mut j = 0;
    while j < n_layers {
        if fixed.contains(&j) {
            j += 1;
            continue;
        }
        let start = j;
        while j < n_layers && !fixed.contains(&j) {
            j += 1;
        }
        for block in (start..j).collect::<Vec<_>>().chunks(k) {
            for &l in block {
                source_of[l] = block[0];
            }
        }
    }
    SharingPlan::from_sources(source_of, k, b)
}
