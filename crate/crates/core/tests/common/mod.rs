//! Shared test oracles: central finite differences and case generators.
#![allow(dead_code)]

use echoatt::data::Batch;
use echoatt::distill::{stage1_losses, teacher_outputs, DistillConfig};
use echoatt::model::{ModelConfig, SharingPlan, TokenBatch, TransformerModel};
use echoatt::rng::{self, Rng};
use echoatt::{Graph, Result, Tensor, Var};
use rand::Rng as _;
use std::sync::{Mutex, MutexGuard};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

static SERIAL: Mutex<()> = Mutex::new(());

/// Serialises heavy tests inside one test binary.
pub fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Scalar probe `Σ out ∘ R` with fixed random `R`, so that ops whose plain
/// sum is constant (softmax) still get a non-trivial gradient.
pub fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = Tensor::uniform(&shape, -1.0, 1.0, &mut rng::stream(seed, "probe"));
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// Largest relative error, over all inputs, between backward gradients of
/// `f` and central differences.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        let mut ins = inputs.to_vec();
        for i in 0..t.numel() {
            let x0 = t.data()[i];
            ins[k].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&ins)?;
            ins[k].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&ins)?;
            ins[k].data_mut()[i] = x0;
            numeric[i] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic[k], &numeric));
    }
    Ok(worst)
}

/// Same check against a model's parameters: `loss` records a forward pass
/// and returns the loss node together with the pass.
pub fn model_gradcheck<F>(model: &TransformerModel, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph, &TransformerModel) -> Result<(Var, echoatt::model::ForwardPass)>,
{
    let mut g = Graph::new();
    let (l, pass) = loss(&mut g, model)?;
    g.backward(l)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut m = model.clone();
    let eval = |m: &TransformerModel| -> Result<f64> {
        let mut g = Graph::inference();
        let (l, _) = loss(&mut g, m)?;
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (idx, name) in names.iter().enumerate() {
        let analytic = g.grad(pass.param(name).expect("param bound")).unwrap().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let x0 = m.named_params()[idx].1.data()[i];
            m.named_params_mut()[idx].1.data_mut()[i] = x0 + FD_STEP;
            let up = eval(&m)?;
            m.named_params_mut()[idx].1.data_mut()[i] = x0 - FD_STEP;
            let down = eval(&m)?;
            m.named_params_mut()[idx].1.data_mut()[i] = x0;
            numeric[i] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

pub fn uniform(r: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, r)
}

pub type OpCase = fn(&mut Rng, u64) -> Result<f64>;

/// One randomized gradient check per differentiable op. Each entry draws
/// fresh shapes and values from the given generator.
pub fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        ("add", |r, s| {
            let (m, n) = (r.random_range(1..4), r.random_range(1..5));
            let ins = [uniform(r, &[m, n]), uniform(r, &[n])];
            gradcheck(&ins, |g, v| {
                let o = g.add(v[0], v[1])?;
                probe(g, o, s)
            })
        }),
        ("sub", |r, s| {
            let (m, n) = (r.random_range(1..4), r.random_range(1..5));
            let ins = [uniform(r, &[m, 1]), uniform(r, &[m, n])];
            gradcheck(&ins, |g, v| {
                let o = g.sub(v[0], v[1])?;
                probe(g, o, s)
            })
        }),
        ("mul", |r, s| {
            let (a, m, n) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..5));
            let ins = [uniform(r, &[a, m, n]), uniform(r, &[m, 1])];
            gradcheck(&ins, |g, v| {
                let o = g.mul(v[0], v[1])?;
                probe(g, o, s)
            })
        }),
        ("scale", |r, s| {
            let c = r.random_range(-3.0..3.0);
            let ins = [uniform(r, &[3, 2])];
            gradcheck(&ins, |g, v| {
                let o = g.scale(v[0], c);
                probe(g, o, s)
            })
        }),
        ("exp", |r, s| {
            let ins = [uniform(r, &[2, 4])];
            gradcheck(&ins, |g, v| {
                let o = g.exp(v[0]);
                probe(g, o, s)
            })
        }),
        ("silu", |r, s| {
            let ins = [uniform(r, &[2, 5])];
            gradcheck(&ins, |g, v| {
                let o = g.silu(v[0]);
                probe(g, o, s)
            })
        }),
        ("matmul", |r, s| {
            let (b, m, k, n) = (
                r.random_range(1..3),
                r.random_range(1..4),
                r.random_range(1..5),
                r.random_range(1..4),
            );
            let ins = [uniform(r, &[b, m, k]), uniform(r, &[b, k, n])];
            gradcheck(&ins, |g, v| {
                let o = g.matmul(v[0], v[1])?;
                probe(g, o, s)
            })
        }),
        ("matmul_weight", |r, s| {
            let (b, m, k, n) = (
                r.random_range(1..3),
                r.random_range(1..4),
                r.random_range(1..5),
                r.random_range(1..4),
            );
            let ins = [uniform(r, &[b, m, k]), uniform(r, &[k, n])];
            gradcheck(&ins, |g, v| {
                let o = g.matmul(v[0], v[1])?;
                probe(g, o, s)
            })
        }),
        ("matmul_nt", |r, s| {
            let (b, m, k, n) = (
                r.random_range(1..3),
                r.random_range(1..4),
                r.random_range(1..5),
                r.random_range(1..4),
            );
            let ins = [uniform(r, &[b, m, k]), uniform(r, &[b, n, k])];
            gradcheck(&ins, |g, v| {
                let o = g.matmul_nt(v[0], v[1])?;
                probe(g, o, s)
            })
        }),
        ("softmax", |r, s| {
            let axis = r.random_range(0..2);
            let ins = [uniform(r, &[3, 4])];
            gradcheck(&ins, |g, v| {
                let o = g.softmax(v[0], axis)?;
                probe(g, o, s)
            })
        }),
        ("causal_softmax", |r, s| {
            let n = r.random_range(1..5);
            let ins = [uniform(r, &[2, n, n])];
            gradcheck(&ins, |g, v| {
                let o = g.causal_softmax(v[0])?;
                probe(g, o, s)
            })
        }),
        ("log_softmax", |r, s| {
            let ins = [uniform(r, &[2, 5])];
            gradcheck(&ins, |g, v| {
                let o = g.log_softmax(v[0])?;
                probe(g, o, s)
            })
        }),
        ("rmsnorm", |r, s| {
            let n = r.random_range(2..6);
            let ins = [uniform(r, &[3, n]), uniform(r, &[n])];
            gradcheck(&ins, |g, v| {
                let o = g.rmsnorm(v[0], v[1], 1e-5)?;
                probe(g, o, s)
            })
        }),
        ("sum", |r, _| {
            let ins = [uniform(r, &[2, 3])];
            gradcheck(&ins, |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            })
        }),
        ("mean", |r, _| {
            let ins = [uniform(r, &[4, 3])];
            gradcheck(&ins, |g, v| {
                let e = g.exp(v[0]);
                Ok(g.mean(e))
            })
        }),
        ("reshape", |r, s| {
            let ins = [uniform(r, &[2, 6])];
            gradcheck(&ins, |g, v| {
                let o = g.reshape(v[0], &[3, 4])?;
                probe(g, o, s)
            })
        }),
        ("permute", |r, s| {
            let ins = [uniform(r, &[2, 3, 4])];
            gradcheck(&ins, |g, v| {
                let o = g.permute(v[0], &[2, 0, 1])?;
                probe(g, o, s)
            })
        }),
        ("embedding", |r, s| {
            let vocab = r.random_range(2..6);
            let ids: Vec<usize> = (0..6).map(|_| r.random_range(0..vocab)).collect();
            let ins = [uniform(r, &[vocab, 3])];
            gradcheck(&ins, |g, v| {
                let o = g.embedding(v[0], &ids, &[2, 3])?;
                probe(g, o, s)
            })
        }),
        ("rope", |r, s| {
            let seq = r.random_range(1..5);
            let ins = [uniform(r, &[1, 2, seq, 4])];
            gradcheck(&ins, |g, v| {
                let o = g.rope(v[0], 10_000.0)?;
                probe(g, o, s)
            })
        }),
        ("repeat_kv", |r, s| {
            let n_rep = r.random_range(1..4);
            let ins = [uniform(r, &[1, 2, 3, 2])];
            gradcheck(&ins, |g, v| {
                let o = g.repeat_kv(v[0], n_rep)?;
                probe(g, o, s)
            })
        }),
        ("pick", |r, _| {
            let idx: Vec<usize> = (0..3).map(|_| r.random_range(0..4)).collect();
            let ins = [uniform(r, &[3, 4])];
            gradcheck(&ins, |g, v| {
                let ls = g.log_softmax(v[0])?;
                let p = g.pick(ls, &idx)?;
                Ok(g.sum(p))
            })
        }),
    ]
}

/// Small GQA config used for model-level gradient checks.
pub fn tiny_config(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 8,
        n_heads: 2,
        n_kv_heads: 1,
        d_ff: 12,
        vocab_size: 7,
        max_seq_len: 6,
        rope_base: 10_000.0,
        norm_eps: 1e-5,
    }
}

/// Random model with weights scaled up so attention is far from uniform.
pub fn random_model(cfg: ModelConfig, plan: SharingPlan, seed: u64) -> TransformerModel {
    let mut m = TransformerModel::new(cfg, plan, seed).unwrap();
    let mut r = rng::stream(seed, "test-weights");
    for (_, t) in m.named_params_mut() {
        let n = t.numel();
        let fresh = Tensor::uniform(&[n], -0.6, 0.6, &mut r);
        t.data_mut().copy_from_slice(fresh.data());
    }
    m
}

pub fn random_batch(r: &mut Rng, vocab: usize, batch: usize, seq: usize) -> Batch {
    let ids: Vec<usize> = (0..batch * seq).map(|_| r.random_range(0..vocab)).collect();
    Batch {
        tokens: TokenBatch::new(batch, seq, ids).unwrap(),
        targets: (0..batch * seq).map(|_| r.random_range(0..vocab)).collect(),
    }
}

/// Gradient check of a full shared-attention block: layers 1..=3 share
/// layer 1's attention, so the root's Q/K receive gradient from three
/// consumers.
pub fn shared_block_case(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "shared-block");
    let plan = SharingPlan::from_sources(vec![0, 1, 1, 1], 3, 1)?;
    let model = random_model(tiny_config(4), plan, seed);
    let batch = random_batch(&mut r, 7, 2, 4);
    model_gradcheck(&model, |g, m| {
        let pass = m.forward(g, &batch.tokens)?;
        let l = probe(g, pass.logits, seed)?;
        Ok((l, pass))
    })
}

/// Gradient check of the weighted Stage-1 objective with respect to every
/// student parameter, under both KL directions.
pub fn stage1_loss_case(seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "stage1-loss");
    let teacher = random_model(tiny_config(4), SharingPlan::identity(4), seed);
    let plan = SharingPlan::from_sources(vec![0, 1, 1, 3], 2, 0)?;
    let mut student = echoatt::model::build_student(&teacher, &plan)?;
    // Perturb the student so no loss term sits at its minimum.
    for (_, t) in student.named_params_mut() {
        let n = t.numel();
        let noise = Tensor::uniform(&[n], -0.2, 0.2, &mut r);
        for (x, e) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += e;
        }
    }
    let batch = random_batch(&mut r, 7, 2, 5);
    let t_out = teacher_outputs(&teacher, &batch)?;
    let mut cfg = DistillConfig::default();
    if seed % 2 == 1 {
        cfg.kl_direction = echoatt::KlDirection::TeacherStudent;
    }
    model_gradcheck(&student, |g, m| {
        let l = stage1_losses(g, m, &t_out, &batch, &cfg)?;
        Ok((l.total, l.pass))
    })
}

/// Checks, on one forward pass, that every shared layer applies exactly its
/// root's probabilities, that the causal upper triangle is zero, and that
/// rows sum to one. Returns a description of the first violation.
pub fn check_sharing_invariant(model: &TransformerModel, tokens: &TokenBatch) -> std::result::Result<(), String> {
    let mut g = Graph::inference();
    let pass = model.forward(&mut g, tokens).map_err(|e| e.to_string())?;
    let seq = tokens.seq;
    for (j, &a) in pass.trace.attention.iter().enumerate() {
        let root = model.plan().source_of(j);
        let root_a = g.data(pass.trace.attention[root]);
        if g.data(a) != root_a {
            return Err(format!("layer {j} attention differs from root {root}"));
        }
        for (r, row) in g.data(a).chunks(seq).enumerate() {
            let q = r % seq;
            if row[q + 1..].iter().any(|&x| x != 0.0) {
                return Err(format!("layer {j} row {r} attends to the future"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(format!("layer {j} row {r} sums to {s}"));
            }
        }
    }
    Ok(())
}

/// Random valid config, plan and token batch for the sharing property.
pub fn random_sharing_case(seed: u64) -> (TransformerModel, TokenBatch) {
    let mut r = rng::stream(seed, "sharing-case");
    let n_kv = r.random_range(1..3);
    let n_heads = n_kv * r.random_range(1..3);
    let d_head = 2 * r.random_range(1..4);
    let n_layers = r.random_range(1..7);
    let cfg = ModelConfig {
        n_layers,
        d_model: n_heads * d_head,
        n_heads,
        n_kv_heads: n_kv,
        d_ff: r.random_range(1..10),
        vocab_size: r.random_range(2..20),
        max_seq_len: 12,
        rope_base: 10_000.0,
        norm_eps: 1e-5,
    };
    let shared: Vec<usize> = (1..n_layers).filter(|_| r.random_bool(0.5)).collect();
    let plan = SharingPlan::from_shared_indices(n_layers, &shared).unwrap();
    let model = random_model(cfg.clone(), plan, seed);
    let (batch, seq) = (r.random_range(1..3), r.random_range(1..13));
    let ids = (0..batch * seq).map(|_| r.random_range(0..cfg.vocab_size)).collect();
    (model, TokenBatch::new(batch, seq, ids).unwrap())
}

/// Store-everything similarity oracle: keeps every sample's flattened
/// attention for every layer, then loops over layer pairs.
pub fn naive_similarity(model: &TransformerModel, batches: &[TokenBatch]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = model.config().n_layers;
    let mut store: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n];
    for b in batches {
        for row in 0..b.batch {
            let single = TokenBatch::new(1, b.seq, b.row(row).to_vec()).unwrap();
            let mut g = Graph::inference();
            let pass = model.forward(&mut g, &single).unwrap();
            for (j, &a) in pass.trace.attention.iter().enumerate() {
                store[j].push(g.data(a).to_vec());
            }
        }
    }
    let samples = store[0].len();
    let mut pairwise = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                pairwise[i][j] = 1.0;
                continue;
            }
            let mut total = 0.0;
            for s in 0..samples {
                let (u, v) = (&store[i][s], &store[j][s]);
                let mut dot = 0.0;
                let mut uu = 0.0;
                let mut vv = 0.0;
                for t in 0..u.len() {
                    dot += u[t] * v[t];
                    uu += u[t] * u[t];
                    vv += v[t] * v[t];
                }
                total += dot / (uu.sqrt() * vv.sqrt());
            }
            pairwise[i][j] = total / samples as f64;
        }
    }
    let avg = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| pairwise[i][j]).sum::<f64>() / (n - 1) as f64)
        .collect();
    (pairwise, avg)
}

/// Fixed-length random token batches.
pub fn random_token_batches(seed: u64, vocab: usize, n_batches: usize, batch: usize, seq: usize) -> Vec<TokenBatch> {
    let mut r = rng::stream(seed, "token-batches");
    (0..n_batches)
        .map(|_| {
            let ids = (0..batch * seq).map(|_| r.random_range(0..vocab)).collect();
            TokenBatch::new(batch, seq, ids).unwrap()
        })
        .collect()
}
