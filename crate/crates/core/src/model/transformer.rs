use super::{ModelConfig, SharingPlan};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// Token ids laid out as `[batch, seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::Input(format!(
                "token batch [{batch}, {seq}] cannot hold {} ids",
                ids.len()
            )));
        }
        Ok(TokenBatch { batch, seq, ids })
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Weights of one decoder block. `wq`/`wk` are absent on shared layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Option<Tensor>,
    pub wk: Option<Tensor>,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl LayerWeights {
    fn fields(&self) -> [(&'static str, Option<&Tensor>); 9] {
        [
            ("attn_norm", Some(&self.attn_norm)),
            ("wq", self.wq.as_ref()),
            ("wk", self.wk.as_ref()),
            ("wv", Some(&self.wv)),
            ("wo", Some(&self.wo)),
            ("mlp_norm", Some(&self.mlp_norm)),
            ("w_gate", Some(&self.w_gate)),
            ("w_up", Some(&self.w_up)),
            ("w_down", Some(&self.w_down)),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, Option<&mut Tensor>); 9] {
        [
            ("attn_norm", Some(&mut self.attn_norm)),
            ("wq", self.wq.as_mut()),
            ("wk", self.wk.as_mut()),
            ("wv", Some(&mut self.wv)),
            ("wo", Some(&mut self.wo)),
            ("mlp_norm", Some(&mut self.mlp_norm)),
            ("w_gate", Some(&mut self.w_gate)),
            ("w_up", Some(&mut self.w_up)),
            ("w_down", Some(&mut self.w_down)),
        ]
    }
}

/// Decoder-only transformer whose attention layers follow a [`SharingPlan`].
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    plan: SharingPlan,
    pub tok_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

/// Per-layer attention probabilities of one forward pass.
///
/// `attention[j]` is the `[batch, heads, seq, seq]` node layer `j` applied
/// to its values. Shared layers hold the very node of their root.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub source_of: Vec<usize>,
    pub attention: Vec<Var>,
}

/// Graph handles produced by [`TransformerModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// `[batch, seq, vocab]`.
    pub logits: Var,
    /// Residual stream after each block, `[batch, seq, d_model]`.
    pub hidden: Vec<Var>,
    pub trace: AttentionTrace,
    params: Vec<(String, Var)>,
}

impl ForwardPass {
    /// Graph leaf bound to the named parameter.
    pub fn param(&self, name: &str) -> Option<Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

impl TransformerModel {
    /// Randomly initialised model; the plan decides which layers carry Q/K.
    pub fn new(config: ModelConfig, plan: SharingPlan, seed: u64) -> Result<Self> {
        config.validate()?;
        if plan.n_layers() != config.n_layers {
            return Err(Error::Contract(format!(
                "plan covers {} layers but the model has {}",
                plan.n_layers(),
                config.n_layers
            )));
        }
        let mut r = rng::stream(seed, "model-init");
        let d = config.d_model;
        let mut w = |rows: usize, cols: usize| Tensor::randn(&[rows, cols], INIT_STD, &mut r).with_requires_grad(true);
        let tok_embedding = w(config.vocab_size, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for j in 0..config.n_layers {
            let (wq, wk) = (w(d, d), w(d, config.kv_dim()));
            let root = plan.is_root(j);
            layers.push(LayerWeights {
                attn_norm: Tensor::ones(&[d]).with_requires_grad(true),
                wq: root.then_some(wq),
                wk: root.then_some(wk),
                wv: w(d, config.kv_dim()),
                wo: w(d, d),
                mlp_norm: Tensor::ones(&[d]).with_requires_grad(true),
                w_gate: w(d, config.d_ff),
                w_up: w(d, config.d_ff),
                w_down: w(config.d_ff, d),
            });
        }
        let lm_head = w(d, config.vocab_size);
        Ok(TransformerModel {
            config,
            plan,
            tok_embedding,
            layers,
            final_norm: Tensor::ones(&[d]).with_requires_grad(true),
            lm_head,
        })
    }

    /// Assembles a model from explicit weights, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        plan: SharingPlan,
        tok_embedding: Tensor,
        layers: Vec<LayerWeights>,
        final_norm: Tensor,
        lm_head: Tensor,
    ) -> Result<Self> {
        let m = TransformerModel {
            config,
            plan,
            tok_embedding,
            layers,
            final_norm,
            lm_head,
        };
        m.check_shapes()?;
        Ok(m)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.plan.n_layers() != c.n_layers || self.layers.len() != c.n_layers {
            return Err(Error::Contract(format!(
                "model has {} layers, plan {}, config {}",
                self.layers.len(),
                self.plan.n_layers(),
                c.n_layers
            )));
        }
        let (d, kv, ff) = (c.d_model, c.kv_dim(), c.d_ff);
        let want = |name: &str| -> Vec<usize> {
            match name {
                "attn_norm" | "mlp_norm" => vec![d],
                "wq" | "wo" => vec![d, d],
                "wk" | "wv" => vec![d, kv],
                "w_gate" | "w_up" => vec![d, ff],
                "w_down" => vec![ff, d],
                _ => unreachable!(),
            }
        };
        for (j, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                match t {
                    Some(t) if t.shape() != want(name) => {
                        return Err(Error::shape("layer weight", t.shape(), &want(name)))
                    }
                    None if self.plan.is_root(j) => {
                        return Err(Error::Contract(format!("root layer {j} is missing {name}")))
                    }
                    Some(_) if !self.plan.is_root(j) && (name == "wq" || name == "wk") => {
                        return Err(Error::Contract(format!("shared layer {j} must not store {name}")))
                    }
                    _ => {}
                }
            }
        }
        let checks = [
            (&self.tok_embedding, vec![c.vocab_size, d]),
            (&self.final_norm, vec![d]),
            (&self.lm_head, vec![d, c.vocab_size]),
        ];
        for (t, s) in checks {
            if t.shape() != s {
                return Err(Error::shape("model weight", t.shape(), &s));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &SharingPlan {
        &self.plan
    }

    /// Parameters in a fixed order with dotted names (`layers.3.wv`, ...).
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_embedding".to_string(), &self.tok_embedding)];
        for (j, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                if let Some(t) = t {
                    out.push((format!("layers.{j}.{name}"), t));
                }
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("tok_embedding".to_string(), &mut self.tok_embedding)];
        for (j, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.fields_mut() {
                if let Some(t) = t {
                    out.push((format!("layers.{j}.{name}"), t));
                }
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), &mut self.lm_head));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for (_, t) in self.named_params_mut() {
            t.set_requires_grad(flag);
        }
    }

    /// Adds the graph gradients of this pass's bound parameters into the
    /// model's gradient buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, pass: &ForwardPass) -> Result<()> {
        let params = self.named_params_mut();
        if params.len() != pass.params.len() {
            return Err(Error::Contract("forward pass was built from a different model".into()));
        }
        for ((name, t), (bound, var)) in params.into_iter().zip(&pass.params) {
            if name != *bound {
                return Err(Error::Contract(format!("parameter order mismatch: {name} vs {bound}")));
            }
            if let Some(grad) = g.grad(*var) {
                t.accumulate_grad(grad);
            }
        }
        Ok(())
    }

    /// Causal forward pass over `tokens`, recording onto `g`.
    ///
    /// Root layers compute `softmax(QKᵀ/√d_head)` under a causal mask; a
    /// shared layer applies its root's probabilities (from this same pass)
    /// to its own values.
    pub fn forward(&self, g: &mut Graph, tokens: &TokenBatch) -> Result<ForwardPass> {
        let c = &self.config;
        let (bsz, seq) = (tokens.batch, tokens.seq);
        if seq > c.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                c.max_seq_len
            )));
        }
        let (h, kvh, dh, d) = (c.n_heads, c.n_kv_heads, c.d_head(), c.d_model);
        let n_rep = h / kvh;

        let params: Vec<(String, Var)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, g.leaf(t.detached())))
            .collect();
        let mut it = params.iter().map(|(_, v)| *v);
        let mut next = || it.next().expect("parameter list exhausted");

        let emb = next();
        let mut x = g.embedding(emb, &tokens.ids, &[bsz, seq])?;
        let mut hidden = Vec::with_capacity(c.n_layers);
        let mut attention: Vec<Var> = Vec::with_capacity(c.n_layers);

        // [b, s, heads*dh] -> [b, heads, s, dh]
        let split_heads = |g: &mut Graph, t: Var, heads: usize| -> Result<Var> {
            let t = g.reshape(t, &[bsz, seq, heads, dh])?;
            g.permute(t, &[0, 2, 1, 3])
        };

        for j in 0..c.n_layers {
            let root = self.plan.is_root(j);
            let attn_norm = next();
            let (wq, wk) = if root {
                (Some(next()), Some(next()))
            } else {
                (None, None)
            };
            let (wv, wo, mlp_norm, w_gate, w_up, w_down) = (next(), next(), next(), next(), next(), next());

            let xn = g.rmsnorm(x, attn_norm, c.norm_eps)?;
            let probs = match (wq, wk) {
                (Some(wq), Some(wk)) => {
                    let q = g.matmul(xn, wq)?;
                    let q = split_heads(g, q, h)?;
                    let q = g.rope(q, c.rope_base)?;
                    let q = g.scale(q, 1.0 / (dh as f64).sqrt());
                    let k = g.matmul(xn, wk)?;
                    let k = split_heads(g, k, kvh)?;
                    let k = g.rope(k, c.rope_base)?;
                    let k = g.repeat_kv(k, n_rep)?;
                    let scores = g.matmul_nt(q, k)?;
                    g.causal_softmax(scores)?
                }
                _ => attention[self.plan.source_of(j)],
            };
            attention.push(probs);

            let v = g.matmul(xn, wv)?;
            let v = split_heads(g, v, kvh)?;
            let v = g.repeat_kv(v, n_rep)?;
            let o = g.matmul(probs, v)?;
            let o = g.permute(o, &[0, 2, 1, 3])?;
            let o = g.reshape(o, &[bsz, seq, d])?;
            let o = g.matmul(o, wo)?;
            x = g.add(x, o)?;

            let hn = g.rmsnorm(x, mlp_norm, c.norm_eps)?;
            let gate = g.matmul(hn, w_gate)?;
            let gate = g.silu(gate);
            let up = g.matmul(hn, w_up)?;
            let m = g.mul(gate, up)?;
            let m = g.matmul(m, w_down)?;
            x = g.add(x, m)?;
            hidden.push(x);
        }
        let final_norm = next();
        let lm_head = next();
        let xn = g.rmsnorm(x, final_norm, c.norm_eps)?;
        let logits = g.matmul(xn, lm_head)?;
        Ok(ForwardPass {
            logits,
            hidden,
            trace: AttentionTrace {
                source_of: self.plan.sources().to_vec(),
                attention,
            },
            params,
        })
    }

    /// Logits of a gradient-free forward pass.
    pub fn logits(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let mut g = Graph::inference();
        let pass = self.forward(&mut g, tokens)?;
        Ok(g.value(pass.logits).detached())
    }
}

/// Parameters removed by eliminating Q and K in every shared layer.
pub fn removed_parameters(config: &ModelConfig, plan: &SharingPlan) -> usize {
    plan.shared_count() * config.qk_params_per_layer()
}

/// Student for `plan`: every teacher weight copied verbatim except Q/K of
/// shared layers, which are dropped.
pub fn build_student(teacher: &TransformerModel, plan: &SharingPlan) -> Result<TransformerModel> {
    if !teacher.plan.is_identity() {
        return Err(Error::Contract("teacher must be a dense model (identity plan)".into()));
    }
    if plan.n_layers() != teacher.config.n_layers {
        return Err(Error::Contract(format!(
            "plan covers {} layers but the teacher has {}",
            plan.n_layers(),
            teacher.config.n_layers
        )));
    }
    let mut student = teacher.clone();
    student.plan = plan.clone();
    for (j, layer) in student.layers.iter_mut().enumerate() {
        if !plan.is_root(j) {
            layer.wq = None;
            layer.wk = None;
        }
    }
    student.zero_grad();
    Ok(student)
}
