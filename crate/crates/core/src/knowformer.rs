//! Small encoder-style transformer scorer. The last M layers couple their
//! feed-forward key/value matrices with one projected graph vector each, so
//! the graph representation acts as an extra key-value memory slot. Base
//! weights stay frozen; adaptation happens through low-rank deltas on the
//! FFN matrices, the knowledge projectors, and the scoring head.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::diffcore::{Graph, ParamGroup, ParamId, ParamStore, Scalar, Var};

pub const PAD_TOKEN: u32 = 0;
pub const SEP_TOKEN: u32 = 1;
pub const UNK_TOKEN: u32 = 2;
pub const RESERVED_TOKENS: usize = 3;

#[derive(Debug, Error)]
pub enum KnowformerError {
    #[error("token id {0} outside vocabulary of {1}")]
    TokenOutOfVocab(u32, usize),
    #[error("expected {want} knowledge vectors, got {got}")]
    KnowledgeCount { want: usize, got: usize },
    #[error("empty token sequence")]
    EmptySequence,
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Standard layers N before the knowledge-injected ones.
    pub std_layers: usize,
    /// Knowledge-injected layers M, nearest the output.
    pub inject_layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    /// Width of the incoming graph vectors.
    pub graph_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub attention_lora: bool,
    /// Apply the FFN activation to the knowledge slot's gate.
    pub slot_activation: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            vocab: RESERVED_TOKENS,
            d_model: 64,
            d_ff: 256,
            std_layers: 3,
            inject_layers: 2,
            heads: 1,
            max_seq: 64,
            graph_dim: 64,
            lora_rank: 4,
            lora_alpha: 8.0,
            attention_lora: false,
            slot_activation: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_k: ParamId,
    pub ffn_v: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub lora_k: LoraPair,
    pub lora_v: LoraPair,
    pub lora_q: Option<LoraPair>,
    pub lora_av: Option<LoraPair>,
}

/// Low-rank delta `W + (alpha/rank) * A B`; `B` starts at zero so the delta
/// is zero at initialization.
#[derive(Debug, Clone, Copy)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectorPair {
    pub pr_k: ParamId,
    pub pr_v: ParamId,
}

#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub cfg: TransformerConfig,
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerParams>,
    /// One projector pair per injected layer.
    pub projectors: Vec<ProjectorPair>,
    pub final_ln_gamma: ParamId,
    pub final_ln_beta: ParamId,
    pub head: ParamId,
    /// Projection used by the soft-prompt ablation.
    pub sp_proj: ParamId,
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::from_f64(sample_normal(rng) * std))
}

fn xavier<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    gaussian(rows, cols, std, rng)
}

impl TransformerParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: TransformerConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(cfg.d_model % cfg.heads == 0, "d_model must divide into heads");
        let d = cfg.d_model;
        let frozen = |store: &mut ParamStore<T>, name: String, v: Array2<T>| {
            store.add(name, v, false, ParamGroup::Backbone)
        };
        let token_emb = frozen(store, "tf.token_emb".into(), gaussian(cfg.vocab, d, 0.02, rng));
        let pos_emb = frozen(store, "tf.pos_emb".into(), gaussian(cfg.max_seq, d, 0.02, rng));
        let total = cfg.std_layers + cfg.inject_layers;
        let mut layers = Vec::with_capacity(total);
        for l in 0..total {
            let lora = |store: &mut ParamStore<T>, tag: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| LoraPair {
                a: store.add(
                    format!("tf.l{l}.lora_{tag}.a"),
                    gaussian(rows, cfg.lora_rank, 0.02, rng),
                    true,
                    ParamGroup::Backbone,
                ),
                b: store.add(
                    format!("tf.l{l}.lora_{tag}.b"),
                    Array2::zeros((cfg.lora_rank, cols)),
                    true,
                    ParamGroup::Backbone,
                ),
            };
            layers.push(LayerParams {
                wq: frozen(store, format!("tf.l{l}.wq"), xavier(d, d, rng)),
                wk: frozen(store, format!("tf.l{l}.wk"), xavier(d, d, rng)),
                wv: frozen(store, format!("tf.l{l}.wv"), xavier(d, d, rng)),
                wo: frozen(store, format!("tf.l{l}.wo"), xavier(d, d, rng)),
                ffn_k: frozen(store, format!("tf.l{l}.ffn_k"), xavier(d, cfg.d_ff, rng)),
                ffn_v: frozen(store, format!("tf.l{l}.ffn_v"), xavier(cfg.d_ff, d, rng)),
                ln1_gamma: frozen(store, format!("tf.l{l}.ln1_g"), Array2::ones((1, d))),
                ln1_beta: frozen(store, format!("tf.l{l}.ln1_b"), Array2::zeros((1, d))),
                ln2_gamma: frozen(store, format!("tf.l{l}.ln2_g"), Array2::ones((1, d))),
                ln2_beta: frozen(store, format!("tf.l{l}.ln2_b"), Array2::zeros((1, d))),
                lora_k: lora(store, "k", d, cfg.d_ff, rng),
                lora_v: lora(store, "v", cfg.d_ff, d, rng),
                lora_q: cfg.attention_lora.then(|| lora(store, "q", d, d, rng)),
                lora_av: cfg.attention_lora.then(|| lora(store, "av", d, d, rng)),
            });
        }
        let mut projectors = Vec::with_capacity(cfg.inject_layers);
        for i in 0..cfg.inject_layers {
            projectors.push(ProjectorPair {
                pr_k: store.add(
                    format!("tf.proj{i}.pr_k"),
                    gaussian(cfg.graph_dim, d, 0.02, rng),
                    true,
                    ParamGroup::Backbone,
                ),
                pr_v: store.add(
                    format!("tf.proj{i}.pr_v"),
                    Array2::zeros((cfg.graph_dim, d)),
                    true,
                    ParamGroup::Backbone,
                ),
            });
        }
        let final_ln_gamma = frozen(store, "tf.final_ln_g".into(), Array2::ones((1, d)));
        let final_ln_beta = frozen(store, "tf.final_ln_b".into(), Array2::zeros((1, d)));
        let head = store.add("tf.head", gaussian(d, 1, 0.02, rng), true, ParamGroup::Backbone);
        let sp_proj = store.add(
            "tf.sp_proj",
            Array2::zeros((cfg.graph_dim, d)),
            true,
            ParamGroup::Backbone,
        );
        TransformerParams {
            cfg,
            token_emb,
            pos_emb,
            layers,
            projectors,
            final_ln_gamma,
            final_ln_beta,
            head,
            sp_proj,
        }
    }

    pub fn total_layers(&self) -> usize {
        self.cfg.std_layers + self.cfg.inject_layers
    }
}

fn lora_delta<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    base: ParamId,
    pair: &LoraPair,
    cfg: &TransformerConfig,
) -> Var {
    let scale = T::from_f64(cfg.lora_alpha / cfg.lora_rank as f64);
    let base_v = g.param(store, base);
    let a = g.param(store, pair.a);
    let b = g.param(store, pair.b);
    let ab = g.matmul(a, b);
    let delta = g.mul_scalar(ab, scale);
    g.add(base_v, delta)
}

/// Plain two-matrix FFN with the activation reinstated: `relu(x K) V`.
pub fn base_ffn<T: Scalar>(g: &mut Graph<T>, x: Var, k: Var, v: Var) -> Var {
    let hidden = g.matmul(x, k);
    let act = g.relu(hidden);
    g.matmul(act, v)
}

/// Projects one graph vector into the FFN's key and value spaces.
pub fn project_knowledge<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    proj: &ProjectorPair,
    h: Var,
) -> (Var, Var) {
    let pr_k = g.param(store, proj.pr_k);
    let pr_v = g.param(store, proj.pr_v);
    (g.matmul(h, pr_k), g.matmul(h, pr_v))
}

/// FFN with the knowledge pair appended as one extra key-value slot:
/// `act([x K' ; x phi_k]) [V' ; phi_v]`.
pub fn knowformer_ffn<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    k_eff: Var,
    v_eff: Var,
    phi_k: Var,
    phi_v: Var,
    slot_activation: bool,
) -> Var {
    let hidden = g.matmul(x, k_eff);
    let act = g.relu(hidden);
    let main = g.matmul(act, v_eff);
    let phi_k_col = g.transpose(phi_k);
    let gate_raw = g.matmul(x, phi_k_col); // T x 1
    let gate = if slot_activation { g.relu(gate_raw) } else { gate_raw };
    let slot = g.matmul(gate, phi_v); // T x d
    g.add(main, slot)
}

fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &TransformerParams,
    layer: &LayerParams,
    x: Var,
    key_mask: &[bool],
) -> Var {
    let cfg = &params.cfg;
    let d = cfg.d_model;
    let heads = cfg.heads;
    let hd = d / heads;
    let t = g.value(x).nrows();

    let ln_g = g.param(store, layer.ln1_gamma);
    let ln_b = g.param(store, layer.ln1_beta);
    let a_in = g.layernorm(x, ln_g, ln_b);

    let q_full = match &layer.lora_q {
        Some(pair) => {
            let w = lora_delta(g, store, layer.wq, pair, cfg);
            g.matmul(a_in, w)
        }
        None => {
            let w = g.param(store, layer.wq);
            g.matmul(a_in, w)
        }
    };
    let wk = g.param(store, layer.wk);
    let k_full = g.matmul(a_in, wk);
    let v_full = match &layer.lora_av {
        Some(pair) => {
            let w = lora_delta(g, store, layer.wv, pair, cfg);
            g.matmul(a_in, w)
        }
        None => {
            let w = g.param(store, layer.wv);
            g.matmul(a_in, w)
        }
    };

    // Key-side padding mask: blocked columns get a large negative logit.
    let mut mask = Array2::zeros((t, t));
    for (j, &keep) in key_mask.iter().enumerate() {
        if !keep {
            for i in 0..t {
                mask[[i, j]] = T::from_f64(-1e30);
            }
        }
    }
    let mask_var = g.constant(mask);
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let q = g.slice_cols(q_full, lo, hi);
        let k = g.slice_cols(k_full, lo, hi);
        let v = g.slice_cols(v_full, lo, hi);
        let kt = g.transpose(k);
        let logits = g.matmul(q, kt);
        let scaled = g.mul_scalar(logits, scale);
        let masked = g.add(scaled, mask_var);
        let attn = g.softmax(masked, 1);
        head_outputs.push(g.matmul(attn, v));
    }
    let ctx = if heads == 1 {
        head_outputs[0]
    } else {
        g.concat_cols(&head_outputs)
    };
    let wo = g.param(store, layer.wo);
    let out = g.matmul(ctx, wo);
    g.add(x, out)
}

fn ffn_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &TransformerParams,
    layer: &LayerParams,
    x: Var,
    phi: Option<(Var, Var)>,
) -> Var {
    let cfg = &params.cfg;
    let ln_g = g.param(store, layer.ln2_gamma);
    let ln_b = g.param(store, layer.ln2_beta);
    let f_in = g.layernorm(x, ln_g, ln_b);
    let k_eff = lora_delta(g, store, layer.ffn_k, &layer.lora_k, cfg);
    let v_eff = lora_delta(g, store, layer.ffn_v, &layer.lora_v, cfg);
    let y = match phi {
        Some((phi_k, phi_v)) => {
            knowformer_ffn(g, f_in, k_eff, v_eff, phi_k, phi_v, cfg.slot_activation)
        }
        None => base_ffn(g, f_in, k_eff, v_eff),
    };
    g.add(x, y)
}

fn embed_tokens<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &TransformerParams,
    tokens: &[u32],
) -> Result<(Var, Vec<bool>), KnowformerError> {
    if tokens.is_empty() {
        return Err(KnowformerError::EmptySequence);
    }
    let cfg = &params.cfg;
    let tokens = &tokens[..tokens.len().min(cfg.max_seq)];
    let mut ids = Vec::with_capacity(tokens.len());
    for &tk in tokens {
        if tk as usize >= cfg.vocab {
            return Err(KnowformerError::TokenOutOfVocab(tk, cfg.vocab));
        }
        ids.push(tk as usize);
    }
    let non_pad: Vec<bool> = tokens.iter().map(|&tk| tk != PAD_TOKEN).collect();
    let emb_table = g.param(store, params.token_emb);
    let emb = g.gather_rows(emb_table, &ids);
    let pos_table = g.param(store, params.pos_emb);
    let pos = g.slice_rows(pos_table, 0, ids.len());
    Ok((g.add(emb, pos), non_pad))
}

fn pool_and_score<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &TransformerParams,
    x: Var,
    non_pad: &[bool],
) -> Var {
    let ln_g = g.param(store, params.final_ln_gamma);
    let ln_b = g.param(store, params.final_ln_beta);
    let x = g.layernorm(x, ln_g, ln_b);
    let count = non_pad.iter().filter(|&&b| b).count().max(1);
    let weight = T::from_f64(1.0 / count as f64);
    let mut m = Array2::zeros((1, non_pad.len()));
    for (j, &keep) in non_pad.iter().enumerate() {
        if keep {
            m[[0, j]] = weight;
        }
    }
    let mask = g.constant(m);
    let pooled = g.matmul(mask, x); // 1 x d
    let head = g.param(store, params.head);
    g.matmul(pooled, head)
}

/// Scores one token sequence. `knowledge` must hold exactly M graph vectors
/// (shallowest first); `None` runs every layer as a standard transformer
/// layer, which is also the "no parameterized knowledge injection" path.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &TransformerParams,
    tokens: &[u32],
    knowledge: Option<&[Var]>,
) -> Result<Var, KnowformerError> {
    let cfg = &params.cfg;
    if let Some(k) = knowledge {
        if k.len() != cfg.inject_layers {
            return Err(KnowformerError::KnowledgeCount {
                want: cfg.inject_layers,
                got: k.len(),
            });
        }
    }
    let (mut x, non_pad) = embed_tokens(g, store, params, tokens)?;
    for (l, layer) in params.layers.iter().enumerate() {
        x = attention_block(g, store, params, layer, x, &non_pad);
        let phi = match knowledge {
            Some(vectors) if l >= cfg.std_layers => {
                let idx = l - cfg.std_layers;
                Some(project_knowledge(g, store, &params.projectors[idx], vectors[idx]))
            }
            _ => None,
        };
        x = ffn_block(g, store, params, layer, x, phi);
    }
    Ok(pool_and_score(g, store, params, x, &non_pad))
}

/// Soft-prompt ablation: the pooled graph vector is projected and prepended
/// as a prefix embedding; all layers run standard.
pub fn soft_prompt_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &TransformerParams,
    tokens: &[u32],
    pooled_graph: Var,
) -> Result<Var, KnowformerError> {
    soft_prompt_forward_impl(g, store, params, tokens, pooled_graph, false)
}

#[doc(hidden)]
pub fn soft_prompt_forward_impl<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &TransformerParams,
    tokens: &[u32],
    pooled_graph: Var,
    mask_prefix: bool,
) -> Result<Var, KnowformerError> {
    if tokens.is_empty() {
        return Err(KnowformerError::EmptySequence);
    }
    let cfg = &params.cfg;
    let tokens = &tokens[..tokens.len().min(cfg.max_seq - 1)];
    let mut ids = Vec::with_capacity(tokens.len());
    for &tk in tokens {
        if tk as usize >= cfg.vocab {
            return Err(KnowformerError::TokenOutOfVocab(tk, cfg.vocab));
        }
        ids.push(tk as usize);
    }
    let sp = g.param(store, params.sp_proj);
    let prefix = g.matmul(pooled_graph, sp); // 1 x d
    let emb_table = g.param(store, params.token_emb);
    let emb = g.gather_rows(emb_table, &ids);
    let seq = g.concat_rows(&[prefix, emb]);
    let pos_table = g.param(store, params.pos_emb);
    let pos = g.slice_rows(pos_table, 0, ids.len() + 1);
    let mut x = g.add(seq, pos);

    let mut non_pad = vec![!mask_prefix];
    non_pad.extend(tokens.iter().map(|&tk| tk != PAD_TOKEN));
    for layer in params.layers.iter() {
        x = attention_block(g, store, params, layer, x, &non_pad);
        x = ffn_block(g, store, params, layer, x, None);
    }
    Ok(pool_and_score(g, store, params, x, &non_pad))
}

/// Exported slot vectors of one injected layer.
#[derive(Debug, Clone, Serialize)]
pub struct PhiExport {
    pub layer: usize,
    pub phi_k: Vec<f64>,
    pub phi_v: Vec<f64>,
}

/// Computes the per-layer (phi_k, phi_v) pairs for the given graph vectors.
pub fn export_phi<T: Scalar>(
    store: &ParamStore<T>,
    params: &TransformerParams,
    graph_vectors: &[Array2<T>],
) -> Result<Vec<PhiExport>, KnowformerError> {
    if graph_vectors.len() != params.cfg.inject_layers {
        return Err(KnowformerError::KnowledgeCount {
            want: params.cfg.inject_layers,
            got: graph_vectors.len(),
        });
    }
    let mut out = Vec::with_capacity(graph_vectors.len());
    for (i, h) in graph_vectors.iter().enumerate() {
        let mut g = Graph::new(false);
        let hv = g.constant(h.clone());
        let (pk, pv) = project_knowledge(&mut g, store, &params.projectors[i], hv);
        out.push(PhiExport {
            layer: params.cfg.std_layers + i,
            phi_k: g.value(pk).iter().map(|&v| v.to_f64()).collect(),
            phi_v: g.value(pv).iter().map(|&v| v.to_f64()).collect(),
        });
    }
    Ok(out)
}
