//! Edge-score-scaled graph attention encoder. Messages flow along stored
//! edge direction; each node also attends to itself through a dedicated
//! self relation. Attention weights are scaled by the per-edge relevance
//! score after the softmax, so removed mass is not redistributed.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{Graph, ParamGroup, ParamId, ParamStore, Scalar, Var};
use crate::rescoring::EntityEmbeddingTable;
use crate::retrieval::{EdgeLabel, NodeRole, Subgraph};

#[derive(Debug, Error)]
pub enum GnnError {
    #[error("embedding table has {have} rows, node references entity {want}")]
    MissingEmbedding { want: usize, have: usize },
    #[error("edge scores cover {scores} edges but the subgraph has {edges}")]
    ScoreCountMismatch { scores: usize, edges: usize },
    #[error("cannot extract {m} layers from a {l}-layer encoder")]
    BadExtractionDepth { m: usize, l: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct GatConfig {
    /// Entity embedding width De.
    pub embed_dim: usize,
    /// Hidden width D.
    pub dim: usize,
    /// Node-type embedding width.
    pub type_dim: usize,
    /// Relation embedding width.
    pub rel_dim: usize,
    /// Message-passing depth L.
    pub layers: usize,
    pub dropout: f64,
    /// Divide scaled attention by its per-node sum again (ablation flag).
    pub renormalize: bool,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            embed_dim: 64,
            dim: 64,
            type_dim: 16,
            rel_dim: 16,
            layers: 5,
            dropout: 0.2,
            renormalize: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GatLayerParams {
    pub f_q: ParamId,
    pub f_k: ParamId,
    pub f_msg: ParamId,
    pub f_m1: ParamId,
    pub f_m2: ParamId,
}

/// All trainable graph-encoder tensors. The relation table holds two extra
/// rows beyond the real relations: the global link and the self loop.
#[derive(Debug, Clone)]
pub struct GatParams {
    pub cfg: GatConfig,
    pub relation_count: usize,
    pub input_proj: ParamId,
    pub node_type_emb: ParamId,
    pub relation_emb: ParamId,
    pub layers: Vec<GatLayerParams>,
}

const NODE_TYPES: usize = 4;

fn role_index(role: NodeRole) -> usize {
    match role {
        NodeRole::Question => 0,
        NodeRole::Answer => 1,
        NodeRole::Other => 2,
        NodeRole::Global => 3,
    }
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn xavier<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| T::from_f64(sample_normal(rng) * std))
}

impl GatParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: GatConfig,
        relation_count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.dim;
        let emb_std = 0.1;
        let input_proj = store.add(
            "gnn.input_proj",
            xavier(cfg.embed_dim, d, rng),
            true,
            ParamGroup::Graph,
        );
        let node_type_emb = store.add(
            "gnn.node_type_emb",
            Array2::from_shape_fn((NODE_TYPES, cfg.type_dim), |_| {
                T::from_f64(sample_normal(rng) * emb_std)
            }),
            true,
            ParamGroup::Graph,
        );
        let relation_emb = store.add(
            "gnn.relation_emb",
            Array2::from_shape_fn((relation_count + 2, cfg.rel_dim), |_| {
                T::from_f64(sample_normal(rng) * emb_std)
            }),
            true,
            ParamGroup::Graph,
        );
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(GatLayerParams {
                f_q: store.add(
                    format!("gnn.l{l}.f_q"),
                    xavier(d + cfg.type_dim, d, rng),
                    true,
                    ParamGroup::Graph,
                ),
                f_k: store.add(
                    format!("gnn.l{l}.f_k"),
                    xavier(d + cfg.type_dim + cfg.rel_dim, d, rng),
                    true,
                    ParamGroup::Graph,
                ),
                f_msg: store.add(
                    format!("gnn.l{l}.f_msg"),
                    xavier(d + cfg.type_dim + cfg.rel_dim, d, rng),
                    true,
                    ParamGroup::Graph,
                ),
                f_m1: store.add(
                    format!("gnn.l{l}.f_m1"),
                    xavier(d, d, rng),
                    true,
                    ParamGroup::Graph,
                ),
                f_m2: store.add(
                    format!("gnn.l{l}.f_m2"),
                    xavier(d, d, rng),
                    true,
                    ParamGroup::Graph,
                ),
            });
        }
        GatParams {
            cfg,
            relation_count,
            input_proj,
            node_type_emb,
            relation_emb,
            layers,
        }
    }

    pub fn rel_row(&self, label: EdgeLabel) -> usize {
        match label {
            EdgeLabel::Kg(r) => r as usize,
            EdgeLabel::GlobalLink => self.relation_count,
        }
    }

    pub fn self_rel_row(&self) -> usize {
        self.relation_count + 1
    }
}

/// Initial node states: projected entity embeddings, exact zeros for the
/// global node.
pub fn init_node_states<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &GatParams,
    sub: &Subgraph,
    table: &EntityEmbeddingTable<T>,
) -> Result<Var, GnnError> {
    let mut ids = Vec::with_capacity(sub.nodes.len());
    let mut mask = Array2::ones((sub.nodes.len(), 1));
    for (i, node) in sub.nodes.iter().enumerate() {
        match node.entity {
            Some(e) => {
                if e as usize >= table.entity_count() {
                    return Err(GnnError::MissingEmbedding {
                        want: e as usize,
                        have: table.entity_count(),
                    });
                }
                ids.push(e as usize);
            }
            None => {
                ids.push(0);
                mask[[i, 0]] = T::zero();
            }
        }
    }
    let table_var = g.constant_shared(table.matrix());
    let emb = g.gather_rows(table_var, &ids);
    let mask_var = g.constant(mask);
    let masked = g.scale_rows(emb, mask_var);
    let proj = g.param(store, params.input_proj);
    Ok(g.matmul(masked, proj))
}

pub struct LayerOut {
    pub h: Var,
    /// Final attention weights, one row per edge (stored edges first, then
    /// the per-node self-loops).
    pub alpha: Var,
    /// Pre-residual transform `f_m(sum alpha * m)`.
    pub update: Var,
}

/// One message-passing layer. `eta_full` holds one score per subgraph edge
/// (structural entries already pinned to 1); the implicit self-loops get
/// score 1.
pub fn gat_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &GatParams,
    layer: usize,
    sub: &Subgraph,
    h: Var,
    eta_full: Var,
    rng: &mut ChaCha8Rng,
) -> Result<LayerOut, GnnError> {
    let n = sub.nodes.len();
    let e_real = sub.edges.len();
    if g.value(eta_full).nrows() != e_real {
        return Err(GnnError::ScoreCountMismatch {
            scores: g.value(eta_full).nrows(),
            edges: e_real,
        });
    }
    let lp = &params.layers[layer];
    let d_sqrt_inv = T::from_f64(1.0 / (params.cfg.dim as f64).sqrt());

    // Edge arrays: stored edges first, then one self-loop per node.
    let mut src = Vec::with_capacity(e_real + n);
    let mut dst = Vec::with_capacity(e_real + n);
    let mut rel = Vec::with_capacity(e_real + n);
    for e in &sub.edges {
        src.push(e.src);
        dst.push(e.dst);
        rel.push(params.rel_row(e.label));
    }
    for v in 0..n {
        src.push(v);
        dst.push(v);
        rel.push(params.self_rel_row());
    }
    let types: Vec<usize> = sub.nodes.iter().map(|nd| role_index(nd.role)).collect();
    let src_types: Vec<usize> = src.iter().map(|&s| types[s]).collect();
    let dst_types: Vec<usize> = dst.iter().map(|&t| types[t]).collect();

    let type_emb = g.param(store, params.node_type_emb);
    let rel_emb = g.param(store, params.relation_emb);
    let u_src = g.gather_rows(type_emb, &src_types);
    let u_dst = g.gather_rows(type_emb, &dst_types);
    let r_edge = g.gather_rows(rel_emb, &rel);

    let h_src = g.gather_rows(h, &src);
    let h_dst = g.gather_rows(h, &dst);

    let wq = g.param(store, lp.f_q);
    let wk = g.param(store, lp.f_k);
    let wmsg = g.param(store, lp.f_msg);

    let q_in = g.concat_cols(&[h_src, u_src]);
    let q = g.matmul(q_in, wq);
    let k_in = g.concat_cols(&[h_dst, u_dst, r_edge]);
    let k = g.matmul(k_in, wk);
    let qk = g.mul(q, k);
    let gamma_raw = g.sum_axis1(qk);
    let gamma = g.mul_scalar(gamma_raw, d_sqrt_inv);

    // Per-destination max subtraction for a stable softmax; constant on the
    // tape, which changes neither the value nor the gradient.
    let gmax_per_edge = {
        let gv = g.value(gamma);
        let mut m = vec![T::neg_infinity(); n];
        for (i, &t) in dst.iter().enumerate() {
            if gv[[i, 0]] > m[t] {
                m[t] = gv[[i, 0]];
            }
        }
        let col = Array2::from_shape_fn((dst.len(), 1), |(i, _)| m[dst[i]]);
        g.constant(col)
    };
    let centered = g.sub(gamma, gmax_per_edge);
    let ex = g.exp(centered);
    let den = g.scatter_add_rows(ex, &dst, n);
    let den_e = g.gather_rows(den, &dst);
    let base = g.div(ex, den_e);

    let self_ones = g.constant(Array2::ones((n, 1)));
    let eta_ext = g.concat_rows(&[eta_full, self_ones]);
    let mut alpha = g.mul(eta_ext, base);
    if params.cfg.renormalize {
        let den2 = g.scatter_add_rows(alpha, &dst, n);
        let den2_e = g.gather_rows(den2, &dst);
        alpha = g.div(alpha, den2_e);
    }

    let msg_in = g.concat_cols(&[h_src, u_src, r_edge]);
    let msg = g.matmul(msg_in, wmsg);
    let weighted = g.scale_rows(msg, alpha);
    let agg = g.scatter_add_rows(weighted, &dst, n);

    let w1 = g.param(store, lp.f_m1);
    let w2 = g.param(store, lp.f_m2);
    let hidden = g.matmul(agg, w1);
    let act = g.gelu(hidden);
    let act = g.dropout(act, params.cfg.dropout, rng);
    let update = g.matmul(act, w2);
    let h_next = g.add(update, h);
    Ok(LayerOut {
        h: h_next,
        alpha,
        update,
    })
}

/// Output of the full encoder: per-layer node states and the extracted
/// per-layer graph vectors for the last `extract` layers.
pub struct GraphEncoding {
    /// `H^0 .. H^L`, each `n x D`.
    pub layer_states: Vec<Var>,
    /// One `1 x D` vector per extracted layer, shallowest first.
    pub graph_vectors: Vec<Var>,
}

/// Runs `L` layers and extracts the graph vector of the last `extract`
/// layers: the global node's row, or the mean over all nodes when
/// `mean_pool` is set (the global-node ablation).
#[allow(clippy::too_many_arguments)]
pub fn encode_graph<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &GatParams,
    sub: &Subgraph,
    table: &EntityEmbeddingTable<T>,
    eta_full: Var,
    extract: usize,
    mean_pool: bool,
    rng: &mut ChaCha8Rng,
) -> Result<GraphEncoding, GnnError> {
    let l = params.cfg.layers;
    if extract < 1 || extract > l {
        return Err(GnnError::BadExtractionDepth { m: extract, l });
    }
    let mut states = Vec::with_capacity(l + 1);
    let mut h = init_node_states(g, store, params, sub, table)?;
    states.push(h);
    for layer in 0..l {
        let out = gat_layer(g, store, params, layer, sub, h, eta_full, rng)?;
        h = out.h;
        states.push(h);
    }
    let mut graph_vectors = Vec::with_capacity(extract);
    for layer in (l - extract + 1)..=l {
        let state = states[layer];
        let vector = if mean_pool || sub.global_node.is_none() {
            g.mean_axis0(state)
        } else {
            let gi = sub.global_node.unwrap();
            g.slice_rows(state, gi, gi + 1)
        };
        graph_vectors.push(vector);
    }
    Ok(GraphEncoding {
        layer_states: states,
        graph_vectors,
    })
}

/// Plain forward-only reference of the same architecture with no edge
/// scaling, written with direct loops. Used as the oracle for the
/// `eta == 1` equivalence checks; keep it independent of the tape.
pub mod reference {
    use super::*;

    fn gelu(x: f64) -> f64 {
        let c = 0.797_884_560_802_865_4_f64;
        let u = c * (x + 0.044715 * x * x * x);
        0.5 * x * (1.0 + u.tanh())
    }

    /// Returns `H^0 .. H^L` in 64-bit, dropout off, eta identically 1.
    pub fn unscaled_forward(
        store: &ParamStore<f64>,
        params: &GatParams,
        sub: &Subgraph,
        table: &EntityEmbeddingTable<f64>,
    ) -> Vec<Array2<f64>> {
        let n = sub.nodes.len();
        let d = params.cfg.dim;
        let table_m = table.matrix();
        let proj = store.value(params.input_proj);

        let mut h = Array2::<f64>::zeros((n, d));
        for (i, node) in sub.nodes.iter().enumerate() {
            if let Some(e) = node.entity {
                for col in 0..d {
                    let mut acc = 0.0;
                    for k in 0..params.cfg.embed_dim {
                        acc += table_m[[e as usize, k]] * proj[[k, col]];
                    }
                    h[[i, col]] = acc;
                }
            }
        }

        let mut edges: Vec<(usize, usize, usize)> = sub
            .edges
            .iter()
            .map(|e| (e.src, e.dst, params.rel_row(e.label)))
            .collect();
        for v in 0..n {
            edges.push((v, v, params.self_rel_row()));
        }
        let u_table = store.value(params.node_type_emb);
        let r_table = store.value(params.relation_emb);
        let types: Vec<usize> = sub.nodes.iter().map(|nd| role_index(nd.role)).collect();

        let mut states = vec![h.clone()];
        for lp in &params.layers {
            let wq = store.value(lp.f_q);
            let wk = store.value(lp.f_k);
            let wmsg = store.value(lp.f_msg);
            let w1 = store.value(lp.f_m1);
            let w2 = store.value(lp.f_m2);

            let mut gamma = vec![0.0; edges.len()];
            let mut msgs = vec![vec![0.0; d]; edges.len()];
            for (idx, &(s, t, r)) in edges.iter().enumerate() {
                let q_in: Vec<f64> = (0..d)
                    .map(|j| h[[s, j]])
                    .chain((0..params.cfg.type_dim).map(|j| u_table[[types[s], j]]))
                    .collect();
                let k_in: Vec<f64> = (0..d)
                    .map(|j| h[[t, j]])
                    .chain((0..params.cfg.type_dim).map(|j| u_table[[types[t], j]]))
                    .chain((0..params.cfg.rel_dim).map(|j| r_table[[r, j]]))
                    .collect();
                let m_in: Vec<f64> = (0..d)
                    .map(|j| h[[s, j]])
                    .chain((0..params.cfg.type_dim).map(|j| u_table[[types[s], j]]))
                    .chain((0..params.cfg.rel_dim).map(|j| r_table[[r, j]]))
                    .collect();
                let mut dot = 0.0;
                for col in 0..d {
                    let mut qv = 0.0;
                    for (row, &x) in q_in.iter().enumerate() {
                        qv += x * wq[[row, col]];
                    }
                    let mut kv = 0.0;
                    for (row, &x) in k_in.iter().enumerate() {
                        kv += x * wk[[row, col]];
                    }
                    dot += qv * kv;
                    let mut mv = 0.0;
                    for (row, &x) in m_in.iter().enumerate() {
                        mv += x * wmsg[[row, col]];
                    }
                    msgs[idx][col] = mv;
                }
                gamma[idx] = dot / (d as f64).sqrt();
            }

            // Softmax over incoming edges per destination (self included).
            let mut agg = Array2::<f64>::zeros((n, d));
            for t in 0..n {
                let incoming: Vec<usize> = edges
                    .iter()
                    .enumerate()
                    .filter(|(_, &(_, dst, _))| dst == t)
                    .map(|(i, _)| i)
                    .collect();
                let m = incoming
                    .iter()
                    .map(|&i| gamma[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = incoming.iter().map(|&i| (gamma[i] - m).exp()).sum();
                for &i in &incoming {
                    let alpha = (gamma[i] - m).exp() / denom;
                    for col in 0..d {
                        agg[[t, col]] += alpha * msgs[i][col];
                    }
                }
            }

            let mut next = h.clone();
            for t in 0..n {
                let mut hidden = vec![0.0; d];
                for col in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += agg[[t, k]] * w1[[k, col]];
                    }
                    hidden[col] = gelu(acc);
                }
                for col in 0..d {
                    let mut acc = 0.0;
                    for k in 0..d {
                        acc += hidden[k] * w2[[k, col]];
                    }
                    next[[t, col]] += acc;
                }
            }
            h = next;
            states.push(h.clone());
        }
        states
    }
}
