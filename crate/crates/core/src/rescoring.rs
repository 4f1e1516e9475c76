//! Question-conditioned relevance scores for subgraph edges: a bilinear
//! scorer over frozen entity embeddings, normalized either as a soft
//! relevance probability or as a hard straight-through 0/1 gate.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::diffcore::{Graph, ParamGroup, ParamId, ParamStore, Scalar, Var};
use crate::kgstore::KnowledgeGraph;
use crate::retrieval::{EdgeLabel, Subgraph, TopicEntities};

#[derive(Debug, Error)]
pub enum RescoringError {
    #[error("question has no linked entities to encode")]
    EmptyQuestion,
    #[error("embedding dimension mismatch: table is {table}, scorer expects {expected}")]
    DimMismatch { table: usize, expected: usize },
    #[error("temperature must be positive (got {0})")]
    BadTemperature(f64),
    #[error("embedding file line {line}: {reason}")]
    BadEmbeddingLine { line: usize, reason: String },
    #[error("embedding file misses entity '{0}'")]
    MissingEntity(String),
    #[error("edge {0} references the global node and cannot be scored")]
    UnscorableEdge(usize),
}

/// Frozen per-entity vectors standing in for a fixed pretrained encoder.
/// Never registered as a trainable parameter.
#[derive(Debug, Clone)]
pub struct EntityEmbeddingTable<T: Scalar> {
    data: Rc<Array2<T>>,
}

impl<T: Scalar> EntityEmbeddingTable<T> {
    /// Seeded standard-normal initialization.
    pub fn gaussian(entities: usize, dim: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((entities, dim), |_| T::from_f64(sample_normal(&mut rng)));
        EntityEmbeddingTable { data: Rc::new(data) }
    }

    /// Parse the "surface<TAB>v1 v2 ... vD" format; every graph entity must
    /// be covered exactly once.
    pub fn from_text(text: &str, graph: &KnowledgeGraph) -> Result<Self, RescoringError> {
        let n = graph.entity_count();
        let mut rows: Vec<Option<Vec<T>>> = vec![None; n];
        let mut dim: Option<usize> = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (surface, rest) = line.split_once('\t').ok_or_else(|| {
                RescoringError::BadEmbeddingLine {
                    line: i + 1,
                    reason: "expected tab-separated surface and vector".into(),
                }
            })?;
            let id = graph
                .entity_lookup(surface)
                .ok_or_else(|| RescoringError::BadEmbeddingLine {
                    line: i + 1,
                    reason: format!("unknown entity '{surface}'"),
                })?;
            let vec: Result<Vec<T>, _> = rest
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map(T::from_f64)
                        .map_err(|e| RescoringError::BadEmbeddingLine {
                            line: i + 1,
                            reason: e.to_string(),
                        })
                })
                .collect();
            let vec = vec?;
            match dim {
                None => dim = Some(vec.len()),
                Some(d) if d != vec.len() => {
                    return Err(RescoringError::BadEmbeddingLine {
                        line: i + 1,
                        reason: format!("vector length {} != {}", vec.len(), d),
                    })
                }
                _ => {}
            }
            rows[id as usize] = Some(vec);
        }
        let dim = dim.unwrap_or(0);
        let mut data = Array2::zeros((n, dim));
        for (id, row) in rows.into_iter().enumerate() {
            let row = row.ok_or_else(|| {
                RescoringError::MissingEntity(graph.entity_surface(id as u32).to_string())
            })?;
            for (j, v) in row.into_iter().enumerate() {
                data[[id, j]] = v;
            }
        }
        Ok(EntityEmbeddingTable { data: Rc::new(data) })
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn entity_count(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> Rc<Array2<T>> {
        Rc::clone(&self.data)
    }
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call for reproducible streams.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Independent Gumbel(0,1) noise of the given shape.
pub fn sample_gumbel<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| {
        let u: f64 = rng.gen_range(1e-12..1.0);
        T::from_f64(-(-u.ln()).ln())
    })
}

/// Mean of the question entities' embedding rows.
pub fn encode_question<T: Scalar>(
    topics: &TopicEntities,
    table: &EntityEmbeddingTable<T>,
) -> Result<Array2<T>, RescoringError> {
    if topics.question_entities.is_empty() {
        return Err(RescoringError::EmptyQuestion);
    }
    let mut sum = Array2::zeros((1, table.dim()));
    for &e in &topics.question_entities {
        let row = table.data.row(e as usize);
        let mut target = sum.row_mut(0);
        target += &row;
    }
    let scale = T::from_f64(1.0 / topics.question_entities.len() as f64);
    sum.mapv_inplace(|v| v * scale);
    Ok(sum)
}

/// Trainable scorer: two bilinear channels (relevant, irrelevant) plus a
/// `1 x 2` bias.
#[derive(Debug, Clone)]
pub struct ScorerParams {
    pub b_rel: ParamId,
    pub b_irrel: ParamId,
    pub bias: ParamId,
    pub embed_dim: usize,
}

impl ScorerParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        embed_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 1.0 / (2.0 * embed_dim as f64).sqrt();
        let gaussian = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((rows, cols), |_| T::from_f64(sample_normal(rng) * std))
        };
        let b_rel = store.add(
            "scorer.b_rel",
            gaussian(2 * embed_dim, embed_dim, rng),
            true,
            ParamGroup::Graph,
        );
        let b_irrel = store.add(
            "scorer.b_irrel",
            gaussian(2 * embed_dim, embed_dim, rng),
            true,
            ParamGroup::Graph,
        );
        let bias = store.add(
            "scorer.bias",
            Array2::zeros((1, 2)),
            true,
            ParamGroup::Graph,
        );
        ScorerParams {
            b_rel,
            b_irrel,
            bias,
            embed_dim,
        }
    }
}

/// Edge indexes of a subgraph that carry learned scores (everything except
/// the structural global links).
pub fn scorable_edges(sub: &Subgraph) -> Vec<usize> {
    sub.edges
        .iter()
        .enumerate()
        .filter(|(_, e)| matches!(e.label, EdgeLabel::Kg(_)))
        .map(|(i, _)| i)
        .collect()
}

/// Bilinear logits for every scorable edge: row `i` holds
/// `([e_s; e_o]^T B_c e_q + b_c)` for channels (relevant, irrelevant).
/// The relation id is deliberately not an input. Returns `None` when the
/// subgraph has no scorable edges.
pub fn score_edges<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &ScorerParams,
    sub: &Subgraph,
    table: &EntityEmbeddingTable<T>,
    e_q: &Array2<T>,
) -> Result<Option<(Var, Vec<usize>)>, RescoringError> {
    if table.dim() != params.embed_dim {
        return Err(RescoringError::DimMismatch {
            table: table.dim(),
            expected: params.embed_dim,
        });
    }
    if e_q.dim() != (1, params.embed_dim) {
        return Err(RescoringError::DimMismatch {
            table: e_q.len(),
            expected: params.embed_dim,
        });
    }
    let scored = scorable_edges(sub);
    if scored.is_empty() {
        return Ok(None);
    }
    let mut src_ids = Vec::with_capacity(scored.len());
    let mut dst_ids = Vec::with_capacity(scored.len());
    for &i in &scored {
        let e = &sub.edges[i];
        let s = sub.nodes[e.src].entity.ok_or(RescoringError::UnscorableEdge(i))?;
        let o = sub.nodes[e.dst].entity.ok_or(RescoringError::UnscorableEdge(i))?;
        src_ids.push(s as usize);
        dst_ids.push(o as usize);
    }

    let table_var = g.constant_shared(table.matrix());
    let es = g.gather_rows(table_var, &src_ids);
    let eo = g.gather_rows(table_var, &dst_ids);
    let pairs = g.concat_cols(&[es, eo]); // E x 2De

    let eq_col = g.constant(e_q.t().to_owned()); // De x 1
    let b_rel = g.param(store, params.b_rel);
    let b_irrel = g.param(store, params.b_irrel);
    let w_rel = g.matmul(b_rel, eq_col); // 2De x 1
    let w_irrel = g.matmul(b_irrel, eq_col);
    let z_rel = g.matmul(pairs, w_rel); // E x 1
    let z_irrel = g.matmul(pairs, w_irrel);
    let z = g.concat_cols(&[z_rel, z_irrel]); // E x 2

    let bias = g.param(store, params.bias);
    let ones = g.constant(Array2::ones((scored.len(), 1)));
    let bias_rows = g.matmul(ones, bias); // E x 2
    let z = g.add(z, bias_rows);
    Ok(Some((z, scored)))
}

/// Gumbel-softmax relevance: `eta = softmax((z + g)/tau)[:, relevant]`.
pub fn normalize_soft<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    tau: f64,
    noise: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var, RescoringError> {
    if !(tau > 0.0) {
        return Err(RescoringError::BadTemperature(tau));
    }
    let zz = if noise {
        let dim = g.value(z).dim();
        let gum = g.constant(sample_gumbel(rng, dim.0, dim.1));
        g.add(z, gum)
    } else {
        z
    };
    let scaled = g.mul_scalar(zz, T::from_f64(1.0 / tau));
    let sm = g.softmax(scaled, 1);
    Ok(g.slice_cols(sm, 0, 1))
}

/// Gumbel-max relevance with a straight-through gradient: the forward value
/// is exactly `one_hot(argmax(z + g))[relevant]`, the backward pass follows
/// the soft score at `tau = 1`. Argmax ties keep the edge (relevant wins).
pub fn normalize_hard<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    noise: bool,
    rng: &mut ChaCha8Rng,
) -> Var {
    let zz = if noise {
        let dim = g.value(z).dim();
        let gum = g.constant(sample_gumbel(rng, dim.0, dim.1));
        g.add(z, gum)
    } else {
        z
    };
    let hard = {
        let v = g.value(zz);
        let mut h = Array2::zeros(v.raw_dim());
        for (i, row) in v.axis_iter(Axis(0)).enumerate() {
            if row[0] >= row[1] {
                h[[i, 0]] = T::one();
            } else {
                h[[i, 1]] = T::one();
            }
        }
        h
    };
    let soft = g.softmax(zz, 1);
    let st = g.straight_through(soft, hard);
    g.slice_cols(st, 0, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Soft,
    Hard,
}

/// Forward-value view of per-edge scores, aligned with `sub.edges`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeScores {
    pub mode: ScoreMode,
    pub eta: Vec<f64>,
}

/// Assemble per-edge forward values: learned scores at their positions,
/// structural global links pinned to 1.
pub fn collect_edge_scores<T: Scalar>(
    g: &Graph<T>,
    sub: &Subgraph,
    scored: &[usize],
    eta: Var,
    mode: ScoreMode,
) -> EdgeScores {
    let values = g.value(eta);
    let mut out = vec![1.0; sub.edges.len()];
    for (row, &edge_idx) in scored.iter().enumerate() {
        out[edge_idx] = values[[row, 0]].to_f64();
    }
    let mut scores = EdgeScores { mode, eta: out };
    pin_structural_scores(sub, &mut scores);
    scores
}

/// Force structural entries to 1: global-link edges here, the implicit
/// self-loops inside the graph encoder.
pub fn pin_structural_scores(sub: &Subgraph, scores: &mut EdgeScores) {
    for (i, e) in sub.edges.iter().enumerate() {
        if matches!(e.label, EdgeLabel::GlobalLink) {
            scores.eta[i] = 1.0;
        }
    }
}

/// Builds the full per-edge score vector (length = all edges) on the tape:
/// learned entries scattered into place, structural entries fixed at 1.
pub fn full_eta_var<T: Scalar>(
    g: &mut Graph<T>,
    sub: &Subgraph,
    scored: &[usize],
    eta: Var,
) -> Var {
    let total = sub.edges.len();
    let scattered = g.scatter_add_rows(eta, scored, total);
    let mut structural = Array2::zeros((total, 1));
    for (i, e) in sub.edges.iter().enumerate() {
        if matches!(e.label, EdgeLabel::GlobalLink) {
            structural[[i, 0]] = T::one();
        }
    }
    let pin = g.constant(structural);
    g.add(scattered, pin)
}

/// Per-edge score export row (surfaces, not ids).
#[derive(Debug, Clone, Serialize)]
pub struct EdgeScoreExport {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub eta: f64,
    pub distractor: bool,
}
