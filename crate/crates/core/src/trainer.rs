//! End-to-end training: per-candidate scoring, cross entropy over the
//! candidate set, a rectified-Adam optimizer with two learning-rate groups,
//! ablation flags, and versioned checkpoints.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Graph, ParamGroup, ParamStore, Scalar, Var};
use crate::gnn::{encode_graph, GatConfig, GatParams, GnnError};
use crate::kgstore::KnowledgeGraph;
use crate::knowformer::{
    forward, soft_prompt_forward, KnowformerError, TransformerConfig, TransformerParams,
    RESERVED_TOKENS, SEP_TOKEN, UNK_TOKEN,
};
use crate::rescoring::{
    collect_edge_scores, encode_question, full_eta_var, normalize_hard, normalize_soft,
    score_edges, EdgeScores, EntityEmbeddingTable, RescoringError, ScoreMode, ScorerParams,
};
use crate::retrieval::{
    add_global_node, extract_khop, inject_distractors, link_entities, EdgeLabel, QuestionRecord,
    RetrievalError, Subgraph, TopicEntities,
};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("question {0} has no candidates")]
    ZeroCandidates(String),
    #[error("loss diverged (not finite) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("checkpoint format/version mismatch: {0}")]
    BadCheckpoint(String),
    #[error("vocabulary mismatch: checkpoint has {checkpoint}, dataset needs {expected}")]
    VocabMismatch { checkpoint: usize, expected: usize },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Rescoring(#[from] RescoringError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Knowformer(#[from] KnowformerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreModeCfg {
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Full training configuration; also the config echo stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub tau: f64,
    pub score_mode: ScoreModeCfg,
    pub no_qkgr: bool,
    pub no_global: bool,
    pub no_pki: bool,
    pub soft_prompt: bool,
    pub joint_subgraph: bool,
    pub renormalize_alpha: bool,
    pub attention_lora: bool,
    pub slot_activation: bool,
    pub embed_dim: usize,
    pub gnn_dim: usize,
    pub type_dim: usize,
    pub rel_dim: usize,
    pub gnn_layers: usize,
    pub inject_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub std_layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub hops: usize,
    pub node_cap: usize,
    pub dropout: f64,
    pub grad_clip: f64,
    pub precision: Precision,
    pub early_stop_dev_acc: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 10,
            batch_size: 16,
            lr_backbone: 1e-4,
            lr_other: 1e-3,
            tau: 1.0,
            score_mode: ScoreModeCfg::Soft,
            no_qkgr: false,
            no_global: false,
            no_pki: false,
            soft_prompt: false,
            joint_subgraph: false,
            renormalize_alpha: false,
            attention_lora: false,
            slot_activation: true,
            embed_dim: 64,
            gnn_dim: 64,
            type_dim: 16,
            rel_dim: 16,
            gnn_layers: 5,
            inject_layers: 2,
            d_model: 64,
            d_ff: 256,
            std_layers: 3,
            heads: 1,
            max_seq: 64,
            lora_rank: 4,
            lora_alpha: 8.0,
            hops: 2,
            node_cap: 200,
            dropout: 0.2,
            grad_clip: 1.0,
            precision: Precision::F32,
            early_stop_dev_acc: 0.97,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |msg: String| Err(TrainerError::BadConfig(msg));
        if self.no_pki && self.soft_prompt {
            return bad("no_pki and soft_prompt are mutually exclusive".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.inject_layers < 1 || self.inject_layers > self.gnn_layers {
            return bad(format!(
                "inject_layers must lie in 1..={}, got {}",
                self.gnn_layers, self.inject_layers
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} must divide into {} heads",
                self.d_model, self.heads
            ));
        }
        if self.hops < 1 {
            return bad("hops must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0,1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment from a config file or flag.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), TrainerError> {
        let v = value.trim();
        let parse_err = |k: &str, v: &str| {
            TrainerError::BadConfig(format!("cannot parse '{v}' for key '{k}'"))
        };
        macro_rules! num {
            ($field:expr, $ty:ty) => {
                $field = v.parse::<$ty>().map_err(|_| parse_err(key, v))?
            };
        }
        macro_rules! flag {
            ($field:expr) => {
                $field = match v {
                    "true" | "1" | "on" => true,
                    "false" | "0" | "off" => false,
                    _ => return Err(parse_err(key, v)),
                }
            };
        }
        match key.trim() {
            "seed" => num!(self.seed, u64),
            "epochs" => num!(self.epochs, usize),
            "batch_size" => num!(self.batch_size, usize),
            "lr_backbone" => num!(self.lr_backbone, f64),
            "lr_other" => num!(self.lr_other, f64),
            "tau" => num!(self.tau, f64),
            "score_mode" => {
                self.score_mode = match v {
                    "soft" => ScoreModeCfg::Soft,
                    "hard" => ScoreModeCfg::Hard,
                    _ => return Err(parse_err(key, v)),
                }
            }
            "no_qkgr" => flag!(self.no_qkgr),
            "no_global" => flag!(self.no_global),
            "no_pki" => flag!(self.no_pki),
            "soft_prompt" => flag!(self.soft_prompt),
            "joint_subgraph" => flag!(self.joint_subgraph),
            "renormalize_alpha" => flag!(self.renormalize_alpha),
            "attention_lora" => flag!(self.attention_lora),
            "slot_activation" => flag!(self.slot_activation),
            "embed_dim" => num!(self.embed_dim, usize),
            "gnn_dim" => num!(self.gnn_dim, usize),
            "type_dim" => num!(self.type_dim, usize),
            "rel_dim" => num!(self.rel_dim, usize),
            "gnn_layers" => num!(self.gnn_layers, usize),
            "inject_layers" => num!(self.inject_layers, usize),
            "d_model" => num!(self.d_model, usize),
            "d_ff" => num!(self.d_ff, usize),
            "std_layers" => num!(self.std_layers, usize),
            "heads" => num!(self.heads, usize),
            "max_seq" => num!(self.max_seq, usize),
            "lora_rank" => num!(self.lora_rank, usize),
            "lora_alpha" => num!(self.lora_alpha, f64),
            "hops" => num!(self.hops, usize),
            "node_cap" => num!(self.node_cap, usize),
            "dropout" => num!(self.dropout, f64),
            "grad_clip" => num!(self.grad_clip, f64),
            "early_stop_dev_acc" => num!(self.early_stop_dev_acc, f64),
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(parse_err(key, v)),
                }
            }
            other => {
                return Err(TrainerError::BadConfig(format!("unknown config key '{other}'")))
            }
        }
        Ok(())
    }

    /// Parses a `key = value` config file (one assignment per line, `#`
    /// comments).
    pub fn apply_file(&mut self, text: &str) -> Result<(), TrainerError> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                TrainerError::BadConfig(format!("expected 'key = value', got '{line}'"))
            })?;
            self.apply_kv(k, v)?;
        }
        Ok(())
    }
}

/// Token vocabulary with the reserved entries at fixed positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(all: impl IntoIterator<Item = String>) -> Self {
        let reserved = ["[pad]", "[sep]", "[unk]"];
        let set: BTreeSet<String> = all
            .into_iter()
            .filter(|t| !reserved.contains(&t.as_str()))
            .collect();
        let mut tokens: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
        tokens.extend(set);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn from_dataset(records: &[QuestionRecord]) -> Self {
        let mut all = Vec::new();
        for r in records {
            all.extend(r.question_tokens());
            for i in 0..r.candidates.len() {
                all.extend(r.candidate_tokens(i));
            }
        }
        Vocab::from_tokens(all)
    }

    pub fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_TOKEN)
    }

    /// question ++ [sep] ++ candidate token ids.
    pub fn encode_pair(&self, question: &[String], candidate: &[String]) -> Vec<u32> {
        let mut ids: Vec<u32> = question.iter().map(|t| self.encode(t)).collect();
        ids.push(SEP_TOKEN);
        ids.extend(candidate.iter().map(|t| self.encode(t)));
        ids
    }
}

/// All model parameters plus the frozen embedding table and vocabulary.
pub struct ModelState<T: Scalar> {
    pub store: ParamStore<T>,
    pub scorer: ScorerParams,
    pub gat: GatParams,
    pub transformer: TransformerParams,
    pub vocab: Vocab,
    pub table: EntityEmbeddingTable<T>,
    pub config: TrainConfig,
}

impl<T: Scalar> ModelState<T> {
    /// Deterministic initialization from the config seed. The entity table
    /// comes from `embeddings` when provided, otherwise it is seeded
    /// Gaussian.
    pub fn init(
        config: &TrainConfig,
        kg: &KnowledgeGraph,
        vocab: Vocab,
        embeddings: Option<&str>,
    ) -> Result<Self, TrainerError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
        let mut store = ParamStore::new();
        let scorer = ScorerParams::init(&mut store, config.embed_dim, &mut rng);
        let gat_cfg = GatConfig {
            embed_dim: config.embed_dim,
            dim: config.gnn_dim,
            type_dim: config.type_dim,
            rel_dim: config.rel_dim,
            layers: config.gnn_layers,
            dropout: config.dropout,
            renormalize: config.renormalize_alpha,
        };
        let gat = GatParams::init(&mut store, gat_cfg, kg.relation_count(), &mut rng);
        let tf_cfg = TransformerConfig {
            vocab: vocab.len().max(RESERVED_TOKENS),
            d_model: config.d_model,
            d_ff: config.d_ff,
            std_layers: config.std_layers,
            inject_layers: config.inject_layers,
            heads: config.heads,
            max_seq: config.max_seq,
            graph_dim: config.gnn_dim,
            lora_rank: config.lora_rank,
            lora_alpha: config.lora_alpha,
            attention_lora: config.attention_lora,
            slot_activation: config.slot_activation,
        };
        let transformer = TransformerParams::init(&mut store, tf_cfg, &mut rng);
        let table = match embeddings {
            Some(text) => EntityEmbeddingTable::from_text(text, kg)?,
            None => EntityEmbeddingTable::gaussian(
                kg.entity_count(),
                config.embed_dim,
                config.seed.wrapping_add(0xe4b),
            ),
        };
        if table.dim() != config.embed_dim {
            return Err(TrainerError::BadConfig(format!(
                "embedding file dimension {} != embed_dim {}",
                table.dim(),
                config.embed_dim
            )));
        }
        Ok(ModelState {
            store,
            scorer,
            gat,
            transformer,
            vocab,
            table,
            config: config.clone(),
        })
    }
}

/// One question with its tokenized candidates and per-candidate subgraphs.
#[derive(Debug, Clone)]
pub struct PreparedQuestion {
    pub record: QuestionRecord,
    pub topics: TopicEntities,
    pub tokens: Vec<Vec<u32>>,
    pub subgraphs: Vec<Subgraph>,
}

/// Links, extracts, and tokenizes every question up front.
pub fn prepare_dataset<T: Scalar>(
    kg: &KnowledgeGraph,
    model: &ModelState<T>,
    records: &[QuestionRecord],
) -> Result<Vec<PreparedQuestion>, TrainerError> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if r.candidates.is_empty() {
            return Err(TrainerError::ZeroCandidates(r.id.clone()));
        }
        let qtokens = r.question_tokens();
        let ctokens: Vec<Vec<String>> = (0..r.candidates.len())
            .map(|i| r.candidate_tokens(i))
            .collect();
        let topics = link_entities(kg, &qtokens, &ctokens)?;
        let mut subgraphs = Vec::with_capacity(r.candidates.len());
        if cfg.joint_subgraph {
            let sub = extract_khop(kg, &topics, None, cfg.hops, cfg.node_cap)?;
            let sub = if cfg.no_global { sub } else { add_global_node(&sub)? };
            for _ in 0..r.candidates.len() {
                subgraphs.push(sub.clone());
            }
        } else {
            for i in 0..r.candidates.len() {
                let sub = extract_khop(kg, &topics, Some(i), cfg.hops, cfg.node_cap)?;
                let sub = if cfg.no_global { sub } else { add_global_node(&sub)? };
                subgraphs.push(sub);
            }
        }
        let tokens = (0..r.candidates.len())
            .map(|i| model.vocab.encode_pair(&qtokens, &ctokens[i]))
            .collect();
        out.push(PreparedQuestion {
            record: r.clone(),
            topics,
            tokens,
            subgraphs,
        });
    }
    Ok(out)
}

/// Builds the logits over candidates for one question on the given tape.
/// Returns the logit row and the per-candidate edge scores (forward values)
/// where the scorer ran.
pub fn score_question<T: Scalar>(
    g: &mut Graph<T>,
    model: &ModelState<T>,
    q: &PreparedQuestion,
    subgraphs: &[Subgraph],
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Vec<Option<EdgeScores>>), TrainerError> {
    let cfg = &model.config;
    if subgraphs.is_empty() {
        return Err(TrainerError::ZeroCandidates(q.record.id.clone()));
    }
    let noise = g.train;
    let mut logits = Vec::with_capacity(subgraphs.len());
    let mut all_scores = Vec::with_capacity(subgraphs.len());
    for (i, sub) in subgraphs.iter().enumerate() {
        let tokens = &q.tokens[i];
        if cfg.no_pki && !cfg.soft_prompt {
            let s = forward(g, &model.store, &model.transformer, tokens, None)?;
            logits.push(s);
            all_scores.push(None);
            continue;
        }
        // Per-edge relevance.
        let (eta_full, scores) = if cfg.no_qkgr {
            let ones = g.constant(Array2::ones((sub.edges.len(), 1)));
            (ones, None)
        } else {
            let e_q = encode_question(&q.topics, &model.table)?;
            match score_edges(g, &model.store, &model.scorer, sub, &model.table, &e_q)? {
                Some((z, scored)) => {
                    let eta = match cfg.score_mode {
                        ScoreModeCfg::Soft => normalize_soft(g, z, cfg.tau, noise, rng)?,
                        ScoreModeCfg::Hard => normalize_hard(g, z, noise, rng),
                    };
                    let mode = match cfg.score_mode {
                        ScoreModeCfg::Soft => ScoreMode::Soft,
                        ScoreModeCfg::Hard => ScoreMode::Hard,
                    };
                    let values = collect_edge_scores(g, sub, &scored, eta, mode);
                    let full = full_eta_var(g, sub, &scored, eta);
                    (full, Some(values))
                }
                None => {
                    // Only structural edges: all pinned to 1.
                    let ones = g.constant(Array2::ones((sub.edges.len(), 1)));
                    (ones, None)
                }
            }
        };
        let extract = if cfg.soft_prompt { 1 } else { cfg.inject_layers };
        let enc = encode_graph(
            g,
            &model.store,
            &model.gat,
            sub,
            &model.table,
            eta_full,
            extract,
            cfg.no_global,
            rng,
        )?;
        let s = if cfg.soft_prompt {
            let last = *enc.graph_vectors.last().unwrap();
            soft_prompt_forward(g, &model.store, &model.transformer, tokens, last)?
        } else {
            forward(
                g,
                &model.store,
                &model.transformer,
                tokens,
                Some(&enc.graph_vectors),
            )?
        };
        logits.push(s);
        all_scores.push(scores);
    }
    let row = g.concat_cols(&logits);
    Ok((row, all_scores))
}

/// Rectified Adam over the store's trainable parameters, with per-group
/// learning rates.
pub struct RAdam<T: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
}

impl<T: Scalar> RAdam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|e| Array2::zeros(e.value.raw_dim()))
            .collect();
        let v = store
            .entries()
            .iter()
            .map(|e| Array2::zeros(e.value.raw_dim()))
            .collect();
        RAdam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr_backbone: f64, lr_other: f64) {
        self.step += 1;
        let t = self.step as f64;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2t = b2.powf(t);
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2t;
        let rect = if rho_t > 4.0 {
            Some(
                (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };
        for (idx, e) in store.entries_mut().iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let lr = match e.group {
                ParamGroup::Backbone => lr_backbone,
                ParamGroup::Graph => lr_other,
            };
            if lr == 0.0 {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let tb1 = T::from_f64(b1);
            let tb2 = T::from_f64(b2);
            let one_m_b1 = T::from_f64(1.0 - b1);
            let one_m_b2 = T::from_f64(1.0 - b2);
            ndarray::Zip::from(&mut *m).and(&e.grad).for_each(|mv, &gv| {
                *mv = tb1 * *mv + one_m_b1 * gv;
            });
            ndarray::Zip::from(&mut *v).and(&e.grad).for_each(|vv, &gv| {
                *vv = tb2 * *vv + one_m_b2 * gv * gv;
            });
            match rect {
                Some(r) => {
                    let scale = T::from_f64(lr * r / bias1);
                    let eps = T::from_f64(self.eps);
                    let inv_bias2 = T::from_f64(1.0 / bias2);
                    ndarray::Zip::from(&mut e.value).and(&*m).and(&*v).for_each(
                        |val, &mv, &vv| {
                            let vhat = (vv * inv_bias2).sqrt() + eps;
                            *val = *val - scale * mv / vhat;
                        },
                    );
                }
                None => {
                    let scale = T::from_f64(lr / bias1);
                    ndarray::Zip::from(&mut e.value).and(&*m).for_each(|val, &mv| {
                        *val = *val - scale * mv;
                    });
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct EtaStats {
    pub relevant_mean: f64,
    pub distractor_mean: f64,
    pub relevant_count: usize,
    pub distractor_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss_curve: Vec<f64>,
    pub epochs: Vec<EpochStat>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_stats: Option<EtaStats>,
}

impl Metrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_accuracy,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.dev_accuracy, e.seconds
            ));
        }
        out
    }
}

/// Sidecar provenance tags of one question: the planted relevant path and
/// the planted distractor paths, as surface triples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionTags {
    pub id: String,
    pub relevant: Vec<(String, String, String)>,
    pub distractor: Vec<(String, String, String)>,
}

pub type TagMap = HashMap<String, QuestionTags>;

pub fn parse_tags(text: &str) -> Result<TagMap, serde_json::Error> {
    let mut map = TagMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let t: QuestionTags = serde_json::from_str(line)?;
        map.insert(t.id.clone(), t);
    }
    Ok(map)
}

/// Versioned checkpoint: config echo, vocabulary, RNG state, and every
/// trainable tensor (frozen tensors are reproduced from the config seed).
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub rng: ChaCha8Rng,
    pub tensors: Vec<TensorBlob>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorBlob {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

pub const CHECKPOINT_FORMAT: &str = "kgqa-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(model: &ModelState<T>, rng: &ChaCha8Rng) -> Checkpoint {
    let tensors = model
        .store
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| TensorBlob {
            name: e.name.clone(),
            rows: e.value.nrows(),
            cols: e.value.ncols(),
            data: e.value.iter().map(|&v| v.to_f64()).collect(),
        })
        .collect();
    Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        rng: rng.clone(),
        tensors,
    }
}

/// Rebuilds the model from the config seed and overlays the stored
/// trainable tensors.
pub fn load_checkpoint<T: Scalar>(
    ckpt: &Checkpoint,
    kg: &KnowledgeGraph,
    embeddings: Option<&str>,
) -> Result<ModelState<T>, TrainerError> {
    if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
        return Err(TrainerError::BadCheckpoint(format!(
            "{} v{}",
            ckpt.format, ckpt.version
        )));
    }
    let vocab = Vocab::from_list(ckpt.vocab.clone());
    let mut model = ModelState::<T>::init(&ckpt.config, kg, vocab, embeddings)?;
    let mut by_name: HashMap<&str, &TensorBlob> =
        ckpt.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for id in model.store.ids() {
        let (name, trainable, dim) = {
            let e = model.store.entry(id);
            (e.name.clone(), e.trainable, e.value.raw_dim())
        };
        if !trainable {
            continue;
        }
        let blob = by_name.remove(name.as_str()).ok_or_else(|| {
            TrainerError::BadCheckpoint(format!("missing tensor '{name}'"))
        })?;
        if (blob.rows, blob.cols) != (dim[0], dim[1]) {
            return Err(TrainerError::BadCheckpoint(format!(
                "tensor '{name}' has shape {}x{}, expected {}x{}",
                blob.rows, blob.cols, dim[0], dim[1]
            )));
        }
        let arr = Array2::from_shape_fn((blob.rows, blob.cols), |(i, j)| {
            T::from_f64(blob.data[i * blob.cols + j])
        });
        *model.store.value_mut(id) = arr;
    }
    if !by_name.is_empty() {
        let extra: Vec<&str> = by_name.keys().copied().collect();
        return Err(TrainerError::BadCheckpoint(format!(
            "unknown tensors in checkpoint: {extra:?}"
        )));
    }
    Ok(model)
}

fn stable_hash(s: &str) -> u64 {
    // FNV-1a; the std hasher is not guaranteed stable across releases.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Per-question RNG for evaluation-time noise injection, stable under
/// reordering.
pub fn question_noise_rng(seed: u64, question_id: &str, fraction_percent: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ stable_hash(question_id) ^ fraction_percent.wrapping_mul(0x9e3779b97f4a7c15),
    )
}

/// Evaluation options.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    /// Percentage of non-topic nodes replaced with distractors (0 = clean).
    pub noise_percent: f64,
    /// Seed for the noise streams.
    pub noise_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            noise_percent: 0.0,
            noise_seed: 0,
        }
    }
}

/// Accuracy (exact-tie-aware) plus edge-score statistics where tags exist.
pub fn evaluate<T: Scalar>(
    kg: &KnowledgeGraph,
    model: &ModelState<T>,
    data: &[PreparedQuestion],
    tags: Option<&TagMap>,
    opts: EvalOptions,
) -> Result<Metrics, TrainerError> {
    if data.is_empty() {
        return Err(TrainerError::EmptyEvalSet);
    }
    let mut correct = 0usize;
    let mut rel_sum = 0.0;
    let mut rel_n = 0usize;
    let mut dis_sum = 0.0;
    let mut dis_n = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    for q in data {
        let subgraphs: Vec<Subgraph> = if opts.noise_percent > 0.0 {
            let mut nrng = question_noise_rng(
                opts.noise_seed,
                &q.record.id,
                opts.noise_percent.round() as u64,
            );
            q.subgraphs
                .iter()
                .map(|s| inject_distractors(kg, s, opts.noise_percent, &mut nrng))
                .collect::<Result<_, _>>()?
        } else {
            q.subgraphs.clone()
        };
        let mut g = Graph::<T>::new(false);
        let (logits, edge_scores) = score_question(&mut g, model, q, &subgraphs, &mut rng)?;
        let row = g.value(logits);
        let gold = q.record.answer_index;
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b.to_f64()));
        let arg: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &v)| v.to_f64() == max)
            .map(|(i, _)| i)
            .collect();
        if arg == [gold] {
            correct += 1;
        }
        if let Some(tags) = tags {
            if let Some(t) = tags.get(&q.record.id) {
                let rel_set: BTreeSet<(String, String, String)> =
                    t.relevant.iter().cloned().collect();
                let dis_set: BTreeSet<(String, String, String)> =
                    t.distractor.iter().cloned().collect();
                for (sub, scores) in subgraphs.iter().zip(edge_scores.iter()) {
                    let Some(scores) = scores else { continue };
                    for (i, e) in sub.edges.iter().enumerate() {
                        if e.distractor {
                            continue; // evaluation-time noise, not a planted tag
                        }
                        let EdgeLabel::Kg(r) = e.label else { continue };
                        let (Some(h), Some(tl)) =
                            (sub.nodes[e.src].entity, sub.nodes[e.dst].entity)
                        else {
                            continue;
                        };
                        let key = (
                            kg.entity_surface(h).to_string(),
                            kg.relation_surface(r).to_string(),
                            kg.entity_surface(tl).to_string(),
                        );
                        if rel_set.contains(&key) {
                            rel_sum += scores.eta[i];
                            rel_n += 1;
                        } else if dis_set.contains(&key) {
                            dis_sum += scores.eta[i];
                            dis_n += 1;
                        }
                    }
                }
            }
        }
    }
    let eta_stats = if rel_n + dis_n > 0 {
        Some(EtaStats {
            relevant_mean: if rel_n > 0 { rel_sum / rel_n as f64 } else { 0.0 },
            distractor_mean: if dis_n > 0 { dis_sum / dis_n as f64 } else { 0.0 },
            relevant_count: rel_n,
            distractor_count: dis_n,
        })
    } else {
        None
    };
    Ok(Metrics {
        accuracy: correct as f64 / data.len() as f64,
        loss_curve: vec![],
        epochs: vec![],
        eta_stats,
    })
}

/// Trains the model in place. Prints one JSON object per epoch to stdout,
/// writes a checkpoint per epoch when `checkpoint_dir` is given, and stops
/// early once dev accuracy reaches the configured threshold.
pub fn train<T: Scalar>(
    kg: &KnowledgeGraph,
    model: &mut ModelState<T>,
    train_data: &[PreparedQuestion],
    dev_data: &[PreparedQuestion],
    checkpoint_dir: Option<&Path>,
) -> Result<(Checkpoint, Metrics), TrainerError> {
    if train_data.is_empty() {
        return Err(TrainerError::EmptyTrainSet);
    }
    let config = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = RAdam::new(&model.store);
    let mut epochs = Vec::new();
    let mut loss_curve = Vec::new();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            model.store.zero_grads();
            let inv = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &qi in batch {
                let q = &train_data[qi];
                let mut g = Graph::<T>::new(true);
                let (logits, _) = score_question(&mut g, model, q, &q.subgraphs, &mut rng)?;
                let loss = g.cross_entropy_logits(logits, q.record.answer_index);
                batch_loss += g.scalar(loss).to_f64();
                let scaled = g.mul_scalar(loss, T::from_f64(inv));
                let grads = g
                    .backward(scaled)
                    .expect("fresh tape must accept backward");
                g.flush_grads(&grads, &mut model.store);
            }
            if !batch_loss.is_finite() {
                return Err(TrainerError::Divergence {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += batch_loss;
            let norm = model.store.grad_norm();
            if config.grad_clip > 0.0 && norm > config.grad_clip {
                model
                    .store
                    .scale_grads(T::from_f64(config.grad_clip / norm));
            }
            optimizer.step(&mut model.store, config.lr_backbone, config.lr_other);
        }
        let train_loss = epoch_loss / train_data.len() as f64;
        let dev_accuracy = if dev_data.is_empty() {
            f64::NAN
        } else {
            evaluate(kg, model, dev_data, None, EvalOptions::default())?.accuracy
        };
        let seconds = started.elapsed().as_secs_f64();
        let stat = EpochStat {
            epoch,
            train_loss,
            dev_accuracy,
            seconds,
        };
        println!(
            "{}",
            serde_json::json!({
                "epoch": epoch,
                "train_loss": train_loss,
                "dev_accuracy": if dev_accuracy.is_nan() { None } else { Some(dev_accuracy) },
                "seconds": seconds,
            })
        );
        loss_curve.push(train_loss);
        epochs.push(stat);
        if let Some(dir) = checkpoint_dir {
            let ckpt = save_checkpoint(model, &rng);
            let path = dir.join(format!("checkpoint-epoch{epoch}.json"));
            write_json(&path, &ckpt)?;
        }
        if !dev_accuracy.is_nan() && dev_accuracy >= config.early_stop_dev_acc {
            break;
        }
    }
    let final_accuracy = epochs.last().map(|e| e.dev_accuracy).unwrap_or(f64::NAN);
    let metrics = Metrics {
        accuracy: final_accuracy,
        loss_curve,
        epochs,
        eta_stats: None,
    };
    let ckpt = save_checkpoint(model, &rng);
    if let Some(dir) = checkpoint_dir {
        write_json(&dir.join("checkpoint.json"), &ckpt)?;
    }
    Ok((ckpt, metrics))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), TrainerError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Fisher-Yates with the training RNG.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgstore::load_triples_str;
    use crate::retrieval::QuestionText;

    /// Tiny star-shaped KG: q0..q3 each link to a0..a3 via r0/r1.
    fn tiny_kg() -> KnowledgeGraph {
        let mut lines = Vec::new();
        for q in 0..4 {
            for a in 0..4 {
                let r = (q + a) % 2;
                lines.push(format!("q{q}\tr{r}\ta{a}"));
            }
        }
        load_triples_str(&lines.join("\n")).unwrap().0
    }

    fn tiny_records(n: usize, candidates: usize, seed: u64) -> Vec<QuestionRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let q = rng.gen_range(0..4u32);
                let mut cands: Vec<usize> = (0..4).collect();
                shuffle_usize(&mut cands, &mut rng);
                let cands: Vec<String> =
                    cands[..candidates].iter().map(|c| format!("a{c}")).collect();
                let answer_index = rng.gen_range(0..candidates);
                QuestionRecord {
                    id: format!("t{i}"),
                    question: QuestionText::Tokens(vec![
                        "find".into(),
                        format!("r{}", i % 2),
                        "from".into(),
                        format!("q{q}"),
                    ]),
                    candidates: cands,
                    answer_index,
                }
            })
            .collect()
    }

    fn shuffle_usize(order: &mut [usize], rng: &mut ChaCha8Rng) {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            embed_dim: 8,
            gnn_dim: 8,
            type_dim: 4,
            rel_dim: 4,
            gnn_layers: 2,
            inject_layers: 1,
            d_model: 8,
            d_ff: 16,
            std_layers: 1,
            max_seq: 16,
            lora_rank: 2,
            lora_alpha: 4.0,
            dropout: 0.1,
            precision: Precision::F64,
            early_stop_dev_acc: 2.0, // never triggers
            ..TrainConfig::default()
        }
    }

    fn build_model(config: &TrainConfig, kg: &KnowledgeGraph, records: &[QuestionRecord]) -> ModelState<f64> {
        let vocab = Vocab::from_dataset(records);
        ModelState::init(config, kg, vocab, None).unwrap()
    }

    #[test]
    fn config_validation_catches_conflicts() {
        let mut c = TrainConfig::default();
        c.no_pki = true;
        c.soft_prompt = true;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.inject_layers = 9;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.tau = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let mut c = TrainConfig::default();
        c.apply_file("# comment\nseed = 7\nscore_mode = hard\nno_qkgr = true\nlr_other=0.01\n")
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.score_mode, ScoreModeCfg::Hard);
        assert!(c.no_qkgr);
        assert_eq!(c.lr_other, 0.01);
        assert!(c.apply_kv("bogus", "1").is_err());
        assert!(c.apply_kv("seed", "abc").is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_bit_identical() {
        let kg = tiny_kg();
        let records = tiny_records(8, 4, 0);
        let mut config = tiny_config();
        config.lr_backbone = 0.0;
        config.lr_other = 0.0;
        config.epochs = 1;
        let mut model = build_model(&config, &kg, &records);
        let before: Vec<Vec<u64>> = model
            .store
            .entries()
            .iter()
            .map(|e| e.value.iter().map(|v| v.to_bits()).collect())
            .collect();
        let prepared = prepare_dataset(&kg, &model, &records).unwrap();
        train(&kg, &mut model, &prepared, &[], None).unwrap();
        let after: Vec<Vec<u64>> = model
            .store
            .entries()
            .iter()
            .map(|e| e.value.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let kg = tiny_kg();
        let records = tiny_records(12, 4, 1);
        let run = || {
            let config = tiny_config();
            let mut model = build_model(&config, &kg, &records);
            let prepared = prepare_dataset(&kg, &model, &records).unwrap();
            let (_, metrics) = train(&kg, &mut model, &prepared, &[], None).unwrap();
            metrics.loss_curve
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn single_example_memorization_drives_loss_down() {
        let kg = tiny_kg();
        let records = tiny_records(1, 4, 2);
        let mut config = tiny_config();
        config.epochs = 500;
        config.batch_size = 1;
        config.lr_backbone = 2e-2;
        config.lr_other = 2e-2;
        config.dropout = 0.0;
        let mut model = build_model(&config, &kg, &records);
        let prepared = prepare_dataset(&kg, &model, &records).unwrap();
        let (_, metrics) = train(&kg, &mut model, &prepared, &[], None).unwrap();
        let last = *metrics.loss_curve.last().unwrap();
        assert!(last < 0.01, "memorization failed: final loss {last}");
        // Evaluating the training split after memorization is perfect.
        let eval = evaluate(&kg, &model, &prepared, None, EvalOptions::default()).unwrap();
        assert_eq!(eval.accuracy, 1.0);
    }

    #[test]
    fn untrained_model_sits_at_chance_level() {
        let kg = tiny_kg();
        let records = tiny_records(240, 4, 3);
        let config = tiny_config();
        let model = build_model(&config, &kg, &records);
        let prepared = prepare_dataset(&kg, &model, &records).unwrap();
        let metrics = evaluate(&kg, &model, &prepared, None, EvalOptions::default()).unwrap();
        assert!(
            (metrics.accuracy - 0.25).abs() <= 0.10,
            "untrained accuracy {} not near chance",
            metrics.accuracy
        );
    }

    #[test]
    fn empty_eval_set_is_an_error() {
        let kg = tiny_kg();
        let config = tiny_config();
        let model = build_model(&config, &kg, &tiny_records(2, 4, 4));
        assert!(matches!(
            evaluate(&kg, &model, &[], None, EvalOptions::default()),
            Err(TrainerError::EmptyEvalSet)
        ));
    }

    #[test]
    fn exact_ties_count_as_wrong() {
        let kg = tiny_kg();
        // Two identical candidates: identical tokens and graphs mean equal
        // logits, so the argmax set has two members and the question fails.
        let record = QuestionRecord {
            id: "tie".into(),
            question: QuestionText::Tokens(vec!["find".into(), "r0".into(), "from".into(), "q0".into()]),
            candidates: vec!["a0".into(), "a0".into()],
            answer_index: 0,
        };
        let config = tiny_config();
        let model = build_model(&config, &kg, std::slice::from_ref(&record));
        let prepared = prepare_dataset(&kg, &model, &[record]).unwrap();
        let metrics = evaluate(&kg, &model, &prepared, None, EvalOptions::default()).unwrap();
        assert_eq!(metrics.accuracy, 0.0);
    }

    #[test]
    fn no_qkgr_leaves_scorer_untouched_and_no_pki_leaves_gnn_untouched() {
        let kg = tiny_kg();
        let records = tiny_records(6, 4, 5);
        for (no_qkgr, no_pki) in [(true, false), (false, true)] {
            let mut config = tiny_config();
            config.no_qkgr = no_qkgr;
            config.no_pki = no_pki;
            config.epochs = 1;
            let mut model = build_model(&config, &kg, &records);
            let scorer_before = model.store.value(model.scorer.b_rel).clone();
            let gnn_before = model.store.value(model.gat.layers[0].f_msg).clone();
            let prepared = prepare_dataset(&kg, &model, &records).unwrap();
            train(&kg, &mut model, &prepared, &[], None).unwrap();
            if no_qkgr {
                assert_eq!(&scorer_before, model.store.value(model.scorer.b_rel));
            }
            if no_pki {
                assert_eq!(&gnn_before, model.store.value(model.gat.layers[0].f_msg));
                assert_eq!(&scorer_before, model.store.value(model.scorer.b_rel));
            }
        }
    }

    #[test]
    fn frozen_base_is_bit_identical_after_training() {
        let kg = tiny_kg();
        let records = tiny_records(10, 4, 6);
        let config = tiny_config();
        let mut model = build_model(&config, &kg, &records);
        let frozen_before: Vec<(String, Vec<u64>)> = model
            .store
            .entries()
            .iter()
            .filter(|e| !e.trainable)
            .map(|e| (e.name.clone(), e.value.iter().map(|v| v.to_bits()).collect()))
            .collect();
        let prepared = prepare_dataset(&kg, &model, &records).unwrap();
        train(&kg, &mut model, &prepared, &[], None).unwrap();
        let frozen_after: Vec<(String, Vec<u64>)> = model
            .store
            .entries()
            .iter()
            .filter(|e| !e.trainable)
            .map(|e| (e.name.clone(), e.value.iter().map(|v| v.to_bits()).collect()))
            .collect();
        assert_eq!(frozen_before, frozen_after);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_scores() {
        let kg = tiny_kg();
        let records = tiny_records(6, 4, 7);
        let mut config = tiny_config();
        config.epochs = 1;
        let mut model = build_model(&config, &kg, &records);
        let prepared = prepare_dataset(&kg, &model, &records).unwrap();
        let (ckpt, _) = train(&kg, &mut model, &prepared, &[], None).unwrap();

        let text = serde_json::to_string(&ckpt).unwrap();
        let parsed: Checkpoint = serde_json::from_str(&text).unwrap();
        let restored: ModelState<f64> = load_checkpoint(&parsed, &kg, None).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for q in &prepared {
            let mut g1 = Graph::<f64>::new(false);
            let (l1, _) = score_question(&mut g1, &model, q, &q.subgraphs, &mut rng).unwrap();
            let mut g2 = Graph::<f64>::new(false);
            let (l2, _) = score_question(&mut g2, &restored, q, &q.subgraphs, &mut rng).unwrap();
            for (a, b) in g1.value(l1).iter().zip(g2.value(l2).iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_rejects_bad_header() {
        let kg = tiny_kg();
        let records = tiny_records(2, 4, 8);
        let config = tiny_config();
        let model = build_model(&config, &kg, &records);
        let mut ckpt = save_checkpoint(&model, &ChaCha8Rng::seed_from_u64(0));
        ckpt.version = 99;
        assert!(load_checkpoint::<f64>(&ckpt, &kg, None).is_err());
    }

    #[test]
    fn ablation_variants_run_and_stay_finite() {
        let kg = tiny_kg();
        let records = tiny_records(4, 4, 9);
        for variant in ["hard", "no_global", "soft_prompt", "joint", "renorm"] {
            let mut config = tiny_config();
            config.epochs = 1;
            match variant {
                "hard" => config.score_mode = ScoreModeCfg::Hard,
                "no_global" => config.no_global = true,
                "soft_prompt" => config.soft_prompt = true,
                "joint" => config.joint_subgraph = true,
                "renorm" => config.renormalize_alpha = true,
                _ => unreachable!(),
            }
            let mut model = build_model(&config, &kg, &records);
            let prepared = prepare_dataset(&kg, &model, &records).unwrap();
            let (_, metrics) = train(&kg, &mut model, &prepared, &[], None).unwrap();
            assert!(metrics.loss_curve.iter().all(|l| l.is_finite()), "{variant}");
        }
    }
}
