//! Topic-entity linking, k-hop subgraph extraction, global-node expansion,
//! and evaluation-time distractor injection.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kgstore::{Direction, EntityId, KnowledgeGraph, RelationId};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("unlinkable question: no token span matches any entity")]
    UnlinkableQuestion,
    #[error("k-hop extraction requires k >= 1 (got {0})")]
    BadHopBudget(usize),
    #[error("extraction requires at least one question and one answer entity")]
    MissingTopics,
    #[error("subgraph already has a global node")]
    GlobalNodeExists,
    #[error("cannot add a global node to an empty subgraph")]
    EmptySubgraph,
    #[error("distractor fraction must lie in [0, 100] (got {0})")]
    BadFraction(f64),
    #[error("not enough eligible distractor entities (need {need}, have {have})")]
    NotEnoughDistractors { need: usize, have: usize },
}

/// Entities linked in the question and in each candidate answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicEntities {
    pub question_entities: BTreeSet<EntityId>,
    /// One entity set per candidate; empty sets are allowed and flagged.
    pub answer_entities: Vec<BTreeSet<EntityId>>,
    /// Indices of candidates for which no entity linked.
    pub unlinked_candidates: Vec<usize>,
}

impl TopicEntities {
    /// Union of answer sets over the selected candidates (`None` = all).
    pub fn answer_union(&self, candidate: Option<usize>) -> BTreeSet<EntityId> {
        match candidate {
            Some(i) => self.answer_entities[i].clone(),
            None => self
                .answer_entities
                .iter()
                .flat_map(|s| s.iter().copied())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Question,
    Answer,
    Other,
    Global,
}

/// Edge label inside a subgraph: a real KG relation or the structural link
/// between the global node and topic nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeLabel {
    Kg(RelationId),
    GlobalLink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubNode {
    /// `None` marks the global node.
    pub entity: Option<EntityId>,
    pub role: NodeRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubEdge {
    pub src: usize,
    pub dst: usize,
    pub label: EdgeLabel,
    /// True for edges injected by distractor synthesis.
    pub distractor: bool,
}

/// Locally re-indexed subgraph. Node indexes are dense; at most one global
/// node exists and every topic node is linked to it in both directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgraph {
    pub nodes: Vec<SubNode>,
    pub edges: Vec<SubEdge>,
    pub global_node: Option<usize>,
    /// Set when no non-topic node fell within the hop budget.
    pub topics_only: bool,
}

impl Subgraph {
    pub fn topic_indexes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.role, NodeRole::Question | NodeRole::Answer))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn node_index_of(&self, entity: EntityId) -> Option<usize> {
        self.nodes.iter().position(|n| n.entity == Some(entity))
    }

    pub fn kg_edge_count(&self) -> usize {
        self.edges
            .iter()
            .filter(|e| matches!(e.label, EdgeLabel::Kg(_)))
            .count()
    }
}

/// Greedy longest-match linking of contiguous token spans against the
/// normalized entity vocabulary. Matched spans do not overlap; the scan is
/// left to right and prefers the longest span at each position.
pub fn link_entities(
    g: &KnowledgeGraph,
    question_tokens: &[String],
    candidate_token_lists: &[Vec<String>],
) -> Result<TopicEntities, RetrievalError> {
    let question_entities = link_tokens(g, question_tokens);
    if question_entities.is_empty() {
        return Err(RetrievalError::UnlinkableQuestion);
    }
    let mut answer_entities = Vec::with_capacity(candidate_token_lists.len());
    let mut unlinked = Vec::new();
    for (i, tokens) in candidate_token_lists.iter().enumerate() {
        let set = link_tokens(g, tokens);
        if set.is_empty() {
            unlinked.push(i);
        }
        answer_entities.push(set);
    }
    Ok(TopicEntities {
        question_entities,
        answer_entities,
        unlinked_candidates: unlinked,
    })
}

fn link_tokens(g: &KnowledgeGraph, tokens: &[String]) -> BTreeSet<EntityId> {
    let max_span = 5.min(tokens.len());
    let mut found = BTreeSet::new();
    let mut pos = 0;
    while pos < tokens.len() {
        let mut matched = None;
        for len in (1..=max_span.min(tokens.len() - pos)).rev() {
            let span = tokens[pos..pos + len].join(" ");
            if let Some(id) = g.entity_lookup(&span) {
                matched = Some((id, len));
                break;
            }
        }
        match matched {
            Some((id, len)) => {
                found.insert(id);
                pos += len;
            }
            None => pos += 1,
        }
    }
    found
}

/// Undirected BFS distances from `sources`, capped at `max_depth`.
fn bounded_distances(
    g: &KnowledgeGraph,
    sources: &BTreeSet<EntityId>,
    max_depth: usize,
) -> HashMap<EntityId, usize> {
    let mut dist: HashMap<EntityId, usize> = HashMap::new();
    let mut queue = VecDeque::new();
    for &s in sources {
        dist.insert(s, 0);
        queue.push_back(s);
    }
    while let Some(v) = queue.pop_front() {
        let d = dist[&v];
        if d == max_depth {
            continue;
        }
        for (_, u) in g.neighbors(v, Direction::Both).unwrap_or_default() {
            if !dist.contains_key(&u) {
                dist.insert(u, d + 1);
                queue.push_back(u);
            }
        }
    }
    dist
}

/// Extract the subgraph of nodes lying on some path of at most `k` hops
/// between a question entity and an answer entity (undirected distance),
/// then keep all KG edges among the retained nodes. Topic entities always
/// survive; the cap drops the most distant non-topic nodes first.
pub fn extract_khop(
    g: &KnowledgeGraph,
    topics: &TopicEntities,
    candidate: Option<usize>,
    k: usize,
    node_cap: usize,
) -> Result<Subgraph, RetrievalError> {
    if k < 1 {
        return Err(RetrievalError::BadHopBudget(k));
    }
    if topics.question_entities.is_empty() {
        return Err(RetrievalError::MissingTopics);
    }
    let answers = topics.answer_union(candidate);

    let mut included: BTreeMap<EntityId, usize> = BTreeMap::new(); // entity -> distance sum
    if answers.is_empty() {
        // Answerless candidate: fall back to the topic nodes alone.
        for &q in &topics.question_entities {
            included.insert(q, 0);
        }
    } else {
        let dq = bounded_distances(g, &topics.question_entities, k);
        let da = bounded_distances(g, &answers, k);
        for (&v, &d1) in &dq {
            if let Some(&d2) = da.get(&v) {
                if d1 + d2 <= k {
                    included.insert(v, d1 + d2);
                }
            }
        }
        for &t in topics.question_entities.iter().chain(answers.iter()) {
            let d1 = dq.get(&t).copied().unwrap_or(k);
            let d2 = da.get(&t).copied().unwrap_or(k);
            included.insert(t, d1.saturating_add(d2).min(2 * k));
        }
    }

    let is_topic =
        |v: EntityId| topics.question_entities.contains(&v) || answers.contains(&v);

    // Collect KG edges among included nodes (stored direction only).
    let edge_list = |nodes: &BTreeMap<EntityId, usize>| -> Vec<(EntityId, RelationId, EntityId)> {
        let mut edges = Vec::new();
        for &h in nodes.keys() {
            for (r, t) in g.neighbors(h, Direction::Out).unwrap_or_default() {
                if nodes.contains_key(&t) {
                    edges.push((h, r, t));
                }
            }
        }
        edges
    };

    if included.len() > node_cap {
        let edges = edge_list(&included);
        let mut degree: HashMap<EntityId, usize> = HashMap::new();
        for &(h, _, t) in &edges {
            *degree.entry(h).or_default() += 1;
            *degree.entry(t).or_default() += 1;
        }
        let mut droppable: Vec<(usize, usize, EntityId)> = included
            .iter()
            .filter(|(v, _)| !is_topic(**v))
            .map(|(&v, &dsum)| (dsum, degree.get(&v).copied().unwrap_or(0), v))
            .collect();
        // Drop priority: largest distance sum, then lowest degree, then
        // highest entity id (so lower ids are kept on full ties).
        droppable.sort_by(|a, b| {
            b.0.cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(b.2.cmp(&a.2))
        });
        let excess = included.len() - node_cap;
        for &(_, _, v) in droppable.iter().take(excess) {
            included.remove(&v);
        }
    }

    let edges = edge_list(&included);
    let topics_only = included.keys().all(|&v| is_topic(v));

    let mut nodes = Vec::with_capacity(included.len());
    let mut local: HashMap<EntityId, usize> = HashMap::new();
    for &v in included.keys() {
        let role = if topics.question_entities.contains(&v) {
            NodeRole::Question
        } else if answers.contains(&v) {
            NodeRole::Answer
        } else {
            NodeRole::Other
        };
        local.insert(v, nodes.len());
        nodes.push(SubNode {
            entity: Some(v),
            role,
        });
    }
    let edges = edges
        .into_iter()
        .map(|(h, r, t)| SubEdge {
            src: local[&h],
            dst: local[&t],
            label: EdgeLabel::Kg(r),
            distractor: false,
        })
        .collect();

    Ok(Subgraph {
        nodes,
        edges,
        global_node: None,
        topics_only,
    })
}

/// Append the global node and link it to every topic node in both
/// directions.
pub fn add_global_node(sub: &Subgraph) -> Result<Subgraph, RetrievalError> {
    if sub.global_node.is_some() {
        return Err(RetrievalError::GlobalNodeExists);
    }
    if sub.nodes.is_empty() {
        return Err(RetrievalError::EmptySubgraph);
    }
    let mut out = sub.clone();
    let g_idx = out.nodes.len();
    out.nodes.push(SubNode {
        entity: None,
        role: NodeRole::Global,
    });
    for t in sub.topic_indexes() {
        out.edges.push(SubEdge {
            src: g_idx,
            dst: t,
            label: EdgeLabel::GlobalLink,
            distractor: false,
        });
        out.edges.push(SubEdge {
            src: t,
            dst: g_idx,
            label: EdgeLabel::GlobalLink,
            distractor: false,
        });
    }
    out.global_node = Some(g_idx);
    Ok(out)
}

/// Replace `fraction`% of the non-topic, non-global nodes with distractor
/// entities sampled outside the 1-hop neighborhood of the topic nodes.
/// Each replacement drops the old node's edges and connects the distractor
/// to one uniformly chosen topic node with a uniformly chosen relation.
pub fn inject_distractors<R: Rng>(
    g: &KnowledgeGraph,
    sub: &Subgraph,
    fraction: f64,
    rng: &mut R,
) -> Result<Subgraph, RetrievalError> {
    if !(0.0..=100.0).contains(&fraction) || fraction.is_nan() {
        return Err(RetrievalError::BadFraction(fraction));
    }
    let replaceable: Vec<usize> = sub
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.role == NodeRole::Other)
        .map(|(i, _)| i)
        .collect();
    let count = ((fraction / 100.0) * replaceable.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(sub.clone());
    }

    // Eligible pool: entities at undirected distance >= 2 from every topic
    // entity and not already present in the subgraph.
    let topic_entities: BTreeSet<EntityId> = sub
        .nodes
        .iter()
        .filter(|n| matches!(n.role, NodeRole::Question | NodeRole::Answer))
        .filter_map(|n| n.entity)
        .collect();
    let near = bounded_distances(g, &topic_entities, 1);
    let present: HashSet<EntityId> = sub.nodes.iter().filter_map(|n| n.entity).collect();
    let eligible: Vec<EntityId> = (0..g.entity_count() as EntityId)
        .filter(|v| !near.contains_key(v) && !present.contains(v))
        .collect();
    if eligible.len() < count {
        return Err(RetrievalError::NotEnoughDistractors {
            need: count,
            have: eligible.len(),
        });
    }

    // Choose which local nodes to replace (uniform without replacement).
    let mut pool = replaceable;
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let i = rng.gen_range(0..pool.len());
        chosen.push(pool.swap_remove(i));
    }
    chosen.sort_unstable();

    let mut dpool = eligible;
    let topic_idx = sub.topic_indexes();
    let mut out = sub.clone();
    let replaced: HashSet<usize> = chosen.iter().copied().collect();
    out.edges.retain(|e| !replaced.contains(&e.src) && !replaced.contains(&e.dst));
    for &node_idx in &chosen {
        let d = dpool.swap_remove(rng.gen_range(0..dpool.len()));
        let topic = topic_idx[rng.gen_range(0..topic_idx.len())];
        let relation = rng.gen_range(0..g.relation_count() as RelationId);
        out.nodes[node_idx] = SubNode {
            entity: Some(d),
            role: NodeRole::Other,
        };
        out.edges.push(SubEdge {
            src: node_idx,
            dst: topic,
            label: EdgeLabel::Kg(relation),
            distractor: true,
        });
    }
    Ok(out)
}

/// One question record of the JSONL dataset format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: QuestionText,
    pub candidates: Vec<String>,
    pub answer_index: usize,
}

/// Questions arrive either pre-tokenized or as a raw string that is split
/// on whitespace.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QuestionText {
    Tokens(Vec<String>),
    Raw(String),
}

impl QuestionRecord {
    pub fn question_tokens(&self) -> Vec<String> {
        match &self.question {
            QuestionText::Tokens(t) => t.clone(),
            QuestionText::Raw(s) => s.split_whitespace().map(|t| t.to_string()).collect(),
        }
    }

    pub fn candidate_tokens(&self, i: usize) -> Vec<String> {
        self.candidates[i]
            .split_whitespace()
            .map(|t| t.to_string())
            .collect()
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<QuestionRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// JSON export form of a subgraph, with surfaces instead of ids.
#[derive(Debug, Serialize)]
pub struct SubgraphExport {
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<ExportEdge>,
}

#[derive(Debug, Serialize)]
pub struct ExportNode {
    pub surface: String,
    pub role: NodeRole,
}

#[derive(Debug, Serialize)]
pub struct ExportEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: String,
    pub distractor: bool,
}

pub fn export_subgraph(g: &KnowledgeGraph, sub: &Subgraph) -> SubgraphExport {
    SubgraphExport {
        nodes: sub
            .nodes
            .iter()
            .map(|n| ExportNode {
                surface: match n.entity {
                    Some(e) => g.entity_surface(e).to_string(),
                    None => "<global>".to_string(),
                },
                role: n.role,
            })
            .collect(),
        edges: sub
            .edges
            .iter()
            .map(|e| ExportEdge {
                src: e.src,
                dst: e.dst,
                relation: match e.label {
                    EdgeLabel::Kg(r) => g.relation_surface(r).to_string(),
                    EdgeLabel::GlobalLink => "<global-link>".to_string(),
                },
                distractor: e.distractor,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgstore::load_triples_str;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn topics(q: &[EntityId], a: &[&[EntityId]]) -> TopicEntities {
        TopicEntities {
            question_entities: q.iter().copied().collect(),
            answer_entities: a.iter().map(|s| s.iter().copied().collect()).collect(),
            unlinked_candidates: Vec::new(),
        }
    }

    #[test]
    fn longest_match_wins() {
        let (g, _) = load_triples_str("river bank\tr\twater\nbank\tr\tmoney").unwrap();
        let t = link_entities(&g, &toks(&["the", "river", "bank"]), &[toks(&["money"])]).unwrap();
        let rb = g.entity_lookup("river bank").unwrap();
        assert_eq!(t.question_entities.iter().copied().collect::<Vec<_>>(), vec![rb]);
    }

    #[test]
    fn single_token_fallback_match() {
        let (g, _) = load_triples_str("bank\tr\tmoney").unwrap();
        let t = link_entities(&g, &toks(&["piggy", "bank"]), &[toks(&["money"])]).unwrap();
        let bank = g.entity_lookup("bank").unwrap();
        assert!(t.question_entities.contains(&bank));
        assert_eq!(t.question_entities.len(), 1);
    }

    #[test]
    fn candidate_linking_and_flags() {
        let (g, _) = load_triples_str("repository\tr\tthing\nbank\tr\tthing").unwrap();
        let t = link_entities(
            &g,
            &toks(&["bank"]),
            &[toks(&["repository"]), toks(&["nonsense"])],
        )
        .unwrap();
        assert_eq!(t.answer_entities[0].len(), 1);
        assert!(t.answer_entities[1].is_empty());
        assert_eq!(t.unlinked_candidates, vec![1]);
    }

    #[test]
    fn unlinkable_question_errors() {
        let (g, _) = load_triples_str("a\tr\tb").unwrap();
        let err = link_entities(&g, &toks(&["zzz"]), &[]).unwrap_err();
        assert!(err.to_string().contains("unlinkable question"));
    }

    /// Brute-force oracle: a node is on a <= k-hop path between topics iff
    /// some undirected walk q -> .. -> v -> .. -> a of total length <= k
    /// exists, which is equivalent to enumerating all bounded walks.
    fn oracle_khop_nodes(
        g: &KnowledgeGraph,
        q: &BTreeSet<EntityId>,
        a: &BTreeSet<EntityId>,
        k: usize,
    ) -> BTreeSet<EntityId> {
        let mut keep: BTreeSet<EntityId> = q.union(a).copied().collect();
        let n = g.entity_count() as EntityId;
        for v in 0..n {
            'outer: for &tq in q {
                for &ta in a {
                    // Enumerate all walks tq -> v of length i and v -> ta of
                    // length j with i + j <= k.
                    for i in 0..=k {
                        for j in 0..=(k - i) {
                            if walk_exists(g, tq, v, i) && walk_exists(g, v, ta, j) {
                                keep.insert(v);
                                break 'outer;
                            }
                        }
                    }
                }
            }
        }
        keep
    }

    fn walk_exists(g: &KnowledgeGraph, from: EntityId, to: EntityId, len: usize) -> bool {
        if len == 0 {
            return from == to;
        }
        let mut frontier: HashSet<EntityId> = HashSet::new();
        frontier.insert(from);
        for _ in 0..len {
            let mut next = HashSet::new();
            for &v in &frontier {
                for (_, u) in g.neighbors(v, Direction::Both).unwrap() {
                    next.insert(u);
                }
            }
            frontier = next;
        }
        frontier.contains(&to)
    }

    fn node_set(sub: &Subgraph) -> BTreeSet<EntityId> {
        sub.nodes.iter().filter_map(|n| n.entity).collect()
    }

    #[test]
    fn khop_two_path_graph_matches_oracle() {
        let (g, _) =
            load_triples_str("a\tr\tb\nb\tr\tc\na\tr\td\nd\tr\te\ne\tr\tc").unwrap();
        let a = g.entity_lookup("a").unwrap();
        let c = g.entity_lookup("c").unwrap();
        let t = topics(&[a], &[&[c]]);

        let sub2 = extract_khop(&g, &t, None, 2, 200).unwrap();
        let expect2 = oracle_khop_nodes(&g, &t.question_entities, &t.answer_union(None), 2);
        assert_eq!(node_set(&sub2), expect2);
        let b = g.entity_lookup("b").unwrap();
        assert_eq!(node_set(&sub2).into_iter().collect::<Vec<_>>(), vec![a, b, c]);

        let sub3 = extract_khop(&g, &t, None, 3, 200).unwrap();
        let expect3 = oracle_khop_nodes(&g, &t.question_entities, &t.answer_union(None), 3);
        assert_eq!(node_set(&sub3), expect3);
        assert_eq!(node_set(&sub3).len(), 5);
    }

    #[test]
    fn node_cap_preserves_topics() {
        let (g, _) =
            load_triples_str("a\tr\tb\nb\tr\tc\na\tr\td\nd\tr\te\ne\tr\tc").unwrap();
        let a = g.entity_lookup("a").unwrap();
        let c = g.entity_lookup("c").unwrap();
        let t = topics(&[a], &[&[c]]);
        let sub = extract_khop(&g, &t, None, 2, 2).unwrap();
        let set = node_set(&sub);
        assert_eq!(set.len(), 2);
        assert!(set.contains(&a) && set.contains(&c));
    }

    #[test]
    fn disconnected_topics_yield_topics_only_subgraph() {
        let (g, _) = load_triples_str("a\tr\tb\nc\tr\td").unwrap();
        let a = g.entity_lookup("a").unwrap();
        let d = g.entity_lookup("d").unwrap();
        let t = topics(&[a], &[&[d]]);
        let sub = extract_khop(&g, &t, None, 2, 200).unwrap();
        assert!(sub.topics_only);
        assert_eq!(node_set(&sub).len(), 2);
        assert!(sub.edges.is_empty());
    }

    #[test]
    fn khop_random_graphs_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..40 {
            let n = rng.gen_range(4..=12);
            let mut lines = Vec::new();
            for _ in 0..rng.gen_range(3..=24) {
                let h = rng.gen_range(0..n);
                let t = rng.gen_range(0..n);
                let r = rng.gen_range(0..3);
                lines.push(format!("n{h}\tr{r}\tn{t}"));
            }
            // Make sure every node exists in the vocabulary.
            for v in 0..n {
                lines.push(format!("n{v}\tr0\tn{v}"));
            }
            let (g, _) = load_triples_str(&lines.join("\n")).unwrap();
            let q = g.entity_lookup(&format!("n{}", rng.gen_range(0..n))).unwrap();
            let a = g.entity_lookup(&format!("n{}", rng.gen_range(0..n))).unwrap();
            if q == a {
                continue;
            }
            let t = topics(&[q], &[&[a]]);
            for k in 1..=3 {
                let sub = extract_khop(&g, &t, None, k, 500).unwrap();
                let expect = oracle_khop_nodes(&g, &t.question_entities, &t.answer_union(None), k);
                assert_eq!(node_set(&sub), expect, "k={k}");
            }
        }
    }

    #[test]
    fn global_node_edge_arithmetic() {
        let (g, _) = load_triples_str("a\tr\tb\nb\tr\tc").unwrap();
        let a = g.entity_lookup("a").unwrap();
        let c = g.entity_lookup("c").unwrap();
        let t = topics(&[a], &[&[c]]);
        let sub = extract_khop(&g, &t, None, 2, 200).unwrap();
        assert_eq!(sub.nodes.len(), 3); // 2 topics + 1 other
        let with_global = add_global_node(&sub).unwrap();
        assert_eq!(with_global.nodes.len(), sub.nodes.len() + 1);
        assert_eq!(with_global.edges.len(), sub.edges.len() + 4);
        assert!(add_global_node(&with_global).is_err());
    }

    #[test]
    fn global_node_single_topic() {
        let sub = Subgraph {
            nodes: vec![SubNode {
                entity: Some(0),
                role: NodeRole::Question,
            }],
            edges: vec![],
            global_node: None,
            topics_only: true,
        };
        let out = add_global_node(&sub).unwrap();
        assert_eq!(out.nodes.len(), 2);
        assert_eq!(out.edges.len(), 2);
    }

    #[test]
    fn global_node_empty_subgraph_errors() {
        let sub = Subgraph {
            nodes: vec![],
            edges: vec![],
            global_node: None,
            topics_only: true,
        };
        assert!(add_global_node(&sub).is_err());
    }

    fn chain_graph(extra: usize) -> (KnowledgeGraph, TopicEntities, Subgraph) {
        // a -> m0 .. m{extra-1} -> c with every m adjacent to both topics.
        let mut lines = vec![];
        for i in 0..extra {
            lines.push(format!("a\tr\tm{i}"));
            lines.push(format!("m{i}\tr\tc"));
        }
        // Spare entities for the distractor pool, far from topics.
        for i in 0..30 {
            lines.push(format!("z{i}\tq\tz{}", (i + 1) % 30));
        }
        let (g, _) = load_triples_str(&lines.join("\n")).unwrap();
        let a = g.entity_lookup("a").unwrap();
        let c = g.entity_lookup("c").unwrap();
        let t = topics(&[a], &[&[c]]);
        let sub = extract_khop(&g, &t, None, 2, 200).unwrap();
        (g, t, sub)
    }

    #[test]
    fn distractor_fraction_zero_is_identity() {
        let (g, _, sub) = chain_graph(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = inject_distractors(&g, &sub, 0.0, &mut rng).unwrap();
        assert_eq!(out, sub);
    }

    #[test]
    fn distractor_replaces_exact_count_and_tags_edges() {
        let (g, _, sub) = chain_graph(10);
        assert_eq!(sub.nodes.len(), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = inject_distractors(&g, &sub, 50.0, &mut rng).unwrap();
        let tagged = out.edges.iter().filter(|e| e.distractor).count();
        assert_eq!(tagged, 5);
        // Topic entities survived.
        let a = g.entity_lookup("a").unwrap();
        let c = g.entity_lookup("c").unwrap();
        assert!(out.node_index_of(a).is_some());
        assert!(out.node_index_of(c).is_some());
        assert_eq!(out.nodes.len(), sub.nodes.len());
    }

    #[test]
    fn distractor_on_topics_only_subgraph_is_identity() {
        let (g, _) = load_triples_str("a\tr\tc\nz0\tq\tz1\nz1\tq\tz2").unwrap();
        let a = g.entity_lookup("a").unwrap();
        let c = g.entity_lookup("c").unwrap();
        let t = topics(&[a], &[&[c]]);
        let sub = extract_khop(&g, &t, None, 2, 200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = inject_distractors(&g, &sub, 100.0, &mut rng).unwrap();
        assert_eq!(out, sub);
    }

    #[test]
    fn distractor_injection_is_seed_reproducible() {
        let (g, _, sub) = chain_graph(8);
        let out1 = inject_distractors(&g, &sub, 40.0, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let out2 = inject_distractors(&g, &sub, 40.0, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(out1, out2);
        let out3 = inject_distractors(&g, &sub, 40.0, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert_ne!(out1, out3);
    }

    #[test]
    fn distractor_pool_exhaustion_errors() {
        // Graph with no entity outside the topics' 1-hop neighborhood.
        let (g, _) = load_triples_str("a\tr\tm\nm\tr\tc").unwrap();
        let a = g.entity_lookup("a").unwrap();
        let c = g.entity_lookup("c").unwrap();
        let t = topics(&[a], &[&[c]]);
        let sub = extract_khop(&g, &t, None, 2, 200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = inject_distractors(&g, &sub, 100.0, &mut rng).unwrap_err();
        assert!(matches!(err, RetrievalError::NotEnoughDistractors { .. }));
    }

    #[test]
    fn jsonl_round_trip_with_raw_and_tokenized_questions() {
        let text = concat!(
            "{\"id\":\"q0\",\"question\":\"find r0 from e5\",\"candidates\":[\"e9\",\"e2\"],\"answer_index\":0}\n",
            "{\"id\":\"q1\",\"question\":[\"find\",\"r1\",\"from\",\"e3\"],\"candidates\":[\"e4\",\"e6\"],\"answer_index\":1}\n",
        );
        let records = parse_jsonl(text).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].question_tokens(), toks(&["find", "r0", "from", "e5"]));
        assert_eq!(records[1].question_tokens(), toks(&["find", "r1", "from", "e3"]));
    }
}
