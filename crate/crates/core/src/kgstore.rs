//! Load, index, and query a multi-relational knowledge graph from
//! tab-separated triple files.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense entity index, contiguous from 0.
pub type EntityId = u32;
/// Dense relation index, contiguous from 0.
pub type RelationId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("line {line}: expected 3 tab-separated fields, got {got}")]
    MalformedLine { line: usize, got: usize },
    #[error("entity id {0} out of range (have {1} entities)")]
    EntityOutOfRange(EntityId, usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot error: {0}")]
    Snapshot(String),
}

/// Edge direction selector for neighbor queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
    Both,
}

/// Summary of one ingestion run, printed as a single JSON object.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadReport {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub duplicates_dropped: usize,
    pub self_loops: usize,
}

/// Immutable multi-relational graph with forward and backward adjacency
/// indexes. Safe to share across threads once built.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    entity_surfaces: Vec<String>,
    relation_surfaces: Vec<String>,
    #[serde(skip)]
    entity_index: HashMap<String, EntityId>,
    #[serde(skip)]
    relation_index: HashMap<String, RelationId>,
    /// Per head: sorted (relation, tail) pairs.
    forward: Vec<Vec<(RelationId, EntityId)>>,
    /// Per tail: sorted (relation, head) pairs.
    backward: Vec<Vec<(RelationId, EntityId)>>,
    triple_count: usize,
}

/// Canonical surface form: lowercase, underscores folded to spaces,
/// whitespace collapsed.
pub fn normalize_surface(s: &str) -> String {
    let lowered = s.trim().to_lowercase().replace('_', " ");
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl KnowledgeGraph {
    pub fn entity_count(&self) -> usize {
        self.entity_surfaces.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_surfaces.len()
    }

    pub fn triple_count(&self) -> usize {
        self.triple_count
    }

    pub fn entity_surface(&self, id: EntityId) -> &str {
        &self.entity_surfaces[id as usize]
    }

    pub fn relation_surface(&self, id: RelationId) -> &str {
        &self.relation_surfaces[id as usize]
    }

    /// Exact-match lookup after normalization; absent surfaces yield `None`.
    pub fn entity_lookup(&self, surface: &str) -> Option<EntityId> {
        self.entity_index.get(&normalize_surface(surface)).copied()
    }

    pub fn relation_lookup(&self, surface: &str) -> Option<RelationId> {
        self.relation_index
            .get(&normalize_surface(surface))
            .copied()
    }

    /// Neighbors of `v` in the requested direction, sorted by
    /// (relation, entity). `Both` is the deduplicated union of `Out` and `In`.
    pub fn neighbors(
        &self,
        v: EntityId,
        direction: Direction,
    ) -> Result<Vec<(RelationId, EntityId)>, KgError> {
        let n = self.entity_count();
        if v as usize >= n {
            return Err(KgError::EntityOutOfRange(v, n));
        }
        let out = match direction {
            Direction::Out => self.forward[v as usize].clone(),
            Direction::In => self.backward[v as usize].clone(),
            Direction::Both => {
                let mut all = self.forward[v as usize].clone();
                all.extend_from_slice(&self.backward[v as usize]);
                all.sort_unstable();
                all.dedup();
                all
            }
        };
        Ok(out)
    }

    pub fn triples(&self) -> impl Iterator<Item = Triple> + '_ {
        self.forward.iter().enumerate().flat_map(|(head, edges)| {
            edges.iter().map(move |&(relation, tail)| Triple {
                head: head as EntityId,
                relation,
                tail,
            })
        })
    }

    pub fn has_triple(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.forward
            .get(head as usize)
            .map(|edges| edges.binary_search(&(relation, tail)).is_ok())
            .unwrap_or(false)
    }

    /// Textual snapshot with a stable version header. Re-serializing a
    /// reloaded snapshot is byte-identical.
    pub fn to_snapshot(&self) -> String {
        let snap = Snapshot {
            format: "kg-snapshot",
            version: 1,
            entities: &self.entity_surfaces,
            relations: &self.relation_surfaces,
            triples: self.triples().map(|t| (t.head, t.relation, t.tail)).collect(),
        };
        serde_json::to_string(&snap).expect("snapshot serialization cannot fail")
    }

    pub fn from_snapshot(text: &str) -> Result<Self, KgError> {
        let snap: SnapshotOwned =
            serde_json::from_str(text).map_err(|e| KgError::Snapshot(e.to_string()))?;
        if snap.format != "kg-snapshot" || snap.version != 1 {
            return Err(KgError::Snapshot(format!(
                "unsupported snapshot header {}/{}",
                snap.format, snap.version
            )));
        }
        let mut builder = GraphBuilder::new();
        for surface in &snap.entities {
            builder.intern_entity(surface);
        }
        for surface in &snap.relations {
            builder.intern_relation(surface);
        }
        for &(h, r, t) in &snap.triples {
            if h as usize >= snap.entities.len()
                || t as usize >= snap.entities.len()
                || r as usize >= snap.relations.len()
            {
                return Err(KgError::Snapshot(format!("triple ({h},{r},{t}) out of range")));
            }
            builder.push_triple(Triple {
                head: h,
                relation: r,
                tail: t,
            });
        }
        Ok(builder.finish().0)
    }
}

#[derive(Serialize)]
struct Snapshot<'a> {
    format: &'static str,
    version: u32,
    entities: &'a [String],
    relations: &'a [String],
    triples: Vec<(EntityId, RelationId, EntityId)>,
}

#[derive(Deserialize)]
struct SnapshotOwned {
    format: String,
    version: u32,
    entities: Vec<String>,
    relations: Vec<String>,
    triples: Vec<(EntityId, RelationId, EntityId)>,
}

struct GraphBuilder {
    entity_surfaces: Vec<String>,
    relation_surfaces: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    relation_index: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    duplicates: usize,
    self_loops: usize,
}

impl GraphBuilder {
    fn new() -> Self {
        GraphBuilder {
            entity_surfaces: Vec::new(),
            relation_surfaces: Vec::new(),
            entity_index: HashMap::new(),
            relation_index: HashMap::new(),
            triples: Vec::new(),
            duplicates: 0,
            self_loops: 0,
        }
    }

    fn intern_entity(&mut self, surface: &str) -> EntityId {
        let key = normalize_surface(surface);
        if let Some(&id) = self.entity_index.get(&key) {
            return id;
        }
        let id = self.entity_surfaces.len() as EntityId;
        self.entity_surfaces.push(key.clone());
        self.entity_index.insert(key, id);
        id
    }

    fn intern_relation(&mut self, surface: &str) -> RelationId {
        let key = normalize_surface(surface);
        if let Some(&id) = self.relation_index.get(&key) {
            return id;
        }
        let id = self.relation_surfaces.len() as RelationId;
        self.relation_surfaces.push(key.clone());
        self.relation_index.insert(key, id);
        id
    }

    fn push_triple(&mut self, t: Triple) {
        self.triples.push(t);
    }

    fn finish(mut self) -> (KnowledgeGraph, LoadReport) {
        self.triples.sort_unstable();
        let before = self.triples.len();
        self.triples.dedup();
        self.duplicates += before - self.triples.len();
        self.self_loops = self.triples.iter().filter(|t| t.head == t.tail).count();

        let n = self.entity_surfaces.len();
        let mut forward: Vec<Vec<(RelationId, EntityId)>> = vec![Vec::new(); n];
        let mut backward: Vec<Vec<(RelationId, EntityId)>> = vec![Vec::new(); n];
        for t in &self.triples {
            forward[t.head as usize].push((t.relation, t.tail));
            backward[t.tail as usize].push((t.relation, t.head));
        }
        for edges in forward.iter_mut().chain(backward.iter_mut()) {
            edges.sort_unstable();
        }
        let report = LoadReport {
            entities: n,
            relations: self.relation_surfaces.len(),
            triples: self.triples.len(),
            duplicates_dropped: self.duplicates,
            self_loops: self.self_loops,
        };
        let graph = KnowledgeGraph {
            entity_surfaces: self.entity_surfaces,
            relation_surfaces: self.relation_surfaces,
            entity_index: self.entity_index,
            relation_index: self.relation_index,
            forward,
            backward,
            triple_count: self.triples.len(),
        };
        (graph, report)
    }
}

/// Parse a 3-column TSV stream into a graph. Vocabularies assign ids in
/// first-seen order (head, relation, tail per line). Lines starting with
/// '#' and blank lines are skipped; duplicate triples are dropped silently.
pub fn load_triples<R: BufRead>(source: R) -> Result<(KnowledgeGraph, LoadReport), KgError> {
    let mut builder = GraphBuilder::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(KgError::MalformedLine {
                line: idx + 1,
                got: fields.len(),
            });
        }
        let head = builder.intern_entity(fields[0]);
        let relation = builder.intern_relation(fields[1]);
        let tail = builder.intern_entity(fields[2]);
        builder.push_triple(Triple {
            head,
            relation,
            tail,
        });
    }
    Ok(builder.finish())
}

pub fn load_triples_str(text: &str) -> Result<(KnowledgeGraph, LoadReport), KgError> {
    load_triples(std::io::Cursor::new(text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_entities_relations_triples() {
        let (g, report) = load_triples_str("dog\tis_a\tanimal\ncat\tis_a\tanimal").unwrap();
        assert_eq!(g.entity_count(), 3);
        assert_eq!(g.relation_count(), 1);
        assert_eq!(g.triple_count(), 2);
        assert_eq!(report.duplicates_dropped, 0);
    }

    #[test]
    fn empty_input_is_a_valid_empty_graph() {
        let (g, report) = load_triples_str("").unwrap();
        assert_eq!(g.entity_count(), 0);
        assert_eq!(g.triple_count(), 0);
        assert_eq!(report.triples, 0);
    }

    #[test]
    fn duplicate_lines_are_deduplicated() {
        let text = "a\tr\tb\nb\tr\tc\na\tr\tb\nc\tr\td\nd\tr\te";
        let (g, report) = load_triples_str(text).unwrap();
        assert_eq!(g.triple_count(), 4);
        assert_eq!(report.duplicates_dropped, 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = load_triples_str("a\tr\tb\nbroken line").unwrap_err();
        match err {
            KgError::MalformedLine { line, got } => {
                assert_eq!(line, 2);
                assert_eq!(got, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn self_loops_are_flagged_not_rejected() {
        let (g, report) = load_triples_str("a\tr\ta\na\tr\tb").unwrap();
        assert_eq!(g.triple_count(), 2);
        assert_eq!(report.self_loops, 1);
    }

    #[test]
    fn neighbors_out_lists_edges_in_order() {
        let (g, _) = load_triples_str("a\tr\tb\na\tr\tc").unwrap();
        let a = g.entity_lookup("a").unwrap();
        let b = g.entity_lookup("b").unwrap();
        let c = g.entity_lookup("c").unwrap();
        assert_eq!(g.neighbors(a, Direction::Out).unwrap(), vec![(0, b), (0, c)]);
    }

    #[test]
    fn neighbors_isolated_and_both_direction() {
        let (g, _) = load_triples_str("a\tr\tb\nc\tr\td").unwrap();
        let a = g.entity_lookup("a").unwrap();
        let b = g.entity_lookup("b").unwrap();
        assert_eq!(g.neighbors(b, Direction::Out).unwrap(), vec![]);
        assert_eq!(g.neighbors(b, Direction::Both).unwrap(), vec![(0, a)]);
    }

    #[test]
    fn neighbors_out_of_range_errors() {
        let (g, _) = load_triples_str("a\tr\tb").unwrap();
        assert!(g.neighbors(99, Direction::Out).is_err());
    }

    #[test]
    fn lookup_normalizes_case_and_underscores() {
        let (g, _) = load_triples_str("unicorn horn\tr\tdog").unwrap();
        let id = g.entity_lookup("unicorn horn").unwrap();
        assert_eq!(g.entity_lookup("Unicorn_Horn"), Some(id));
        assert_eq!(g.entity_lookup("Dog"), g.entity_lookup("dog"));
        assert_eq!(g.entity_lookup("unknown"), None);
    }

    #[test]
    fn forward_backward_hold_same_triple_multiset() {
        let text = "a\tr1\tb\nb\tr2\tc\nc\tr1\ta\na\tr2\ta";
        let (g, _) = load_triples_str(text).unwrap();
        let mut via_forward: Vec<Triple> = g.triples().collect();
        let mut via_backward: Vec<Triple> = Vec::new();
        for tail in 0..g.entity_count() as EntityId {
            for &(relation, head) in &g.backward[tail as usize] {
                via_backward.push(Triple {
                    head,
                    relation,
                    tail,
                });
            }
        }
        via_forward.sort_unstable();
        via_backward.sort_unstable();
        assert_eq!(via_forward, via_backward);
    }

    #[test]
    fn out_degree_sums_to_triple_count() {
        let text = "a\tr\tb\nb\tr\tc\nc\tr\ta\nb\tq\ta";
        let (g, _) = load_triples_str(text).unwrap();
        let total: usize = (0..g.entity_count() as EntityId)
            .map(|v| g.neighbors(v, Direction::Out).unwrap().len())
            .sum();
        assert_eq!(total, g.triple_count());
    }

    #[test]
    fn snapshot_round_trip_is_byte_identical() {
        let text = "dog\tis_a\tanimal\ncat\tis_a\tanimal\ncat\tchases\tmouse";
        let (g1, _) = load_triples_str(text).unwrap();
        let snap1 = g1.to_snapshot();
        let g2 = KnowledgeGraph::from_snapshot(&snap1).unwrap();
        assert_eq!(g2.to_snapshot(), snap1);
        // Reloading the same file also reproduces the same snapshot.
        let (g3, _) = load_triples_str(text).unwrap();
        assert_eq!(g3.to_snapshot(), snap1);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let (g, _) = load_triples_str("# header\n\na\tr\tb\n").unwrap();
        assert_eq!(g.triple_count(), 1);
    }
}
