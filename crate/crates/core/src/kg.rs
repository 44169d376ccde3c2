//! Triple store: vocabulary interning, TSV ingest, context lookup,
//! negative sampling, and task-dataset construction.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("line {line}: expected `head<TAB>relation<TAB>tail`, got {found} fields")]
    MalformedLine { line: usize, found: usize },
    #[error("line {line}: empty field")]
    EmptyField { line: usize },
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
    #[error("task relation {relation:?} has only {pairs} pairs; dev+test want {want}")]
    NotEnoughPairs { relation: String, pairs: usize, want: usize },
    #[error("split ratios must be non-negative and sum to 1, got {0} + {1} + {2}")]
    BadRatios(f64, f64, f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One directed labeled edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

/// Interning table mapping names to dense ids in first-appearance order.
#[derive(Debug, Default, Clone)]
pub struct Vocab {
    by_name: HashMap<String, u32>,
    names: Vec<String>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.by_name.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.by_name.insert(name.to_string(), id);
        self.names.push(name.to_string());
        id
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// In-memory knowledge graph with per-entity and per-relation triple indices.
#[derive(Debug, Clone)]
pub struct TripleStore {
    pub entities: Vocab,
    pub relations: Vocab,
    triples: Vec<Triple>,
    by_entity: Vec<Vec<u32>>,
    by_relation: Vec<Vec<u32>>,
    members: HashSet<Triple>,
    /// Duplicate input lines dropped during ingest.
    pub duplicates_dropped: usize,
}

impl TripleStore {
    pub fn new() -> Self {
        TripleStore {
            entities: Vocab::default(),
            relations: Vocab::default(),
            triples: Vec::new(),
            by_entity: Vec::new(),
            by_relation: Vec::new(),
            members: HashSet::new(),
            duplicates_dropped: 0,
        }
    }

    /// Parse tab-separated `head relation tail` lines. Blank lines are
    /// skipped; duplicate triples are dropped and counted.
    pub fn from_tsv(reader: impl BufRead) -> Result<Self, KgError> {
        let mut store = TripleStore::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(KgError::MalformedLine { line: line_no, found: fields.len() });
            }
            if fields.iter().any(|f| f.trim().is_empty()) {
                return Err(KgError::EmptyField { line: line_no });
            }
            store.insert_names(fields[0].trim(), fields[1].trim(), fields[2].trim());
        }
        Ok(store)
    }

    /// Intern names and insert; returns false for duplicates.
    pub fn insert_names(&mut self, head: &str, relation: &str, tail: &str) -> bool {
        let h = self.entities.intern(head);
        let r = self.relations.intern(relation);
        let t = self.entities.intern(tail);
        self.insert(Triple { head: h, relation: r, tail: t })
    }

    /// Insert an already-interned triple; returns false for duplicates.
    pub fn insert(&mut self, triple: Triple) -> bool {
        debug_assert!((triple.head as usize) < self.entities.len());
        debug_assert!((triple.relation as usize) < self.relations.len());
        debug_assert!((triple.tail as usize) < self.entities.len());
        if !self.members.insert(triple) {
            self.duplicates_dropped += 1;
            return false;
        }
        let idx = self.triples.len() as u32;
        self.triples.push(triple);
        let need_e = self.entities.len();
        if self.by_entity.len() < need_e {
            self.by_entity.resize(need_e, Vec::new());
        }
        let need_r = self.relations.len();
        if self.by_relation.len() < need_r {
            self.by_relation.resize(need_r, Vec::new());
        }
        self.by_entity[triple.head as usize].push(idx);
        if triple.tail != triple.head {
            self.by_entity[triple.tail as usize].push(idx);
        }
        self.by_relation[triple.relation as usize].push(idx);
        true
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, idx: u32) -> Triple {
        self.triples[idx as usize]
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.members.contains(t)
    }

    /// Indices of triples containing `entity` as head or tail, in insertion
    /// order without duplicates (self-loops appear once).
    pub fn context_of_entity(&self, entity: u32) -> &[u32] {
        self.by_entity.get(entity as usize).map_or(&[], |v| v.as_slice())
    }

    /// Indices of triples labeled `relation`, in insertion order.
    pub fn context_of_relation(&self, relation: u32) -> &[u32] {
        self.by_relation.get(relation as usize).map_or(&[], |v| v.as_slice())
    }

    /// Copy with the given triples removed but identical vocabularies.
    pub fn without(&self, removed: &HashSet<Triple>) -> TripleStore {
        let mut out = TripleStore {
            entities: self.entities.clone(),
            relations: self.relations.clone(),
            triples: Vec::new(),
            by_entity: vec![Vec::new(); self.entities.len()],
            by_relation: vec![Vec::new(); self.relations.len()],
            members: HashSet::new(),
            duplicates_dropped: 0,
        };
        for t in &self.triples {
            if !removed.contains(t) {
                out.insert(*t);
            }
        }
        out
    }
}

impl Default for TripleStore {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Negative sampling
// ---------------------------------------------------------------------------

/// Which slot a corruption replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptedSlot {
    Head,
    Relation,
    Tail,
}

/// Corrupts one slot of a positive triple, avoiding the identity replacement
/// and (optionally, with resampling) triples already present in the graph.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    pub head_prob: f64,
    pub tail_prob: f64,
    pub relation_prob: f64,
    pub max_resample: u32,
    /// Draws that still matched a known triple after `max_resample` retries.
    pub exhausted: u64,
}

impl NegativeSampler {
    /// Default slot policy: 40% head, 40% tail, 20% relation.
    pub fn new() -> Self {
        NegativeSampler {
            head_prob: 0.4,
            tail_prob: 0.4,
            relation_prob: 0.2,
            max_resample: 10,
            exhausted: 0,
        }
    }

    pub fn with_slot_probs(head: f64, tail: f64, relation: f64) -> Self {
        let sum = head + tail + relation;
        assert!(
            head >= 0.0 && tail >= 0.0 && relation >= 0.0 && (sum - 1.0).abs() < 1e-9,
            "slot probabilities must be non-negative and sum to 1"
        );
        NegativeSampler { head_prob: head, tail_prob: tail, relation_prob: relation, ..Self::new() }
    }

    fn corrupt_once(
        &self,
        store: &TripleStore,
        positive: &Triple,
        rng: &mut impl Rng,
    ) -> (Triple, CorruptedSlot) {
        let n_ent = store.entity_count() as u32;
        let n_rel = store.relation_count() as u32;
        let roll: f64 = rng.gen();
        let slot = if roll < self.head_prob {
            CorruptedSlot::Head
        } else if roll < self.head_prob + self.tail_prob {
            CorruptedSlot::Tail
        } else {
            CorruptedSlot::Relation
        };
        // Fall back to an entity slot when the graph has a single relation —
        // a "different relation" draw would be impossible.
        let slot = if slot == CorruptedSlot::Relation && n_rel < 2 {
            CorruptedSlot::Tail
        } else {
            slot
        };
        let mut corrupted = *positive;
        match slot {
            CorruptedSlot::Head => {
                corrupted.head = draw_other(n_ent, positive.head, rng);
            }
            CorruptedSlot::Tail => {
                corrupted.tail = draw_other(n_ent, positive.tail, rng);
            }
            CorruptedSlot::Relation => {
                corrupted.relation = draw_other(n_rel, positive.relation, rng);
            }
        }
        (corrupted, slot)
    }

    /// Draw a corruption of `positive`, resampling up to `max_resample`
    /// times while the result is a known triple. If every retry collides the
    /// last candidate is returned anyway and `exhausted` is incremented.
    pub fn sample(
        &mut self,
        store: &TripleStore,
        positive: &Triple,
        rng: &mut impl Rng,
    ) -> (Triple, CorruptedSlot) {
        let mut last = self.corrupt_once(store, positive, rng);
        if !store.contains(&last.0) {
            return last;
        }
        for _ in 0..self.max_resample {
            last = self.corrupt_once(store, positive, rng);
            if !store.contains(&last.0) {
                return last;
            }
        }
        self.exhausted += 1;
        last
    }
}

impl Default for NegativeSampler {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform draw from `0..n` excluding `not`. Requires `n >= 2`.
fn draw_other(n: u32, not: u32, rng: &mut impl Rng) -> u32 {
    assert!(n >= 2, "cannot draw a replacement from a single-element universe");
    let raw = rng.gen_range(0..n - 1);
    if raw >= not {
        raw + 1
    } else {
        raw
    }
}

// ---------------------------------------------------------------------------
// Task datasets
// ---------------------------------------------------------------------------

/// Train/dev/test fractions. Dev and test sizes are floored; the remainder
/// goes to train.
#[derive(Debug, Clone, Copy)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, dev: f64, test: f64) -> Result<Self, KgError> {
        let sum = train + dev + test;
        if train < 0.0 || dev < 0.0 || test < 0.0 || (sum - 1.0).abs() > 1e-6 {
            return Err(KgError::BadRatios(train, dev, test));
        }
        Ok(SplitRatios { train, dev, test })
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.8, dev: 0.1, test: 0.1 }
    }
}

/// A binary link-prediction task over one relation: labeled entity pairs
/// split three ways, plus the context graph with dev/test edges removed.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub relation: u32,
    pub train: Vec<(u32, u32)>,
    pub dev: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    /// Distinct right-hand entities of the task relation, in first-appearance
    /// order — the ranking candidate pool.
    pub candidate_pool: Vec<u32>,
    /// Full graph minus dev/test task triples. Same id space as the source.
    pub context: TripleStore,
}

impl TaskDataset {
    /// Extract all `(head, tail)` pairs of `relation_name`, shuffle them with
    /// `seed`, split by `ratios` (floored dev/test, remainder to train), and
    /// prune the dev/test edges out of the context graph.
    pub fn build(
        store: &TripleStore,
        relation_name: &str,
        ratios: SplitRatios,
        seed: u64,
    ) -> Result<TaskDataset, KgError> {
        use rand::SeedableRng;
        let relation = store
            .relations
            .id(relation_name)
            .ok_or_else(|| KgError::UnknownRelation(relation_name.to_string()))?;

        let mut pairs: Vec<(u32, u32)> = store
            .context_of_relation(relation)
            .iter()
            .map(|&i| {
                let t = store.triple(i);
                (t.head, t.tail)
            })
            .collect();

        let mut pool = Vec::new();
        let mut seen = HashSet::new();
        for &(_, t) in &pairs {
            if seen.insert(t) {
                pool.push(t);
            }
        }

        let n = pairs.len();
        let dev_n = (n as f64 * ratios.dev).floor() as usize;
        let test_n = (n as f64 * ratios.test).floor() as usize;
        if dev_n + test_n > n {
            return Err(KgError::NotEnoughPairs {
                relation: relation_name.to_string(),
                pairs: n,
                want: dev_n + test_n,
            });
        }

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        pairs.shuffle(&mut rng);

        let train_n = n - dev_n - test_n;
        let train = pairs[..train_n].to_vec();
        let dev = pairs[train_n..train_n + dev_n].to_vec();
        let test = pairs[train_n + dev_n..].to_vec();

        let removed: HashSet<Triple> = dev
            .iter()
            .chain(test.iter())
            .map(|&(h, t)| Triple { head: h, relation, tail: t })
            .collect();
        let context = store.without(&removed);

        Ok(TaskDataset { relation, train, dev, test, candidate_pool: pool, context })
    }
}
