//! Synthetic graph generators used by tests, benchmarks, and the docs.
//!
//! * [`toy_graph`] — a small group-structured graph that a toy-sized model
//!   can overfit in seconds.
//! * [`write_wn_scale_tsv`] — a WordNet-shaped corpus matching the entity,
//!   relation, and per-relation triple counts of the full-scale setup.
//! * [`write_mini_tsv`] — a 500-triple miniature with the same shape, small
//!   enough to check in as a fixture.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{Triple, TripleStore};

/// Entities in the toy graph sit at integer positions on a line; relation
/// `r` connects position `p` to position `p + r + 1` with no wraparound, so
/// the relation is recoverable from the positional hop alone while the exact
/// edge set must be memorized.
pub const TOY_ENTITIES: usize = 30;
pub const TOY_RELATIONS: usize = 5;
pub const TOY_TRIPLES_PER_RELATION: usize = 20;

/// Degree bound on toy entities. Kept at the toy preset's context capacity
/// so every entity's incident-edge context fits whole — an entity's identity
/// is then a complete, deterministic edge fingerprint rather than a random
/// subsample, which is what makes the graph overfittable to ~100% accuracy.
pub const TOY_MAX_DEGREE: usize = 8;

/// Deterministic small graph: 30 entities on a line, 5 relations, about 100
/// triples. Three structural guarantees make it a fair fixture for every
/// model family trained on it:
///
/// * every entity has degree in `2..=TOY_MAX_DEGREE`, so no entity is
///   invisible once its target edge is hidden and no context region ever
///   overflows the toy capacity;
/// * relation `r` always advances a position by `r + 1` and positions never
///   wrap, so placing entity `p` at `p·u` and relation `r` at `(r+1)·u`
///   satisfies every edge at once — a translation embedding `h + r ≈ t`
///   can represent the edge set with no contradictory cycles (a wrapping
///   pattern would instead force every relation vector toward zero, since
///   composing it around the cycle must return to the start);
/// * within a relation heads are distinct and tails are distinct, so the
///   edge set is an injective partial map and exact edges must be memorized
///   rather than read off positions.
pub fn toy_graph(seed: u64) -> TripleStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_entities = TOY_ENTITIES;

    // Rejection sampling under all the constraints can corner itself;
    // rebuild from scratch on deadlock (rare).
    'attempt: loop {
        let mut store = TripleStore::new();
        for e in 0..n_entities {
            store.entities.intern(&format!("ent{e:02}"));
        }
        for r in 0..TOY_RELATIONS {
            store.relations.intern(&format!("rel{r}"));
        }
        let mut degree = vec![0usize; n_entities];
        let mut head_used = vec![[false; TOY_RELATIONS]; n_entities];
        let mut tail_used = vec![[false; TOY_RELATIONS]; n_entities];
        let mut tries = 0usize;

        let place = |r: usize,
                     head: usize,
                     tail: usize,
                     store: &mut TripleStore,
                     degree: &mut Vec<usize>,
                     head_used: &mut Vec<[bool; TOY_RELATIONS]>,
                     tail_used: &mut Vec<[bool; TOY_RELATIONS]>|
         -> bool {
            if degree[head] >= TOY_MAX_DEGREE
                || degree[tail] >= TOY_MAX_DEGREE
                || head_used[head][r]
                || tail_used[tail][r]
            {
                return false;
            }
            let triple = Triple { head: head as u32, relation: r as u32, tail: tail as u32 };
            if !store.insert(triple) {
                return false;
            }
            degree[head] += 1;
            degree[tail] += 1;
            head_used[head][r] = true;
            tail_used[tail][r] = true;
            true
        };

        for r in 0..TOY_RELATIONS {
            let offset = r + 1;
            let mut placed = 0;
            while placed < TOY_TRIPLES_PER_RELATION {
                tries += 1;
                if tries > 100_000 {
                    continue 'attempt;
                }
                let head = rng.gen_range(0..n_entities - offset);
                let tail = head + offset;
                if place(r, head, tail, &mut store, &mut degree, &mut head_used, &mut tail_used) {
                    placed += 1;
                }
            }
        }

        // Degree fixup: every entity must keep at least one incident edge
        // after any single edge is hidden, i.e. degree >= 2. Entities at the
        // start of the line can only ever head an edge and those at the end,
        // only tail one, so try the entity in both roles.
        while let Some(entity) = (0..n_entities).find(|&e| degree[e] < 2) {
            tries += 1;
            if tries > 100_000 {
                continue 'attempt;
            }
            let r = rng.gen_range(0..TOY_RELATIONS);
            let offset = r + 1;
            let partner =
                if rng.gen_bool(0.5) { entity.checked_add(offset) } else { entity.checked_sub(offset) };
            let Some(p) = partner.filter(|&p| p < n_entities) else { continue };
            let (head, tail) = if p > entity { (entity, p) } else { (p, entity) };
            place(r, head, tail, &mut store, &mut degree, &mut head_used, &mut tail_used);
        }
        return store;
    }
}

/// Per-relation layout of the WordNet-shaped corpora. The first two
/// relations carry the two downstream tasks.
const WN_RELATION_NAMES: [&str; 26] = [
    "_hypernym",
    "_similar_to",
    "_derivationally_related_form",
    "_hyponym",
    "_member_meronym",
    "_member_holonym",
    "_part_of",
    "_has_part",
    "_member_of_domain_topic",
    "_synset_domain_topic_of",
    "_instance_hypernym",
    "_instance_hyponym",
    "_also_see",
    "_verb_group",
    "_member_of_domain_region",
    "_synset_domain_region_of",
    "_member_of_domain_usage",
    "_synset_domain_usage_of",
    "_attribute",
    "_entailment",
    "_cause",
    "_substance_meronym",
    "_substance_holonym",
    "_participle_of",
    "_pertainym",
    "_antonym",
];

/// Shape of the generated full-scale corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WnScaleStats {
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub hypernym_triples: usize,
    pub similar_to_triples: usize,
}

pub const WN_SCALE: WnScaleStats = WnScaleStats {
    entities: 116_377,
    relations: 26,
    triples: 377_592,
    hypernym_triples: 89_089,
    similar_to_triples: 21_386,
};

/// Split ratios that carve the `_hypernym` task into 72,076 / 8,431 / 8,582
/// pairs under floor rounding.
pub const WN_HYPERNYM_RATIOS: (f64, f64, f64) = (0.80902, 0.09464, 0.09634);

/// Split ratios that carve the `_similar_to` task into 17,725 / 1,805 /
/// 1,856 pairs under floor rounding.
pub const WN_SIMILAR_RATIOS: (f64, f64, f64) = (0.82877, 0.08442, 0.08681);

fn entity_name(id: usize) -> String {
    format!("{id:08}")
}

/// Stream the full-scale corpus as TSV. Every triple is unique by
/// construction: within a relation heads are distinct (or the relation is a
/// single full cycle), and relations differ across blocks.
pub fn write_wn_scale_tsv(w: &mut impl Write) -> io::Result<WnScaleStats> {
    let e = WN_SCALE.entities;
    let mut written = 0usize;

    // Task relation 1: distinct heads, tails scattered by an affine map.
    for j in 0..WN_SCALE.hypernym_triples {
        writeln!(
            w,
            "{}\t{}\t{}",
            entity_name(j),
            WN_RELATION_NAMES[0],
            entity_name((31 * j + 17) % e)
        )?;
        written += 1;
    }
    // Task relation 2.
    for j in 0..WN_SCALE.similar_to_triples {
        writeln!(
            w,
            "{}\t{}\t{}",
            entity_name(j),
            WN_RELATION_NAMES[1],
            entity_name((47 * j + 5) % e)
        )?;
        written += 1;
    }
    // Coverage relation: one full cycle so every entity appears.
    for k in 0..e {
        writeln!(w, "{}\t{}\t{}", entity_name(k), WN_RELATION_NAMES[2], entity_name((k + 1) % e))?;
        written += 1;
    }
    // Remaining 23 relations share the rest of the triple budget.
    let remaining = WN_SCALE.triples - written;
    let fillers = WN_RELATION_NAMES.len() - 3;
    let base = remaining / fillers;
    let extra = remaining % fillers;
    for (i, name) in WN_RELATION_NAMES[3..].iter().enumerate() {
        let quota = base + usize::from(i < extra);
        let mult = 2 * i + 3; // odd multipliers scatter tails differently per relation
        for j in 0..quota {
            writeln!(w, "{}\t{}\t{}", entity_name(j), name, entity_name((mult * j + i + 1) % e))?;
            written += 1;
        }
    }
    debug_assert_eq!(written, WN_SCALE.triples);
    Ok(WN_SCALE)
}

/// Relation layout of the 500-triple miniature fixture.
pub const MINI_RELATION_QUOTAS: [(&str, usize); 8] = [
    ("_hypernym", 150),
    ("_similar_to", 60),
    ("_member_meronym", 60),
    ("_part_of", 55),
    ("_derivationally_related_form", 50),
    ("_also_see", 45),
    ("_verb_group", 40),
    ("_instance_hypernym", 40),
];

pub const MINI_ENTITY_COUNT: usize = 260;
pub const MINI_TRIPLE_COUNT: usize = 500;

/// Write the deterministic 500-triple miniature. Shuffled with a fixed seed
/// so relations interleave like a real dump rather than arriving in blocks.
pub fn write_mini_tsv(w: &mut impl Write) -> io::Result<()> {
    let e = MINI_ENTITY_COUNT;
    let mut lines = Vec::with_capacity(MINI_TRIPLE_COUNT);
    for (i, (name, quota)) in MINI_RELATION_QUOTAS.iter().enumerate() {
        let mult = 2 * i + 3;
        for j in 0..*quota {
            let head = (j + 11 * i) % e;
            let mut tail = (mult * j + 7 * i + 1) % e;
            if tail == head {
                tail = (tail + 1) % e;
            }
            lines.push(format!("{}\t{}\t{}", entity_name(head), name, entity_name(tail)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    lines.shuffle(&mut rng);
    for line in lines {
        writeln!(w, "{line}")?;
    }
    Ok(())
}
