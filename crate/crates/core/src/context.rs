//! Contextual sequence assembly.
//!
//! Every triple to be scored is expanded into a fixed-length slot sequence:
//!
//! ```text
//! [AGG] [HEA] h-ctx ×cap [REL] r-ctx ×cap [TAI] t-ctx ×cap
//! ```
//!
//! The head and tail context slots hold triples incident to those entities,
//! the relation context slots hold triples sharing the relation, and unused
//! slots are padding. Slot order carries no meaning — the aggregator downstream
//! uses no positional signal — but each slot carries a segment id so the model
//! can tell which anchor a context belongs to.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::kg::{Triple, TripleStore};

/// Segment ids, one per anchor region.
pub const SEG_AGG: u8 = 0;
pub const SEG_HEAD: u8 = 1;
pub const SEG_REL: u8 = 2;
pub const SEG_TAIL: u8 = 3;
pub const SEGMENT_COUNT: usize = 4;

/// Marker-table rows for the non-context slots.
pub const MARKER_AGG: usize = 0;
pub const MARKER_HEAD: usize = 1;
pub const MARKER_REL: usize = 2;
pub const MARKER_TAIL: usize = 3;
pub const MARKER_PAD: usize = 4;
pub const MARKER_COUNT: usize = 5;

/// One slot of an assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Agg,
    HeadMarker,
    RelationMarker,
    TailMarker,
    /// A sampled context triple.
    Context(Triple),
    Pad,
}

impl Slot {
    /// Row in the marker embedding table, or `None` for context slots.
    pub fn marker_id(&self) -> Option<usize> {
        match self {
            Slot::Agg => Some(MARKER_AGG),
            Slot::HeadMarker => Some(MARKER_HEAD),
            Slot::RelationMarker => Some(MARKER_REL),
            Slot::TailMarker => Some(MARKER_TAIL),
            Slot::Pad => Some(MARKER_PAD),
            Slot::Context(_) => None,
        }
    }

    pub fn is_pad(&self) -> bool {
        matches!(self, Slot::Pad)
    }
}

/// Total slots for a per-segment capacity: 4 anchors + 3 context regions.
pub fn sequence_len(cap: usize) -> usize {
    4 + 3 * cap
}

/// Positions of the four anchor slots for a given capacity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorPositions {
    pub agg: usize,
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

pub fn anchor_positions(cap: usize) -> AnchorPositions {
    AnchorPositions { agg: 0, head: 1, relation: 2 + cap, tail: 3 + 2 * cap }
}

/// A fully assembled input sequence for one triple.
#[derive(Debug, Clone)]
pub struct ContextSequence {
    pub triple: Triple,
    pub slots: Vec<Slot>,
    /// Segment id per slot.
    pub segments: Vec<u8>,
    /// True for slots that carry information (everything but padding).
    pub mask: Vec<bool>,
    pub cap: usize,
}

impl ContextSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn anchors(&self) -> AnchorPositions {
        anchor_positions(self.cap)
    }
}

/// Sample up to `cap` context triples for one anchor, excluding the target
/// triple itself. Small contexts are taken whole in insertion order; larger
/// ones are subsampled without replacement.
fn sample_context(
    store: &TripleStore,
    indices: &[u32],
    exclude: &Triple,
    cap: usize,
    rng: &mut impl Rng,
) -> Vec<Triple> {
    let pool: Vec<Triple> =
        indices.iter().map(|&i| store.triple(i)).filter(|t| t != exclude).collect();
    if pool.len() <= cap {
        pool
    } else {
        pool.choose_multiple(rng, cap).copied().collect()
    }
}

/// Assemble the input sequence for `triple` from `store`'s contexts.
///
/// The target triple never appears in its own context slots, so a stored
/// positive cannot be read back verbatim from its sequence.
pub fn assemble_sequence(
    store: &TripleStore,
    triple: Triple,
    cap: usize,
    rng: &mut impl Rng,
) -> ContextSequence {
    let head_ctx = sample_context(store, store.context_of_entity(triple.head), &triple, cap, rng);
    let rel_ctx =
        sample_context(store, store.context_of_relation(triple.relation), &triple, cap, rng);
    let tail_ctx = sample_context(store, store.context_of_entity(triple.tail), &triple, cap, rng);

    let len = sequence_len(cap);
    let mut slots = Vec::with_capacity(len);
    let mut segments = Vec::with_capacity(len);

    slots.push(Slot::Agg);
    segments.push(SEG_AGG);

    let push_region = |marker: Slot, seg: u8, ctx: &[Triple], slots: &mut Vec<Slot>, segments: &mut Vec<u8>| {
        slots.push(marker);
        segments.push(seg);
        for &t in ctx {
            slots.push(Slot::Context(t));
            segments.push(seg);
        }
        for _ in ctx.len()..cap {
            slots.push(Slot::Pad);
            segments.push(seg);
        }
    };
    push_region(Slot::HeadMarker, SEG_HEAD, &head_ctx, &mut slots, &mut segments);
    push_region(Slot::RelationMarker, SEG_REL, &rel_ctx, &mut slots, &mut segments);
    push_region(Slot::TailMarker, SEG_TAIL, &tail_ctx, &mut slots, &mut segments);

    let mask = slots.iter().map(|s| !s.is_pad()).collect();
    ContextSequence { triple, slots, segments, mask, cap }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;
    use std::io::Cursor;

    fn chain_store(n: usize) -> TripleStore {
        // e0 -r0-> e1 -r1-> e2 -r0-> e3 ... alternating relations.
        let mut tsv = String::new();
        for i in 0..n {
            tsv.push_str(&format!("e{}\tr{}\te{}\n", i, i % 2, i + 1));
        }
        TripleStore::from_tsv(Cursor::new(tsv)).unwrap()
    }

    #[test]
    fn paper_scale_sequence_is_256_slots() {
        assert_eq!(sequence_len(84), 256);
        let a = anchor_positions(84);
        assert_eq!((a.agg, a.head, a.relation, a.tail), (0, 1, 86, 171));
    }

    #[test]
    fn layout_places_anchors_and_segments() {
        let store = chain_store(6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = assemble_sequence(&store, store.triple(2), 4, &mut rng);
        assert_eq!(seq.len(), sequence_len(4));
        let a = seq.anchors();
        assert_eq!(seq.slots[a.agg], Slot::Agg);
        assert_eq!(seq.slots[a.head], Slot::HeadMarker);
        assert_eq!(seq.slots[a.relation], Slot::RelationMarker);
        assert_eq!(seq.slots[a.tail], Slot::TailMarker);
        assert_eq!(seq.segments[a.agg], SEG_AGG);
        for i in a.head..a.relation {
            assert_eq!(seq.segments[i], SEG_HEAD);
        }
        for i in a.relation..a.tail {
            assert_eq!(seq.segments[i], SEG_REL);
        }
        for i in a.tail..seq.len() {
            assert_eq!(seq.segments[i], SEG_TAIL);
        }
    }

    #[test]
    fn context_slots_mention_their_anchor() {
        let store = chain_store(12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let target = store.triple(5);
        let seq = assemble_sequence(&store, target, 6, &mut rng);
        let a = seq.anchors();
        for (i, slot) in seq.slots.iter().enumerate() {
            if let Slot::Context(t) = slot {
                match seq.segments[i] {
                    SEG_HEAD => {
                        assert!(t.head == target.head || t.tail == target.head);
                        assert!(i > a.head && i < a.relation);
                    }
                    SEG_REL => assert_eq!(t.relation, target.relation),
                    SEG_TAIL => assert!(t.head == target.tail || t.tail == target.tail),
                    seg => panic!("context slot in segment {seg}"),
                }
            }
        }
    }

    #[test]
    fn target_triple_never_appears_in_own_sequence() {
        let store = chain_store(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for idx in 0..store.len() as u32 {
            let target = store.triple(idx);
            let seq = assemble_sequence(&store, target, 16, &mut rng);
            for slot in &seq.slots {
                if let Slot::Context(t) = slot {
                    assert_ne!(*t, target, "target leaked into its own context");
                }
            }
        }
    }

    #[test]
    fn mask_marks_exactly_non_pad_slots() {
        let store = chain_store(4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = assemble_sequence(&store, store.triple(0), 8, &mut rng);
        for (slot, &m) in seq.slots.iter().zip(&seq.mask) {
            assert_eq!(m, !slot.is_pad());
        }
        // e0 participates in a single triple (the target itself) so its
        // context region is all padding.
        let a = seq.anchors();
        assert!(seq.slots[a.head + 1..a.relation].iter().all(|s| s.is_pad()));
    }

    #[test]
    fn oversized_contexts_subsample_without_replacement() {
        // A hub entity with 30 incident edges, cap 5.
        let mut tsv = String::new();
        for i in 0..30 {
            tsv.push_str(&format!("hub\tr\tspoke{i}\n"));
        }
        let store = TripleStore::from_tsv(Cursor::new(tsv)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = assemble_sequence(&store, store.triple(0), 5, &mut rng);
        let a = seq.anchors();
        let picked: Vec<Triple> = seq.slots[a.head + 1..a.relation]
            .iter()
            .filter_map(|s| if let Slot::Context(t) = s { Some(*t) } else { None })
            .collect();
        assert_eq!(picked.len(), 5, "head region of a hub must be full");
        let set: HashSet<_> = picked.iter().collect();
        assert_eq!(set.len(), 5, "subsampling must not repeat a triple");
    }

    #[test]
    fn small_contexts_are_taken_whole_in_store_order() {
        let store = chain_store(8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = store.triple(3); // e3 -r1-> e4
        let seq = assemble_sequence(&store, target, 10, &mut rng);
        let a = seq.anchors();
        // e3 touches triples 2 (e2->e3) and 3 (target, excluded).
        match seq.slots[a.head + 1] {
            Slot::Context(t) => assert_eq!(t, store.triple(2)),
            ref s => panic!("expected context, got {s:?}"),
        }
        assert!(seq.slots[a.head + 2].is_pad());
    }

    #[test]
    fn assembly_is_deterministic_for_a_fixed_seed() {
        let store = chain_store(40);
        let target = store.triple(20);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assemble_sequence(&store, target, 3, &mut rng).slots
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn sequence_length_is_invariant_across_triples() {
        let store = chain_store(25);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for cap in [1usize, 4, 8] {
            for idx in [0u32, 5, 24] {
                let seq = assemble_sequence(&store, store.triple(idx), cap, &mut rng);
                assert_eq!(seq.len(), sequence_len(cap));
                assert_eq!(seq.segments.len(), seq.len());
                assert_eq!(seq.mask.len(), seq.len());
            }
        }
    }
}
