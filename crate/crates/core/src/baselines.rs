//! Translation/factorization baselines: TransE, ComplEx, and RotatE.
//!
//! Each baseline exposes two scoring routes that must agree: a plain-number
//! scorer used for ranking (no graph construction), and a differentiable
//! batch scorer used for training. Training pairs every positive with one
//! corrupted negative under a logistic loss,
//! `softplus(-score(pos)) + softplus(score(neg))`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{NegativeSampler, TaskDataset, Triple, TripleStore};
use crate::optim::{Adam, WarmupSchedule};
use crate::tensor::{
    add, backprop, cos_elem, gather_rows, matmul, mean_all, mul, neg, sin_elem, softplus,
    sqrt_elem, sub, Result, Tensor,
};
use crate::train::{LogRow, TrainConfig, TrainOutcome};

/// Baseline entity-embedding deviation at initialization.
pub const BASELINE_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Score `-‖h + r - t‖₂` over real vectors.
    TransE,
    /// Score `Re(Σ h ∘ r ∘ conj(t))` over complex vectors.
    ComplEx,
    /// Score `-‖h ∘ r - t‖₂` with unit-modulus complex rotations.
    RotatE,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::TransE => "transe",
            BaselineKind::ComplEx => "complex",
            BaselineKind::RotatE => "rotate",
        }
    }

    pub fn parse(s: &str) -> Option<BaselineKind> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Some(BaselineKind::TransE),
            "complex" => Some(BaselineKind::ComplEx),
            "rotate" => Some(BaselineKind::RotatE),
            _ => None,
        }
    }
}

pub struct Baseline {
    pub kind: BaselineKind,
    pub dim: usize,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Baseline {
    pub fn new(
        kind: BaselineKind,
        dim: usize,
        n_entities: usize,
        n_relations: usize,
        rng: &mut impl Rng,
    ) -> Baseline {
        let mut b = Baseline { kind, dim, names: Vec::new(), tensors: Vec::new() };
        match kind {
            BaselineKind::TransE => {
                b.push("entity", Tensor::randn(&[n_entities, dim], BASELINE_INIT_STD, rng));
                b.push("relation", Tensor::randn(&[n_relations, dim], BASELINE_INIT_STD, rng));
            }
            BaselineKind::ComplEx => {
                b.push("entity_re", Tensor::randn(&[n_entities, dim], BASELINE_INIT_STD, rng));
                b.push("entity_im", Tensor::randn(&[n_entities, dim], BASELINE_INIT_STD, rng));
                b.push("relation_re", Tensor::randn(&[n_relations, dim], BASELINE_INIT_STD, rng));
                b.push("relation_im", Tensor::randn(&[n_relations, dim], BASELINE_INIT_STD, rng));
            }
            BaselineKind::RotatE => {
                b.push("entity_re", Tensor::randn(&[n_entities, dim], BASELINE_INIT_STD, rng));
                b.push("entity_im", Tensor::randn(&[n_entities, dim], BASELINE_INIT_STD, rng));
                // Rotation phases start uniform over the full circle.
                let phases: Vec<f64> =
                    (0..n_relations * dim).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
                b.push("relation_phase", Tensor::from_vec(&[n_relations, dim], phases, true));
            }
        }
        b
    }

    fn push(&mut self, name: &str, t: Tensor) {
        self.names.push(name.to_string());
        self.tensors.push(t);
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.tensors.clone()
    }

    pub fn param(&self, name: &str) -> &Tensor {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter {name:?}"));
        &self.tensors[idx]
    }

    /// Number of entities the embedding tables cover.
    pub fn n_entities(&self) -> usize {
        let table = match self.kind {
            BaselineKind::TransE => "entity",
            BaselineKind::ComplEx | BaselineKind::RotatE => "entity_re",
        };
        self.param(table).shape()[0]
    }

    /// Number of relations the embedding tables cover.
    pub fn n_relations(&self) -> usize {
        let table = match self.kind {
            BaselineKind::TransE => "relation",
            BaselineKind::ComplEx => "relation_re",
            BaselineKind::RotatE => "relation_phase",
        };
        self.param(table).shape()[0]
    }

    /// Snapshot the tables into a plain scorer for ranking loops.
    pub fn scorer(&self) -> BaselineScorer {
        BaselineScorer {
            kind: self.kind,
            dim: self.dim,
            tables: self.tensors.iter().map(|t| t.values()).collect(),
        }
    }

    /// Differentiable scores `[n, 1]` for a batch of triples.
    pub fn graph_scores(&self, triples: &[Triple]) -> Result<Tensor> {
        let heads: Vec<usize> = triples.iter().map(|t| t.head as usize).collect();
        let rels: Vec<usize> = triples.iter().map(|t| t.relation as usize).collect();
        let tails: Vec<usize> = triples.iter().map(|t| t.tail as usize).collect();
        let ones = Tensor::constant(&[self.dim, 1], vec![1.0; self.dim]);
        match self.kind {
            BaselineKind::TransE => {
                let h = gather_rows(self.param("entity"), &heads)?;
                let r = gather_rows(self.param("relation"), &rels)?;
                let t = gather_rows(self.param("entity"), &tails)?;
                let diff = sub(&add(&h, &r)?, &t)?;
                let sq = matmul(&mul(&diff, &diff)?, &ones)?;
                Ok(neg(&sqrt_elem(&sq)))
            }
            BaselineKind::ComplEx => {
                let hr = gather_rows(self.param("entity_re"), &heads)?;
                let hi = gather_rows(self.param("entity_im"), &heads)?;
                let rr = gather_rows(self.param("relation_re"), &rels)?;
                let ri = gather_rows(self.param("relation_im"), &rels)?;
                let tr = gather_rows(self.param("entity_re"), &tails)?;
                let ti = gather_rows(self.param("entity_im"), &tails)?;
                // Re(h·r·conj(t)) = (hr·rr - hi·ri)·tr + (hr·ri + hi·rr)·ti
                let prod_re = sub(&mul(&hr, &rr)?, &mul(&hi, &ri)?)?;
                let prod_im = add(&mul(&hr, &ri)?, &mul(&hi, &rr)?)?;
                let terms = add(&mul(&prod_re, &tr)?, &mul(&prod_im, &ti)?)?;
                matmul(&terms, &ones)
            }
            BaselineKind::RotatE => {
                let hr = gather_rows(self.param("entity_re"), &heads)?;
                let hi = gather_rows(self.param("entity_im"), &heads)?;
                let phase = gather_rows(self.param("relation_phase"), &rels)?;
                let tr = gather_rows(self.param("entity_re"), &tails)?;
                let ti = gather_rows(self.param("entity_im"), &tails)?;
                let c = cos_elem(&phase);
                let s = sin_elem(&phase);
                // (hr + i·hi)(cos + i·sin) = (hr·c - hi·s) + i(hr·s + hi·c)
                let rot_re = sub(&mul(&hr, &c)?, &mul(&hi, &s)?)?;
                let rot_im = add(&mul(&hr, &s)?, &mul(&hi, &c)?)?;
                let dre = sub(&rot_re, &tr)?;
                let dim_ = sub(&rot_im, &ti)?;
                let sq = add(&mul(&dre, &dre)?, &mul(&dim_, &dim_)?)?;
                let norm = sqrt_elem(&matmul(&sq, &ones)?);
                Ok(neg(&norm))
            }
        }
    }

    /// Logistic loss over a positive/negative batch pair.
    pub fn batch_loss(&self, positives: &[Triple], negatives: &[Triple]) -> Result<Tensor> {
        let pos = self.graph_scores(positives)?;
        let neg_scores = self.graph_scores(negatives)?;
        let loss_terms = add(&softplus(&neg(&pos)), &softplus(&neg_scores))?;
        mean_all(&loss_terms)
    }
}

/// Immutable table snapshot with direct-arithmetic scoring.
pub struct BaselineScorer {
    kind: BaselineKind,
    dim: usize,
    tables: Vec<Vec<f64>>,
}

impl BaselineScorer {
    fn row<'a>(&'a self, table: usize, idx: u32) -> &'a [f64] {
        let d = self.dim;
        &self.tables[table][idx as usize * d..(idx as usize + 1) * d]
    }

    pub fn score(&self, t: Triple) -> f64 {
        match self.kind {
            BaselineKind::TransE => {
                let (h, r, tt) = (self.row(0, t.head), self.row(1, t.relation), self.row(0, t.tail));
                let mut acc = 0.0;
                for k in 0..self.dim {
                    let d = h[k] + r[k] - tt[k];
                    acc += d * d;
                }
                -acc.sqrt()
            }
            BaselineKind::ComplEx => {
                let hr = self.row(0, t.head);
                let hi = self.row(1, t.head);
                let rr = self.row(2, t.relation);
                let ri = self.row(3, t.relation);
                let tr = self.row(0, t.tail);
                let ti = self.row(1, t.tail);
                let mut acc = 0.0;
                for k in 0..self.dim {
                    acc += (hr[k] * rr[k] - hi[k] * ri[k]) * tr[k]
                        + (hr[k] * ri[k] + hi[k] * rr[k]) * ti[k];
                }
                acc
            }
            BaselineKind::RotatE => {
                let hr = self.row(0, t.head);
                let hi = self.row(1, t.head);
                let phase = self.row(2, t.relation);
                let tr = self.row(0, t.tail);
                let ti = self.row(1, t.tail);
                let mut acc = 0.0;
                for k in 0..self.dim {
                    let (s, c) = phase[k].sin_cos();
                    let re = hr[k] * c - hi[k] * s - tr[k];
                    let im = hr[k] * s + hi[k] * c - ti[k];
                    acc += re * re + im * im;
                }
                -acc.sqrt()
            }
        }
    }
}

/// Train a baseline on every triple of `store` with 1:1 filtered negatives.
pub fn train_baseline(
    baseline: &Baseline,
    store: &TripleStore,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let positives: Vec<Triple> = store.triples().to_vec();
    train_on(baseline, store, &positives, NegativeSampler::new(), cfg)
}

/// Continue training a baseline on a task's train pairs, corrupting tails.
pub fn finetune_baseline(
    baseline: &Baseline,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let positives = crate::train::task_triples(dataset, &dataset.train);
    let sampler = NegativeSampler::with_slot_probs(0.0, 1.0, 0.0);
    train_on(baseline, &dataset.context, &positives, sampler, cfg)
}

fn train_on(
    baseline: &Baseline,
    store: &TripleStore,
    positives: &[Triple],
    mut sampler: NegativeSampler,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(baseline.param_tensors(), WarmupSchedule::new(cfg.lr, cfg.warmup));
    let mut rows = Vec::new();
    let mut order: Vec<usize> = (0..positives.len()).collect();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let pos: Vec<Triple> = chunk.iter().map(|&i| positives[i]).collect();
            let negs: Vec<Triple> =
                pos.iter().map(|p| sampler.sample(store, p, &mut rng).0).collect();
            let loss = baseline.batch_loss(&pos, &negs)?;
            backprop(&loss)?;
            let loss_val = loss.scalar();
            let lr = adam.step();
            rows.push(LogRow { step: adam.step_count(), loss: loss_val, lr });
        }
    }
    Ok(TrainOutcome {
        rows,
        steps: adam.step_count(),
        epochs_run,
        probes: Vec::new(),
        negatives_exhausted: sampler.exhausted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::full_precision;
    use std::io::Cursor;

    fn store3() -> TripleStore {
        TripleStore::from_tsv(Cursor::new("a\tr0\tb\nb\tr1\tc\nc\tr0\ta\n")).unwrap()
    }

    fn set_rows(t: &Tensor, rows: &[&[f64]]) {
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        t.set_values(&flat);
    }

    #[test]
    fn transe_hand_value() {
        // h = (0.1, 0.1), r = (0.3, 0.0), t = (0.1, 0.5):
        // h + r - t = (0.3, -0.4), so the score is -0.5.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = Baseline::new(BaselineKind::TransE, 2, 3, 2, &mut rng);
        set_rows(b.param("entity"), &[&[0.1, 0.1], &[0.1, 0.5], &[0.0, 0.0]]);
        set_rows(b.param("relation"), &[&[0.3, 0.0], &[0.0, 0.0]]);
        let s = b.scorer().score(Triple { head: 0, relation: 0, tail: 1 });
        assert!((s + 0.5).abs() < 1e-6, "got {s}");
    }

    #[test]
    fn complex_hand_value() {
        // h = 1+2i, r = 0.5-1i, t = 2+1i:
        // h·r = 2.5+0i, Re((2.5)(conj(2+1i))) = Re(5 - 2.5i) = 5.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Baseline::new(BaselineKind::ComplEx, 1, 2, 1, &mut rng);
        set_rows(b.param("entity_re"), &[&[1.0], &[2.0]]);
        set_rows(b.param("entity_im"), &[&[2.0], &[1.0]]);
        set_rows(b.param("relation_re"), &[&[0.5]]);
        set_rows(b.param("relation_im"), &[&[-1.0]]);
        let s = b.scorer().score(Triple { head: 0, relation: 0, tail: 1 });
        assert!((s - 5.0).abs() < 1e-6, "got {s}");
    }

    #[test]
    fn rotate_hand_values() {
        // h = 1+0i rotated by π/2 is 0+1i. Against t = 0+1i the distance is
        // 0; against t = 1+0i it is √2.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Baseline::new(BaselineKind::RotatE, 1, 3, 1, &mut rng);
        set_rows(b.param("entity_re"), &[&[1.0], &[0.0], &[1.0]]);
        set_rows(b.param("entity_im"), &[&[0.0], &[1.0], &[0.0]]);
        set_rows(b.param("relation_phase"), &[&[std::f64::consts::FRAC_PI_2]]);
        let scorer = b.scorer();
        let aligned = scorer.score(Triple { head: 0, relation: 0, tail: 1 });
        assert!(aligned.abs() < 1e-6, "got {aligned}");
        let misaligned = scorer.score(Triple { head: 0, relation: 0, tail: 2 });
        assert!((misaligned + 2.0f64.sqrt()).abs() < 1e-6, "got {misaligned}");
    }

    #[test]
    fn rotate_rotation_preserves_modulus() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = Baseline::new(BaselineKind::RotatE, 4, 5, 3, &mut rng);
        let scorer = b.scorer();
        // ‖h∘r‖ per coordinate equals ‖h‖: check via score against the zero
        // entity... instead check directly on the snapshot.
        let hr = scorer.row(0, 1).to_vec();
        let hi = scorer.row(1, 1).to_vec();
        let ph = scorer.row(2, 2).to_vec();
        for k in 0..4 {
            let (s, c) = ph[k].sin_cos();
            let re = hr[k] * c - hi[k] * s;
            let im = hr[k] * s + hi[k] * c;
            let before = (hr[k] * hr[k] + hi[k] * hi[k]).sqrt();
            let after = (re * re + im * im).sqrt();
            assert!((before - after).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_scores_agree_with_plain_scorer() {
        let store = store3();
        let triples: Vec<Triple> = store.triples().to_vec();
        for kind in [BaselineKind::TransE, BaselineKind::ComplEx, BaselineKind::RotatE] {
            // Full precision removes the storage rounding between the two
            // routes so they must agree to double accuracy.
            full_precision(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let b = Baseline::new(kind, 6, store.entity_count(), store.relation_count(), &mut rng);
                let graph = b.graph_scores(&triples).unwrap();
                let scorer = b.scorer();
                for (i, &t) in triples.iter().enumerate() {
                    let direct = scorer.score(t);
                    let via_graph = graph.value_at(i);
                    assert!(
                        (direct - via_graph).abs() < 1e-9,
                        "{:?} triple {i}: {direct} vs {via_graph}",
                        kind
                    );
                }
            });
        }
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let store = store3();
        let triples: Vec<Triple> = store.triples().to_vec();
        for kind in [BaselineKind::TransE, BaselineKind::ComplEx, BaselineKind::RotatE] {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let b = Baseline::new(kind, 3, store.entity_count(), store.relation_count(), &mut rng);
            let pos = vec![triples[0], triples[1]];
            let negs = vec![triples[2], triples[0]];
            // Parameter handles share storage with the model, so the checker
            // can perturb them while the closure owns the model itself.
            let params = b.params();
            let f = move || b.batch_loss(&pos, &negs);
            let report =
                crate::gradcheck::grad_check(&f, &params, crate::gradcheck::DEFAULT_STEP).unwrap();
            assert!(
                report.passes(1e-3),
                "{kind:?}: max rel error {} at {}[{}]",
                report.max_rel_error,
                report.worst_param,
                report.worst_index
            );
        }
    }

    #[test]
    fn training_lowers_baseline_loss() {
        // A perfect translation structure: a_i + r = b_i is exactly
        // representable, unlike cyclic graphs where TransE provably stalls.
        let mut tsv = String::new();
        for i in 0..8 {
            tsv.push_str(&format!("a{i}\tmaps_to\tb{i}\n"));
        }
        let store = TripleStore::from_tsv(Cursor::new(tsv)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = Baseline::new(BaselineKind::TransE, 8, store.entity_count(), store.relation_count(), &mut rng);
        let cfg = TrainConfig {
            lr: 1e-2,
            warmup: 5,
            batch_size: 8,
            epochs: 400,
            seed: 8,
            target_accuracy: None,
            check_every: 1,
        };
        let out = train_baseline(&b, &store, &cfg).unwrap();
        let first = out.rows[0].loss;
        let last = out.rows.last().unwrap().loss;
        // A distance scorer never exceeds score 0, so the positive half of
        // the loss is bounded below by ln 2 and the whole loss by ~0.693.
        assert!(last < 0.9, "loss {first:.4} -> {last:.4}");
    }
}
