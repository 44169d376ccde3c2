//! Artifact plumbing: graph loading, dataset directories, and atomic
//! writers for every file the toolkit produces.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use scop_core::checkpoint::write_atomic;
use scop_core::kg::{TaskDataset, Triple, TripleStore};
use scop_core::synth;
use scop_core::train::LogRow;

/// Load a triple graph from a TSV path, or generate one of the built-in
/// corpora for a `synth:` name (`synth:toy`, `synth:mini`, `synth:wn-all`).
pub fn load_graph(spec: &str, seed: u64) -> Result<TripleStore> {
    match spec {
        "synth:toy" => Ok(synth::toy_graph(seed)),
        "synth:mini" => {
            let mut buf = Vec::new();
            synth::write_mini_tsv(&mut buf)?;
            Ok(TripleStore::from_tsv(buf.as_slice())?)
        }
        "synth:wn-all" => {
            let mut buf = Vec::new();
            synth::write_wn_scale_tsv(&mut buf)?;
            Ok(TripleStore::from_tsv(buf.as_slice())?)
        }
        other if other.starts_with("synth:") => {
            bail!("unknown corpus {other:?} (have synth:toy, synth:mini, synth:wn-all)")
        }
        path => {
            let file =
                fs::File::open(path).with_context(|| format!("opening graph file {path}"))?;
            Ok(TripleStore::from_tsv(BufReader::new(file))?)
        }
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Echo the fully resolved run configuration next to the other artifacts.
pub fn write_run_cfg(dir: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut sorted: Vec<&(String, String)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut text = String::new();
    for (key, value) in sorted {
        text.push_str(&format!("{key} = {value}\n"));
    }
    write_text(&dir.join("run.cfg"), &text)
}

pub fn write_loss_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut text = String::from("step,loss,lr\n");
    for row in rows {
        text.push_str(&format!("{},{},{}\n", row.step, row.loss, row.lr));
    }
    write_text(path, &text)
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn triples_tsv(store: &TripleStore, triples: impl Iterator<Item = Triple>) -> String {
    let mut text = String::new();
    for t in triples {
        text.push_str(&format!(
            "{}\t{}\t{}\n",
            store.entities.name(t.head),
            store.relations.name(t.relation),
            store.entities.name(t.tail),
        ));
    }
    text
}

/// Write a task dataset as a self-contained directory: vocabulary dumps,
/// the pruned context graph, one TSV per split, and the candidate pool.
pub fn write_dataset_dir(dir: &Path, ds: &TaskDataset) -> Result<()> {
    ensure_dir(dir)?;
    let store = &ds.context;

    let mut entities = String::new();
    for id in 0..store.entity_count() as u32 {
        entities.push_str(store.entities.name(id));
        entities.push('\n');
    }
    write_text(&dir.join("entities.txt"), &entities)?;

    let mut relations = String::new();
    for id in 0..store.relation_count() as u32 {
        relations.push_str(store.relations.name(id));
        relations.push('\n');
    }
    write_text(&dir.join("relations.txt"), &relations)?;

    write_text(&dir.join("context.tsv"), &triples_tsv(store, store.triples().iter().copied()))?;

    for (name, pairs) in [("train", &ds.train), ("dev", &ds.dev), ("test", &ds.test)] {
        let triples = pairs
            .iter()
            .map(|&(h, t)| Triple { head: h, relation: ds.relation, tail: t });
        write_text(&dir.join(format!("{name}.tsv")), &triples_tsv(store, triples))?;
    }

    let mut pool = String::new();
    for &id in &ds.candidate_pool {
        pool.push_str(store.entities.name(id));
        pool.push('\n');
    }
    write_text(&dir.join("candidates.txt"), &pool)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn parse_pairs(
    path: &Path,
    store: &TripleStore,
    relation: &mut Option<u32>,
) -> Result<Vec<(u32, u32)>> {
    let mut pairs = Vec::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            bail!("{}:{}: expected 3 tab-separated fields", path.display(), i + 1);
        }
        let head = store
            .entities
            .id(fields[0])
            .with_context(|| format!("{}:{}: unknown entity {:?}", path.display(), i + 1, fields[0]))?;
        let rel = store
            .relations
            .id(fields[1])
            .with_context(|| format!("{}:{}: unknown relation {:?}", path.display(), i + 1, fields[1]))?;
        let tail = store
            .entities
            .id(fields[2])
            .with_context(|| format!("{}:{}: unknown entity {:?}", path.display(), i + 1, fields[2]))?;
        match *relation {
            Some(r) if r != rel => {
                bail!("{}:{}: mixed task relations in one dataset", path.display(), i + 1)
            }
            _ => *relation = Some(rel),
        }
        pairs.push((head, tail));
    }
    Ok(pairs)
}

/// Load a dataset directory produced by [`write_dataset_dir`]. The
/// vocabulary dumps pin the id space, so entities that only occur in
/// held-out pairs keep their ids even though the context graph lacks them.
pub fn load_dataset_dir(dir: &Path) -> Result<TaskDataset> {
    let mut store = TripleStore::new();
    for name in read_lines(&dir.join("entities.txt"))? {
        store.entities.intern(&name);
    }
    for name in read_lines(&dir.join("relations.txt"))? {
        store.relations.intern(&name);
    }

    let ctx_path = dir.join("context.tsv");
    for (i, line) in read_lines(&ctx_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            bail!("{}:{}: expected 3 tab-separated fields", ctx_path.display(), i + 1);
        }
        store.insert_names(fields[0], fields[1], fields[2]);
    }

    let mut relation = None;
    let train = parse_pairs(&dir.join("train.tsv"), &store, &mut relation)?;
    let dev = parse_pairs(&dir.join("dev.tsv"), &store, &mut relation)?;
    let test = parse_pairs(&dir.join("test.tsv"), &store, &mut relation)?;
    let relation = relation
        .ok_or_else(|| anyhow::anyhow!("{}: all split files are empty", dir.display()))?;

    let mut candidate_pool = Vec::new();
    let pool_path = dir.join("candidates.txt");
    for (i, name) in read_lines(&pool_path)?.iter().enumerate() {
        if name.is_empty() {
            continue;
        }
        let id = store
            .entities
            .id(name)
            .with_context(|| format!("{}:{}: unknown entity {name:?}", pool_path.display(), i + 1))?;
        candidate_pool.push(id);
    }

    Ok(TaskDataset { relation, train, dev, test, candidate_pool, context: store })
}

/// Standard artifact paths inside an output directory.
pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("model.ckpt")
}

pub fn loss_path(out: &Path) -> PathBuf {
    out.join("loss.csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use scop_core::kg::SplitRatios;

    #[test]
    fn dataset_directory_round_trips() {
        let store = synth::toy_graph(3);
        let ds = TaskDataset::build(&store, "rel0", SplitRatios::default(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset_dir(dir.path(), &ds).unwrap();
        let back = load_dataset_dir(dir.path()).unwrap();

        assert_eq!(back.relation, ds.relation);
        assert_eq!(back.train, ds.train);
        assert_eq!(back.dev, ds.dev);
        assert_eq!(back.test, ds.test);
        assert_eq!(back.candidate_pool, ds.candidate_pool);
        assert_eq!(back.context.len(), ds.context.len());
        assert_eq!(back.context.entity_count(), ds.context.entity_count());
        for &t in ds.context.triples() {
            assert!(back.context.contains(&t));
        }
    }

    #[test]
    fn synthetic_corpus_names_resolve() {
        assert!(load_graph("synth:toy", 1).is_ok());
        assert!(load_graph("synth:mini", 1).is_ok());
        assert!(load_graph("synth:unknown", 1).is_err());
        assert!(load_graph("/no/such/file.tsv", 1).is_err());
    }
}
