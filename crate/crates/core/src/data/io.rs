//! On-disk dataset layout for a base path `<name>`:
//!
//! * `<name>.header.json`: vocabulary, object classes, embedding dim, split
//! * `<name>.jsonl`: one image record per line, pairs in global order
//! * `<name>.emb`: `"RMEB"`, u32 LE version (1), u32 LE dim, u64 LE count,
//!   then `count * dim` f32 LE values
//! * `<name>.oracle.jsonl`: optional hidden labels, one line per pair

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, ImageRecord, OracleLabels, Split};
use crate::error::{Error, Result};
use crate::taxonomy::RelationVocabulary;

const EMB_MAGIC: &[u8; 4] = b"RMEB";
const EMB_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub header: PathBuf,
    pub body: PathBuf,
    pub embeddings: PathBuf,
    pub oracle: PathBuf,
}

pub fn dataset_paths(base: &Path) -> DatasetPaths {
    let with = |suffix: &str| {
        let mut s = OsString::from(base.as_os_str());
        s.push(suffix);
        PathBuf::from(s)
    };
    DatasetPaths {
        header: with(".header.json"),
        body: with(".jsonl"),
        embeddings: with(".emb"),
        oracle: with(".oracle.jsonl"),
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    vocabulary: RelationVocabulary,
    object_classes: Vec<String>,
    embedding_dim: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct OracleLine {
    image_id: String,
    pair_index: usize,
    true_explicit: usize,
    true_implicit: usize,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

pub fn load_dataset(base: impl AsRef<Path>) -> Result<Dataset> {
    let paths = dataset_paths(base.as_ref());

    let header: Header = serde_json::from_reader(BufReader::new(open(&paths.header)?))
        .map_err(|e| Error::json(paths.header.display().to_string(), e))?;

    let mut images = Vec::new();
    for (n, line) in BufReader::new(open(&paths.body)?).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", paths.body.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let image: ImageRecord = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{} line {}", paths.body.display(), n + 1), e))?;
        images.push(image);
    }

    let (dim, values) = read_embeddings(&paths.embeddings)?;
    if dim != header.embedding_dim {
        return Err(Error::Dataset(format!(
            "embedding dim mismatch: header says {}, sidecar has {dim}",
            header.embedding_dim
        )));
    }
    let total_pairs: usize = images.iter().map(|i| i.pairs.len()).sum();
    let count = if dim == 0 { 0 } else { values.len() / dim };
    if count != total_pairs {
        return Err(Error::Dataset(format!(
            "embedding count mismatch: {count} vectors for {total_pairs} pairs"
        )));
    }
    let mut chunks = values.chunks_exact(dim.max(1));
    for pair in images.iter_mut().flat_map(|i| i.pairs.iter_mut()) {
        pair.embedding = if dim == 0 {
            Vec::new()
        } else {
            chunks.next().expect("count checked").to_vec()
        };
    }

    if paths.oracle.exists() {
        let mut by_key = HashMap::new();
        for (n, line) in BufReader::new(open(&paths.oracle)?).lines().enumerate() {
            let line =
                line.map_err(|e| Error::io(format!("reading {}", paths.oracle.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let o: OracleLine = serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{} line {}", paths.oracle.display(), n + 1), e))?;
            by_key.insert(
                (o.image_id, o.pair_index),
                OracleLabels {
                    true_explicit: o.true_explicit,
                    true_implicit: o.true_implicit,
                },
            );
        }
        for image in &mut images {
            for (k, pair) in image.pairs.iter_mut().enumerate() {
                pair.oracle = by_key.remove(&(image.image_id.clone(), k));
            }
        }
        if let Some(((id, k), _)) = by_key.into_iter().next() {
            return Err(Error::Dataset(format!(
                "oracle entry for unknown pair ({id:?}, {k})"
            )));
        }
    }

    let dataset = Dataset {
        vocabulary: header.vocabulary,
        object_class_names: header.object_classes,
        embedding_dim: header.embedding_dim,
        images,
        split: header.split,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn read_embeddings(path: &Path) -> Result<(usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 20 || &bytes[..4] != EMB_MAGIC {
        return Err(Error::Dataset(format!(
            "{} is not an embedding sidecar",
            path.display()
        )));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != EMB_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported embedding sidecar version {version}"
        )));
    }
    let dim = u32_at(8) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let payload = &bytes[20..];
    if payload.len() != count * dim * 4 {
        return Err(Error::Dataset(format!(
            "embedding count mismatch: header declares {count} x {dim}, payload has {} bytes",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dim, values))
}

pub fn save_dataset(dataset: &Dataset, base: impl AsRef<Path>) -> Result<()> {
    let paths = dataset_paths(base.as_ref());
    let io_err = |p: &Path| {
        let p = p.display().to_string();
        move |e| Error::io(format!("writing {p}"), e)
    };

    let header = Header {
        vocabulary: dataset.vocabulary.clone(),
        object_classes: dataset.object_class_names.clone(),
        embedding_dim: dataset.embedding_dim,
        split: dataset.split,
    };
    let mut w = create(&paths.header)?;
    serde_json::to_writer_pretty(&mut w, &header)
        .map_err(|e| Error::json(paths.header.display().to_string(), e))?;
    w.write_all(b"\n").map_err(io_err(&paths.header))?;
    w.flush().map_err(io_err(&paths.header))?;

    let mut w = create(&paths.body)?;
    for image in &dataset.images {
        serde_json::to_writer(&mut w, image)
            .map_err(|e| Error::json(paths.body.display().to_string(), e))?;
        w.write_all(b"\n").map_err(io_err(&paths.body))?;
    }
    w.flush().map_err(io_err(&paths.body))?;

    let mut w = create(&paths.embeddings)?;
    let count = dataset.num_pairs() as u64;
    let mut buf = Vec::with_capacity(20 + dataset.num_pairs() * dataset.embedding_dim * 4);
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&EMB_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.embedding_dim as u32).to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for pair in dataset.images.iter().flat_map(|i| &i.pairs) {
        for v in &pair.embedding {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io_err(&paths.embeddings))?;
    w.flush().map_err(io_err(&paths.embeddings))?;

    if dataset.has_oracle() {
        let mut w = create(&paths.oracle)?;
        for image in &dataset.images {
            for (k, pair) in image.pairs.iter().enumerate() {
                if let Some(o) = pair.oracle {
                    let line = OracleLine {
                        image_id: image.image_id.clone(),
                        pair_index: k,
                        true_explicit: o.true_explicit,
                        true_implicit: o.true_implicit,
                    };
                    serde_json::to_writer(&mut w, &line)
                        .map_err(|e| Error::json(paths.oracle.display().to_string(), e))?;
                    w.write_all(b"\n").map_err(io_err(&paths.oracle))?;
                }
            }
        }
        w.flush().map_err(io_err(&paths.oracle))?;
    } else if paths.oracle.exists() {
        fs::remove_file(&paths.oracle).map_err(io_err(&paths.oracle))?;
    }
    Ok(())
}
