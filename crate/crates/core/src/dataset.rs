//! Dataset catalog: directory scan, blank-image filter, stratified split,
//! index persistence and shuffled mini-batch streaming.
//!
//! Expected layout is `<root>/<class_dir>/<image files>`. Class directories
//! are either numeric (`1`..=`84`) or listed one per line in
//! `<root>/classes.txt`, in which case that order defines the class ids.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::preprocess::{decode_image, load_and_preprocess, to_grayscale, INPUT_SIZE};
use crate::rng::{derive_seed, seeded_rng, streams};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 84;
pub const DEFAULT_VAL_FRACTION: f64 = 0.28;
pub const DEFAULT_BLANK_THRESHOLD: f64 = 0.02;
pub const MANIFEST_FILE: &str = "classes.txt";

const IMAGE_EXTENSIONS: &[&str] = &["png", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub path: PathBuf,
    pub class_id: usize,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
    pub class_names: Vec<String>,
    /// Seed and validation fraction of the split, once one has been made.
    pub split_seed: Option<u64>,
    pub val_fraction: Option<f64>,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for e in &self.entries {
            counts[e.class_id] += 1;
        }
        counts
    }

    pub fn entries_in(&self, split: Split) -> Vec<&IndexEntry> {
        self.entries.iter().filter(|e| e.split == Some(split)).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == Some(split)).count()
    }
}

/// Directory-name ordering: numeric names by value first, then the rest
/// lexically.
fn class_dir_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

fn read_manifest(root: &Path) -> Result<Option<Vec<String>>> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if names.is_empty() {
        return Err(Error::format(&path, "class manifest is empty"));
    }
    Ok(Some(names))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Catalogs every readable image under `root`, unsplit.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    let listing = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            dirs.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if dirs.is_empty() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no class directories"),
        ));
    }

    let class_names = match read_manifest(root)? {
        Some(names) => names,
        None => {
            let mut numeric: Vec<String> = dirs
                .iter()
                .filter(|d| matches!(d.parse::<usize>(), Ok(n) if (1..=NUM_CLASSES).contains(&n)))
                .cloned()
                .collect();
            numeric.sort_by(|a, b| class_dir_order(a, b));
            numeric
        }
    };
    let ids: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();

    dirs.sort_by(|a, b| class_dir_order(a, b));
    let mut entries = Vec::new();
    for dir in &dirs {
        let Some(&class_id) = ids.get(dir.as_str()) else {
            log::warn!("skipping unknown class directory {}", root.join(dir).display());
            continue;
        };
        let dir_path = root.join(dir);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir_path)
            .map_err(|e| Error::io(&dir_path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        files.sort();
        let before = entries.len();
        for path in files {
            let readable = image::ImageReader::open(&path)
                .and_then(|r| r.with_guessed_format())
                .map(|r| r.into_dimensions().is_ok())
                .unwrap_or(false);
            if readable {
                entries.push(IndexEntry {
                    path,
                    class_id,
                    split: None,
                });
            } else {
                log::warn!("skipping undecodable image {}", path.display());
            }
        }
        if entries.len() == before {
            log::warn!("class directory {} has no images", dir_path.display());
        }
    }
    for name in &class_names {
        if !dirs.contains(name) {
            log::warn!("class {name} has no directory under {}", root.display());
        }
    }
    Ok(DatasetIndex {
        entries,
        class_names,
        split_seed: None,
        val_fraction: None,
    })
}

/// Population standard deviation of the grayscale image on a `[0, 1]` scale.
pub fn pixel_std(path: &Path) -> Result<f64> {
    let gray = to_grayscale(&decode_image(path)?)?;
    let n = gray.pixels.len() as f64;
    let mean = gray.pixels.iter().map(|&p| p as f64 / 255.0).sum::<f64>() / n;
    let var = gray.pixels.iter().map(|&p| (p as f64 / 255.0 - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt())
}

/// Drops images whose pixel standard deviation is below `threshold`, plus
/// any that fail to decode. Returns the filtered index and removed paths.
pub fn filter_blank(index: DatasetIndex, threshold: f64) -> Result<(DatasetIndex, Vec<PathBuf>)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Range(format!("blank threshold {threshold} not in (0, 1)")));
    }
    let mut kept = Vec::with_capacity(index.entries.len());
    let mut removed = Vec::new();
    for entry in index.entries {
        match pixel_std(&entry.path) {
            Ok(std) if std >= threshold => kept.push(entry),
            Ok(std) => {
                log::info!("removing blank image {} (std {std:.4})", entry.path.display());
                removed.push(entry.path);
            }
            Err(e) => {
                log::warn!("removing unreadable image: {e}");
                removed.push(entry.path);
            }
        }
    }
    Ok((
        DatasetIndex {
            entries: kept,
            ..index
        },
        removed,
    ))
}

/// Stratified split: within each class, shuffle by seed and send the first
/// `round(val_fraction · n)` entries to validation.
pub fn split(index: DatasetIndex, val_fraction: f64, seed: u64) -> Result<DatasetIndex> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Range(format!("validation fraction {val_fraction} not in [0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); index.num_classes()];
    for (i, e) in index.entries.iter().enumerate() {
        by_class[e.class_id].push(i);
    }
    let mut entries = index.entries;
    for (class_id, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Split(format!(
                "class {} has {} sample; at least 2 are needed to split",
                index.class_names[class_id],
                members.len()
            )));
        }
        members.shuffle(&mut seeded_rng(derive_seed(seed, &[streams::SPLIT, class_id as u64])));
        let n_val = (val_fraction * members.len() as f64).round() as usize;
        for (rank, &i) in members.iter().enumerate() {
            entries[i].split = Some(if rank < n_val { Split::Val } else { Split::Train });
        }
    }
    Ok(DatasetIndex {
        entries,
        class_names: index.class_names,
        split_seed: Some(seed),
        val_fraction: Some(val_fraction),
    })
}

const INDEX_HEADER: &str = "# akhcrnet-index v1";

/// Writes the catalog as UTF-8 text: `#` header lines with the split seed,
/// validation fraction and class names, then one `path\tclass\tsplit` line
/// per entry.
pub fn write_index(index: &DatasetIndex, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "{INDEX_HEADER}")?;
        if let Some(seed) = index.split_seed {
            writeln!(w, "# seed\t{seed}")?;
        }
        if let Some(f) = index.val_fraction {
            writeln!(w, "# val_fraction\t{f}")?;
        }
        for (i, name) in index.class_names.iter().enumerate() {
            writeln!(w, "# class\t{i}\t{name}")?;
        }
        for e in &index.entries {
            let split = e.split.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
            writeln!(w, "{}\t{}\t{split}", e.path.display(), e.class_id)?;
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

pub fn read_index(path: &Path) -> Result<DatasetIndex> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut index = DatasetIndex {
        entries: Vec::new(),
        class_names: Vec::new(),
        split_seed: None,
        val_fraction: None,
    };
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", lineno + 1));
        if lineno == 0 {
            if line != INDEX_HEADER {
                return Err(bad("missing index header"));
            }
            continue;
        }
        if let Some(meta) = line.strip_prefix("# ") {
            let fields: Vec<&str> = meta.split('\t').collect();
            match fields.as_slice() {
                ["seed", v] => index.split_seed = Some(v.parse().map_err(|_| bad("bad seed"))?),
                ["val_fraction", v] => index.val_fraction = Some(v.parse().map_err(|_| bad("bad fraction"))?),
                ["class", i, name] => {
                    let i: usize = i.parse().map_err(|_| bad("bad class id"))?;
                    if i != index.class_names.len() {
                        return Err(bad("class ids out of order"));
                    }
                    index.class_names.push(name.to_string());
                }
                _ => return Err(bad("unknown header line")),
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [p, c, s] = fields.as_slice() else {
            return Err(bad("expected path, class and split"));
        };
        let class_id: usize = c.parse().map_err(|_| bad("bad class id"))?;
        if class_id >= index.class_names.len() {
            return Err(bad("class id without a class name"));
        }
        let split = match *s {
            "-" => None,
            other => Some(other.parse().map_err(|_| bad("bad split"))?),
        };
        index.entries.push(IndexEntry {
            path: PathBuf::from(p),
            class_id,
            split,
        });
    }
    Ok(index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(N, 32, 32, 1)`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Sample order for one epoch: sorted by catalog position, then shuffled
/// with the epoch seed (when given).
pub fn epoch_order(index: &DatasetIndex, split: Split, epoch_seed: Option<u64>) -> Vec<(PathBuf, usize)> {
    let mut items: Vec<(PathBuf, usize)> = index
        .entries_in(split)
        .into_iter()
        .map(|e| (e.path.clone(), e.class_id))
        .collect();
    if let Some(seed) = epoch_seed {
        items.shuffle(&mut seeded_rng(seed));
    }
    items
}

/// Mini-batches decoded on a background thread, at most `prefetch_depth`
/// batches ahead of the consumer.
///
/// Undecodable samples are skipped with a warning, so a batch may come out
/// shorter than `batch_size`; a batch whose every sample failed is dropped.
pub struct BatchStream {
    rx: Receiver<Batch>,
    worker: Option<JoinHandle<()>>,
}

impl BatchStream {
    pub fn new(items: Vec<(PathBuf, usize)>, batch_size: usize, prefetch_depth: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Range("batch size must be at least 1".into()));
        }
        let (tx, rx) = sync_channel(prefetch_depth.max(1) - 1);
        let worker = std::thread::spawn(move || {
            for chunk in items.chunks(batch_size) {
                let mut pixels = Vec::with_capacity(chunk.len() * INPUT_SIZE * INPUT_SIZE);
                let mut labels = Vec::with_capacity(chunk.len());
                for (path, label) in chunk {
                    match load_and_preprocess(path) {
                        Ok(img) => {
                            pixels.extend_from_slice(img.tensor().data());
                            labels.push(*label);
                        }
                        Err(e) => log::warn!("skipping sample: {e}"),
                    }
                }
                if labels.is_empty() {
                    continue;
                }
                let images = Tensor::from_vec(&[labels.len(), INPUT_SIZE, INPUT_SIZE, 1], pixels)
                    .expect("batch pixel count matches labels");
                if tx.send(Batch { images, labels }).is_err() {
                    return;
                }
            }
        });
        Ok(BatchStream {
            rx,
            worker: Some(worker),
        })
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        match self.rx.recv() {
            Ok(b) => Some(b),
            Err(_) => {
                if let Some(w) = self.worker.take() {
                    let _ = w.join();
                }
                None
            }
        }
    }
}

/// Shuffled batches of one split for one epoch.
pub fn batches(
    index: &DatasetIndex,
    split: Split,
    batch_size: usize,
    epoch_seed: u64,
    prefetch_depth: usize,
) -> Result<BatchStream> {
    BatchStream::new(epoch_order(index, split, Some(epoch_seed)), batch_size, prefetch_depth)
}

/// Unshuffled batches in catalog order, for evaluation.
pub fn ordered_batches(
    index: &DatasetIndex,
    split: Split,
    batch_size: usize,
    prefetch_depth: usize,
) -> Result<BatchStream> {
    BatchStream::new(epoch_order(index, split, None), batch_size, prefetch_depth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_index(per_class: &[usize]) -> DatasetIndex {
        let mut entries = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                entries.push(IndexEntry {
                    path: PathBuf::from(format!("{c}/{i}.png")),
                    class_id: c,
                    split: None,
                });
            }
        }
        DatasetIndex {
            entries,
            class_names: (1..=per_class.len()).map(|i| i.to_string()).collect(),
            split_seed: None,
            val_fraction: None,
        }
    }

    #[test]
    fn stratified_counts() {
        let s = split(fake_index(&[100; 84]), 0.28, 3).unwrap();
        for c in 0..84 {
            let val = s.entries.iter().filter(|e| e.class_id == c && e.split == Some(Split::Val)).count();
            let train = s.entries.iter().filter(|e| e.class_id == c && e.split == Some(Split::Train)).count();
            assert_eq!((val, train), (28, 72));
        }
    }

    #[test]
    fn split_is_deterministic_and_seed_dependent() {
        let a = split(fake_index(&[30, 40, 25]), 0.28, 9).unwrap();
        let b = split(fake_index(&[30, 40, 25]), 0.28, 9).unwrap();
        let c = split(fake_index(&[30, 40, 25]), 0.28, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.entries, c.entries);
    }

    #[test]
    fn split_rejects_singleton_class_but_ignores_empty() {
        let err = split(fake_index(&[5, 1, 5]), 0.28, 1).unwrap_err();
        assert!(matches!(err, Error::Split(ref m) if m.contains("class 2")));
        let ok = split(fake_index(&[5, 0, 5]), 0.28, 1).unwrap();
        assert_eq!(ok.entries.len(), 10);
    }

    #[test]
    fn class_dir_ordering() {
        let mut names = vec!["10", "2", "b", "1", "a"];
        names.sort_by(|a, b| class_dir_order(a, b));
        assert_eq!(names, ["1", "2", "10", "a", "b"]);
    }

    #[test]
    fn index_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let idx = split(fake_index(&[4, 6]), 0.28, 5).unwrap();
        let path = dir.path().join("index.tsv");
        write_index(&idx, &path).unwrap();
        assert_eq!(read_index(&path).unwrap(), idx);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().any(|l| l == "0/0.png\t0\tval" || l == "0/0.png\t0\ttrain"));
        fs::write(&path, "garbage\n").unwrap();
        assert!(read_index(&path).is_err());
    }

    #[test]
    fn epoch_order_permutes() {
        let idx = split(fake_index(&[20, 20]), 0.28, 5).unwrap();
        let a = epoch_order(&idx, Split::Train, Some(1));
        let b = epoch_order(&idx, Split::Train, Some(2));
        assert_ne!(a, b);
        let mut sa = a.clone();
        let mut sb = b.clone();
        sa.sort();
        sb.sort();
        assert_eq!(sa, sb);
    }
}
