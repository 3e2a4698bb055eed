//! Dataset layout on disk: RAWB pair files plus a tab-separated manifest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{average_frames, BlurError, BlurPair, FrameSequence, Result};
use crate::raw::{read_rawb_file, write_rawb_file, BayerFrame};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub blur: PathBuf,
    pub sharp: PathBuf,
    pub num_averaged: usize,
    pub center: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| BlurError::Manifest { line: i + 1, reason };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 tab-separated fields, found {}", fields.len())));
            }
            let num_averaged = fields[2].parse().map_err(|e| bad(format!("M: {e}")))?;
            let center = fields[3].parse().map_err(|e| bad(format!("center: {e}")))?;
            let split = fields[4].parse().map_err(bad)?;
            entries.push(ManifestEntry {
                blur: PathBuf::from(fields[0]),
                sharp: PathBuf::from(fields[1]),
                num_averaged,
                center,
                split,
            });
        }
        Ok(Manifest { root: root.into(), entries })
    }

    /// Reads a manifest file; entry paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| BlurError::Io { path: path.display().to_string(), source })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.blur.display(),
                e.sharp.display(),
                e.num_averaged,
                e.center,
                e.split
            ));
        }
        out
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads the (blurred, sharp) frames of an entry.
    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<(BayerFrame, BayerFrame)> {
        let blur = read_rawb_file(self.root.join(&entry.blur))?;
        let sharp = read_rawb_file(self.root.join(&entry.sharp))?;
        Ok((blur, sharp))
    }
}

/// How many frames each window averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MPolicy {
    Fixed(usize),
    /// 3, 4, 5, 3, ... over consecutive windows of the whole dataset.
    Cycle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetConfig {
    pub m: MPolicy,
    pub window_stride: usize,
    /// The last `test_sequences` sequences go to the test split, the
    /// `val_sequences` before them to validation, the rest to training.
    pub val_sequences: usize,
    pub test_sequences: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { m: MPolicy::Cycle, window_stride: 1, val_sequences: 0, test_sequences: 0 }
    }
}

/// Lays out every window of every sequence as a pair without touching disk.
pub fn plan_pairs(sequences: &[(String, FrameSequence)], cfg: &DatasetConfig) -> Result<Vec<(BlurPair, Split)>> {
    if cfg.window_stride == 0 {
        return Err(BlurError::ZeroStride);
    }
    let n_seq = sequences.len();
    let test_from = n_seq.saturating_sub(cfg.test_sequences);
    let val_from = test_from.saturating_sub(cfg.val_sequences);
    // (sequence index, start, M)
    let mut windows = Vec::new();
    let mut k = 0usize;
    for (si, (_, seq)) in sequences.iter().enumerate() {
        let mut start = 0;
        let mut produced = 0;
        loop {
            let m = match cfg.m {
                MPolicy::Fixed(m) => m,
                MPolicy::Cycle => 3 + k % 3,
            };
            if start + m > seq.len() {
                break;
            }
            windows.push((si, start, m));
            k += 1;
            produced += 1;
            start += cfg.window_stride;
        }
        if produced == 0 {
            let m = match cfg.m {
                MPolicy::Fixed(m) => m,
                MPolicy::Cycle => 3 + k % 3,
            };
            return Err(BlurError::WindowOverflow { start: 0, m, len: seq.len() });
        }
    }
    let pairs = crate::parallel::map_indexed(windows.len(), |i| {
        let (si, start, m) = windows[i];
        let (id, seq) = &sequences[si];
        average_frames(seq, start, m).map(|mut p| {
            p.source_id = id.clone();
            let split = if si >= test_from {
                Split::Test
            } else if si >= val_from {
                Split::Val
            } else {
                Split::Train
            };
            (p, split)
        })
    });
    pairs.into_iter().collect()
}

/// Writes every pair as RAWB files under `out_dir` and a manifest next to
/// them. Returns the manifest.
pub fn build_dataset(sequences: &[(String, FrameSequence)], cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    let pairs = plan_pairs(sequences, cfg)?;
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| BlurError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, (pair, split)) in pairs.iter().enumerate() {
        let stem = format!("{}_{:05}_m{}_c{}", pair.source_id, i, pair.num_averaged, pair.center_index);
        let blur = PathBuf::from(format!("{stem}_blur.rawb"));
        let sharp = PathBuf::from(format!("{stem}_sharp.rawb"));
        write_rawb_file(&pair.blurred, out_dir.join(&blur))?;
        write_rawb_file(&pair.sharp, out_dir.join(&sharp))?;
        entries.push(ManifestEntry {
            blur,
            sharp,
            num_averaged: pair.num_averaged,
            center: pair.center_index,
            split: *split,
        });
    }
    let manifest = Manifest { root: out_dir.to_path_buf(), entries };
    let path = out_dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_text()).map_err(io_err(&path))?;
    Ok(manifest)
}
