use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::generate_toy_face;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};

const HEADER_TAG: &str = "#facepencil-manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub mask_path: PathBuf,
    pub image_path: PathBuf,
    pub split: Split,
}

impl ManifestEntry {
    pub fn source_id(&self) -> String {
        self.mask_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub resolution: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone)]
pub enum ManifestSource {
    /// Render toy faces into `out_dir/{masks,images}`.
    Toy { out_dir: PathBuf },
    /// Existing pairs: `images/<id>.{png,jpg}` with `masks/<id>.png`, or the
    /// CelebAMask-HQ names `CelebA-HQ-img/` and `CelebAMask-HQ-mask/`.
    Directory(PathBuf),
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER_TAG} resolution={} seed={}\n", self.resolution, self.seed);
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.mask_path.display(),
                e.image_path.display(),
                e.split
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Parses a manifest; relative paths resolve against the file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("empty manifest".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER_TAG) {
            return Err(Error::InvalidInput(format!("bad manifest header {header:?}")));
        }
        let mut resolution = None;
        let mut seed = None;
        for kv in fields {
            match kv.split_once('=') {
                Some(("resolution", v)) => resolution = v.parse().ok(),
                Some(("seed", v)) => seed = v.parse().ok(),
                _ => {}
            }
        }
        let (Some(resolution), Some(seed)) = (resolution, seed) else {
            return Err(Error::InvalidInput("manifest header lacks resolution/seed".into()));
        };
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::InvalidInput(format!(
                    "manifest line {}: expected 3 tab-separated fields",
                    n + 2
                )));
            }
            entries.push(ManifestEntry {
                mask_path: resolve(cols[0]),
                image_path: resolve(cols[1]),
                split: cols[2].parse()?,
            });
        }
        let manifest = Self {
            entries,
            resolution,
            seed,
        };
        manifest.check_disjoint()?;
        Ok(manifest)
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen: BTreeMap<String, Split> = BTreeMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(e.source_id(), e.split) {
                if prev != e.split {
                    return Err(Error::InvalidInput(format!(
                        "source {} appears in both {prev} and {}",
                        e.source_id(),
                        e.split
                    )));
                }
            }
        }
        Ok(())
    }
}

fn find_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let pick = |names: &[&str]| names.iter().map(|n| dir.join(n)).find(|p| p.is_dir());
    let image_dir = pick(&["images", "CelebA-HQ-img"])
        .ok_or_else(|| Error::InvalidInput(format!("{}: no images/ directory", dir.display())))?;
    let mask_dir = pick(&["masks", "CelebAMask-HQ-mask"])
        .ok_or_else(|| Error::InvalidInput(format!("{}: no masks/ directory", dir.display())))?;

    let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(&image_dir).map_err(|e| Error::io(&image_dir, e))? {
        let path = entry.map_err(|e| Error::io(&image_dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg") {
            if let Some(stem) = path.file_stem() {
                images.insert(stem.to_string_lossy().into_owned(), path);
            }
        }
    }
    let mut pairs = Vec::new();
    for (stem, image) in images {
        let mask = mask_dir.join(format!("{stem}.png"));
        if mask.is_file() {
            pairs.push((mask, image));
        }
    }
    Ok(pairs)
}

/// Builds a reproducible train/val/test manifest.
pub fn build_manifest(
    source: &ManifestSource,
    counts: SplitCounts,
    resolution: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(Error::InvalidInput("split counts must be positive".into()));
    }
    let total = counts.total();
    let entries = match source {
        ManifestSource::Toy { out_dir } => {
            let masks = out_dir.join("masks");
            let images = out_dir.join("images");
            for d in [&masks, &images] {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let mut entries = Vec::with_capacity(total);
            for i in 0..total {
                let (mask, photo) = generate_toy_face(derive_seed(seed, i as u64), resolution)?;
                let name = format!("toy_{i:05}.png");
                let (mp, ip) = (masks.join(&name), images.join(&name));
                mask.save_png(&mp)?;
                photo.save_png(&ip)?;
                entries.push(ManifestEntry {
                    mask_path: mp,
                    image_path: ip,
                    split: counts.split_of(i),
                });
            }
            entries
        }
        ManifestSource::Directory(dir) => {
            let mut pairs = find_pairs(dir)?;
            if pairs.len() < total {
                return Err(Error::Insufficient(format!(
                    "{} has {} pairs, {} requested",
                    dir.display(),
                    pairs.len(),
                    total
                )));
            }
            pairs.shuffle(&mut rng_for(seed, 0x5EED_5917));
            pairs
                .into_iter()
                .take(total)
                .enumerate()
                .map(|(i, (mask_path, image_path))| ManifestEntry {
                    mask_path,
                    image_path,
                    split: counts.split_of(i),
                })
                .collect()
        }
    };
    Ok(DatasetManifest {
        entries,
        resolution,
        seed,
    })
}
