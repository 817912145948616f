use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_image, save_image};
use crate::degrade::{DegradationSpec, Degrader};
use crate::error::{invalid, Result, UgpError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(rename = "clean")]
    pub clean_path: String,
    #[serde(rename = "degraded")]
    pub degraded_path: String,
    pub seed: u64,
    pub spec_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub spec: DegradationSpec,
}

/// FNV-1a over `(seed, name)` followed by a splitmix64 finalizer.
pub fn entry_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn is_image(p: &Path) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| {
        matches!(
            e.to_ascii_lowercase().as_str(),
            "png" | "jpg" | "jpeg" | "bmp"
        )
    })
}

/// Image file names in `dir`, sorted lexicographically.
pub fn list_images(dir: &Path) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => UgpError::NotFound(dir.display().to_string()),
        _ => UgpError::Io(e),
    })?;
    let mut names = Vec::new();
    for entry in rd {
        let p = entry?.path();
        if p.is_file() && is_image(&p) {
            names.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// One entry per image in `clean_dir`; degraded outputs are named after the
/// clean file (as PNG) inside `degraded_dir`.
pub fn build_manifest(
    clean_dir: &Path,
    degraded_dir: &Path,
    spec: &DegradationSpec,
    seed: u64,
) -> Result<DatasetManifest> {
    spec.validate()?;
    let names = list_images(clean_dir)?;
    if names.is_empty() {
        return Err(UgpError::EmptyDataset(clean_dir.display().to_string()));
    }
    let spec_id = spec.id();
    let entries = names
        .iter()
        .map(|name| {
            let stem = Path::new(name).file_stem().unwrap().to_string_lossy();
            ManifestEntry {
                clean_path: clean_dir.join(name).to_string_lossy().into_owned(),
                degraded_path: degraded_dir
                    .join(format!("{stem}.png"))
                    .to_string_lossy()
                    .into_owned(),
                seed: entry_seed(seed, name),
                spec_id: spec_id.clone(),
            }
        })
        .collect();
    Ok(DatasetManifest {
        entries,
        spec: spec.clone(),
    })
}

/// Random partition with `round(test_fraction * n)` test entries; both parts
/// keep the original order.
pub fn split_manifest(
    m: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(invalid!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        ));
    }
    let n = m.entries.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test: BTreeSet<usize> = order[..n_test].iter().copied().collect();
    let part = |in_test: bool| DatasetManifest {
        entries: (0..n)
            .filter(|i| test.contains(i) == in_test)
            .map(|i| m.entries[i].clone())
            .collect(),
        spec: m.spec.clone(),
    };
    Ok((part(false), part(true)))
}

fn spec_sidecar(path: &Path) -> PathBuf {
    path.with_extension("spec.json")
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes the JSONL entries to `path` and the spec to `<stem>.spec.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        std::fs::write(
            spec_sidecar(path),
            serde_json::to_string_pretty(&self.spec)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => UgpError::NotFound(path.display().to_string()),
            _ => UgpError::Io(e),
        })?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| UgpError::Format(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let side = spec_sidecar(path);
        let spec_text = std::fs::read_to_string(&side).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => UgpError::NotFound(side.display().to_string()),
            _ => UgpError::Io(e),
        })?;
        let spec = DegradationSpec::from_json(&spec_text)?;
        let m = Self { entries, spec };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.clean_path) || !seen.insert(&e.degraded_path) {
                return Err(UgpError::Format(format!(
                    "duplicate manifest path {}",
                    e.clean_path
                )));
            }
        }
        Ok(())
    }

    /// Writes every degraded image.
    pub fn materialize(&self) -> Result<()> {
        let degrader = Degrader::new(&self.spec)?;
        for e in &self.entries {
            let clean = load_image(Path::new(&e.clean_path))?;
            let out = degrader.apply(&clean, e.seed)?;
            save_image(&out, Path::new(&e.degraded_path))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_faces, ImageTensor};

    fn corpus(n: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        generate_toy_faces(dir.path(), n, 16, 1).unwrap();
        dir
    }

    const NOISE: DegradationSpec = DegradationSpec::Noise {
        sigma: 0.1,
        k: 30.0,
    };

    #[test]
    fn sixteen_files_sixteen_sorted_entries() {
        let dir = corpus(16);
        let m = build_manifest(dir.path(), Path::new("deg"), &NOISE, 7).unwrap();
        assert_eq!(m.len(), 16);
        let names: Vec<_> = m.entries.iter().map(|e| e.clean_path.clone()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        let again = build_manifest(dir.path(), Path::new("deg"), &NOISE, 7).unwrap();
        assert_eq!(m.to_jsonl().unwrap(), again.to_jsonl().unwrap());
        let other = build_manifest(dir.path(), Path::new("deg"), &NOISE, 8).unwrap();
        for (a, b) in m.entries.iter().zip(&other.entries) {
            assert_ne!(a.seed, b.seed);
        }
        let seeds: BTreeSet<u64> = m.entries.iter().map(|e| e.seed).collect();
        assert_eq!(seeds.len(), 16);
    }

    #[test]
    fn empty_dir_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_manifest(dir.path(), dir.path(), &NOISE, 0),
            Err(UgpError::EmptyDataset(_))
        ));
    }

    #[test]
    fn split_sizes_and_partition() {
        let dir = corpus(10);
        let m = build_manifest(dir.path(), Path::new("d"), &NOISE, 1).unwrap();
        let (train, test) = split_manifest(&m, 0.2, 3).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let mut all: Vec<_> = train.entries.iter().chain(&test.entries).cloned().collect();
        all.sort_by(|a, b| a.clean_path.cmp(&b.clean_path));
        assert_eq!(all, m.entries);
        assert_eq!(split_manifest(&m, 0.2, 3).unwrap(), (train, test));
        for bad in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(matches!(
                split_manifest(&m, bad, 0),
                Err(UgpError::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn save_load_and_materialize() {
        let dir = corpus(3);
        let out = tempfile::tempdir().unwrap();
        let m = build_manifest(dir.path(), &out.path().join("deg"), &NOISE, 5).unwrap();
        let path = out.path().join("m.jsonl");
        m.save(&path).unwrap();
        let first = std::fs::read_to_string(&path).unwrap();
        let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        for key in ["clean", "degraded", "seed", "spec_id"] {
            assert!(line.get(key).is_some(), "{key}");
        }
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
        m.materialize().unwrap();
        for e in &m.entries {
            let img: ImageTensor = load_image(Path::new(&e.degraded_path)).unwrap();
            assert_eq!(img.height(), 16);
        }
    }
}
