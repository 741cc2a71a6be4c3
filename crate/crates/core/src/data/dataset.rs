use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::pnm::{read_mask, read_ppm, write_pgm, write_ppm};
use super::synth::{generate_sample, DomainSpec};
use super::Sample;
use crate::error::{GmsError, Result};
use crate::rng::seeded;

pub const MANIFEST: &str = "manifest.txt";
pub const TRAIN_SPLIT: &str = "train.txt";
pub const TEST_SPLIT: &str = "test.txt";
/// JSON description of the generating domain.
pub const DOMAIN_FILE: &str = "domain.json";

fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.ppm"))
}

fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.pgm"))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| GmsError::io(p, e))
}

pub fn save_sample(root: impl AsRef<Path>, sample: &Sample) -> Result<()> {
    let root = root.as_ref();
    create_dir(&root.join("images"))?;
    create_dir(&root.join("masks"))?;
    write_ppm(image_path(root, &sample.id), &sample.image)?;
    write_pgm(mask_path(root, &sample.id), &sample.mask)
}

pub fn load_sample(root: impl AsRef<Path>, id: &str) -> Result<Sample> {
    let root = root.as_ref();
    let image = read_ppm(image_path(root, id))?;
    let mask = read_mask(mask_path(root, id))?;
    Sample::new(id, image, mask)
}

/// One id per line; blank lines are skipped.
pub fn read_id_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GmsError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_id_list(path: impl AsRef<Path>, ids: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| GmsError::io(path, e))
}

pub fn load_manifest(root: impl AsRef<Path>) -> Result<Vec<String>> {
    read_id_list(root.as_ref().join(MANIFEST))
}

/// Writes `n` samples and the manifest under `root`.
pub fn generate_synthetic(
    spec: &DomainSpec,
    n: usize,
    size: usize,
    seed: u64,
    root: impl AsRef<Path>,
) -> Result<Vec<String>> {
    if n == 0 {
        return Err(GmsError::Usage("sample count must be at least 1".into()));
    }
    let root = root.as_ref();
    create_dir(&root.join("images"))?;
    create_dir(&root.join("masks"))?;
    let ids = (0..n)
        .into_par_iter()
        .map(|i| {
            let s = generate_sample(spec, size, seed, i)?;
            save_sample(root, &s)?;
            Ok(s.id)
        })
        .collect::<Result<Vec<_>>>()?;
    write_id_list(root.join(MANIFEST), &ids)?;
    let desc = root.join(DOMAIN_FILE);
    fs::write(&desc, serde_json::to_string_pretty(spec)? + "\n")
        .map_err(|e| GmsError::io(&desc, e))?;
    Ok(ids)
}

/// The domain a synthetic dataset was generated from, if recorded.
pub fn load_domain(root: impl AsRef<Path>) -> Result<Option<DomainSpec>> {
    let path = root.as_ref().join(DOMAIN_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| GmsError::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn write(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        write_id_list(root.join(TRAIN_SPLIT), &self.train)?;
        write_id_list(root.join(TEST_SPLIT), &self.test)
    }

    pub fn read(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        Ok(Split {
            train: read_id_list(root.join(TRAIN_SPLIT))?,
            test: read_id_list(root.join(TEST_SPLIT))?,
        })
    }
}

/// Seeded shuffle, then the first `round(train_fraction * n)` ids train.
pub fn split(ids: &[String], train_fraction: f64, seed: u64) -> Result<Split> {
    if ids.is_empty() {
        return Err(GmsError::Usage("cannot split an empty manifest".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(GmsError::Config(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut seeded(seed));
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    let test = shuffled.split_off(n_train);
    Ok(Split {
        train: shuffled,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Domain;
    use std::collections::BTreeSet;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    #[test]
    fn eighty_twenty() {
        let s = split(&ids(10), 0.8, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        let all: BTreeSet<_> = s.train.iter().chain(&s.test).cloned().collect();
        assert_eq!(all.len(), 10);
        assert_eq!(s, split(&ids(10), 0.8, 3).unwrap());
        assert!(split(&[], 0.8, 3).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = DomainSpec::for_domain(Domain::B);
        generate_synthetic(&spec, 3, 16, 9, a.path()).unwrap();
        generate_synthetic(&spec, 3, 16, 9, b.path()).unwrap();
        for id in load_manifest(a.path()).unwrap() {
            for p in [image_path(a.path(), &id), mask_path(a.path(), &id)] {
                let rel = p.strip_prefix(a.path()).unwrap();
                assert_eq!(fs::read(&p).unwrap(), fs::read(b.path().join(rel)).unwrap());
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_sample(&DomainSpec::a(), 16, 1, 0).unwrap();
        save_sample(dir.path(), &s).unwrap();
        let back = load_sample(dir.path(), &s.id).unwrap();
        assert_eq!(back, s);
    }
}
