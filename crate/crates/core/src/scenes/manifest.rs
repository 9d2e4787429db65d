//! JSON dataset manifest with relative sample paths.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    generate_scene, read_sample, write_sample, GeneratorConfig, Result, SamplePaths, SceneError,
    SceneSample,
};
use crate::discretization::DiscretizationParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub discretization: DiscretizationParams,
    pub samples: Vec<ManifestEntry>,
    /// Directory that entry paths are relative to; filled in on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|source| SceneError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut m: Self = serde_json::from_slice(&text).map_err(|source| SceneError::Json {
            path: path.display().to_string(),
            source,
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|source| SceneError::Json {
            path: path.display().to_string(),
            source,
        })?;
        fs::write(path, json).map_err(|source| SceneError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Every referenced file exists and no file appears in two splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen: std::collections::HashMap<&Path, Split> = std::collections::HashMap::new();
        for e in &self.samples {
            for p in [&e.rgb, &e.depth] {
                if !self.root.join(p).exists() {
                    return Err(SceneError::Manifest(format!(
                        "missing file {}",
                        p.display()
                    )));
                }
                if let Some(&other) = seen.get(p.as_path()) {
                    if other != e.split {
                        return Err(SceneError::Manifest(format!(
                            "{} listed in both {other:?} and {:?}",
                            p.display(),
                            e.split
                        )));
                    }
                }
                seen.insert(p, e.split);
            }
        }
        Ok(())
    }

    pub fn paths(&self, split: Split) -> Vec<SamplePaths> {
        self.samples
            .iter()
            .filter(|e| e.split == split)
            .map(|e| SamplePaths {
                rgb: self.root.join(&e.rgb),
                depth: self.root.join(&e.depth),
            })
            .collect()
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SceneSample>> {
        self.paths(split).iter().map(read_sample).collect()
    }

    pub fn splits(&self) -> BTreeSet<Split> {
        self.samples.iter().map(|e| e.split).collect()
    }
}

/// Materialises `counts = [train, val, test]` scenes under `dir` and writes
/// `dir/manifest.json`. Scene `i` (over all splits) uses seed `seed + i`.
pub fn generate_dataset(
    dir: &Path,
    cfg: &GeneratorConfig,
    discretization: DiscretizationParams,
    counts: [usize; 3],
    seed: u64,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|source| SceneError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut samples = Vec::new();
    let mut index = 0u64;
    for (split, &n) in [Split::Train, Split::Val, Split::Test].iter().zip(&counts) {
        for _ in 0..n {
            let scene = generate_scene(seed.wrapping_add(index), cfg)?;
            let entry = ManifestEntry {
                rgb: PathBuf::from(format!("{index:05}.ppm")),
                depth: PathBuf::from(format!("{index:05}.pgm")),
                split: *split,
            };
            write_sample(
                &scene,
                &SamplePaths {
                    rgb: dir.join(&entry.rgb),
                    depth: dir.join(&entry.depth),
                },
            )?;
            samples.push(entry);
            index += 1;
        }
    }
    let manifest = DatasetManifest {
        discretization,
        samples,
        root: dir.to_path_buf(),
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
