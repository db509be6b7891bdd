//! Planted-cluster datasets for tests and smoke runs.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{validate_split_integrity, write_features, write_interactions, Dataset, FeatureMatrix, Interaction, Modality, Split};
use crate::error::{Error, Result};

const MAX_ATTEMPTS: u64 = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    /// Probability that a draw ignores the user's cluster.
    pub noise: f64,
    pub seed: u64,
    pub interactions_per_user: usize,
    /// Standard deviation of the Gaussian noise added to the one-hot features.
    pub feature_noise: f64,
    /// Width of the extra pure-noise feature columns per modality.
    pub visual_extra: usize,
    pub text_extra: usize,
    /// Use one feature matrix for both modalities.
    pub identical_modalities: bool,
    /// Within-cluster item weights follow `(rank + 1)^-exponent`.
    pub popularity_exponent: f64,
}

impl PlantedConfig {
    pub fn new(num_users: usize, num_items: usize, num_clusters: usize, noise: f64, seed: u64) -> Self {
        PlantedConfig {
            num_users,
            num_items,
            num_clusters,
            noise,
            seed,
            interactions_per_user: 10,
            feature_noise: 0.1,
            visual_extra: 8,
            text_extra: 12,
            identical_modalities: false,
            popularity_exponent: 0.0,
        }
    }

    pub fn cluster_of_item(&self, item: usize) -> usize {
        item / (self.num_items / self.num_clusters)
    }

    pub fn cluster_of_user(&self, user: usize) -> usize {
        user % self.num_clusters
    }

    fn check(&self) -> Result<()> {
        if self.num_clusters == 0 || self.num_items % self.num_clusters != 0 {
            return Err(Error::Config(format!(
                "{} items cannot be split evenly into {} clusters",
                self.num_items, self.num_clusters
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} is not a probability", self.noise)));
        }
        if self.interactions_per_user < 3 {
            return Err(Error::Config("each user needs at least 3 interactions".into()));
        }
        if self.interactions_per_user > self.num_items / self.num_clusters {
            return Err(Error::Config(format!(
                "{} interactions per user exceed the cluster size {}",
                self.interactions_per_user,
                self.num_items / self.num_clusters
            )));
        }
        Ok(())
    }
}

/// `(train, valid, test)` counts per user: roughly 80/10/10 with at
/// least one valid and one test item.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let held = ((n as f64) * 0.1).round().max(1.0) as usize;
    (n - 2 * held, held, held)
}

fn generate(cfg: &PlantedConfig, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = cfg.num_items / cfg.num_clusters;
    let weights: Vec<f64> = (0..size).map(|r| ((r + 1) as f64).powf(-cfg.popularity_exponent)).collect();
    let within = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    let (n_train, n_valid, _) = split_sizes(cfg.interactions_per_user);

    let mut interactions = Vec::with_capacity(cfg.num_users * cfg.interactions_per_user);
    for user in 0..cfg.num_users {
        let base = cfg.cluster_of_user(user) * size;
        let mut items: Vec<usize> = Vec::with_capacity(cfg.interactions_per_user);
        while items.len() < cfg.interactions_per_user {
            let item = if rng.random::<f64>() < cfg.noise {
                rng.random_range(0..cfg.num_items)
            } else {
                base + within.sample(&mut rng)
            };
            if !items.contains(&item) {
                items.push(item);
            }
        }
        for (k, item) in items.into_iter().enumerate() {
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
            interactions.push(Interaction { user, item, split });
        }
    }
    let ds = Dataset::from_interactions(cfg.num_users, cfg.num_items, interactions)?;

    let normal = Normal::new(0.0, cfg.feature_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut features = |extra: usize| -> Result<FeatureMatrix> {
        let cols = cfg.num_clusters + extra;
        let mut data = Vec::with_capacity(cfg.num_items * cols);
        for item in 0..cfg.num_items {
            let cluster = cfg.cluster_of_item(item);
            for c in 0..cols {
                let one_hot = if c == cluster { 1.0 } else { 0.0 };
                data.push((one_hot + normal.sample(&mut rng)) as f32);
            }
        }
        FeatureMatrix::new(cfg.num_items, cols, data)
    };
    let visual = features(cfg.visual_extra)?;
    let text = if cfg.identical_modalities {
        visual.clone()
    } else {
        features(cfg.text_extra)?
    };
    ds.with_features(Modality::Visual, visual)?.with_features(Modality::Text, text)
}

/// Builds a planted dataset with features attached. Draws that leave a
/// split-integrity violation are retried with a derived seed.
pub fn make_planted(cfg: &PlantedConfig) -> Result<Dataset> {
    cfg.check()?;
    for attempt in 0..MAX_ATTEMPTS {
        let ds = generate(cfg, cfg.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15)))?;
        if validate_split_integrity(&ds).is_clean() {
            return Ok(ds);
        }
    }
    Err(Error::Data(format!(
        "could not draw a clean planted split in {MAX_ATTEMPTS} attempts"
    )))
}

/// Paths of the files written by [`write_planted`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlantedFiles {
    pub interactions: PathBuf,
    pub visual: PathBuf,
    pub text: PathBuf,
}

/// Writes `interactions.tsv`, `visual.brfm` and `text.brfm` into `dir`.
pub fn write_planted(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PlantedFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = PlantedFiles {
        interactions: dir.join("interactions.tsv"),
        visual: dir.join("visual.brfm"),
        text: dir.join("text.brfm"),
    };
    write_interactions(ds, &files.interactions)?;
    for (modality, path) in [(Modality::Visual, &files.visual), (Modality::Text, &files.text)] {
        let fm = ds
            .features
            .get(&modality)
            .ok_or_else(|| Error::Data(format!("dataset has no {modality:?} features")))?;
        write_features(fm, path)?;
    }
    Ok(files)
}
