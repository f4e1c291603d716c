//! Matrix-factorization collaborative model trained with BPR.

use std::collections::HashSet;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor2D;
use crate::objectives::bpr_triple;
use crate::{Error, Result, Tensor};

pub const DEFAULT_CF_DIM: usize = 16;
const INIT_SCALE: f64 = 0.1;

/// Whether CF embeddings keep training alongside the main model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfMode {
    #[default]
    Joint,
    Frozen,
}

impl FromStr for CfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "joint" => Ok(CfMode::Joint),
            "frozen" => Ok(CfMode::Frozen),
            other => Err(Error::Invalid(format!("unknown cf mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for CfMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CfMode::Joint => "joint",
            CfMode::Frozen => "frozen",
        })
    }
}

/// User and item embedding tables.
#[derive(Clone, Debug, PartialEq)]
pub struct CfEmbeddings {
    pub user: Tensor,
    pub item: Tensor,
}

impl CfEmbeddings {
    pub fn dim(&self) -> usize {
        self.user.cols()
    }

    pub fn score(&self, user: usize, item: usize) -> f64 {
        crate::numerics::ops::dot(self.user.row(user), self.item.row(item))
    }
}

/// Seeded Gaussian init with standard deviation 0.1.
pub fn cf_init(n_users: usize, n_items: usize, dim: usize, seed: u64) -> Result<CfEmbeddings> {
    if n_users == 0 || n_items == 0 || dim == 0 {
        return Err(Error::Invalid("cf dimensions must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_SCALE).expect("valid normal");
    let user = Tensor2D::from_fn(n_users, dim, |_, _| normal.sample(&mut rng));
    let item = Tensor2D::from_fn(n_items, dim, |_, _| normal.sample(&mut rng));
    Ok(CfEmbeddings { user, item })
}

/// Uniform item the user has not interacted with, if one exists.
pub fn sample_unobserved<R: Rng + ?Sized>(observed: &HashSet<usize>, n_items: usize, rng: &mut R) -> Option<usize> {
    if observed.len() >= n_items {
        return None;
    }
    loop {
        let j = rng.random_range(0..n_items);
        if !observed.contains(&j) {
            return Some(j);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BprConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for BprConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.05,
            l2: 1e-4,
            seed: 0,
        }
    }
}

/// SGD over every observed `(user, item)` pair per epoch, one uniform
/// negative each. Returns the mean loss of every epoch.
pub fn train_bpr(cf: &mut CfEmbeddings, interactions: &[(usize, Vec<usize>)], cfg: &BprConfig) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_items = cf.item.rows();
    let observed: Vec<HashSet<usize>> = interactions.iter().map(|(_, s)| s.iter().copied().collect()).collect();
    let mut pairs: Vec<(usize, usize, usize)> = interactions
        .iter()
        .enumerate()
        .flat_map(|(k, (u, s))| s.iter().map(move |&i| (k, *u, i)))
        .collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for &(k, u, pos) in &pairs {
            let Some(neg) = sample_unobserved(&observed[k], n_items, &mut rng) else {
                continue;
            };
            let g = bpr_triple(&cf.user, &cf.item, u, pos, neg)?;
            total += g.loss;
            count += 1;
            let lr = cfg.lr;
            for (w, d) in cf.user.row_mut(u).iter_mut().zip(&g.d_user) {
                *w -= lr * (d + cfg.l2 * *w);
            }
            for (w, d) in cf.item.row_mut(pos).iter_mut().zip(&g.d_pos) {
                *w -= lr * (d + cfg.l2 * *w);
            }
            for (w, d) in cf.item.row_mut(neg).iter_mut().zip(&g.d_neg) {
                *w -= lr * (d + cfg.l2 * *w);
            }
        }
        history.push(if count > 0 { total / count as f64 } else { 0.0 });
    }
    Ok(history)
}
