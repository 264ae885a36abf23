//! Regularized matrix factorization by alternating least squares.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};

use super::{GroundTruthUser, ItemId, RatingsDataset, UserPrior};
use crate::error::{Error, Result};
use crate::math::{dot, rng_from_seed};

#[derive(Clone, Debug)]
pub struct MfConfig {
    pub dim: usize,
    pub reg: f64,
    pub iters: usize,
    pub seed: u64,
    /// Numerator `s` of the prior variance `s / (n_u + reg)`.
    pub prior_scale: f64,
    pub init_scale: f64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            reg: 0.1,
            iters: 20,
            seed: 0,
            prior_scale: 1.0,
            init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MfModel {
    pub dim: usize,
    pub item_embeddings: Vec<(ItemId, Vec<f64>)>,
    pub users: Vec<GroundTruthUser>,
    pub priors: Vec<UserPrior>,
    /// Objective before the first sweep, then after each sweep.
    pub loss_history: Vec<f64>,
}

struct Factors {
    users: Vec<Vec<f64>>,
    items: Vec<Vec<f64>>,
}

fn objective(data: &RatingsDataset, f: &Factors, reg: f64) -> f64 {
    let mut loss = 0.0;
    for r in data.records() {
        let u = data.user_index(r.user).expect("indexed");
        let i = data.item_index(r.item).expect("indexed");
        let e = r.value - dot(&f.users[u], &f.items[i]);
        loss += e * e;
    }
    let sq = |vs: &[Vec<f64>]| vs.iter().map(|v| dot(v, v)).sum::<f64>();
    loss + reg * (sq(&f.users) + sq(&f.items))
}

/// Solves `(Σ v vᵀ + reg I) x = Σ r v` for one row of factors.
fn solve_row(neighbors: &[(usize, f64)], other: &[Vec<f64>], dim: usize, reg: f64) -> Result<Vec<f64>> {
    let mut a = DMatrix::<f64>::identity(dim, dim) * reg;
    let mut b = DVector::<f64>::zeros(dim);
    for &(j, r) in neighbors {
        let v = &other[j];
        for p in 0..dim {
            b[p] += r * v[p];
            for q in p..dim {
                a[(p, q)] += v[p] * v[q];
            }
        }
    }
    for p in 0..dim {
        for q in 0..p {
            a[(p, q)] = a[(q, p)];
        }
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Degenerate("normal equations are not positive definite".into()))?;
    Ok(chol.solve(&b).iter().copied().collect())
}

/// Fits user and item embeddings with a fixed number of ALS sweeps and
/// derives isotropic Gaussian priors centred on the user embeddings.
pub fn train_mf(data: &RatingsDataset, config: &MfConfig) -> Result<MfModel> {
    let dim = config.dim;
    if dim == 0 {
        return Err(Error::Config("mf dimension must be at least 1".into()));
    }
    if !(config.reg > 0.0 && config.reg.is_finite()) {
        return Err(Error::Config("mf regularization must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::Data("ratings dataset is empty".into()));
    }
    let n_users = data.users().len();
    let n_items = data.items().len();
    if dim > n_users || dim > n_items {
        return Err(Error::Config(format!(
            "mf dimension {dim} exceeds the number of users ({n_users}) or items ({n_items})"
        )));
    }

    let mut by_user: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_users];
    let mut by_item: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_items];
    for r in data.records() {
        let u = data.user_index(r.user).expect("indexed");
        let i = data.item_index(r.item).expect("indexed");
        by_user[u].push((i, r.value));
        by_item[i].push((u, r.value));
    }

    let mut rng = rng_from_seed(config.seed);
    let normal = Normal::new(0.0, config.init_scale).map_err(|e| Error::Config(e.to_string()))?;
    let mut init = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..dim).map(|_| normal.sample(&mut rng)).collect())
            .collect()
    };
    let users = init(n_users);
    let items = init(n_items);
    let mut f = Factors { users, items };

    let mut loss_history = vec![objective(data, &f, config.reg)];
    for _ in 0..config.iters {
        for (u, ratings) in by_user.iter().enumerate() {
            f.users[u] = solve_row(ratings, &f.items, dim, config.reg)?;
        }
        for (i, ratings) in by_item.iter().enumerate() {
            f.items[i] = solve_row(ratings, &f.users, dim, config.reg)?;
        }
        loss_history.push(objective(data, &f, config.reg));
    }

    let counts = data.user_counts();
    let mut gt = Vec::with_capacity(n_users);
    let mut priors = Vec::with_capacity(n_users);
    for (u, id) in data.users().iter().enumerate() {
        let var = config.prior_scale / (counts[u] as f64 + config.reg);
        gt.push(GroundTruthUser::new(*id, f.users[u].clone())?);
        priors.push(UserPrior::new(*id, f.users[u].clone(), vec![var; dim])?);
    }
    let item_embeddings = data
        .items()
        .iter()
        .copied()
        .zip(f.items)
        .collect();
    Ok(MfModel {
        dim,
        item_embeddings,
        users: gt,
        priors,
        loss_history,
    })
}
