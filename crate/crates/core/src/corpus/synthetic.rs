//! Synthetic corpora so the whole pipeline runs without external data.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    AttrId, CatalogItem, CatalogRow, Cav, CavSet, GroundTruthUser, ItemCatalog, ItemId, Rating,
    TagRow, UserId, UserPrior,
};
use crate::error::Result;
use crate::math::{derive_seed, dot, rng_from_seed, SimRng};

const ATTRIBUTE_NAMES: &[&str] = &[
    "funny",
    "romantic",
    "serious",
    "dark",
    "violent",
    "dense",
    "cartoonish",
    "realistic",
    "suspenseful",
    "heartwarming",
    "dynamic",
    "mainstream",
];

pub fn attribute_name(index: usize) -> String {
    ATTRIBUTE_NAMES
        .get(index)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("attribute-{index}"))
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_users: usize,
    pub dim: usize,
    pub n_attrs: usize,
    /// Per-coordinate standard deviation of item embeddings is `item_scale / sqrt(dim)`.
    pub item_scale: f64,
    /// Per-coordinate standard deviation of prior means.
    pub user_scale: f64,
    /// Per-coordinate prior variance; ground truth is one draw from the prior.
    pub prior_variance: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_items: 500,
            n_users: 200,
            dim: 8,
            n_attrs: 6,
            item_scale: 1.0,
            user_scale: 1.0,
            prior_variance: 1.0,
            sigma: 0.25,
            seed: 0,
        }
    }
}

/// Embeddings, users, priors and attributes drawn directly from the
/// generative model, bypassing training.
#[derive(Clone, Debug)]
pub struct LatentCorpus {
    pub catalog: ItemCatalog,
    pub users: Vec<GroundTruthUser>,
    pub priors: Vec<UserPrior>,
    pub cavs: CavSet,
}

fn gaussian_vec(rng: &mut SimRng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn synthetic_title(id: u64) -> CatalogRow {
    CatalogRow {
        id: ItemId(id),
        title: format!("Synthetic Movie {id}"),
        year: 1950 + (id % 70) as i32,
    }
}

pub fn latent_corpus(spec: &SyntheticSpec) -> Result<LatentCorpus> {
    let mut rng = rng_from_seed(derive_seed(spec.seed, 1));
    let item_sd = spec.item_scale / (spec.dim as f64).sqrt();
    let items = (0..spec.n_items)
        .map(|i| {
            let row = synthetic_title(i as u64 + 1);
            CatalogItem {
                id: row.id,
                title: row.title,
                year: row.year,
                embedding: gaussian_vec(&mut rng, spec.dim, item_sd),
            }
        })
        .collect();
    let catalog = ItemCatalog::new(items)?;

    let mut users = Vec::with_capacity(spec.n_users);
    let mut priors = Vec::with_capacity(spec.n_users);
    let prior_sd = spec.prior_variance.sqrt();
    for u in 0..spec.n_users {
        let id = UserId(u as u64 + 1);
        let mean = gaussian_vec(&mut rng, spec.dim, spec.user_scale);
        let truth: Vec<f64> = mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + prior_sd * z
            })
            .collect();
        priors.push(UserPrior::new(id, mean, vec![spec.prior_variance; spec.dim])?);
        users.push(GroundTruthUser::new(id, truth)?);
    }

    let cavs = (0..spec.n_attrs)
        .map(|g| {
            let dir = gaussian_vec(&mut rng, spec.dim, 1.0);
            Cav::from_raw(AttrId(g as u32), attribute_name(g), &dir, spec.sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentCorpus {
        catalog,
        users,
        priors,
        cavs: CavSet::new(cavs)?,
    })
}

/// Raw files for the ingestion pipeline.
#[derive(Clone, Debug)]
pub struct RawCorpus {
    pub ratings: Vec<Rating>,
    pub titles: Vec<CatalogRow>,
    pub tags: Vec<TagRow>,
}

/// Ratings on a half-star 0.5..=5 scale from a latent factor model, plus
/// tags marking the items that score highest along random attribute axes.
pub fn raw_corpus(spec: &SyntheticSpec, ratings_per_user: usize, tag_fraction: f64) -> Result<RawCorpus> {
    let latent = latent_corpus(spec)?;
    let mut rng = rng_from_seed(derive_seed(spec.seed, 2));
    let n_items = latent.catalog.len();
    let per_user = ratings_per_user.min(n_items);
    let mut ratings = Vec::with_capacity(per_user * latent.users.len());
    for user in &latent.users {
        let mut picked = sample(&mut rng, n_items, per_user).into_vec();
        picked.sort_unstable();
        for i in picked {
            let item = &latent.catalog.items()[i];
            let noise: f64 = StandardNormal.sample(&mut rng);
            let raw = 3.0 + dot(&user.embedding, &item.embedding) + 0.3 * noise;
            let value = ((raw * 2.0).round() / 2.0).clamp(0.5, 5.0);
            ratings.push(Rating {
                user: user.user_id,
                item: item.id,
                value,
            });
        }
    }

    let titles = latent
        .catalog
        .items()
        .iter()
        .map(|i| CatalogRow {
            id: i.id,
            title: i.title.clone(),
            year: i.year,
        })
        .collect();

    let n_tagged = ((n_items as f64) * tag_fraction).ceil().max(1.0) as usize;
    let mut tags = Vec::new();
    for cav in latent.cavs.as_slice() {
        let mut scored: Vec<(f64, ItemId)> = latent
            .catalog
            .items()
            .iter()
            .map(|i| (dot(&cav.direction, &i.embedding) + 0.05 * rng.random::<f64>(), i.id))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, id) in scored.into_iter().take(n_tagged) {
            tags.push(TagRow {
                item: id,
                tag: cav.name.clone(),
            });
        }
    }
    tags.sort_by(|a, b| a.item.cmp(&b.item).then(a.tag.cmp(&b.tag)));
    Ok(RawCorpus {
        ratings,
        titles,
        tags,
    })
}
