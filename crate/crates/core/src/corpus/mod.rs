//! Corpus ingestion and representation learning: ratings, item catalog,
//! user embeddings and priors, and soft-attribute directions.

mod cav;
mod io;
mod mf;
pub mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::norm;

pub use cav::{cav_training_sets, learn_cav, CavConfig};
pub use io::{
    load_ratings, read_cavs, read_catalog_csv, read_embeddings, read_tags_csv, write_cavs,
    write_catalog_csv, write_embeddings, write_ratings_csv, write_tags_csv, CatalogRow, TagRow,
};
pub use mf::{train_mf, MfConfig, MfModel};

macro_rules! id_newtype {
    ($name:ident, $inner:ty) => {
        #[derive(
            Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_newtype!(ItemId, u64);
id_newtype!(UserId, u64);
id_newtype!(AttrId, u32);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rating {
    pub user: UserId,
    pub item: ItemId,
    pub value: f64,
}

/// A validated set of explicit ratings with dense id maps.
#[derive(Clone, Debug)]
pub struct RatingsDataset {
    records: Vec<Rating>,
    users: Vec<UserId>,
    items: Vec<ItemId>,
    user_index: HashMap<UserId, usize>,
    item_index: HashMap<ItemId, usize>,
}

impl RatingsDataset {
    pub fn from_records(records: Vec<Rating>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !r.value.is_finite() || r.value == 0.0 {
                return Err(Error::Data(format!(
                    "rating for user {} item {} must be finite and nonzero, got {}",
                    r.user, r.item, r.value
                )));
            }
            if !seen.insert((r.user, r.item)) {
                return Err(Error::Data(format!(
                    "duplicate rating for user {} item {}",
                    r.user, r.item
                )));
            }
        }
        let mut users: Vec<UserId> = records.iter().map(|r| r.user).collect();
        users.sort_unstable();
        users.dedup();
        let mut items: Vec<ItemId> = records.iter().map(|r| r.item).collect();
        items.sort_unstable();
        items.dedup();
        let user_index = users.iter().enumerate().map(|(i, u)| (*u, i)).collect();
        let item_index = items.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        Ok(Self {
            records,
            users,
            items,
            user_index,
            item_index,
        })
    }

    pub fn records(&self) -> &[Rating] {
        &self.records
    }

    /// User ids in ascending order; position is the dense index.
    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    /// Item ids in ascending order; position is the dense index.
    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn user_index(&self, id: UserId) -> Option<usize> {
        self.user_index.get(&id).copied()
    }

    pub fn item_index(&self, id: ItemId) -> Option<usize> {
        self.item_index.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Keeps items with at least `min_item_ratings` ratings and users with
    /// at least `min_user_ratings`. The item pass runs first; passes repeat
    /// until both thresholds hold on the result.
    pub fn filter(&self, min_item_ratings: usize, min_user_ratings: usize) -> Result<Self> {
        let mut records = self.records.clone();
        loop {
            let before = records.len();
            let mut item_counts: HashMap<ItemId, usize> = HashMap::new();
            for r in &records {
                *item_counts.entry(r.item).or_default() += 1;
            }
            records.retain(|r| item_counts[&r.item] >= min_item_ratings);

            let mut user_counts: HashMap<UserId, usize> = HashMap::new();
            for r in &records {
                *user_counts.entry(r.user).or_default() += 1;
            }
            records.retain(|r| user_counts[&r.user] >= min_user_ratings);

            if records.len() == before {
                break;
            }
        }
        if records.is_empty() {
            return Err(Error::Config(format!(
                "no ratings left after filtering (min_item_ratings={min_item_ratings}, \
                 min_user_ratings={min_user_ratings})"
            )));
        }
        Self::from_records(records)
    }

    pub fn user_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.users.len()];
        for r in &self.records {
            counts[self.user_index[&r.user]] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub id: ItemId,
    pub title: String,
    pub year: i32,
    pub embedding: Vec<f64>,
}

impl CatalogItem {
    /// "Title (Year)", the form used in dialogue text and trajectory names.
    pub fn display_name(&self) -> String {
        format!("{} ({})", self.title, self.year)
    }
}

/// The recommendable corpus with embeddings of a shared dimension.
#[derive(Clone, Debug)]
pub struct ItemCatalog {
    items: Vec<CatalogItem>,
    dim: usize,
    max_norm: f64,
    index: HashMap<ItemId, usize>,
}

impl ItemCatalog {
    pub fn new(items: Vec<CatalogItem>) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Data("item catalog is empty".into()))?;
        let dim = first.embedding.len();
        if dim == 0 {
            return Err(Error::Data("embedding dimension must be positive".into()));
        }
        let mut index = HashMap::with_capacity(items.len());
        let mut max_norm: f64 = 0.0;
        for (i, item) in items.iter().enumerate() {
            if item.embedding.len() != dim {
                return Err(Error::Data(format!(
                    "item {} has dimension {}, expected {dim}",
                    item.id,
                    item.embedding.len()
                )));
            }
            if item.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("item {} has non-finite embedding", item.id)));
            }
            if index.insert(item.id, i).is_some() {
                return Err(Error::Data(format!("duplicate item id {}", item.id)));
            }
            max_norm = max_norm.max(norm(&item.embedding));
        }
        if max_norm == 0.0 {
            return Err(Error::Degenerate("all item embeddings are zero".into()));
        }
        Ok(Self {
            items,
            dim,
            max_norm,
            index,
        })
    }

    /// Joins learned embeddings with a title table. Items without a title
    /// row are named `Item <id>` with year 0.
    pub fn from_embeddings(
        embeddings: &[(ItemId, Vec<f64>)],
        titles: &[CatalogRow],
    ) -> Result<Self> {
        let by_id: HashMap<ItemId, &CatalogRow> = titles.iter().map(|r| (r.id, r)).collect();
        let items = embeddings
            .iter()
            .map(|(id, emb)| {
                let (title, year) = match by_id.get(id) {
                    Some(row) => (row.title.clone(), row.year),
                    None => (format!("Item {id}"), 0),
                };
                CatalogItem {
                    id: *id,
                    title,
                    year,
                    embedding: emb.clone(),
                }
            })
            .collect();
        Self::new(items)
    }

    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cached `max_i ||φ_I(i)||₂`.
    pub fn max_norm(&self) -> f64 {
        self.max_norm
    }

    pub fn index_of(&self, id: ItemId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn get(&self, id: ItemId) -> Option<&CatalogItem> {
        self.index_of(id).map(|i| &self.items[i])
    }

    pub fn embedding(&self, id: ItemId) -> Option<&[f64]> {
        self.get(id).map(|item| item.embedding.as_slice())
    }

    pub(crate) fn require(&self, id: ItemId) -> Result<&CatalogItem> {
        self.get(id)
            .ok_or_else(|| Error::Data(format!("unknown item id {id}")))
    }
}

/// Latent user embedding that drives simulated responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthUser {
    pub user_id: UserId,
    pub embedding: Vec<f64>,
}

impl GroundTruthUser {
    pub fn new(user_id: UserId, embedding: Vec<f64>) -> Result<Self> {
        if embedding.is_empty() || embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "user {user_id} embedding must be nonempty and finite"
            )));
        }
        Ok(Self { user_id, embedding })
    }
}

/// Diagonal Gaussian prior over a user's embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserPrior {
    pub user_id: UserId,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl UserPrior {
    pub fn new(user_id: UserId, mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() || mean.is_empty() {
            return Err(Error::Data(format!(
                "prior for user {user_id}: mean and variance dimensions differ or are empty"
            )));
        }
        if variance.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Data(format!(
                "prior for user {user_id}: variances must be finite and positive"
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("prior for user {user_id}: non-finite mean")));
        }
        Ok(Self {
            user_id,
            mean,
            variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Soft-attribute direction in item-embedding space with its probit noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub id: AttrId,
    pub name: String,
    pub direction: Vec<f64>,
    pub sigma: f64,
}

impl Cav {
    pub fn new(id: AttrId, name: impl Into<String>, direction: Vec<f64>, sigma: f64) -> Result<Self> {
        let name = name.into();
        let n = norm(&direction);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!(
                "attribute `{name}` direction must have unit norm, got {n}"
            )));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Data(format!("attribute `{name}` sigma must be positive")));
        }
        Ok(Self {
            id,
            name,
            direction,
            sigma,
        })
    }

    /// Normalizes `direction` before validation.
    pub fn from_raw(id: AttrId, name: impl Into<String>, direction: &[f64], sigma: f64) -> Result<Self> {
        let n = norm(direction);
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::Degenerate("attribute direction has zero norm".into()));
        }
        Self::new(id, name, direction.iter().map(|v| v / n).collect(), sigma)
    }
}

/// The attribute vocabulary usable for queries and critiques.
#[derive(Clone, Debug, Default)]
pub struct CavSet {
    cavs: Vec<Cav>,
    index: HashMap<AttrId, usize>,
}

impl CavSet {
    pub fn new(cavs: Vec<Cav>) -> Result<Self> {
        let mut index = HashMap::with_capacity(cavs.len());
        let mut names = HashSet::new();
        let dim = cavs.first().map(|c| c.direction.len());
        for (i, cav) in cavs.iter().enumerate() {
            if Some(cav.direction.len()) != dim {
                return Err(Error::Data(format!(
                    "attribute `{}` has mismatched dimension",
                    cav.name
                )));
            }
            if index.insert(cav.id, i).is_some() {
                return Err(Error::Data(format!("duplicate attribute id {}", cav.id)));
            }
            if !names.insert(cav.name.clone()) {
                return Err(Error::Data(format!("duplicate attribute name `{}`", cav.name)));
            }
        }
        Ok(Self { cavs, index })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn as_slice(&self) -> &[Cav] {
        &self.cavs
    }

    pub fn len(&self) -> usize {
        self.cavs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cavs.is_empty()
    }

    pub fn index_of(&self, id: AttrId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn get(&self, id: AttrId) -> Option<&Cav> {
        self.index_of(id).map(|i| &self.cavs[i])
    }

    pub fn by_name(&self, name: &str) -> Option<&Cav> {
        self.cavs.iter().find(|c| c.name == name)
    }

    pub(crate) fn require(&self, id: AttrId) -> Result<&Cav> {
        self.get(id)
            .ok_or_else(|| Error::Data(format!("unknown attribute id {id}")))
    }

    /// Checks every direction against the catalog dimension.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        match self.cavs.first() {
            Some(c) if c.direction.len() != dim => Err(Error::Data(format!(
                "attribute dimension {} does not match catalog dimension {dim}",
                c.direction.len()
            ))),
            _ => Ok(()),
        }
    }
}
