#![allow(dead_code)]

pub mod checks;

use std::path::PathBuf;

use crssim::behavior::{BehaviorConfig, Query, Slate};
use crssim::corpus::{AttrId, CatalogItem, Cav, CavSet, ItemCatalog, ItemId};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

/// The movies and attributes named in the appendix trajectory.
pub fn appendix_corpus() -> (ItemCatalog, CavSet) {
    let movies: [(u64, &str, i32); 7] = [
        (1569, "My Best Friend's Wedding", 1997),
        (147, "The Basketball Diaries", 1995),
        (5541, "Hot Shots!", 1991),
        (4084, "Beverly Hills Cop II", 1987),
        (1963, "Take the Money and Run", 1969),
        (139385, "The Revenant", 2015),
        (52435, "How the Grinch Stole Christmas!", 1966),
    ];
    let items = movies
        .iter()
        .enumerate()
        .map(|(k, (id, title, year))| CatalogItem {
            id: ItemId(*id),
            title: title.to_string(),
            year: *year,
            embedding: vec![(k as f64 * 0.7).cos(), (k as f64 * 0.7).sin()],
        })
        .collect();
    let cavs = CavSet::new(vec![
        Cav::new(AttrId(23), "romantic", vec![1.0, 0.0], 1.0).unwrap(),
        Cav::new(AttrId(25), "serious", vec![0.0, 1.0], 1.0).unwrap(),
    ])
    .unwrap();
    (ItemCatalog::new(items).unwrap(), cavs)
}

pub fn catalog_from(embeddings: &[Vec<f64>]) -> ItemCatalog {
    ItemCatalog::new(
        embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| CatalogItem {
                id: ItemId(i as u64 + 1),
                title: format!("Item {}", i + 1),
                year: 2000,
                embedding: e.clone(),
            })
            .collect(),
    )
    .unwrap()
}

pub fn cavs_from(directions: &[Vec<f64>], sigma: f64) -> CavSet {
    CavSet::new(
        directions
            .iter()
            .enumerate()
            .map(|(g, d)| Cav::from_raw(AttrId(g as u32), format!("attr{g}"), d, sigma).unwrap())
            .collect(),
    )
    .unwrap()
}

pub fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2(a: &[f64]) -> f64 {
    dotp(a, a).sqrt()
}

pub fn phi(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

pub fn max_norm(catalog: &ItemCatalog) -> f64 {
    catalog.items().iter().map(|i| l2(&i.embedding)).fold(0.0, f64::max)
}

/// `P(more | φ)` straight from the definition.
pub fn p_more(phi_u: &[f64], item: ItemId, attr: AttrId, catalog: &ItemCatalog, cavs: &CavSet) -> f64 {
    let cav = cavs.get(attr).unwrap();
    let n = l2(phi_u);
    let target: Vec<f64> = if n > 0.0 {
        phi_u.iter().map(|v| max_norm(catalog) * v / n).collect()
    } else {
        vec![0.0; phi_u.len()]
    };
    let anchor = &catalog.get(item).unwrap().embedding;
    let diff: Vec<f64> = target.iter().zip(anchor).map(|(t, a)| t - a).collect();
    phi(dotp(&cav.direction, &diff) / cav.sigma)
}

/// Response distribution of a query for one embedding.
pub fn response_probs(q: &Query, phi_u: &[f64], catalog: &ItemCatalog, cavs: &CavSet, b: &BehaviorConfig) -> Vec<f64> {
    match q {
        Query::Attr { item, attr } => {
            let p = p_more(phi_u, *item, *attr, catalog, cavs);
            vec![p, 1.0 - p]
        }
        Query::Item(slate) => {
            let u: Vec<f64> = slate
                .items()
                .iter()
                .map(|i| dotp(&catalog.get(*i).unwrap().embedding, phi_u) / b.temperature)
                .collect();
            let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = u.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|x| x / z).collect()
        }
    }
}

/// `(max_norm / m) Σ_ρ ‖Σ_j φ_j P(ρ | q, φ_j)‖`.
pub fn f_oracle(q: &Query, samples: &[Vec<f64>], catalog: &ItemCatalog, cavs: &CavSet, b: &BehaviorConfig) -> f64 {
    let d = samples[0].len();
    let probs: Vec<Vec<f64>> = samples.iter().map(|s| response_probs(q, s, catalog, cavs, b)).collect();
    let n_resp = probs[0].len();
    let mut total = 0.0;
    for r in 0..n_resp {
        let mut acc = vec![0.0; d];
        for (s, p) in samples.iter().zip(&probs) {
            for k in 0..d {
                acc[k] += s[k] * p[r];
            }
        }
        total += l2(&acc);
    }
    max_norm(catalog) * total / samples.len() as f64
}

/// Max over items of the weighted mean utility.
pub fn eu_weighted(atoms: &[(f64, Vec<f64>)], catalog: &ItemCatalog) -> f64 {
    catalog
        .items()
        .iter()
        .map(|i| atoms.iter().map(|(w, a)| w * dotp(a, &i.embedding)).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Exact value of information over a discrete belief.
pub fn evoi_oracle(q: &Query, atoms: &[(f64, Vec<f64>)], catalog: &ItemCatalog, cavs: &CavSet, b: &BehaviorConfig) -> f64 {
    let probs: Vec<Vec<f64>> = atoms.iter().map(|(_, a)| response_probs(q, a, catalog, cavs, b)).collect();
    let mut peu = 0.0;
    for r in 0..probs[0].len() {
        let joint: Vec<f64> = atoms.iter().zip(&probs).map(|((w, _), p)| w * p[r]).collect();
        let pr: f64 = joint.iter().sum();
        if pr <= 0.0 {
            continue;
        }
        let post: Vec<(f64, Vec<f64>)> = atoms
            .iter()
            .zip(&joint)
            .map(|((_, a), j)| (j / pr, a.clone()))
            .collect();
        peu += pr * eu_weighted(&post, catalog);
    }
    peu - eu_weighted(atoms, catalog)
}

pub fn every_query(catalog: &ItemCatalog, cavs: &CavSet) -> Vec<Query> {
    let ids: Vec<ItemId> = catalog.items().iter().map(|i| i.id).collect();
    let mut out = Vec::new();
    for i in &ids {
        for c in cavs.as_slice() {
            out.push(Query::Attr { item: *i, attr: c.id });
        }
    }
    for a in 0..ids.len() {
        for b in a + 1..ids.len() {
            out.push(Query::Item(Slate::new(vec![ids[a], ids[b]]).unwrap()));
        }
    }
    out
}

/// A random small instance: catalog, attributes and samples in `d` dims.
#[derive(Clone, Debug)]
pub struct Instance {
    pub items: Vec<Vec<f64>>,
    pub attrs: Vec<Vec<f64>>,
    pub samples: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl Instance {
    pub fn catalog(&self) -> ItemCatalog {
        catalog_from(&self.items)
    }

    pub fn cavs(&self) -> CavSet {
        cavs_from(&self.attrs, 0.7)
    }

    pub fn atoms(&self) -> Vec<(f64, Vec<f64>)> {
        let z: f64 = self.weights.iter().sum();
        self.weights.iter().zip(&self.samples).map(|(w, s)| (w / z, s.clone())).collect()
    }
}

fn vec_in(d: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, d)
}

/// Nonzero vectors, as required for item embeddings and directions.
fn nonzero(d: usize) -> impl Strategy<Value = Vec<f64>> {
    vec_in(d, -2.0, 2.0).prop_filter("nonzero", |v| l2(v) > 1e-3)
}

pub fn instance(max_items: usize, max_attrs: usize, max_samples: usize) -> impl Strategy<Value = Instance> {
    (2usize..=3).prop_flat_map(move |d| {
        (
            prop::collection::vec(nonzero(d), 2..=max_items),
            prop::collection::vec(nonzero(d), 1..=max_attrs),
            prop::collection::vec(vec_in(d, -2.0, 2.0), 1..=max_samples),
        )
            .prop_flat_map(|(items, attrs, samples)| {
                let n = samples.len();
                (
                    Just(items),
                    Just(attrs),
                    Just(samples),
                    prop::collection::vec(0.05f64..1.0, n),
                )
            })
            .prop_map(|(items, attrs, samples, weights)| Instance {
                items,
                attrs,
                samples,
                weights,
            })
    })
}
