//! Independent reference implementations used to cross-check the library.
//! Written from the ranking and split rules directly, sharing no code with
//! the crate beyond its data types.

#![allow(dead_code)]

use std::cmp::Ordering;

use chrono::{TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use r2p_core::db::{ConceptRecord, Database};
use r2p_core::embedding::Embedding;
use r2p_core::image::ImageRef;
use r2p_core::retrieval::RetrievalMode;

pub fn unit(values: Vec<f64>) -> Vec<f64> {
    let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    values.into_iter().map(|v| v / n).collect()
}

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return unit(v);
        }
    }
}

/// Draws a vector from a small pool of directions so exact score ties are
/// common.
fn tie_prone_unit(rng: &mut impl Rng, pool: &[Vec<f64>], dim: usize) -> Vec<f64> {
    if !pool.is_empty() && rng.random_bool(0.3) {
        pool[rng.random_range(0..pool.len())].clone()
    } else {
        random_unit(rng, dim)
    }
}

pub fn record(id: String, name: String, visual: Vec<f64>, textual: Vec<f64>) -> ConceptRecord {
    ConceptRecord {
        concept_id: id.clone(),
        name,
        category: "object".into(),
        description: format!("description of {id}"),
        attributes: vec!["plain".into()],
        visual_embedding: Embedding::normalize(visual).unwrap(),
        textual_embedding: Embedding::normalize(textual).unwrap(),
        reference_image: ImageRef {
            path: format!("images/{id}.png"),
            sha256: "0".repeat(64),
        },
        extra_reference_images: Vec::new(),
        enrolled_at: Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap(),
    }
}

/// Random database of `n` records; ids are inserted in shuffled order and
/// about a third of the vectors repeat, producing exact ties.
pub fn random_database(rng: &mut impl Rng, n: usize, dim: usize) -> (Database, Vec<ConceptRecord>) {
    build_database(rng, n, dim, 4)
}

/// Like [`random_database`] but with independent vectors (no planted ties).
pub fn random_database_distinct(rng: &mut impl Rng, n: usize, dim: usize) -> (Database, Vec<ConceptRecord>) {
    build_database(rng, n, dim, 0)
}

fn build_database(rng: &mut impl Rng, n: usize, dim: usize, pool_size: usize) -> (Database, Vec<ConceptRecord>) {
    let pool: Vec<Vec<f64>> = (0..pool_size).map(|_| random_unit(rng, dim)).collect();
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let db = Database::new(format!("test:dim={dim}"));
    let mut records = Vec::with_capacity(n);
    for i in ids {
        let r = record(
            format!("c{i:05}"),
            format!("concept {i}"),
            tie_prone_unit(rng, &pool, dim),
            tie_prone_unit(rng, &pool, dim),
        );
        records.push(db.upsert(r).unwrap());
    }
    (db, records)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc.clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub id: String,
    pub s_vv: f64,
    pub s_vt: f64,
    pub fused: f64,
}

fn by_desc_then_id(key: impl Fn(&Scored) -> f64) -> impl Fn(&Scored, &Scored) -> Ordering {
    move |a, b| match key(a).partial_cmp(&key(b)).unwrap() {
        Ordering::Equal => a.id.cmp(&b.id),
        o => o.reverse(),
    }
}

/// Full sort of every record, then truncation.
pub fn brute_force(query: &[f64], records: &[ConceptRecord], k: usize, mode: RetrievalMode) -> Vec<Scored> {
    let mut all: Vec<Scored> = records
        .iter()
        .map(|r| {
            let s_vv = dot(query, r.visual_embedding.values());
            let s_vt = dot(query, r.textual_embedding.values());
            Scored {
                id: r.concept_id.clone(),
                s_vv,
                s_vt,
                fused: 0.5 * s_vv + 0.5 * s_vt,
            }
        })
        .collect();
    match mode {
        RetrievalMode::Fused => all.sort_by(by_desc_then_id(|s| s.fused)),
        RetrievalMode::ImageOnly => all.sort_by(by_desc_then_id(|s| s.s_vv)),
        RetrievalMode::TextOnly => all.sort_by(by_desc_then_id(|s| s.s_vt)),
        RetrievalMode::TwoStep { rerank_pool } => {
            all.sort_by(by_desc_then_id(|s| s.s_vv));
            all.truncate(rerank_pool);
            all.sort_by(by_desc_then_id(|s| s.s_vt));
        }
    }
    all.truncate(k);
    all
}

/// Reference image: closest to the normalized mean under Euclidean
/// distance (equivalent to highest cosine on unit vectors). Queries are the
/// rest, furthest first. Ties go to the lexicographically smaller path.
pub fn split_by_euclidean(images: &[(String, Vec<f64>)], n_query: Option<usize>) -> (String, Vec<String>) {
    let dim = images[0].1.len();
    let mut mean = vec![0.0; dim];
    for (_, v) in images {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / images.len() as f64;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let anchor: Vec<f64> = if norm == 0.0 {
        mean
    } else {
        mean.iter().map(|m| m / norm).collect()
    };
    let dist = |v: &[f64]| -> f64 {
        v.iter()
            .zip(&anchor)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let mut order: Vec<(f64, &String)> = images.iter().map(|(p, v)| (dist(v), p)).collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(b.1)));
    let reference = order[0].1.clone();
    let mut rest: Vec<(f64, &String)> = order[1..].to_vec();
    rest.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)));
    let mut queries: Vec<String> = rest.into_iter().map(|(_, p)| p.clone()).collect();
    if let Some(n) = n_query {
        queries.truncate(n);
    }
    (reference, queries)
}
