//! Single-query retrieval evaluation: flip-averaged features, cosine
//! ranking with junk removal, CMC and mAP.

use std::fmt::Write as _;

use crate::data::{stack_images, Normalization, ReidSample};
use crate::error::{Error, Result};
use crate::model::GraftedNet;
use crate::tensor::{Scalar, Tensor};

/// Ranks reported by [`EvalReport`].
pub const REPORT_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub feature: Vec<f32>,
    pub person_id: i64,
    pub camera_id: u32,
    pub is_distractor: bool,
}

impl GalleryEntry {
    pub fn new(feature: Vec<f32>, person_id: i64, camera_id: u32) -> Self {
        GalleryEntry {
            feature,
            person_id,
            camera_id,
            is_distractor: person_id <= 0,
        }
    }
}

/// One query's ranking over the gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub query_index: usize,
    /// Gallery indices by descending similarity.
    pub order: Vec<usize>,
    /// Cosine similarity per gallery index.
    pub similarity: Vec<f64>,
    /// False for junk: same id and camera as the query, or a distractor.
    pub valid: Vec<bool>,
    /// Same person as the query.
    pub matches: Vec<bool>,
}

impl RankingResult {
    /// Match flags of the valid entries, in rank order.
    pub fn valid_matches(&self) -> impl Iterator<Item = bool> + '_ {
        self.order.iter().filter(|&&g| self.valid[g]).map(|&g| self.matches[g])
    }

    pub fn positives(&self) -> usize {
        self.valid_matches().filter(|&m| m).count()
    }

    /// 1-based rank of the first correct match among valid entries.
    pub fn first_match_rank(&self) -> Option<usize> {
        self.valid_matches().position(|m| m).map(|p| p + 1)
    }

    /// Mean over positives of the precision at each positive's position;
    /// `None` when the query has no valid positive.
    pub fn average_precision(&self) -> Option<f64> {
        let mut hits = 0usize;
        let mut sum = 0.0;
        for (pos, m) in self.valid_matches().enumerate() {
            if m {
                hits += 1;
                sum += hits as f64 / (pos + 1) as f64;
            }
        }
        (hits > 0).then(|| sum / hits as f64)
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Sorts the gallery by descending cosine similarity to `query`. Ties are
/// broken by `(person id, camera, distractor flag)` and then gallery index,
/// so metrics do not depend on gallery order.
pub fn cosine_rank(query_index: usize, query: &GalleryEntry, gallery: &[GalleryEntry]) -> Result<RankingResult> {
    let qn = norm(&query.feature);
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::Invalid(format!("query {query_index} has a zero or non-finite feature")));
    }
    let mut similarity = Vec::with_capacity(gallery.len());
    for (i, g) in gallery.iter().enumerate() {
        if g.feature.len() != query.feature.len() {
            return Err(Error::Dim {
                axis: "feature",
                expected: query.feature.len(),
                actual: g.feature.len(),
            });
        }
        let gn = norm(&g.feature);
        if gn == 0.0 || !gn.is_finite() {
            return Err(Error::Invalid(format!("gallery entry {i} has a zero or non-finite feature")));
        }
        let dot: f64 = query
            .feature
            .iter()
            .zip(&g.feature)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        similarity.push(dot / (qn * gn));
    }
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| {
        let (ga, gb) = (&gallery[a], &gallery[b]);
        similarity[b]
            .total_cmp(&similarity[a])
            .then(ga.person_id.cmp(&gb.person_id))
            .then(ga.camera_id.cmp(&gb.camera_id))
            .then(ga.is_distractor.cmp(&gb.is_distractor))
            .then(a.cmp(&b))
    });
    let matches = gallery
        .iter()
        .map(|g| !query.is_distractor && !g.is_distractor && g.person_id == query.person_id)
        .collect();
    let valid = gallery
        .iter()
        .map(|g| !(g.is_distractor || (g.person_id == query.person_id && g.camera_id == query.camera_id)))
        .collect();
    Ok(RankingResult {
        query_index,
        order,
        similarity,
        valid,
        matches,
    })
}

/// Cumulative match characteristic at the requested ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct Cmc {
    pub ranks: Vec<usize>,
    pub values: Vec<f64>,
    pub evaluated: usize,
    /// Queries without any valid positive, left out of the average.
    pub excluded: usize,
}

impl Cmc {
    pub fn at(&self, rank: usize) -> Option<f64> {
        self.ranks.iter().position(|&r| r == rank).map(|i| self.values[i])
    }
}

pub fn cmc(results: &[RankingResult], ranks: &[usize]) -> Result<Cmc> {
    if ranks.contains(&0) {
        return Err(Error::Invalid("CMC ranks start at 1".into()));
    }
    let firsts: Vec<usize> = results.iter().filter_map(RankingResult::first_match_rank).collect();
    if firsts.is_empty() {
        return Err(Error::Invalid("no query has a valid positive".into()));
    }
    let values = ranks
        .iter()
        .map(|&r| firsts.iter().filter(|&&f| f <= r).count() as f64 / firsts.len() as f64)
        .collect();
    Ok(Cmc {
        ranks: ranks.to_vec(),
        values,
        evaluated: firsts.len(),
        excluded: results.len() - firsts.len(),
    })
}

/// Mean average precision over queries with at least one valid positive;
/// returns `(mAP, evaluated queries)`.
pub fn mean_ap(results: &[RankingResult]) -> Result<(f64, usize)> {
    let aps: Vec<f64> = results.iter().filter_map(RankingResult::average_precision).collect();
    if aps.is_empty() {
        return Err(Error::Invalid("no query has a valid positive".into()));
    }
    Ok((aps.iter().sum::<f64>() / aps.len() as f64, aps.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query_index: usize,
    pub person_id: i64,
    pub average_precision: Option<f64>,
    pub first_match_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub cmc: Cmc,
    pub per_query: Vec<QueryRecord>,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.values[0]
    }

    /// `metric=value` lines, four decimals.
    pub fn to_text(&self) -> String {
        let mut s = format!("mAP={:.4}\n", self.map);
        for (r, v) in self.cmc.ranks.iter().zip(&self.cmc.values) {
            let _ = writeln!(s, "rank{r}={v:.4}");
        }
        let _ = writeln!(s, "queries={}", self.cmc.evaluated);
        let _ = writeln!(s, "excluded_queries={}", self.cmc.excluded);
        s
    }

    /// `query_id,ap,first_match_rank`; empty fields for excluded queries.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("query_id,ap,first_match_rank\n");
        for q in &self.per_query {
            let ap = q.average_precision.map(|a| format!("{a:.6}")).unwrap_or_default();
            let r = q.first_match_rank.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{ap},{r}", q.query_index);
        }
        s
    }
}

/// Ranks every query against the gallery and aggregates CMC and mAP.
pub fn evaluate_entries(queries: &[GalleryEntry], gallery: &[GalleryEntry]) -> Result<EvalReport> {
    let results = queries
        .iter()
        .enumerate()
        .map(|(i, q)| cosine_rank(i, q, gallery))
        .collect::<Result<Vec<_>>>()?;
    let cmc = cmc(&results, &REPORT_RANKS)?;
    let (map, _) = mean_ap(&results)?;
    let per_query = results
        .iter()
        .zip(queries)
        .map(|(r, q)| QueryRecord {
            query_index: r.query_index,
            person_id: q.person_id,
            average_precision: r.average_precision(),
            first_match_rank: r.first_match_rank(),
        })
        .collect();
    Ok(EvalReport { map, cmc, per_query })
}

/// Mirrors a `N x C x H x W` batch along its width.
pub fn hflip_batch<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, _, w) = x.dims4()?;
    let mut out = x.clone();
    out.data_mut().chunks_mut(w).for_each(<[T]>::reverse);
    Ok(out)
}

/// `(f(I) + f(flip(I))) / 2` for a batch of normalized images.
pub fn extract_batch<T: Scalar>(model: &mut GraftedNet<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let mut f = model.features(images)?;
    let g = model.features(&hflip_batch(images)?)?;
    f.add_assign(&g)?;
    f.scale(T::of(0.5));
    Ok(f)
}

/// Flip-averaged descriptor of one normalized `3 x H x W` image.
pub fn extract_feature<T: Scalar>(model: &mut GraftedNet<T>, image: &Tensor<T>) -> Result<Vec<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.clone().reshape(&shape)?;
    Ok(extract_batch(model, &batch)?.into_data())
}

/// Loads, normalizes and describes samples in chunks of `chunk` images.
pub fn extract_entries(
    model: &mut GraftedNet<f32>,
    samples: &[ReidSample],
    norm: &Normalization,
    chunk: usize,
) -> Result<Vec<GalleryEntry>> {
    let hw = model.config.arch.input_hw;
    let mut out = Vec::with_capacity(samples.len());
    for group in samples.chunks(chunk.max(1)) {
        let imgs = group
            .iter()
            .map(|s| {
                let mut img = s.load(hw)?;
                norm.apply(&mut img)?;
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        let feats = extract_batch(model, &stack_images(imgs)?)?;
        let (_, d) = feats.dims2()?;
        for (s, row) in group.iter().zip(feats.data().chunks(d)) {
            out.push(GalleryEntry::new(row.to_vec(), s.person_id, s.camera_id));
        }
    }
    Ok(out)
}

/// Extract, rank, score: the end-to-end evaluation of a dataset's
/// query/gallery split.
pub fn evaluate(
    model: &mut GraftedNet<f32>,
    queries: &[ReidSample],
    gallery: &[ReidSample],
    norm: &Normalization,
) -> Result<EvalReport> {
    let q = extract_entries(model, queries, norm, 16)?;
    let g = extract_entries(model, gallery, norm, 16)?;
    evaluate_entries(&q, &g)
}
