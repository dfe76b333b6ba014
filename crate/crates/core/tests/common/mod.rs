//! Independent oracles shared by the integration tests: closed-form
//! parameter counts, a brute-force retrieval evaluator, and an adaptive
//! finite-difference differentiator.
#![allow(dead_code)]

use graftnet::eval::GalleryEntry;
use rand::Rng;

/// Closed-form parameter counts, written out layer by layer.
pub mod counts {
    /// conv weights + BN (gamma, beta).
    fn conv_bn(cin: usize, cout: usize, k: usize) -> usize {
        cin * cout * k * k + 2 * cout
    }

    pub fn stem() -> usize {
        conv_bn(3, 64, 7)
    }

    pub fn bottleneck(cin: usize, mid: usize, projection: bool) -> usize {
        let out = 4 * mid;
        conv_bn(cin, mid, 1) + conv_bn(mid, mid, 3) + conv_bn(mid, out, 1) + if projection { conv_bn(cin, out, 1) } else { 0 }
    }

    pub fn fire(cin: usize, squeeze: usize, expand: usize) -> usize {
        conv_bn(cin, squeeze, 1) + squeeze * expand + squeeze * expand * 9 + 2 * (2 * expand)
    }

    fn stage(cin: usize, mid: usize, blocks: usize) -> usize {
        bottleneck(cin, mid, true) + (blocks - 1) * bottleneck(4 * mid, mid, false)
    }

    pub fn rootstock() -> usize {
        stem() + stage(64, 64, 3) + stage(256, 128, 4)
    }

    pub fn scion() -> usize {
        6 * fire(512, 64, 256) + fire(512, 128, 384) + 2 * fire(768, 128, 384)
    }

    pub fn accompanying_trunk() -> usize {
        stage(512, 256, 6) + stage(1024, 512, 3)
    }

    /// One 512-input head and eight 768-input heads, 256 outputs each.
    pub fn reduction(groups: usize) -> usize {
        let head = |cin: usize| cin * 256 / groups + 2 * 256;
        head(512) + 8 * head(768)
    }

    pub fn classifiers(heads: usize, classes: usize) -> usize {
        heads * (256 * classes + classes)
    }
}

/// Rounds `n / 1e6` to `decimals` places.
pub fn millions(n: usize, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (n as f64 / 1e6 * s).round() / s
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Per-query metrics by direct counting; assumes distinct similarities.
/// Returns `None` when the query has no valid positive.
pub struct BruteForce {
    pub first_match_rank: usize,
    pub average_precision: f64,
}

pub fn brute_force(query: &GalleryEntry, gallery: &[GalleryEntry]) -> Option<BruteForce> {
    let mut valid_sims = Vec::new();
    let mut positive_sims = Vec::new();
    for g in gallery {
        let junk = g.person_id <= 0 || (g.person_id == query.person_id && g.camera_id == query.camera_id);
        if junk {
            continue;
        }
        let s = cosine(&query.feature, &g.feature);
        valid_sims.push(s);
        if g.person_id == query.person_id && query.person_id > 0 {
            positive_sims.push(s);
        }
    }
    if positive_sims.is_empty() {
        return None;
    }
    let best = positive_sims.iter().cloned().fold(f64::MIN, f64::max);
    let first_match_rank = 1 + valid_sims.iter().filter(|&&s| s > best).count();
    // Precision at each positive = positives ranked at or above it / all
    // valid entries ranked at or above it.
    let average_precision = positive_sims
        .iter()
        .map(|&p| {
            let above_pos = positive_sims.iter().filter(|&&s| s >= p).count() as f64;
            let above_all = valid_sims.iter().filter(|&&s| s >= p).count() as f64;
            above_pos / above_all
        })
        .sum::<f64>()
        / positive_sims.len() as f64;
    Some(BruteForce {
        first_match_rank,
        average_precision,
    })
}

pub struct RankingInstance {
    pub queries: Vec<GalleryEntry>,
    pub gallery: Vec<GalleryEntry>,
}

pub fn random_entry(rng: &mut impl Rng, dim: usize, person_id: i64, camera_id: u32) -> GalleryEntry {
    let feature = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    GalleryEntry::new(feature, person_id, camera_id)
}

/// Random features, identities, cameras and distractors.
pub fn random_instance(rng: &mut impl Rng) -> RankingInstance {
    let dim = rng.gen_range(2..16);
    let ids = rng.gen_range(2..8);
    let cams = rng.gen_range(2..5);
    let gallery = (0..rng.gen_range(5..60))
        .map(|_| {
            let pid = if rng.gen_bool(0.1) { -1 } else { rng.gen_range(1..=ids) };
            let cam = rng.gen_range(1..=cams);
            random_entry(rng, dim, pid, cam)
        })
        .collect();
    let queries = (0..rng.gen_range(1..10))
        .map(|_| {
            let (pid, cam) = (rng.gen_range(1..=ids), rng.gen_range(1..=cams));
            random_entry(rng, dim, pid, cam)
        })
        .collect();
    RankingInstance { queries, gallery }
}

/// Derivative of `f` at 0 by central differences refined with Richardson
/// extrapolation; the step shrinks until two successive extrapolations
/// agree. `None` if they never do (a kink, or noise-dominated).
pub fn richardson_derivative(mut f: impl FnMut(f64) -> f64) -> Option<f64> {
    let mut h = 1e-4;
    let mut prev_d: Option<f64> = None;
    let mut prev_r: Option<f64> = None;
    for _ in 0..7 {
        let d = (f(h) - f(-h)) / (2.0 * h);
        if let Some(pd) = prev_d {
            let r = (4.0 * d - pd) / 3.0;
            if let Some(pr) = prev_r {
                if (r - pr).abs() <= 1e-5 * r.abs() + 1e-9 {
                    return Some(r);
                }
            }
            prev_r = Some(r);
        }
        prev_d = Some(d);
        h /= 4.0;
    }
    None
}

/// Gradient-check tolerance: relative error with the denominator floored at
/// `1e-5`, i.e. gradients smaller than that are compared absolutely (the
/// finite-difference noise floor of an O(10) loss in f64).
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}
