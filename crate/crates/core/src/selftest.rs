//! Quick built-in verification run by `gnet selftest`: gradient checks on a
//! tiny network, retrieval metrics against direct counting, and parameter
//! counts against their closed forms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{make_rootstock, make_scion, StageSpec};
use crate::error::Result;
use crate::eval::{cosine_rank, GalleryEntry};
use crate::gradcheck::{relative_error, richardson_derivative};
use crate::heads::BatchLabels;
use crate::model::{GraftedNet, GraftedNetConfig, LossTerms};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Runs every check; never panics on a failed check.
pub fn run(seed: u64) -> Vec<CheckResult> {
    let checks: [(&'static str, fn(u64) -> Result<(bool, String)>); 3] = [
        ("parameter_counts", parameter_counts),
        ("gradients", gradients),
        ("metrics", metrics),
    ];
    checks
        .into_iter()
        .map(|(name, check)| match check(seed) {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

fn parameter_counts(_: u64) -> Result<(bool, String)> {
    let cfg = GraftedNetConfig::new(751);
    let arch = cfg.arch.clone();
    let net = GraftedNet::<f32>::build(cfg)?.strip_for_inference();
    let spec_sum = |stages: Vec<StageSpec>| stages.iter().map(|s| s.param_count()).sum::<usize>();
    let rootstock = spec_sum(make_rootstock(&arch));
    let scion = spec_sum(make_scion(&arch));
    let ok = net.count_params(&["rootstock"]) == rootstock
        && net.count_params(&["scion"]) == scion
        && net.count_params(&[]) == rootstock + scion + net.count_params(&["reduction"]);
    Ok((ok, format!("inference model {} parameters", net.count_params(&[]))))
}

/// One random coordinate in every fourth parameter tensor of the tiny
/// network (which quarter depends on the seed).
fn gradients(seed: u64) -> Result<(bool, String)> {
    let mut net = GraftedNet::<f64>::build(GraftedNetConfig::tiny(3))?;
    net.init_params(seed, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = net.config.arch.input_hw;
    let x = Tensor::<f64>::from_fn(&[2, 3, h, w], |_| rng.gen_range(-1.0..1.0));
    let y = BatchLabels::new(vec![0, 2], 3)?;
    net.zero_grads();
    net.train_batch(&x, &y, LossTerms::ALL)?;
    let mut worst: f64 = 0.0;
    let (mut checked, mut unresolved) = (0, 0);
    for (k, name) in net.param_names().into_iter().enumerate() {
        if (k as u64 + seed) % 4 != 0 {
            continue;
        }
        let p = net.param_mut(&name).expect("listed parameter");
        let i = rng.gen_range(0..p.len());
        let (analytic, v0) = (p.grad.data()[i], p.value.data()[i]);
        let mut probe = net.clone();
        let numeric = richardson_derivative(|d| {
            probe.param_mut(&name).expect("listed parameter").value.data_mut()[i] = v0 + d;
            let loss = probe.train_batch(&x, &y, LossTerms::ALL).map(|l| l.total()).unwrap_or(f64::NAN);
            probe.zero_grads();
            loss
        });
        match numeric {
            Some(n) => {
                checked += 1;
                worst = worst.max((analytic - n).abs() / analytic.abs().max(n.abs()).max(1e-5));
            }
            None => unresolved += 1,
        }
    }
    let ok = worst < 1e-4 && unresolved * 10 <= checked;
    Ok((
        ok,
        format!("{checked} coordinates, worst relative error {worst:.2e}, {unresolved} unresolved"),
    ))
}

/// Ranks random galleries and recomputes first-match rank and AP by
/// counting entries above each positive.
fn metrics(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut rank_mismatches = 0;
    let mut queries = 0;
    for _ in 0..100 {
        let dim = rng.gen_range(2..8);
        let entry = |rng: &mut ChaCha8Rng, pid: i64| {
            let f = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            GalleryEntry::new(f, pid, rng.gen_range(1..4))
        };
        let gallery: Vec<GalleryEntry> = (0..30)
            .map(|_| {
                let pid = rng.gen_range(-1..6);
                entry(&mut rng, if pid == 0 { -1 } else { pid })
            })
            .collect();
        let pid = rng.gen_range(1..6);
        let query = entry(&mut rng, pid);
        let ranking = cosine_rank(0, &query, &gallery)?;
        let valid: Vec<usize> = (0..gallery.len()).filter(|&g| ranking.valid[g]).collect();
        let positives: Vec<usize> = valid.iter().copied().filter(|&g| ranking.matches[g]).collect();
        if positives.is_empty() {
            continue;
        }
        queries += 1;
        let above = |set: &[usize], s: f64| set.iter().filter(|&&g| ranking.similarity[g] >= s).count();
        let best = positives.iter().map(|&g| ranking.similarity[g]).fold(f64::MIN, f64::max);
        let first = 1 + valid.iter().filter(|&&g| ranking.similarity[g] > best).count();
        let ap = positives
            .iter()
            .map(|&g| above(&positives, ranking.similarity[g]) as f64 / above(&valid, ranking.similarity[g]) as f64)
            .sum::<f64>()
            / positives.len() as f64;
        rank_mismatches += usize::from(ranking.first_match_rank() != Some(first));
        match ranking.average_precision() {
            Some(got) => worst = worst.max(relative_error(got, ap)),
            None => rank_mismatches += 1,
        }
    }
    let ok = rank_mismatches == 0 && worst <= 1e-9;
    Ok((
        ok,
        format!("{queries} queries, {rank_mismatches} rank mismatches, worst AP error {worst:.1e}"),
    ))
}
