//! Exhaustive reference implementations of the sparsifiers, checked on
//! seeded random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_tuning::sparsify::{
    dynamicvit_sparsify, evit_sparsify, evit_sparsify_with, tome_merge, ExtraToken,
    PredictorWeights, Strategy,
};
use sparse_tuning::vit::AttnTrace;
use sparse_tuning::Tensor;

pub const CASES: u64 = 200;

struct Case {
    n: usize,
    c: usize,
    tokens: Vec<Vec<f64>>,
    scores: Vec<f64>,
    r: f64,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=12);
    let c = rng.gen_range(1..=8);
    let tokens = (0..n)
        .map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    // Quantized scores so that ties occur regularly.
    let scores = (0..n - 1)
        .map(|_| f64::from(rng.gen_range(0..6u8)) / 8.0 + 0.01)
        .collect();
    let r = [0.25, 0.5, 0.7, 0.9][rng.gen_range(0..4)];
    Case {
        n,
        c,
        tokens,
        scores,
        r,
    }
}

fn ceil_keep(n: usize, r: f64) -> usize {
    // Smallest k with k ≥ r·(n−1), by integer search.
    let m = n - 1;
    (1..=m)
        .find(|&k| k as f64 >= r * m as f64 - 1e-9)
        .unwrap_or(m)
}

/// All subsets of `0..m` of size `k`, as sorted index lists.
fn subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for mask in 0u32..(1 << m) {
        if mask.count_ones() as usize == k {
            out.push((0..m).filter(|i| mask & (1 << i) != 0).collect());
        }
    }
    out
}

/// Maximum score sum, ties resolved to the lexicographically smallest set;
/// returned in (score desc, index asc) order.
fn best_subset(scores: &[f64], k: usize) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for s in subsets(scores.len(), k) {
        let sum: f64 = s.iter().map(|&i| scores[i]).sum();
        let better = match &best {
            None => true,
            Some((b, bs)) => sum > *b + 1e-12 || ((sum - *b).abs() <= 1e-12 && s < *bs),
        };
        if better {
            best = Some((sum, s));
        }
    }
    let mut set = best.unwrap().1;
    set.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    set
}

fn weighted_mean(rows: &[&Vec<f64>], w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    let c = rows[0].len();
    (0..c)
        .map(|j| rows.iter().zip(w).map(|(r, w)| r[j] * w).sum::<f64>() / total)
        .collect()
}

fn assert_rows_close(got: &Tensor<f64>, want: &[Vec<f64>], tol: f64, ctx: &str) {
    assert_eq!(got.rows(), want.len(), "{ctx}: row count");
    for (i, w) in want.iter().enumerate() {
        for (a, b) in got.row(i).iter().zip(w) {
            assert!((a - b).abs() <= tol, "{ctx}: row {i}: {a} vs {b}");
        }
    }
}

pub fn evit_merge_matches_exhaustive_selection() {
    for seed in 0..CASES {
        let cs = case(seed);
        let t = Tensor::from_rows(&cs.tokens).unwrap();
        let (out, rec) =
            evit_sparsify(&t, &AttnTrace::from_scores(1, cs.scores.clone()), cs.r).unwrap();
        let k = ceil_keep(cs.n, cs.r);
        let kept = best_subset(&cs.scores, k);
        assert_eq!(rec.kept_indices, kept, "seed {seed}");
        let mut want = vec![cs.tokens[0].clone()];
        want.extend(kept.iter().map(|&i| cs.tokens[i + 1].clone()));
        let discarded: Vec<usize> = (0..cs.n - 1).filter(|i| !kept.contains(i)).collect();
        if !discarded.is_empty() {
            let rows: Vec<&Vec<f64>> = discarded.iter().map(|&i| &cs.tokens[i + 1]).collect();
            let w: Vec<f64> = discarded.iter().map(|&i| cs.scores[i]).collect();
            want.push(weighted_mean(&rows, &w));
            let mut got_disc = rec.discarded.clone();
            got_disc.sort_unstable();
            assert_eq!(got_disc, discarded, "seed {seed}");
        }
        assert_rows_close(&out, &want, 1e-6, &format!("seed {seed}"));
        assert_eq!(out.cols(), cs.c);
    }
}

pub fn evit_drop_and_argmax_match_exhaustive_selection() {
    for seed in 0..CASES {
        let cs = case(seed + 10_000);
        let t = Tensor::from_rows(&cs.tokens).unwrap();
        let trace = AttnTrace::from_scores(1, cs.scores.clone());
        let k = ceil_keep(cs.n, cs.r);
        let kept = best_subset(&cs.scores, k);

        let (out, rec) = evit_sparsify_with(&t, &trace, cs.r, Strategy::Drop).unwrap();
        assert_eq!(rec.kept_indices, kept);
        assert_eq!(out.rows(), k + 1);

        let (out, rec) = evit_sparsify_with(&t, &trace, cs.r, Strategy::Argmax).unwrap();
        let rest: Vec<usize> = (0..cs.n - 1).filter(|i| !kept.contains(i)).collect();
        if let Some(best_rest) = best_subset(
            &rest.iter().map(|&i| cs.scores[i]).collect::<Vec<_>>(),
            1.min(rest.len()),
        )
        .first()
        {
            assert_eq!(
                rec.extra,
                Some(ExtraToken::Retained(rest[*best_rest])),
                "seed {seed}"
            );
            assert_eq!(out.row(k + 1), cs.tokens[rest[*best_rest] + 1].as_slice());
        } else {
            assert_eq!(out.rows(), cs.n);
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn dynamicvit_matches_exhaustive_selection() {
    for seed in 0..CASES {
        let cs = case(seed + 20_000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 3;
        let mut mat = |r: usize, c: usize| -> Tensor<f64> {
            Tensor::new(
                vec![r, c],
                (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let p = PredictorWeights {
            w1: mat(cs.c, h),
            b1: mat(1, h).reshape(vec![h]).unwrap(),
            w2: mat(h, 1),
            b2: mat(1, 1).reshape(vec![1]).unwrap(),
        };
        let scores: Vec<f64> = cs.tokens[1..]
            .iter()
            .map(|x| {
                let hidden: Vec<f64> = (0..h)
                    .map(|j| {
                        gelu((0..cs.c).map(|i| x[i] * p.w1.at(i, j)).sum::<f64>() + p.b1.data()[j])
                    })
                    .collect();
                (0..h).map(|j| hidden[j] * p.w2.at(j, 0)).sum::<f64>() + p.b2.data()[0]
            })
            .collect();
        let t = Tensor::from_rows(&cs.tokens).unwrap();
        let (out, rec) = dynamicvit_sparsify(&t, &p, cs.r).unwrap();
        let k = ceil_keep(cs.n, cs.r);
        let kept = best_subset(&scores, k);
        assert_eq!(rec.kept_indices, kept, "seed {seed}");
        let mut want = vec![cs.tokens[0].clone()];
        want.extend(kept.iter().map(|&i| cs.tokens[i + 1].clone()));
        let discarded: Vec<usize> = (0..cs.n - 1).filter(|i| !kept.contains(i)).collect();
        if !discarded.is_empty() {
            let max = discarded
                .iter()
                .map(|&i| scores[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = discarded.iter().map(|&i| (scores[i] - max).exp()).collect();
            let rows: Vec<&Vec<f64>> = discarded.iter().map(|&i| &cs.tokens[i + 1]).collect();
            want.push(weighted_mean(&rows, &w));
        }
        assert_rows_close(&out, &want, 1e-6, &format!("seed {seed}"));
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn tome_matches_exhaustive_matching() {
    for seed in 0..CASES {
        let cs = case(seed + 30_000);
        let m_tokens = cs.n - 1;
        if m_tokens < 2 {
            continue;
        }
        let target = ceil_keep(cs.n, cs.r).min(m_tokens - 1);
        let t = Tensor::from_rows(&cs.tokens).unwrap();
        let (out, rec) = tome_merge(&t, target).unwrap();

        let x = |i: usize| &cs.tokens[i + 1];
        let a_set: Vec<usize> = (0..m_tokens).filter(|i| i % 2 == 0).collect();
        let b_set: Vec<usize> = (0..m_tokens).filter(|i| i % 2 == 1).collect();
        // Every A token scans every B token; strict improvement keeps the
        // lowest B index on ties.
        let mut proposals: Vec<(usize, usize, f64)> = a_set
            .iter()
            .map(|&a| {
                let mut best = (b_set[0], f64::NEG_INFINITY);
                for &b in &b_set {
                    let s = cosine(x(a), x(b));
                    if s > best.1 {
                        best = (b, s);
                    }
                }
                (a, best.0, best.1)
            })
            .collect();
        proposals.sort_by(|p, q| q.2.partial_cmp(&p.2).unwrap().then(p.0.cmp(&q.0)));
        let merges = (m_tokens - target).min(a_set.len());
        let chosen: Vec<(usize, usize)> = proposals[..merges]
            .iter()
            .map(|&(a, b, _)| (a, b))
            .collect();
        assert_eq!(rec.merge_pairs, chosen, "seed {seed}");

        let mut want = vec![cs.tokens[0].clone()];
        for i in 0..m_tokens {
            if chosen.iter().any(|&(a, _)| a == i) {
                continue;
            }
            let mut members = vec![x(i)];
            members.extend(chosen.iter().filter(|&&(_, b)| b == i).map(|&(a, _)| x(a)));
            let w = vec![1.0; members.len()];
            want.push(weighted_mean(&members, &w));
        }
        assert_eq!(out.rows(), 1 + m_tokens - merges);
        assert_rows_close(&out, &want, 1e-6, &format!("seed {seed}"));
    }
}
