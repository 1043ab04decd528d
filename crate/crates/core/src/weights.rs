//! Weight-vector families: leave-k-out, multinomial bootstrap, and the
//! adversarial all-mass-on-one-datum worst case.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::estimating::WeightVector;
use crate::ij::GradientCache;

/// Which family a [`WeightFamily`] generates.
#[derive(Debug, Clone)]
pub enum FamilyKind {
    /// All (or a seeded sample of) weight vectors with exactly `k` zeros.
    LeaveKOut { k: usize, limit: Option<usize> },
    /// `b` multinomial resampling weights, each summing to `N`.
    Bootstrap { b: usize },
    /// The pathological worst-case vector with all mass on the
    /// largest-gradient datum;
    /// requires a gradient cache.
    Adversarial,
    /// Caller-provided vectors passed through unchanged.
    Custom(Vec<WeightVector>),
}

#[derive(Debug, Clone)]
pub struct WeightFamily {
    pub kind: FamilyKind,
    pub n: usize,
    pub seed: u64,
}

impl WeightFamily {
    /// Materialize the family. `cache` is needed only for the adversarial
    /// kind.
    pub fn generate(&self, cache: Option<&GradientCache>) -> Result<Vec<WeightVector>> {
        match &self.kind {
            FamilyKind::LeaveKOut { k, limit } => {
                Ok(leave_k_out(self.n, *k, *limit, self.seed)?.collect())
            }
            FamilyKind::Bootstrap { b } => Ok(bootstrap(self.n, *b, self.seed)),
            FamilyKind::Adversarial => {
                let cache = cache.ok_or_else(|| {
                    Error::InvalidInput(
                        "adversarial weights require a base-fit gradient cache".into(),
                    )
                })?;
                Ok(vec![adversarial(cache)])
            }
            FamilyKind::Custom(ws) => Ok(ws.clone()),
        }
    }
}

/// `C(n, k)` saturating at `u64::MAX`.
fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u64) {
            Some(v) => v / (i as u64 + 1),
            None => return u64::MAX,
        };
    }
    acc
}

/// Stream of leave-`k`-out weight vectors.
///
/// Without `limit`, enumerates all `C(n,k)` index subsets in lexicographic
/// order. With `limit`, draws that many distinct subsets uniformly (Floyd's
/// subset sampling, seeded); if `limit` covers the whole family, it falls
/// back to full enumeration.
pub fn leave_k_out(
    n: usize,
    k: usize,
    limit: Option<usize>,
    seed: u64,
) -> Result<impl Iterator<Item = WeightVector>> {
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "leave-k-out requires 1 <= k <= n, got k = {k}, n = {n}"
        )));
    }
    let total = binomial(n, k);
    let subsets: Vec<Vec<usize>> = match limit {
        Some(limit) if (limit as u64) < total => sample_subsets(n, k, limit, seed),
        _ => enumerate_subsets(n, k),
    };
    Ok(subsets
        .into_iter()
        .map(move |idx| WeightVector::leave_out(n, &idx).expect("indices in range")))
}

fn enumerate_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        // advance to the next lexicographic combination
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Floyd's algorithm for one uniform `k`-subset of `[n]`.
fn floyd_subset<R: Rng>(rng: &mut R, n: usize, k: usize) -> BTreeSet<usize> {
    let mut s = BTreeSet::new();
    for j in n - k..n {
        let t = rng.gen_range(0..=j);
        if !s.insert(t) {
            s.insert(j);
        }
    }
    s
}

fn sample_subsets(n: usize, k: usize, limit: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut out = Vec::with_capacity(limit);
    while out.len() < limit {
        let subset: Vec<usize> = floyd_subset(&mut rng, n, k).into_iter().collect();
        if seen.insert(subset.clone()) {
            out.push(subset);
        }
    }
    out
}

/// `b` independent Multinomial(N, 1/N) weight vectors; every vector sums
/// exactly to `N`.
pub fn bootstrap(n: usize, b: usize, seed: u64) -> Vec<WeightVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..b)
        .map(|_| {
            let mut counts = vec![0.0f64; n];
            for _ in 0..n {
                counts[rng.gen_range(0..n)] += 1.0;
            }
            WeightVector::dense(DVector::from_vec(counts))
        })
        .collect()
}

/// The pathological weight vector: all mass `N` on the datum whose base-fit
/// gradient has the largest L1 norm. Ties break to the smallest index.
pub fn adversarial(cache: &GradientCache) -> WeightVector {
    let n = cache.n_points();
    let mut best = 0usize;
    let mut best_norm = f64::NEG_INFINITY;
    for i in 0..n {
        let norm: f64 = cache.row(i).iter().map(|v| v.abs()).sum();
        if norm > best_norm {
            best_norm = norm;
            best = i;
        }
    }
    let mut w = DVector::zeros(n);
    w[best] = n as f64;
    WeightVector::dense(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimating::{Parameter, WeightVector};
    use crate::ij::{build_handle, HandleMode};
    use crate::models::GlmModel;
    use crate::solver::{solve, SolverOptions};
    use approx::assert_abs_diff_eq;

    #[test]
    fn leave_one_out_of_three_enumerates_in_order() {
        let vs: Vec<WeightVector> = leave_k_out(3, 1, None, 0).unwrap().collect();
        assert_eq!(vs.len(), 3);
        let dense: Vec<Vec<f64>> = vs.iter().map(|w| w.to_dense().iter().copied().collect()).collect();
        assert_eq!(dense[0], vec![0.0, 1.0, 1.0]);
        assert_eq!(dense[1], vec![1.0, 0.0, 1.0]);
        assert_eq!(dense[2], vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn leave_two_out_of_four_has_six_vectors() {
        let vs: Vec<WeightVector> = leave_k_out(4, 2, None, 0).unwrap().collect();
        assert_eq!(vs.len(), 6);
        for w in &vs {
            let zeros = w.to_dense().iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, 2);
            assert_abs_diff_eq!(w.delta_l2_norm(), 2f64.sqrt(), epsilon = 1e-15);
        }
    }

    #[test]
    fn limited_sampling_is_deterministic() {
        let a: Vec<_> = leave_k_out(20, 3, Some(5), 99).unwrap().collect();
        let b: Vec<_> = leave_k_out(20, 3, Some(5), 99).unwrap().collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        // distinct subsets
        let set: BTreeSet<Vec<usize>> = a
            .iter()
            .map(|w| w.delta().into_iter().map(|(i, _)| i).collect())
            .collect();
        assert_eq!(set.len(), 5);
    }

    #[test]
    fn k_zero_or_too_large_rejected() {
        assert!(leave_k_out(3, 0, None, 0).is_err());
        assert!(leave_k_out(3, 4, None, 0).is_err());
    }

    #[test]
    fn bootstrap_sums_to_n() {
        for w in bootstrap(37, 20, 4) {
            assert_abs_diff_eq!(w.sum(), 37.0, epsilon = 1e-12);
            assert!(w.to_dense().iter().all(|&v| v >= 0.0 && v.fract() == 0.0));
        }
    }

    #[test]
    fn bootstrap_single_datum() {
        let ws = bootstrap(1, 3, 0);
        for w in ws {
            assert_eq!(w.to_dense().as_slice(), &[1.0]);
        }
    }

    #[test]
    fn bootstrap_entrywise_mean_near_one() {
        let n = 10_000;
        let b = 50;
        let ws = bootstrap(n, b, 123);
        // average over b of the first few entries; Var(w_n) ≈ 1, so the
        // standard error of the mean over b draws is ≈ 1/sqrt(b)
        let se = 1.0 / (b as f64).sqrt();
        for i in 0..20 {
            let mean: f64 = ws.iter().map(|w| w.get(i)).sum::<f64>() / b as f64;
            assert!(
                (mean - 1.0).abs() <= 3.0 * se,
                "entry {i}: mean {mean} outside 3 standard errors"
            );
        }
    }

    #[test]
    fn adversarial_picks_largest_gradient_and_breaks_ties_low() {
        let eq = GlmModel::mean(vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let base = solve(
            &eq,
            &WeightVector::ones(4),
            &Parameter::zeros(1),
            &SolverOptions::default(),
        )
        .unwrap();
        let (_, cache) = build_handle(&eq, &base, HandleMode::Dense).unwrap();
        let w = adversarial(&cache);
        // |3 - 6| is the largest gradient
        assert_eq!(w.get(3), 4.0);
        assert_abs_diff_eq!(w.sum(), 4.0, epsilon = 1e-15);

        // symmetric data: every |g_n| equal, index 0 wins
        let eq = GlmModel::mean(vec![-1.0, 1.0]).unwrap();
        let base = solve(
            &eq,
            &WeightVector::ones(2),
            &Parameter::zeros(1),
            &SolverOptions::default(),
        )
        .unwrap();
        let (_, cache) = build_handle(&eq, &base, HandleMode::Dense).unwrap();
        let w = adversarial(&cache);
        assert_eq!(w.get(0), 2.0);
        assert_eq!(w.get(1), 0.0);
    }
}
