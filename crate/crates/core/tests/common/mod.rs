//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use dam::data::{Dataset, DatasetSplit, TimeValueSeries};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Basis design `[sin | cos]` built directly from the frequency list.
pub fn design(times: &[f64], freqs: &[f64]) -> DMatrix<f64> {
    let f = freqs.len();
    DMatrix::from_fn(times.len(), 2 * f, |i, j| {
        let arg = 2.0 * PI * freqs[j % f] * times[i];
        if j < f {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Ridge solution with the first column unpenalised. The penalised block
/// `R` is handled through the SVD of a stacked matrix `[R; sqrt(lambda) I]`
/// (or its dual `[R'; sqrt(lambda) I]` when `R` is wide). Both have full
/// column rank, so no singular value is near zero. The free coefficient is
/// then eliminated in closed form. A first column with mean square below
/// `1e-12` is dropped and gets a zero coefficient.
pub fn svd_ridge(times: &[f64], values: &[f64], freqs: &[f64], lambda: f64) -> Vec<f64> {
    assert!(lambda > 0.0);
    let x = design(times, freqs);
    let n = times.len();
    let p = x.ncols() - 1;
    let v = DVector::from_column_slice(values);
    let x0 = x.column(0).into_owned();
    let dead = x0.norm_squared() / n as f64 <= 1e-12;
    let rest = x.columns(1, p).into_owned();
    let root = lambda.sqrt();

    // penalised(r) = argmin |R t - r|^2 + lambda |t|^2
    let penalised: Box<dyn Fn(&DVector<f64>) -> DVector<f64>> = if n < p {
        let mut m = DMatrix::zeros(p + n, n);
        m.view_mut((0, 0), (p, n)).copy_from(&rest.transpose());
        m.view_mut((p, 0), (n, n)).fill_with_identity();
        m.view_mut((p, 0), (n, n)).scale_mut(root);
        let svd = m.svd(false, true);
        let (vt, s) = (svd.v_t.expect("v requested"), svd.singular_values);
        let rest = rest.clone();
        Box::new(move |r| {
            let mut c = &vt * r;
            c.component_div_assign(&s.map(|s| s * s));
            rest.transpose() * (vt.transpose() * c)
        })
    } else {
        let mut m = DMatrix::zeros(n + p, p);
        m.view_mut((0, 0), (n, p)).copy_from(&rest);
        m.view_mut((n, 0), (p, p)).fill_with_identity();
        m.view_mut((n, 0), (p, p)).scale_mut(root);
        let svd = m.svd(false, true);
        let (vt, s) = (svd.v_t.expect("v requested"), svd.singular_values);
        let rest = rest.clone();
        Box::new(move |r| {
            let mut c = &vt * (rest.transpose() * r);
            c.component_div_assign(&s.map(|s| s * s));
            vt.transpose() * c
        })
    };

    let tv = penalised(&v);
    let (theta0, theta_rest) = if dead {
        (0.0, tv)
    } else {
        // (R R' + lambda I)^-1 r equals the ridge residual over lambda.
        let t0 = penalised(&x0);
        let kv = (&v - &rest * &tv) / lambda;
        let k0 = (&x0 - &rest * &t0) / lambda;
        let theta0 = x0.dot(&kv) / x0.dot(&k0);
        (theta0, tv - t0 * theta0)
    };
    std::iter::once(theta0).chain(theta_rest.iter().copied()).collect()
}

/// Token merging by exhaustive search: for every even token, scan every
/// odd token for the highest cosine similarity (first wins on ties), then
/// repeatedly take the unmerged even token with the highest score.
pub fn brute_force_merge(rows: &[Vec<f64>], r: usize) -> Vec<Vec<usize>> {
    let n = rows.len();
    let cos = |a: &[f64], b: &[f64]| {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
    };
    let mut best = Vec::new();
    for i in (0..n).step_by(2) {
        let mut top: Option<(f64, usize)> = None;
        for j in (1..n).step_by(2) {
            let s = cos(&rows[i], &rows[j]);
            if top.is_none_or(|(t, _)| s > t) {
                top = Some((s, j));
            }
        }
        best.push((i, top));
    }
    let mut taken = vec![false; best.len()];
    let mut groups: Vec<Vec<usize>> = (1..n).step_by(2).map(|j| vec![j]).collect();
    for _ in 0..r.min(n / 2) {
        let mut pick: Option<usize> = None;
        for (k, (_, top)) in best.iter().enumerate() {
            if taken[k] {
                continue;
            }
            let s = top.map_or(f64::NEG_INFINITY, |t| t.0);
            if pick.is_none_or(|p| s > best[p].1.map_or(f64::NEG_INFINITY, |t| t.0)) {
                pick = Some(k);
            }
        }
        let k = pick.expect("enough candidates");
        taken[k] = true;
        let (i, top) = best[k];
        let j = top.expect("a partner").1;
        groups[j / 2].push(i);
    }
    for (k, &(i, _)) in best.iter().enumerate() {
        if !taken[k] {
            groups.push(vec![i]);
        }
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups.sort_by_key(|g| g[0]);
    groups
}

/// Whether `groups` is an optimal merge of `r` tokens when similarities
/// within `eps` count as ties. Each merged even token must sit with a
/// partner of maximal similarity, and no unmerged even token may score
/// clearly above a merged one.
pub fn is_tied_optimum(rows: &[Vec<f64>], r: usize, groups: &[Vec<usize>], eps: f64) -> bool {
    let n = rows.len();
    let cos = |a: &[f64], b: &[f64]| {
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return 0.0;
        }
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
    };
    let best = |i: usize| (1..n).step_by(2).map(|j| cos(&rows[i], &rows[j])).fold(f64::NEG_INFINITY, f64::max);
    let mut seen = vec![false; n];
    let mut merged = Vec::new();
    let mut unmerged = Vec::new();
    for g in groups {
        for &i in g {
            if i >= n || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        let odd: Vec<usize> = g.iter().copied().filter(|i| i % 2 == 1).collect();
        let even: Vec<usize> = g.iter().copied().filter(|i| i % 2 == 0).collect();
        match (odd.as_slice(), even.as_slice()) {
            ([], [i]) => unmerged.push(best(*i)),
            ([_], []) => {}
            ([j], evens) => {
                for &i in evens {
                    if cos(&rows[i], &rows[*j]) < best(i) - eps {
                        return false;
                    }
                    merged.push(best(i));
                }
            }
            _ => return false,
        }
    }
    let lowest = merged.iter().copied().fold(f64::INFINITY, f64::min);
    let highest = unmerged.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sorted = groups.windows(2).all(|w| w[0][0] < w[1][0]) && groups.iter().all(|g| g.windows(2).all(|w| w[0] < w[1]));
    seen.iter().all(|&s| s) && merged.len() == r.min(n / 2) && highest <= lowest + eps && sorted
}

/// `sin(2 pi t) + 0.7 cos(2 pi t / 7) + 0.01 t` plus Gaussian noise, hourly,
/// with `t` in days. Both periods are in the basis.
pub fn synthetic(n: usize, noise_variance: f64, seed: u64) -> TimeValueSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_variance.sqrt()).unwrap();
    let values = (0..n)
        .map(|i| {
            let t = i as f64 / 24.0;
            (2.0 * PI * t).sin() + 0.7 * (2.0 * PI * t / 7.0).cos() + 0.01 * t + noise.sample(&mut rng)
        })
        .collect();
    TimeValueSeries::regular("synthetic", values, 1.0 / 24.0)
}

pub fn dataset(series: Vec<TimeValueSeries>, train: f64, valid: f64) -> Dataset {
    let n = series[0].len();
    Dataset {
        name: "synthetic".into(),
        series,
        split: DatasetSplit::from_fractions(n, train, valid).unwrap(),
    }
}
