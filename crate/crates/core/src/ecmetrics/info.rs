//! Entropy, mutual information and adjusted mutual information over discrete
//! labelings.

use std::collections::HashMap;
use std::hash::Hash;

use super::Scored;
use crate::error::{Error, Result};

/// Dense ids `0..k` in first-appearance order.
pub fn dense_labels<T: Hash + Eq>(xs: &[T]) -> (Vec<usize>, usize) {
    let mut map: HashMap<&T, usize> = HashMap::new();
    let ids = xs
        .iter()
        .map(|x| {
            let n = map.len();
            *map.entry(x).or_insert(n)
        })
        .collect();
    (ids, map.len())
}

fn counts(ids: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &i in ids {
        c[i] += 1;
    }
    c
}

fn entropy_from_counts(c: &[usize], n: usize) -> f64 {
    let n = n as f64;
    -c.iter()
        .filter(|&&x| x > 0)
        .map(|&x| {
            let p = x as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Entropy of a labeling in nats.
pub fn entropy_nats<T: Hash + Eq>(xs: &[T]) -> f64 {
    let (ids, k) = dense_labels(xs);
    entropy_from_counts(&counts(&ids, k), xs.len()).max(0.0)
}

pub fn entropy_bits<T: Hash + Eq>(xs: &[T]) -> f64 {
    entropy_nats(xs) / std::f64::consts::LN_2
}

struct Contingency {
    n: usize,
    a: Vec<usize>,
    b: Vec<usize>,
    cells: HashMap<(usize, usize), usize>,
}

fn contingency<A: Hash + Eq, B: Hash + Eq>(u: &[A], v: &[B]) -> Contingency {
    let (ui, ku) = dense_labels(u);
    let (vi, kv) = dense_labels(v);
    let mut cells = HashMap::new();
    for (&x, &y) in ui.iter().zip(&vi) {
        *cells.entry((x, y)).or_insert(0) += 1;
    }
    Contingency {
        n: u.len(),
        a: counts(&ui, ku),
        b: counts(&vi, kv),
        cells,
    }
}

impl Contingency {
    fn mi(&self) -> f64 {
        let n = self.n as f64;
        let mut cells: Vec<(&(usize, usize), &usize)> = self.cells.iter().collect();
        cells.sort_unstable();
        let s: f64 = cells
            .into_iter()
            .map(|(&(i, j), &c)| {
                let c = c as f64;
                c / n * (n * c / (self.a[i] as f64 * self.b[j] as f64)).ln()
            })
            .sum();
        s.max(0.0)
    }
}

/// Mutual information in nats.
pub fn mutual_information_nats<A: Hash + Eq, B: Hash + Eq>(u: &[A], v: &[B]) -> f64 {
    assert_eq!(u.len(), v.len(), "labelings differ in length");
    if u.is_empty() {
        return 0.0;
    }
    contingency(u, v).mi()
}

pub fn mutual_information_bits<A: Hash + Eq, B: Hash + Eq>(u: &[A], v: &[B]) -> f64 {
    mutual_information_nats(u, v) / std::f64::consts::LN_2
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n + 1];
    for k in 1..=n {
        t[k] = t[k - 1] + (k as f64).ln();
    }
    t
}

/// Expected MI (nats) between two labelings with the given cluster sizes
/// under random permutation, summing the hypergeometric distribution of every
/// contingency cell.
pub fn expected_mutual_information(a: &[usize], b: &[usize], n: usize) -> f64 {
    let lf = ln_factorials(n);
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in a {
        for &bj in b {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let term = nij as f64 / nf * (nf * nij as f64 / (ai as f64 * bj as f64)).ln();
                let log_p = lf[ai] + lf[bj] + lf[n - ai] + lf[n - bj]
                    - lf[n]
                    - lf[nij]
                    - lf[ai - nij]
                    - lf[bj - nij]
                    - lf[n + nij - ai - bj];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// `(MI - E[MI]) / (max(H(U), H(V)) - E[MI])`. Two single-cluster labelings
/// (zero denominator) give 0 with the degenerate flag set.
pub fn ami<A: Hash + Eq, B: Hash + Eq>(u: &[A], v: &[B]) -> Result<Scored> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!("labelings differ in length: {} vs {}", u.len(), v.len())));
    }
    if u.len() < 2 {
        return Err(Error::invalid("AMI needs at least 2 items"));
    }
    let c = contingency(u, v);
    let hu = entropy_from_counts(&c.a, c.n);
    let hv = entropy_from_counts(&c.b, c.n);
    let mi = c.mi();
    let emi = expected_mutual_information(&c.a, &c.b, c.n);
    let denom = hu.max(hv) - emi;
    if denom.abs() < 1e-15 {
        return Ok(Scored::degenerate(0.0));
    }
    Ok(Scored::ok((mi - emi) / denom))
}
