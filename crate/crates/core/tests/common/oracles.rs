//! Brute-force reference implementations for the metric suites. Each one
//! follows the metric's definition as literally as possible and shares no
//! code with the library.

use eclab_core::numerics::Rng;

/// Relative error with the denominator floored at 1e-3: values that are
/// exactly zero in theory come out as +-1e-16 noise from either side.
pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn words(rng: &mut Rng, alphabet: usize, min_len: usize, max_len: usize) -> Vec<String> {
    let len = min_len + rng.below(max_len - min_len + 1);
    (0..len).map(|_| format!("w{}", rng.below(alphabet))).collect()
}

fn ngrams(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn count_of(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

/// Sentence BLEU with the library's conventions: clipped counts against the
/// per-n-gram maximum over references, zero counts floored at 0.1, orders
/// without candidate n-grams skipped, closest reference length (shorter on
/// ties) for the brevity penalty, and 0 when no unigram matches.
pub fn bleu(cand: &[String], refs: &[Vec<String>]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut precisions = Vec::new();
    let mut unigram_hits = 0;
    for n in 1..=4 {
        let cg = ngrams(cand, n);
        if cg.is_empty() {
            continue;
        }
        let mut distinct: Vec<Vec<String>> = Vec::new();
        for g in &cg {
            if !distinct.contains(g) {
                distinct.push(g.clone());
            }
        }
        let mut hits = 0;
        for g in &distinct {
            let max_ref = refs.iter().map(|r| count_of(&ngrams(r, n), g)).max().unwrap_or(0);
            hits += count_of(&cg, g).min(max_ref);
        }
        if n == 1 {
            unigram_hits = hits;
        }
        let num = if hits == 0 { 0.1 } else { hits as f64 };
        precisions.push(num / cg.len() as f64);
    }
    if unigram_hits == 0 {
        return 0.0;
    }
    let c = cand.len() as f64;
    let mut best: Option<usize> = None;
    for r in refs {
        let d = (r.len() as f64 - c).abs();
        best = match best {
            None => Some(r.len()),
            Some(b) => {
                let db = (b as f64 - c).abs();
                if d < db || (d == db && r.len() < b) {
                    Some(r.len())
                } else {
                    Some(b)
                }
            }
        };
    }
    let r = best.unwrap_or(0) as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    let prod: f64 = precisions.iter().product();
    100.0 * bp * prod.powf(1.0 / precisions.len() as f64)
}

fn is_subsequence(sub: &[&String], s: &[String]) -> bool {
    let mut it = s.iter();
    sub.iter().all(|x| it.any(|y| y == *x))
}

/// LCS by enumerating every subsequence of `a` (short inputs only).
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 12);
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if is_subsequence(&sub, b) {
            best = k;
        }
    }
    best
}

pub fn rouge_l(cand: &[String], refs: &[Vec<String>]) -> f64 {
    refs.iter()
        .map(|r| {
            let l = lcs_len(cand, r) as f64;
            if l == 0.0 {
                0.0
            } else {
                let p = l / cand.len() as f64;
                let rc = l / r.len() as f64;
                2.0 * p * rc / (p + rc)
            }
        })
        .fold(0.0, f64::max)
}

pub fn jaro(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let window = (a.len().max(b.len()) / 2) as isize - 1;
    let window = window.max(0);
    let mut a_flag = vec![false; a.len()];
    let mut b_flag = vec![false; b.len()];
    for i in 0..a.len() {
        for j in 0..b.len() {
            if !b_flag[j] && a[i] == b[j] && (i as isize - j as isize).abs() <= window {
                a_flag[i] = true;
                b_flag[j] = true;
                break;
            }
        }
    }
    let m = a_flag.iter().filter(|&&f| f).count();
    if m == 0 {
        return 0.0;
    }
    let mut j = 0;
    let mut half = 0;
    for i in 0..a.len() {
        if a_flag[i] {
            while !b_flag[j] {
                j += 1;
            }
            if a[i] != b[j] {
                half += 1;
            }
            j += 1;
        }
    }
    let m = m as f64;
    let t = half as f64 / 2.0;
    (m / a.len() as f64 + m / b.len() as f64 + (m - t) / m) / 3.0
}

fn plogp_sum(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

fn histogram<T: PartialEq + Clone>(xs: &[T]) -> Vec<usize> {
    let mut keys: Vec<T> = Vec::new();
    let mut counts = Vec::new();
    for x in xs {
        match keys.iter().position(|k| k == x) {
            Some(i) => counts[i] += 1,
            None => {
                keys.push(x.clone());
                counts.push(1);
            }
        }
    }
    counts
}

pub fn entropy_nats(xs: &[usize]) -> f64 {
    plogp_sum(&histogram(xs), xs.len())
}

/// H(X) + H(Y) - H(X, Y) in nats.
pub fn mutual_information_nats(x: &[usize], y: &[usize]) -> f64 {
    let joint: Vec<(usize, usize)> = x.iter().copied().zip(y.iter().copied()).collect();
    entropy_nats(x) + entropy_nats(y) - plogp_sum(&histogram(&joint), x.len())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// AMI with E[MI] averaged over every permutation of `v`.
pub fn ami(u: &[usize], v: &[usize]) -> f64 {
    let n = u.len();
    assert!(n <= 8);
    let perms = permutations(n);
    let emi = perms
        .iter()
        .map(|p| {
            let pv: Vec<usize> = p.iter().map(|&i| v[i]).collect();
            mutual_information_nats(u, &pv)
        })
        .sum::<f64>()
        / perms.len() as f64;
    let denom = entropy_nats(u).max(entropy_nats(v)) - emi;
    if denom.abs() < 1e-12 {
        return 0.0;
    }
    (mutual_information_nats(u, v) - emi) / denom
}

/// Plain recursion over the three edit operations (short inputs only).
pub fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let sub = levenshtein(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
    let del = levenshtein(&a[1..], b) + 1;
    let ins = levenshtein(a, &b[1..]) + 1;
    sub.min(del).min(ins)
}

/// Mid-rank of each value: number of smaller values plus half the ties.
fn ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let eq = x.iter().filter(|&&w| w == v).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let sx: f64 = rx.iter().sum();
    let sy: f64 = ry.iter().sum();
    let sxx: f64 = rx.iter().map(|a| a * a).sum();
    let syy: f64 = ry.iter().map(|a| a * a).sum();
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    let cov = n * sxy - sx * sy;
    let vx = n * sxx - sx * sx;
    let vy = n * syy - sy * sy;
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Share of translation n-grams (with multiplicity) absent from `train`.
pub fn novelty(translations: &[Vec<String>], train: &[Vec<String>], n: usize) -> Option<f64> {
    let seen: Vec<Vec<String>> = train.iter().flat_map(|s| ngrams(s, n)).collect();
    let all: Vec<Vec<String>> = translations.iter().flat_map(|s| ngrams(s, n)).collect();
    if all.is_empty() {
        return None;
    }
    let novel = all.iter().filter(|g| !seen.contains(g)).count();
    Some(novel as f64 / all.len() as f64)
}

/// Worst relative error of each library metric against its oracle over 200
/// random small instances.
pub fn suite(seed: u64) -> Vec<(&'static str, f64)> {
    use eclab_core::{ecmetrics, mtmetrics};
    const N: usize = 200;
    let mut rng = Rng::new(seed);
    let mut worst = |name: &'static str, f: &mut dyn FnMut(&mut Rng) -> (f64, f64)| {
        let e = (0..N).map(|_| {
            let (a, b) = f(&mut rng);
            rel_err(a, b)
        });
        (name, e.fold(0.0, f64::max))
    };
    vec![
        worst("bleu", &mut |r| {
            let c = words(r, 4, 1, 8);
            let refs: Vec<Vec<String>> = (0..1 + r.below(3)).map(|_| words(r, 4, 1, 8)).collect();
            (mtmetrics::bleu(&c, &refs), bleu(&c, &refs))
        }),
        worst("rouge_l", &mut |r| {
            let c = words(r, 4, 1, 8);
            let refs: Vec<Vec<String>> = (0..1 + r.below(3)).map(|_| words(r, 4, 1, 8)).collect();
            (mtmetrics::rouge_l(&c, &refs), rouge_l(&c, &refs))
        }),
        worst("jaro", &mut |r| {
            let a = words(r, 3, 0, 4).join(" ");
            let b = words(r, 3, 0, 4).join(" ");
            (mtmetrics::jaro(&a, &b), jaro(&a, &b))
        }),
        worst("entropy", &mut |r| {
            let n = 1 + r.below(30);
            let x: Vec<usize> = (0..n).map(|_| r.below(5)).collect();
            (ecmetrics::info::entropy_nats(&x), entropy_nats(&x))
        }),
        worst("mutual_information", &mut |r| {
            let n = 1 + r.below(30);
            let x: Vec<usize> = (0..n).map(|_| r.below(4)).collect();
            let y: Vec<usize> = (0..n).map(|_| r.below(3)).collect();
            (ecmetrics::info::mutual_information_nats(&x, &y), mutual_information_nats(&x, &y))
        }),
        worst("levenshtein", &mut |r| {
            let a: Vec<u8> = (0..r.below(6)).map(|_| r.below(3) as u8).collect();
            let b: Vec<u8> = (0..r.below(6)).map(|_| r.below(3) as u8).collect();
            (ecmetrics::levenshtein(&a, &b) as f64, levenshtein(&a, &b) as f64)
        }),
        worst("spearman", &mut |r| {
            let n = 3 + r.below(10);
            // small integer values force ties
            let x: Vec<f64> = (0..n).map(|_| r.below(5) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| r.below(5) as f64).collect();
            match (ecmetrics::spearman(&x, &y), spearman(&x, &y)) {
                (Some(a), Some(b)) => (a, b),
                (None, None) => (0.0, 0.0),
                (a, b) => panic!("spearman definedness differs: {a:?} vs {b:?}"),
            }
        }),
        worst("ami", &mut |r| {
            let n = 2 + r.below(6);
            let u: Vec<usize> = (0..n).map(|_| r.below(3)).collect();
            let v: Vec<usize> = (0..n).map(|_| r.below(3)).collect();
            (ecmetrics::ami(&u, &v).unwrap().value, ami(&u, &v))
        }),
        worst("ngram_novelty", &mut |r| {
            let n = 1 + r.below(3);
            let tr: Vec<Vec<String>> = (0..1 + r.below(3)).map(|_| words(r, 3, 1, 6)).collect();
            let train: Vec<Vec<String>> = (0..1 + r.below(4)).map(|_| words(r, 3, 1, 6)).collect();
            let lib = mtmetrics::novelty_ngrams(&tr, &train, n).unwrap();
            match novelty(&tr, &train, n) {
                Some(v) => (lib.value, v),
                None => {
                    assert!(lib.degenerate);
                    (lib.value, 0.0)
                }
            }
        }),
    ]
}
