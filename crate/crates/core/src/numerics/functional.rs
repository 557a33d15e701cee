//! Composite operations built from tape primitives.

use super::rng::Rng;
use super::tape::{Tape, Var};
use super::tensor::{argmax, Tensor};
use crate::error::{Error, Result};

/// `x · w + b` with `b` broadcast over rows.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let xw = tape.matmul(x, w);
    tape.add(xw, b)
}

/// Mean over rows of `-log softmax(logits_i)[target_i]`.
///
/// The row maximum is subtracted as a constant before exponentiating, so the
/// result stays finite for arbitrarily large margins.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let lv = tape.value(logits);
    let (r, k) = (lv.rows(), lv.cols());
    if k < 2 {
        return Err(Error::invalid(format!("cross entropy needs K >= 2, got {k}")));
    }
    if targets.len() != r {
        return Err(Error::Shape {
            context: "softmax_cross_entropy targets",
            expected: vec![r],
            actual: vec![targets.len()],
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::invalid(format!("target {bad} out of range 0..{k}")));
    }
    let maxes: Vec<f32> = (0..r)
        .map(|i| lv.row_slice(i).iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect();
    let mut onehot = vec![0.0; r * k];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * k + t] = 1.0;
    }
    let m = tape.constant(Tensor::matrix(r, 1, maxes));
    let z = tape.sub(logits, m);
    let e = tape.exp(z);
    let s = tape.sum_rows(e);
    let lse = tape.log(s);
    let oh = tape.constant(Tensor::matrix(r, k, onehot));
    let zt = tape.mul(z, oh);
    let picked = tape.sum_rows(zt);
    let per_row = tape.sub(lse, picked);
    Ok(tape.mean(per_row))
}

/// Per-row cross-entropy values without building a graph.
pub fn cross_entropy_value(logits: &[f32], target: usize) -> Result<f32> {
    if logits.len() < 2 {
        return Err(Error::invalid("cross entropy needs K >= 2"));
    }
    if target >= logits.len() {
        return Err(Error::invalid(format!(
            "target {target} out of range 0..{}",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = m + logits.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    Ok((lse - logits[target] as f64) as f32)
}

/// Straight-through Gumbel-softmax over the rows of `logits`.
///
/// The forward value is an exact one-hot per row; gradients flow through the
/// relaxed `softmax((logits + g) / temperature)`. With `rng == None` no noise
/// is added, so each row is one-hot at `argmax(logits)`.
pub fn gumbel_st_sample(
    tape: &mut Tape,
    logits: Var,
    temperature: f32,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (r, v) = {
        let lv = tape.value(logits);
        (lv.rows(), lv.cols())
    };
    let noisy = match rng {
        Some(rng) => {
            let g: Vec<f32> = (0..r * v).map(|_| rng.gumbel()).collect();
            let gv = tape.constant(Tensor::matrix(r, v, g));
            tape.add(logits, gv)
        }
        None => logits,
    };
    let scaled = tape.scale(noisy, 1.0 / temperature);
    let soft = tape.softmax(scaled);
    let sv = tape.value(soft);
    let mut hard = vec![0.0; r * v];
    for i in 0..r {
        hard[i * v + argmax(sv.row_slice(i))] = 1.0;
    }
    let shape = sv.shape().to_vec();
    Ok(tape.straight_through(soft, Tensor::new(shape, hard)?))
}

/// Inverted dropout with a constant keep mask.
pub fn dropout(tape: &mut Tape, x: Var, p: f32, rng: &mut Rng) -> Var {
    if p <= 0.0 {
        return x;
    }
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..n)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask).expect("dropout mask"));
    tape.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::ParamStore;

    fn ce(logits: &[f32], target: usize) -> f32 {
        let mut store = ParamStore::new();
        let id = store.add("l", Tensor::row(logits.to_vec()));
        let mut t = Tape::new();
        let l = t.param(&store, id);
        let loss = softmax_cross_entropy(&mut t, l, &[target]).unwrap();
        t.value(loss).item()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let v = ce(&[0.0; 10], 3);
        assert!((v - 10f32.ln()).abs() < 1e-6, "{v}");
        assert!((v - 2.3026).abs() < 1e-4);
    }

    #[test]
    fn two_class_hand_value() {
        // ln(1 + e^-1)
        let v = ce(&[1.0, 0.0], 0);
        assert!((v - 0.313_261_7).abs() < 1e-6, "{v}");
        assert!((cross_entropy_value(&[1.0, 0.0], 0).unwrap() - 0.313_261_7).abs() < 1e-6);
    }

    #[test]
    fn huge_margin_goes_to_zero_and_stays_finite() {
        let v = ce(&[1e6, 0.0, -1e6], 0);
        assert_eq!(v, 0.0);
        let w = ce(&[1e6, 0.0, -1e6], 2);
        assert!(w.is_finite());
    }

    #[test]
    fn target_out_of_range_is_error() {
        let mut store = ParamStore::new();
        let id = store.add("l", Tensor::row(vec![0.0, 1.0]));
        let mut t = Tape::new();
        let l = t.param(&store, id);
        assert!(softmax_cross_entropy(&mut t, l, &[2]).is_err());
        assert!(cross_entropy_value(&[0.0, 1.0], 5).is_err());
        let one = t.constant(Tensor::row(vec![0.0]));
        assert!(softmax_cross_entropy(&mut t, one, &[0]).is_err());
    }

    #[test]
    fn gumbel_eval_mode_is_argmax_one_hot() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::matrix(2, 4, vec![0.1, 2.0, -1.0, 0.5, 3.0, 0.0, 0.0, 2.9]));
        let s = gumbel_st_sample(&mut t, l, 1.0, None).unwrap();
        assert_eq!(t.value(s).data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gumbel_rejects_nonpositive_temperature() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::row(vec![0.0, 1.0]));
        assert!(gumbel_st_sample(&mut t, l, 0.0, None).is_err());
        assert!(gumbel_st_sample(&mut t, l, -1.0, None).is_err());
    }

    #[test]
    fn gumbel_samples_are_one_hot() {
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let mut t = Tape::new();
            let l = t.constant(Tensor::row(vec![0.3, -0.2, 1.1, 0.0, 0.4]));
            let s = gumbel_st_sample(&mut t, l, 0.7, Some(&mut rng)).unwrap();
            let d = t.value(s).data();
            assert_eq!(d.iter().sum::<f32>(), 1.0);
            assert_eq!(d.iter().filter(|&&v| v == 1.0).count(), 1);
        }
    }

    /// At tau = 1 the straight-through forward sample is argmax(logits + g),
    /// which by the Gumbel-max identity is distributed as softmax(logits).
    #[test]
    fn gumbel_frequencies_match_softmax_oracle() {
        let logits = [0.5f32, -0.3, 1.2, 0.0];
        let n = 100_000;
        let mut rng = Rng::new(2024);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let mut t = Tape::new();
            let l = t.constant(Tensor::row(logits.to_vec()));
            let s = gumbel_st_sample(&mut t, l, 1.0, Some(&mut rng)).unwrap();
            counts[argmax(t.value(s).data())] += 1;
        }
        let z: f64 = logits.iter().map(|&v| (v as f64).exp()).sum();
        for (i, &c) in counts.iter().enumerate() {
            let p = (logits[i] as f64).exp() / z;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(dev < 3.0 * sigma, "symbol {i}: {c} vs {} (3σ={})", n as f64 * p, 3.0 * sigma);
        }
    }
}
