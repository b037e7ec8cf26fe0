//! Differentiable building blocks: embedding lookup, linear map, dropout,
//! masked temporal max-pooling, and softmax cross-entropy.
//!
//! Each forward returns whatever its backward needs; backwards are
//! hand-written.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::nncore::tensor::{debug_check_finite, matmul_nn, matmul_tn, Tensor};

/// Looks up `ids` rows of `table [V,E]`, producing `[N,E]`.
pub fn embedding_forward(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, e) = (table.shape()[0], table.shape()[1]);
    let mut out = Tensor::zeros(&[ids.len(), e]);
    for (n, &id) in ids.iter().enumerate() {
        if id >= v {
            return Err(CoreError::invalid(format!(
                "embedding id {id} out of range for table of {v} rows"
            )));
        }
        out.row_mut(n).copy_from_slice(table.row(id));
    }
    Ok(out)
}

/// Scatter-adds `dy [N,E]` rows into the table gradient.
pub fn embedding_backward(dy: &Tensor, ids: &[usize], table_grad: &mut Tensor) {
    for (n, &id) in ids.iter().enumerate() {
        let src = dy.row(n);
        let dst = table_grad.row_mut(id);
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            *d += s;
        }
    }
}

/// `x [N,I] · wᵀ [I,O] (+ b)` with `w` stored `[O,I]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let mut out = crate::nncore::tensor::matmul_nt(x, w);
    if let Some(b) = b {
        let o = out.shape()[1];
        for n in 0..out.shape()[0] {
            let row = out.row_mut(n);
            for (r, &bv) in row.iter_mut().zip(b.data()[..o].iter()) {
                *r += bv;
            }
        }
    }
    debug_check_finite(&out, "linear_forward");
    out
}

/// Gradients of a linear map: `(dx, dw, db)`.
pub fn linear_backward(dy: &Tensor, x: &Tensor, w: &Tensor) -> (Tensor, Tensor, Tensor) {
    let dx = matmul_nn(dy, w);
    let dw = matmul_tn(dy, x);
    let o = dy.shape()[1];
    let mut db = Tensor::zeros(&[o]);
    for n in 0..dy.shape()[0] {
        for (d, &g) in db.data_mut().iter_mut().zip(dy.row(n).iter()) {
            *d += g;
        }
    }
    (dx, dw, db)
}

/// Inverted dropout. In training mode each element is zeroed with
/// probability `p` and survivors are scaled by `1/(1-p)`; the returned mask
/// holds those multipliers. Inference is an identity with no mask.
pub fn dropout_forward<R: Rng>(
    x: &Tensor,
    p: f64,
    training: bool,
    rng: &mut R,
) -> (Tensor, Option<Tensor>) {
    assert!((0.0..1.0).contains(&p), "drop probability must be in [0,1)");
    if !training {
        return (x.clone(), None);
    }
    if p == 0.0 {
        let mut mask = Tensor::zeros(&[x.numel()]);
        mask.fill(1.0);
        return (x.clone(), Some(mask));
    }
    let keep_scale = 1.0 / (1.0 - p);
    let mut mask = Tensor::zeros(&[x.numel()]);
    let mut out = x.clone();
    for (m, o) in mask.data_mut().iter_mut().zip(out.data_mut().iter_mut()) {
        if rng.gen::<f64>() < p {
            *m = 0.0;
            *o = 0.0;
        } else {
            *m = keep_scale;
            *o *= keep_scale;
        }
    }
    (out, Some(mask))
}

pub fn dropout_backward(dy: &Tensor, mask: Option<&Tensor>) -> Tensor {
    match mask {
        None => dy.clone(),
        Some(mask) => {
            let mut dx = dy.clone();
            for (d, &m) in dx.data_mut().iter_mut().zip(mask.data().iter()) {
                *d *= m;
            }
            dx
        }
    }
}

/// Argmax positions recorded by the pooling forward, one per `[B,F]` cell.
pub struct MaxPoolCache {
    pub argmax_t: Vec<usize>,
    pub steps: usize,
}

/// Per batch item and feature, the maximum over timesteps `t < lengths[b]`
/// of `x_seq [T,B,F]`. First occurrence wins on ties.
pub fn masked_temporal_max_pool(
    x_seq: &Tensor,
    lengths: &[usize],
) -> Result<(Tensor, MaxPoolCache)> {
    let (t_max, b_max, f_max) = (x_seq.shape()[0], x_seq.shape()[1], x_seq.shape()[2]);
    if lengths.len() != b_max {
        return Err(CoreError::invalid(format!(
            "{} lengths for batch of {b_max}",
            lengths.len()
        )));
    }
    for (b, &len) in lengths.iter().enumerate() {
        if len == 0 || len > t_max {
            return Err(CoreError::invalid(format!(
                "length {len} for batch item {b} is outside [1, {t_max}]"
            )));
        }
    }
    let mut out = Tensor::zeros(&[b_max, f_max]);
    let mut argmax_t = vec![0usize; b_max * f_max];
    for b in 0..b_max {
        for f in 0..f_max {
            let mut best = f64::NEG_INFINITY;
            let mut best_t = 0;
            for t in 0..lengths[b] {
                let v = x_seq.frame(t)[b * f_max + f];
                if v > best {
                    best = v;
                    best_t = t;
                }
            }
            out.row_mut(b)[f] = best;
            argmax_t[b * f_max + f] = best_t;
        }
    }
    debug_check_finite(&out, "masked_temporal_max_pool");
    Ok((out, MaxPoolCache { argmax_t, steps: t_max }))
}

/// Routes pooled gradients back to their argmax positions.
pub fn max_pool_backward(dy: &Tensor, cache: &MaxPoolCache) -> Tensor {
    let (b_max, f_max) = (dy.shape()[0], dy.shape()[1]);
    let mut dx = Tensor::zeros(&[cache.steps, b_max, f_max]);
    for b in 0..b_max {
        for f in 0..f_max {
            let t = cache.argmax_t[b * f_max + f];
            dx.frame_mut(t)[b * f_max + f] += dy.row(b)[f];
        }
    }
    dx
}

/// Mean negative log-softmax over rows whose target is not `ignore_id`.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    ignore_id: usize,
) -> Result<(f64, Tensor)> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n {
        return Err(CoreError::invalid(format!(
            "{} targets for {n} logit rows",
            targets.len()
        )));
    }
    let included: Vec<usize> = (0..n).filter(|&i| targets[i] != ignore_id).collect();
    if included.is_empty() {
        return Err(CoreError::invalid("empty loss: every row is ignored"));
    }
    for &i in &included {
        if targets[i] >= c {
            return Err(CoreError::invalid(format!(
                "target {} out of range for {c} classes",
                targets[i]
            )));
        }
    }
    let denom = included.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[n, c]);
    for i in 0..n {
        if targets[i] == ignore_id {
            continue;
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let log_z = max + sum.ln();
        loss += log_z - row[targets[i]];
        let grow = grad.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            let softmax = (v - log_z).exp();
            grow[j] = (softmax - if j == targets[i] { 1.0 } else { 0.0 }) / denom;
        }
    }
    loss /= denom;
    if !loss.is_finite() {
        return Err(CoreError::numeric("non-finite cross-entropy loss"));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn max_pool_small_case() {
        // T=2, B=1, F=2, rows [1,4] then [3,2].
        let x = Tensor::from_vec(&[2, 1, 2], vec![1.0, 4.0, 3.0, 2.0]);
        let (out, _) = masked_temporal_max_pool(&x, &[2]).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
        let (out1, _) = masked_temporal_max_pool(&x, &[1]).unwrap();
        assert_eq!(out1.data(), &[1.0, 4.0]);
    }

    #[test]
    fn max_pool_rejects_bad_lengths() {
        let x = Tensor::zeros(&[2, 1, 2]);
        assert!(masked_temporal_max_pool(&x, &[0]).is_err());
        assert!(masked_temporal_max_pool(&x, &[3]).is_err());
    }

    #[test]
    fn max_pool_tie_routes_to_first_step() {
        let x = Tensor::from_vec(&[2, 1, 1], vec![5.0, 5.0]);
        let (_, cache) = masked_temporal_max_pool(&x, &[2]).unwrap();
        assert_eq!(cache.argmax_t, vec![0]);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let logits = Tensor::zeros(&[3, 4]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[0, 1, 2], 99).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        // Gradient row sums are zero.
        for i in 0..3 {
            let s: f64 = grad.row(i).iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut logits = Tensor::zeros(&[1, 4]);
        logits.row_mut(0)[2] = 50.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[2], 99).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn ignored_rows_contribute_nothing() {
        let mut logits = Tensor::zeros(&[2, 3]);
        logits.row_mut(1).copy_from_slice(&[9.0, -4.0, 2.0]);
        let (loss_a, grad) = softmax_cross_entropy(&logits, &[0, 99], 99).unwrap();
        let (loss_b, _) =
            softmax_cross_entropy(&Tensor::zeros(&[1, 3]), &[0], 99).unwrap();
        assert!((loss_a - loss_b).abs() < 1e-12);
        assert!(grad.row(1).iter().all(|&g| g == 0.0));
        assert!(softmax_cross_entropy(&logits, &[99, 99], 99).is_err());
    }

    #[test]
    fn dropout_identity_paths() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, mask) = dropout_forward(&x, 0.0, true, &mut rng);
        assert_eq!(y, x);
        assert!(mask.unwrap().data().iter().all(|&m| m == 1.0));
        let (y, mask) = dropout_forward(&x, 0.9, false, &mut rng);
        assert_eq!(y, x);
        assert!(mask.is_none());
    }

    #[test]
    fn dropout_empirical_rate() {
        let x = Tensor::from_vec(&[1_000_000], vec![1.0; 1_000_000]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (y, _) = dropout_forward(&x, 0.2, true, &mut rng);
        let dropped = y.data().iter().filter(|&&v| v == 0.0).count() as f64;
        let rate = dropped / 1e6;
        assert!((rate - 0.2).abs() < 0.005, "rate {rate}");
        // Survivors are scaled by 1/0.8.
        let survivor = y.data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((survivor - 1.25).abs() < 1e-12);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let table = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert!(embedding_forward(&table, &[0, 2]).is_err());
        let out = embedding_forward(&table, &[1, 0]).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0, 1.0, 2.0]);
    }
}
