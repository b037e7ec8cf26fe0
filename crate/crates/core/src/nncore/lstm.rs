//! LSTM cell and masked bidirectional layer with hand-written backwards.
//!
//! Weight layout follows the usual convention: `w_ih [4H,I]`, `w_hh [4H,H]`,
//! one bias `[4H]`, gates ordered input, forget, candidate, output.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::nncore::params::{ParamId, ParamSet};
use crate::nncore::tensor::{debug_check_finite, matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handles to one cell's weights inside a [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
}

impl LstmWeights {
    /// Registers cell weights under `prefix`. Weights are uniform in
    /// `±1/sqrt(hidden)`; the forget-gate bias starts at 1, other biases
    /// at 0.
    pub fn create<R: Rng>(
        set: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = set.add_uniform(format!("{prefix}.w_ih"), &[4 * hidden, input_dim], bound, rng);
        let w_hh = set.add_uniform(format!("{prefix}.w_hh"), &[4 * hidden, hidden], bound, rng);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|v| *v = 1.0);
        let b = set.add(format!("{prefix}.b"), bias);
        Self { w_ih, w_hh, b }
    }

    pub fn hidden(&self, set: &ParamSet) -> usize {
        set.value(self.w_hh).shape()[1]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Everything the cell backward needs.
#[derive(Debug)]
pub struct LstmCellCache {
    pub x: Tensor,
    pub h_prev: Tensor,
    pub c_prev: Tensor,
    i: Tensor,
    f: Tensor,
    g: Tensor,
    o: Tensor,
    tanh_c: Tensor,
}

/// One LSTM step over a batch: `x [B,I]`, states `[B,H]`.
pub fn lstm_cell_forward(
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
    b: &Tensor,
) -> Result<(Tensor, Tensor, LstmCellCache)> {
    let batch = x.shape()[0];
    let hidden = w_hh.shape()[1];
    if x.shape()[1] != w_ih.shape()[1] {
        return Err(CoreError::invalid(format!(
            "lstm input shape {:?} does not match w_ih shape {:?}",
            x.shape(),
            w_ih.shape()
        )));
    }
    if h_prev.shape() != [batch, hidden] || c_prev.shape() != [batch, hidden] {
        return Err(CoreError::invalid(format!(
            "lstm state shapes {:?}/{:?} do not match [batch {batch}, hidden {hidden}]",
            h_prev.shape(),
            c_prev.shape()
        )));
    }

    let mut pre = matmul_nt(x, w_ih);
    let rec = matmul_nt(h_prev, w_hh);
    pre.add_assign(&rec);
    for n in 0..batch {
        let row = pre.row_mut(n);
        for (r, &bv) in row.iter_mut().zip(b.data().iter()) {
            *r += bv;
        }
    }

    let mut i = Tensor::zeros(&[batch, hidden]);
    let mut f = Tensor::zeros(&[batch, hidden]);
    let mut g = Tensor::zeros(&[batch, hidden]);
    let mut o = Tensor::zeros(&[batch, hidden]);
    let mut c = Tensor::zeros(&[batch, hidden]);
    let mut tanh_c = Tensor::zeros(&[batch, hidden]);
    let mut h = Tensor::zeros(&[batch, hidden]);
    for n in 0..batch {
        let p = pre.row(n);
        for k in 0..hidden {
            let iv = sigmoid(p[k]);
            let fv = sigmoid(p[hidden + k]);
            let gv = p[2 * hidden + k].tanh();
            let ov = sigmoid(p[3 * hidden + k]);
            let cv = fv * c_prev.row(n)[k] + iv * gv;
            let tc = cv.tanh();
            i.row_mut(n)[k] = iv;
            f.row_mut(n)[k] = fv;
            g.row_mut(n)[k] = gv;
            o.row_mut(n)[k] = ov;
            c.row_mut(n)[k] = cv;
            tanh_c.row_mut(n)[k] = tc;
            h.row_mut(n)[k] = ov * tc;
        }
    }
    debug_check_finite(&h, "lstm_cell_forward");
    let cache = LstmCellCache {
        x: x.clone(),
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        i,
        f,
        g,
        o,
        tanh_c,
    };
    Ok((h, c, cache))
}

/// Gradients produced by one cell backward.
pub struct LstmCellGrads {
    pub dx: Tensor,
    pub dh_prev: Tensor,
    pub dc_prev: Tensor,
    pub dw_ih: Tensor,
    pub dw_hh: Tensor,
    pub db: Tensor,
}

/// Backward through one step given `dh` and incoming `dc`.
pub fn lstm_cell_backward(
    cache: &LstmCellCache,
    dh: &Tensor,
    dc_in: &Tensor,
    w_ih: &Tensor,
    w_hh: &Tensor,
) -> LstmCellGrads {
    let batch = cache.x.shape()[0];
    let hidden = cache.i.shape()[1];

    let mut dpre = Tensor::zeros(&[batch, 4 * hidden]);
    let mut dc_prev = Tensor::zeros(&[batch, hidden]);
    for n in 0..batch {
        for k in 0..hidden {
            let (i, f, g, o) = (
                cache.i.row(n)[k],
                cache.f.row(n)[k],
                cache.g.row(n)[k],
                cache.o.row(n)[k],
            );
            let tc = cache.tanh_c.row(n)[k];
            let dh_v = dh.row(n)[k];
            let dc = dc_in.row(n)[k] + dh_v * o * (1.0 - tc * tc);
            let d = dpre.row_mut(n);
            d[k] = dc * g * i * (1.0 - i);
            d[hidden + k] = dc * cache.c_prev.row(n)[k] * f * (1.0 - f);
            d[2 * hidden + k] = dc * i * (1.0 - g * g);
            d[3 * hidden + k] = dh_v * tc * o * (1.0 - o);
            dc_prev.row_mut(n)[k] = dc * f;
        }
    }

    let dx = matmul_nn(&dpre, w_ih);
    let dh_prev = matmul_nn(&dpre, w_hh);
    let dw_ih = matmul_tn(&dpre, &cache.x);
    let dw_hh = matmul_tn(&dpre, &cache.h_prev);
    let mut db = Tensor::zeros(&[4 * hidden]);
    for n in 0..batch {
        for (d, &g) in db.data_mut().iter_mut().zip(dpre.row(n).iter()) {
            *d += g;
        }
    }
    LstmCellGrads {
        dx,
        dh_prev,
        dc_prev,
        dw_ih,
        dw_hh,
        db,
    }
}

/// Weight handles for one bidirectional layer.
#[derive(Debug, Clone, Copy)]
pub struct BilstmWeights {
    pub fwd: LstmWeights,
    pub bwd: LstmWeights,
}

impl BilstmWeights {
    pub fn create<R: Rng>(
        set: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        fwd_hidden: usize,
        bwd_hidden: usize,
        rng: &mut R,
    ) -> Self {
        let fwd = LstmWeights::create(set, &format!("{prefix}.fwd"), input_dim, fwd_hidden, rng);
        let bwd = LstmWeights::create(set, &format!("{prefix}.bwd"), input_dim, bwd_hidden, rng);
        Self { fwd, bwd }
    }
}

/// Final hidden and cell states of both directions: the forward state at
/// `lengths[b]-1` and the backward state after position 0.
pub struct FinalStates {
    pub h_fwd: Tensor,
    pub c_fwd: Tensor,
    pub h_bwd: Tensor,
    pub c_bwd: Tensor,
}

struct DirectionCache {
    caches: Vec<LstmCellCache>,
    /// Step order of the scan; caches[k] corresponds to time order[k].
    order: Vec<usize>,
}

pub struct BilstmCache {
    fwd: DirectionCache,
    bwd: DirectionCache,
    lengths: Vec<usize>,
    input_dim: usize,
}

fn scan_direction(
    set: &ParamSet,
    w: &LstmWeights,
    x_seq: &Tensor,
    lengths: &[usize],
    order: Vec<usize>,
) -> Result<(Vec<Tensor>, Tensor, Tensor, DirectionCache)> {
    let (_, batch, _) = (x_seq.shape()[0], x_seq.shape()[1], x_seq.shape()[2]);
    let hidden = w.hidden(set);
    let w_ih = set.value(w.w_ih);
    let w_hh = set.value(w.w_hh);
    let b = set.value(w.b);

    let mut h = Tensor::zeros(&[batch, hidden]);
    let mut c = Tensor::zeros(&[batch, hidden]);
    let mut outputs: Vec<Tensor> = (0..x_seq.shape()[0])
        .map(|_| Tensor::zeros(&[batch, hidden]))
        .collect();
    let mut caches = Vec::with_capacity(order.len());
    for &t in &order {
        let x_t = x_seq.frame_tensor(t);
        let (h_new, c_new, cache) = lstm_cell_forward(&x_t, &h, &c, w_ih, w_hh, b)?;
        let mut h_next = h_new;
        let mut c_next = c_new;
        for bi in 0..batch {
            if t >= lengths[bi] {
                // Frozen past the valid range: state carries through,
                // output stays zero.
                h_next.row_mut(bi).copy_from_slice(h.row(bi));
                c_next.row_mut(bi).copy_from_slice(c.row(bi));
            } else {
                outputs[t].row_mut(bi).copy_from_slice(h_next.row(bi));
            }
        }
        h = h_next;
        c = c_next;
        caches.push(cache);
    }
    Ok((outputs, h, c, DirectionCache { caches, order }))
}

/// Runs one bidirectional layer over `x_seq [T,B,I]`. Outputs are
/// `[T,B,F+B]` with forward features first; positions at or beyond a
/// sequence's length are exactly zero.
pub fn bilstm_layer_forward(
    set: &ParamSet,
    w: &BilstmWeights,
    x_seq: &Tensor,
    lengths: &[usize],
) -> Result<(Tensor, BilstmCache, FinalStates)> {
    let (steps, batch, input_dim) =
        (x_seq.shape()[0], x_seq.shape()[1], x_seq.shape()[2]);
    if lengths.len() != batch {
        return Err(CoreError::invalid(format!(
            "{} lengths for batch of {batch}",
            lengths.len()
        )));
    }
    for (b, &len) in lengths.iter().enumerate() {
        if len == 0 {
            return Err(CoreError::invalid(format!(
                "zero-length sequence at batch item {b}"
            )));
        }
        if len > steps {
            return Err(CoreError::invalid(format!(
                "length {len} at batch item {b} exceeds {steps} timesteps"
            )));
        }
    }

    let (fwd_out, h_f, c_f, fwd_cache) =
        scan_direction(set, &w.fwd, x_seq, lengths, (0..steps).collect())?;
    let (bwd_out, h_b, c_b, bwd_cache) =
        scan_direction(set, &w.bwd, x_seq, lengths, (0..steps).rev().collect())?;

    let fh = w.fwd.hidden(set);
    let bh = w.bwd.hidden(set);
    let mut out = Tensor::zeros(&[steps, batch, fh + bh]);
    for t in 0..steps {
        let frame = out.frame_mut(t);
        for bi in 0..batch {
            frame[bi * (fh + bh)..bi * (fh + bh) + fh].copy_from_slice(fwd_out[t].row(bi));
            frame[bi * (fh + bh) + fh..(bi + 1) * (fh + bh)].copy_from_slice(bwd_out[t].row(bi));
        }
    }
    Ok((
        out,
        BilstmCache {
            fwd: fwd_cache,
            bwd: bwd_cache,
            lengths: lengths.to_vec(),
            input_dim,
        },
        FinalStates {
            h_fwd: h_f,
            c_fwd: c_f,
            h_bwd: h_b,
            c_bwd: c_b,
        },
    ))
}

fn backward_direction(
    set: &mut ParamSet,
    w: &LstmWeights,
    dir: &DirectionCache,
    lengths: &[usize],
    d_out: impl Fn(usize, usize, usize) -> f64, // (t, b, k) -> grad
    d_final: Option<(&Tensor, &Tensor)>,
    dx_seq: &mut Tensor,
) {
    let hidden = w.hidden(set);
    let batch = lengths.len();

    let mut dh_carry = match d_final {
        Some((dh, _)) => dh.clone(),
        None => Tensor::zeros(&[batch, hidden]),
    };
    let mut dc_carry = match d_final {
        Some((_, dc)) => dc.clone(),
        None => Tensor::zeros(&[batch, hidden]),
    };

    let mut dw_ih = Tensor::zeros(set.value(w.w_ih).shape());
    let mut dw_hh = Tensor::zeros(set.value(w.w_hh).shape());
    let mut db = Tensor::zeros(set.value(w.b).shape());

    for k in (0..dir.order.len()).rev() {
        let t = dir.order[k];
        let cache = &dir.caches[k];

        // Output gradient lands only on valid positions; frozen rows pass
        // their carries straight through the step.
        let mut dh_cell = Tensor::zeros(&[batch, hidden]);
        let mut dc_cell = Tensor::zeros(&[batch, hidden]);
        for bi in 0..batch {
            if t < lengths[bi] {
                for j in 0..hidden {
                    dh_cell.row_mut(bi)[j] = dh_carry.row(bi)[j] + d_out(t, bi, j);
                }
                dc_cell.row_mut(bi).copy_from_slice(dc_carry.row(bi));
            }
        }
        let grads = lstm_cell_backward(
            cache,
            &dh_cell,
            &dc_cell,
            set.value(w.w_ih),
            set.value(w.w_hh),
        );
        dw_ih.add_assign(&grads.dw_ih);
        dw_hh.add_assign(&grads.dw_hh);
        db.add_assign(&grads.db);

        let mut dh_next = grads.dh_prev;
        let mut dc_next = grads.dc_prev;
        for bi in 0..batch {
            if t >= lengths[bi] {
                dh_next.row_mut(bi).copy_from_slice(dh_carry.row(bi));
                dc_next.row_mut(bi).copy_from_slice(dc_carry.row(bi));
            } else {
                let width = dx_seq.shape()[2];
                let dst = dx_seq.frame_mut(t);
                for j in 0..width {
                    dst[bi * width + j] += grads.dx.row(bi)[j];
                }
            }
        }
        dh_carry = dh_next;
        dc_carry = dc_next;
    }

    set.grad_add(w.w_ih, &dw_ih);
    set.grad_add(w.w_hh, &dw_hh);
    set.grad_add(w.b, &db);
}

/// Backward through a bidirectional layer. `d_out [T,B,F+B]` carries
/// per-step gradients; `d_final` optionally injects gradients on the final
/// states (the decoder-initialization path). Returns `dx_seq [T,B,I]`.
pub fn bilstm_layer_backward(
    set: &mut ParamSet,
    w: &BilstmWeights,
    cache: &BilstmCache,
    d_out: &Tensor,
    d_final: Option<&FinalStates>,
) -> Tensor {
    let steps = d_out.shape()[0];
    let batch = d_out.shape()[1];
    let fh = w.fwd.hidden(set);
    let width = d_out.shape()[2];
    let mut dx_seq = Tensor::zeros(&[steps, batch, cache.input_dim]);

    // Forward direction reads the first `fh` features of d_out.
    {
        let data = d_out.data().to_vec();
        backward_direction(
            set,
            &w.fwd,
            &cache.fwd,
            &cache.lengths,
            move |t, b, k| data[(t * batch + b) * width + k],
            d_final.map(|f| (&f.h_fwd, &f.c_fwd)),
            &mut dx_seq,
        );
    }
    // Backward direction reads the remaining features.
    {
        let data = d_out.data().to_vec();
        backward_direction(
            set,
            &w.bwd,
            &cache.bwd,
            &cache.lengths,
            move |t, b, k| data[(t * batch + b) * width + fh + k],
            d_final.map(|f| (&f.h_bwd, &f.c_bwd)),
            &mut dx_seq,
        );
    }
    dx_seq
}
