//! Mark objective `sum_i ln p(k_i | t_i)` and its exact reverse-mode gradient.

use rayon::prelude::*;

use super::{attention_score, dot, fill_temporal_embedding, EncoderParams, EncoderState, MarkModel};
use crate::error::{Error, Result};
use crate::event_data::EventSequence;

/// Forward-pass values kept for the backward sweep of one sequence.
struct Tape {
    n: usize,
    z: Vec<f64>,
    /// `y[l]` holds `h^(l)` for every `(event j, mark k)` query at row `j * K + k`.
    y: Vec<Vec<f64>>,
    /// `act[l - 1]` holds the tanh update of layer `l`.
    act: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    keys: Vec<Vec<f64>>,
    vals: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

fn forward(model: &MarkModel, seq: &EventSequence) -> (f64, Tape) {
    let cfg = &model.config;
    let params = &model.params;
    let ev = seq.events();
    let (n, kk, d, dq, dw, din) = (
        ev.len(),
        cfg.num_marks,
        cfg.d_model,
        cfg.d_qk,
        cfg.total_width(),
        cfg.input_width(),
    );
    let (dh, dv) = (cfg.head_qk(), cfg.head_value());
    let d_scale = dw as f64;

    let mut z = vec![0.0; n * dw];
    for (j, e) in ev.iter().enumerate() {
        fill_temporal_embedding(e.time, &mut z[j * dw..(j + 1) * dw]);
    }

    let mut y0 = vec![0.0; n * kk * d];
    for j in 0..n {
        for k in 0..kk {
            y0[(j * kk + k) * d..(j * kk + k + 1) * d].copy_from_slice(params.base.row(k));
        }
    }
    let mut y = vec![y0];
    let mut act = Vec::with_capacity(cfg.layers);
    let mut qs = Vec::with_capacity(cfg.layers);
    let mut keys = Vec::with_capacity(cfg.layers);
    let mut vals = Vec::with_capacity(cfg.layers);
    let mut inputs = Vec::with_capacity(cfg.layers);

    for lp in &params.layers {
        let prev = y.last().unwrap();
        let mut xin = vec![0.0; n * din];
        let mut key = vec![0.0; n * dq];
        let mut val = vec![0.0; n * d];
        for (i, e) in ev.iter().enumerate() {
            let x = &mut xin[i * din..(i + 1) * din];
            x[..dw].copy_from_slice(&z[i * dw..(i + 1) * dw]);
            let row = i * kk + e.mark;
            x[dw..].copy_from_slice(&prev[row * d..(row + 1) * d]);
            key[i * dq..(i + 1) * dq].copy_from_slice(&lp.key.matvec(x));
            val[i * d..(i + 1) * d].copy_from_slice(&lp.value.matvec(x));
        }

        let mut next = prev.clone();
        let mut a = vec![0.0; n * kk * d];
        let mut q_all = vec![0.0; n * kk * dq];
        let mut x = vec![0.0; din];
        for j in 0..n {
            for k in 0..kk {
                let row = j * kk + k;
                x[..dw].copy_from_slice(&z[j * dw..(j + 1) * dw]);
                x[dw..].copy_from_slice(&prev[row * d..(row + 1) * d]);
                let q = lp.query.matvec(&x);
                for h in 0..cfg.n_heads {
                    let qh = &q[h * dh..(h + 1) * dh];
                    let mut c = 0.0;
                    let out = &mut a[row * d + h * dv..row * d + (h + 1) * dv];
                    for i in 0..j {
                        let kh = &key[i * dq + h * dh..i * dq + (h + 1) * dh];
                        let alpha = attention_score(kh, qh, d_scale).0.exp();
                        c += alpha;
                        let vh = &val[i * d + h * dv..i * d + (h + 1) * dv];
                        for (o, v) in out.iter_mut().zip(vh) {
                            *o += alpha * v;
                        }
                    }
                    let norm = 1.0 + c;
                    out.iter_mut().for_each(|o| *o = (*o / norm).tanh());
                }
                for (nv, av) in next[row * d..(row + 1) * d]
                    .iter_mut()
                    .zip(&a[row * d..(row + 1) * d])
                {
                    *nv += av;
                }
                q_all[row * dq..(row + 1) * dq].copy_from_slice(&q);
            }
        }
        y.push(next);
        act.push(a);
        qs.push(q_all);
        keys.push(key);
        vals.push(val);
        inputs.push(xin);
    }

    let mut value = 0.0;
    let mut probs = vec![0.0; n * kk];
    for (j, e) in ev.iter().enumerate() {
        let mut logits = vec![0.0; kk];
        for (k, logit) in logits.iter_mut().enumerate() {
            let w = params.classifier.row(k);
            let row = j * kk + k;
            *logit = y
                .iter()
                .enumerate()
                .map(|(l, yl)| dot(&yl[row * d..(row + 1) * d], &w[l * d..(l + 1) * d]))
                .sum();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for k in 0..kk {
            probs[j * kk + k] = (logits[k] - lse).exp();
        }
        value += logits[e.mark] - lse;
    }

    let tape = Tape {
        n,
        z,
        y,
        act,
        q: qs,
        keys,
        vals,
        inputs,
        probs,
    };
    (value, tape)
}

fn backward(model: &MarkModel, seq: &EventSequence, tape: &Tape) -> EncoderParams {
    let cfg = &model.config;
    let params = &model.params;
    let ev = seq.events();
    let (n, kk, d, dq, dw, din) = (
        tape.n,
        cfg.num_marks,
        cfg.d_model,
        cfg.d_qk,
        cfg.total_width(),
        cfg.input_width(),
    );
    let (dh, dv) = (cfg.head_qk(), cfg.head_value());
    let inv_sqrt = 1.0 / (dw as f64).sqrt();
    let d_scale = dw as f64;
    let mut grad = params.zeros_like();

    // Classifier and the concatenated-embedding gradient.
    let mut dy: Vec<Vec<f64>> = vec![vec![0.0; n * kk * d]; cfg.layers + 1];
    for (j, e) in ev.iter().enumerate() {
        for k in 0..kk {
            let row = j * kk + k;
            let dlogit = f64::from(u8::from(k == e.mark)) - tape.probs[row];
            if dlogit == 0.0 {
                continue;
            }
            let w = params.classifier.row(k);
            let gw = grad.classifier.row_mut(k);
            for l in 0..=cfg.layers {
                let yl = &tape.y[l][row * d..(row + 1) * d];
                for c in 0..d {
                    gw[l * d + c] += dlogit * yl[c];
                    dy[l][row * d + c] += dlogit * w[l * d + c];
                }
            }
        }
    }

    let mut x = vec![0.0; din];
    let mut dx = vec![0.0; din];
    for l in (1..=cfg.layers).rev() {
        let lp = &params.layers[l - 1];
        let li = l - 1;
        let key = &tape.keys[li];
        let val = &tape.vals[li];
        let mut dkey = vec![0.0; n * dq];
        let mut dval = vec![0.0; n * d];
        let mut gq = std::mem::replace(&mut grad.layers[li].query, super::Matrix::zeros(0, 0));

        for j in 0..n {
            for k in 0..kk {
                let row = j * kk + k;
                let g = dy[l][row * d..(row + 1) * d].to_vec();
                if g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                for c in 0..d {
                    dy[l - 1][row * d + c] += g[c];
                }
                let a = &tape.act[li][row * d..(row + 1) * d];
                let du: Vec<f64> = g.iter().zip(a).map(|(gv, av)| gv * (1.0 - av * av)).collect();
                let q = &tape.q[li][row * dq..(row + 1) * dq];
                let mut dqv = vec![0.0; dq];
                for h in 0..cfg.n_heads {
                    let qh = &q[h * dh..(h + 1) * dh];
                    let duh = &du[h * dv..(h + 1) * dv];
                    let mut alphas = Vec::with_capacity(j);
                    let mut c = 0.0;
                    let mut num = vec![0.0; dv];
                    for i in 0..j {
                        let kh = &key[i * dq + h * dh..i * dq + (h + 1) * dh];
                        let (s, clamped) = attention_score(kh, qh, d_scale);
                        let alpha = s.exp();
                        alphas.push((alpha, clamped));
                        c += alpha;
                        let vh = &val[i * d + h * dv..i * d + (h + 1) * dv];
                        for (nm, v) in num.iter_mut().zip(vh) {
                            *nm += alpha * v;
                        }
                    }
                    let norm = 1.0 + c;
                    let u: Vec<f64> = num.iter().map(|v| v / norm).collect();
                    let du_dot_u = dot(duh, &u);
                    for (i, &(alpha, clamped)) in alphas.iter().enumerate() {
                        let vh = &val[i * d + h * dv..i * d + (h + 1) * dv];
                        let dalpha = (dot(duh, vh) - du_dot_u) / norm;
                        let dvh = &mut dval[i * d + h * dv..i * d + (h + 1) * dv];
                        for (g_v, du_v) in dvh.iter_mut().zip(duh) {
                            *g_v += du_v * alpha / norm;
                        }
                        if clamped {
                            continue;
                        }
                        let ds = dalpha * alpha * inv_sqrt;
                        let kh = &key[i * dq + h * dh..i * dq + (h + 1) * dh];
                        for (dqh, kv) in dqv[h * dh..(h + 1) * dh].iter_mut().zip(kh) {
                            *dqh += ds * kv;
                        }
                        for (dkh, qv) in dkey[i * dq + h * dh..i * dq + (h + 1) * dh]
                            .iter_mut()
                            .zip(qh)
                        {
                            *dkh += ds * qv;
                        }
                    }
                }
                x[..dw].copy_from_slice(&tape.z[j * dw..(j + 1) * dw]);
                x[dw..].copy_from_slice(&tape.y[l - 1][row * d..(row + 1) * d]);
                gq.add_outer(&dqv, &x);
                dx.iter_mut().for_each(|v| *v = 0.0);
                lp.query.matvec_t_acc(&dqv, &mut dx);
                for c in 0..d {
                    dy[l - 1][row * d + c] += dx[dw + c];
                }
            }
        }
        grad.layers[li].query = gq;

        for (i, e) in ev.iter().enumerate() {
            let xi = &tape.inputs[li][i * din..(i + 1) * din];
            let dk = &dkey[i * dq..(i + 1) * dq];
            let dvl = &dval[i * d..(i + 1) * d];
            grad.layers[li].key.add_outer(dk, xi);
            grad.layers[li].value.add_outer(dvl, xi);
            dx.iter_mut().for_each(|v| *v = 0.0);
            lp.key.matvec_t_acc(dk, &mut dx);
            lp.value.matvec_t_acc(dvl, &mut dx);
            let row = i * kk + e.mark;
            for c in 0..d {
                dy[l - 1][row * d + c] += dx[dw + c];
            }
        }
    }

    for j in 0..n {
        for k in 0..kk {
            let row = j * kk + k;
            for (g, v) in grad.base.row_mut(k).iter_mut().zip(&dy[0][row * d..(row + 1) * d]) {
                *g += v;
            }
        }
    }
    grad
}

/// Objective of one sequence via the incremental encoder (no gradient).
pub fn sequence_mark_loglik(model: &MarkModel, seq: &EventSequence) -> Result<f64> {
    let mut state = EncoderState::new(model);
    let mut total = 0.0;
    for e in seq.events() {
        let (p, stacks) = state.pmf_with_stacks(e.time)?;
        total += p[e.mark].ln();
        state.push(*e, &stacks[e.mark])?;
    }
    Ok(total)
}

/// Summed mark objective over `batch`, reduced in sequence order.
pub fn mark_loglik(model: &MarkModel, batch: &[EventSequence]) -> Result<f64> {
    let values: Vec<Result<f64>> = batch
        .par_iter()
        .map(|s| sequence_mark_loglik(model, s))
        .collect();
    let mut total = 0.0;
    for (i, v) in values.into_iter().enumerate() {
        let v = v?;
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { sequence: i });
        }
        total += v;
    }
    Ok(total)
}

/// Objective `sum ln p(k_i | t_i)` over `batch` and its gradient with respect
/// to every parameter tensor. Per-sequence results are reduced in order.
pub fn mark_loglik_and_grad(
    model: &MarkModel,
    batch: &[EventSequence],
) -> Result<(f64, EncoderParams)> {
    if let Some(bad) = batch
        .iter()
        .position(|s| s.max_mark().is_some_and(|m| m >= model.config.num_marks))
    {
        return Err(Error::Shape(format!("sequence {bad} has marks outside the alphabet")));
    }
    let parts: Vec<(f64, EncoderParams)> = batch
        .par_iter()
        .map(|seq| {
            let (value, tape) = forward(model, seq);
            (value, backward(model, seq, &tape))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = model.params.zeros_like();
    for (i, (value, g)) in parts.into_iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { sequence: i });
        }
        total += value;
        grad.add_scaled(&g, 1.0);
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::super::EncoderConfig;
    use super::*;
    use crate::event_data::Event;

    fn seq(n: usize, k: usize, offset: f64) -> EventSequence {
        let ev: Vec<Event> = (0..n)
            .map(|i| Event::new(offset + 0.7 * i as f64 + 0.13 * (i * i) as f64, (i * 7 + 1) % k))
            .collect();
        let t = ev.last().map_or(1.0, |e| e.time + 1.0);
        EventSequence::new(ev, t).unwrap()
    }

    #[test]
    fn single_mark_has_zero_loss_and_classifier_grad() {
        let m = MarkModel::init(EncoderConfig::new(1, 2, 3)).unwrap();
        let (v, g) = mark_loglik_and_grad(&m, &[seq(6, 1, 0.2)]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.classifier.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn zero_params_single_event_is_uniform() {
        let cfg = EncoderConfig::new(4, 1, 2);
        let mut m = MarkModel::init(cfg).unwrap();
        for t in m.params.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        let (v, _) = mark_loglik_and_grad(&m, &[seq(1, 4, 0.5)]).unwrap();
        assert!((v - 0.25f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn tape_value_matches_incremental_encoder() {
        let mut cfg = EncoderConfig::new(3, 2, 4);
        cfg.n_heads = 2;
        cfg.seed = 5;
        let m = MarkModel::init(cfg).unwrap();
        let s = seq(9, 3, 0.1);
        let (v, _) = mark_loglik_and_grad(&m, std::slice::from_ref(&s)).unwrap();
        let w = sequence_mark_loglik(&m, &s).unwrap();
        assert!((v - w).abs() < 1e-12, "{v} vs {w}");
    }

    #[test]
    fn empty_sequence_contributes_nothing() {
        let m = MarkModel::init(EncoderConfig::new(3, 1, 2)).unwrap();
        let empty = EventSequence::new(vec![], 1.0).unwrap();
        let (v, g) = mark_loglik_and_grad(&m, &[empty]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.tensors().iter().all(|(_, t)| t.iter().all(|x| *x == 0.0)));
    }
}
