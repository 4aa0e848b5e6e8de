//! Full-sequence forward pass with activation cache, and its analytic backward pass.

use super::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, log_sum_exp};
use super::{ModelParams, Slots};
use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::tensor::{check_same_layout, Tensor};

struct LayerCache {
    x_in: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[head, query position, key position]`, zero above the diagonal.
    att: Vec<f64>,
    o: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    c: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

struct Forward {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    f: Vec<f64>,
}

fn validate(params: &ModelParams, prompt: &[TokenId], continuation: &[TokenId]) -> Result<()> {
    let len = prompt.len() + continuation.len();
    if len > params.config.max_len {
        return Err(Error::LengthOverflow {
            len,
            max: params.config.max_len,
        });
    }
    if prompt.is_empty() && !continuation.is_empty() {
        return Err(Error::invalid("prompt must contain at least one token (e.g. BOS)"));
    }
    params.check_tokens(prompt)?;
    params.check_tokens(continuation)
}

fn forward(params: &ModelParams, tokens: &[TokenId]) -> Forward {
    let cfg = &params.config;
    let (t_len, d, hid, nh, dh) = (tokens.len(), cfg.dim, cfg.hidden(), cfg.n_heads, cfg.head_dim());
    let s = params.slots();
    let scale = 1.0 / (dh as f64).sqrt();

    let tok = params.t(Slots::TOK);
    let pos = params.t(Slots::POS);
    let mut x = vec![0.0; t_len * d];
    for (p, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        for i in 0..d {
            x[p * d + i] = tok[t * d + i] + pos[p * d + i];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let w = |slot| params.t(s.layer(l, slot));
        let x_in = x.clone();
        let mut a = vec![0.0; t_len * d];
        let mut xhat1 = vec![0.0; t_len * d];
        let mut rstd1 = vec![0.0; t_len];
        layer_norm(&x, w(Slots::LN1_G), w(Slots::LN1_B), d, &mut a, &mut xhat1, &mut rstd1);

        let mut q = vec![0.0; t_len * d];
        let mut k = vec![0.0; t_len * d];
        let mut v = vec![0.0; t_len * d];
        linear(&a, w(Slots::WQ), None, d, d, &mut q);
        linear(&a, w(Slots::WK), None, d, d, &mut k);
        linear(&a, w(Slots::WV), None, d, d, &mut v);

        let mut att = vec![0.0; nh * t_len * t_len];
        let mut o = vec![0.0; t_len * d];
        for h in 0..nh {
            let off = h * dh;
            for p in 0..t_len {
                let row = &mut att[(h * t_len + p) * t_len..(h * t_len + p + 1) * t_len];
                let qp = &q[p * d + off..p * d + off + dh];
                for (sp, r) in row.iter_mut().enumerate().take(p + 1) {
                    let ks = &k[sp * d + off..sp * d + off + dh];
                    *r = qp.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                super::ops::softmax_in_place(&mut row[..=p]);
                let op = &mut o[p * d + off..p * d + off + dh];
                for sp in 0..=p {
                    let wgt = row[sp];
                    let vs = &v[sp * d + off..sp * d + off + dh];
                    for j in 0..dh {
                        op[j] += wgt * vs[j];
                    }
                }
            }
        }

        let mut proj = vec![0.0; t_len * d];
        linear(&o, w(Slots::WO), None, d, d, &mut proj);
        for (xi, pi) in x.iter_mut().zip(&proj) {
            *xi += pi;
        }

        let mut c = vec![0.0; t_len * d];
        let mut xhat2 = vec![0.0; t_len * d];
        let mut rstd2 = vec![0.0; t_len];
        layer_norm(&x, w(Slots::LN2_G), w(Slots::LN2_B), d, &mut c, &mut xhat2, &mut rstd2);
        let mut u = vec![0.0; t_len * hid];
        linear(&c, w(Slots::W1), Some(w(Slots::B1)), d, hid, &mut u);
        let g: Vec<f64> = u.iter().map(|&z| gelu(z)).collect();
        let mut m = vec![0.0; t_len * d];
        linear(&g, w(Slots::W2), Some(w(Slots::B2)), hid, d, &mut m);
        for (xi, mi) in x.iter_mut().zip(&m) {
            *xi += mi;
        }

        layers.push(LayerCache {
            x_in,
            xhat1,
            rstd1,
            a,
            q,
            k,
            v,
            att,
            o,
            xhat2,
            rstd2,
            c,
            u,
            g,
        });
    }

    let mut f = vec![0.0; t_len * d];
    let mut xhatf = vec![0.0; t_len * d];
    let mut rstdf = vec![0.0; t_len];
    layer_norm(&x, params.t(s.lnf_g()), params.t(s.lnf_b()), d, &mut f, &mut xhatf, &mut rstdf);
    Forward {
        tokens: tokens.to_vec(),
        layers,
        xhatf,
        rstdf,
        f,
    }
}

/// Logits at position `p` (predicting token `p + 1`).
fn logits_at(params: &ModelParams, fw: &Forward, p: usize, out: &mut [f64]) {
    let d = params.config.dim;
    let s = params.slots();
    linear(
        &fw.f[p * d..(p + 1) * d],
        params.t(s.out_w()),
        Some(params.t(s.out_b())),
        d,
        params.config.vocab_size,
        out,
    );
}

/// `log P(continuation | prompt)`: the sum of next-token log-probabilities over the continuation.
pub fn log_prob(params: &ModelParams, prompt: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
    validate(params, prompt, continuation)?;
    if continuation.is_empty() {
        return Ok(0.0);
    }
    let tokens: Vec<TokenId> = prompt.iter().chain(continuation).copied().collect();
    let fw = forward(params, &tokens);
    let mut z = vec![0.0; params.config.vocab_size];
    let mut total = 0.0;
    for p in prompt.len() - 1..tokens.len() - 1 {
        logits_at(params, &fw, p, &mut z);
        total += z[tokens[p + 1] as usize] - log_sum_exp(&z);
    }
    Ok(total)
}

/// Log-probability and its gradient with respect to every parameter tensor.
pub fn grad_log_prob(params: &ModelParams, prompt: &[TokenId], continuation: &[TokenId]) -> Result<(f64, Vec<Tensor>)> {
    let mut grads = params.zero_grads();
    let lp = accumulate_grad_log_prob(params, prompt, continuation, 1.0, &mut grads)?;
    Ok((lp, grads))
}

/// Adds `weight * d log P(continuation | prompt) / d params` into `grads` and returns the log-probability.
pub fn accumulate_grad_log_prob(
    params: &ModelParams,
    prompt: &[TokenId],
    continuation: &[TokenId],
    weight: f64,
    grads: &mut [Tensor],
) -> Result<f64> {
    validate(params, prompt, continuation)?;
    check_same_layout(&params.tensors, grads)?;
    if continuation.is_empty() {
        return Ok(0.0);
    }
    let cfg = &params.config;
    let (d, hid, nh, dh, vsz) = (cfg.dim, cfg.hidden(), cfg.n_heads, cfg.head_dim(), cfg.vocab_size);
    let s = params.slots();
    let scale = 1.0 / (dh as f64).sqrt();

    let tokens: Vec<TokenId> = prompt.iter().chain(continuation).copied().collect();
    let t_len = tokens.len();
    let fw = forward(params, &tokens);

    // output layer
    let mut df = vec![0.0; t_len * d];
    let mut z = vec![0.0; vsz];
    let mut total = 0.0;
    {
        let (lo, hi) = grads.split_at_mut(s.out_b());
        let d_out_w = &mut lo[s.out_w()].data;
        let d_out_b = &mut hi[0].data;
        for p in prompt.len() - 1..t_len - 1 {
            logits_at(params, &fw, p, &mut z);
            let lse = log_sum_exp(&z);
            let target = tokens[p + 1] as usize;
            total += z[target] - lse;
            // d logp / dz = onehot - softmax
            let mut dz: Vec<f64> = z.iter().map(|&v| -weight * (v - lse).exp()).collect();
            dz[target] += weight;
            linear_backward(
                &dz,
                &fw.f[p * d..(p + 1) * d],
                params.t(s.out_w()),
                d,
                vsz,
                Some(&mut df[p * d..(p + 1) * d]),
                d_out_w,
                Some(d_out_b),
            );
        }
    }

    let mut dx = vec![0.0; t_len * d];
    {
        let (lo, hi) = grads.split_at_mut(s.lnf_b());
        layer_norm_backward(
            &df,
            &fw.xhatf,
            &fw.rstdf,
            params.t(s.lnf_g()),
            d,
            &mut dx,
            &mut lo[s.lnf_g()].data,
            &mut hi[0].data,
        );
    }

    for l in (0..cfg.n_layers).rev() {
        let lc = &fw.layers[l];
        let w = |slot| params.t(s.layer(l, slot));
        let gi = |slot| s.layer(l, slot);

        // MLP: x_out = x_mid + W2 gelu(W1 LN2(x_mid) + b1) + b2
        let mut dg = vec![0.0; t_len * hid];
        {
            let (lo, hi) = grads.split_at_mut(gi(Slots::B2));
            linear_backward(
                &dx,
                &lc.g,
                w(Slots::W2),
                hid,
                d,
                Some(&mut dg),
                &mut lo[gi(Slots::W2)].data,
                Some(&mut hi[0].data),
            );
        }
        let du: Vec<f64> = dg.iter().zip(&lc.u).map(|(g, &u)| g * gelu_grad(u)).collect();
        let mut dc = vec![0.0; t_len * d];
        {
            let (lo, hi) = grads.split_at_mut(gi(Slots::B1));
            linear_backward(
                &du,
                &lc.c,
                w(Slots::W1),
                d,
                hid,
                Some(&mut dc),
                &mut lo[gi(Slots::W1)].data,
                Some(&mut hi[0].data),
            );
        }
        {
            let (lo, hi) = grads.split_at_mut(gi(Slots::LN2_B));
            layer_norm_backward(
                &dc,
                &lc.xhat2,
                &lc.rstd2,
                w(Slots::LN2_G),
                d,
                &mut dx,
                &mut lo[gi(Slots::LN2_G)].data,
                &mut hi[0].data,
            );
        }

        // attention: x_mid = x_in + Wo attn(LN1(x_in))
        let mut d_o = vec![0.0; t_len * d];
        linear_backward(
            &dx,
            &lc.o,
            w(Slots::WO),
            d,
            d,
            Some(&mut d_o),
            &mut grads[gi(Slots::WO)].data,
            None,
        );
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut datt = vec![0.0; t_len];
        for h in 0..nh {
            let off = h * dh;
            for p in 0..t_len {
                let row = &lc.att[(h * t_len + p) * t_len..(h * t_len + p + 1) * t_len];
                let dop = &d_o[p * d + off..p * d + off + dh];
                let mut dot = 0.0;
                for sp in 0..=p {
                    let vs = &lc.v[sp * d + off..sp * d + off + dh];
                    datt[sp] = dop.iter().zip(vs).map(|(a, b)| a * b).sum();
                    dot += row[sp] * datt[sp];
                    let dvs = &mut dv[sp * d + off..sp * d + off + dh];
                    for j in 0..dh {
                        dvs[j] += row[sp] * dop[j];
                    }
                }
                for sp in 0..=p {
                    let ds = row[sp] * (datt[sp] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..dh {
                        dq[p * d + off + j] += ds * lc.k[sp * d + off + j];
                        dk[sp * d + off + j] += ds * lc.q[p * d + off + j];
                    }
                }
            }
        }
        let mut da = vec![0.0; t_len * d];
        linear_backward(&dq, &lc.a, w(Slots::WQ), d, d, Some(&mut da), &mut grads[gi(Slots::WQ)].data, None);
        linear_backward(&dk, &lc.a, w(Slots::WK), d, d, Some(&mut da), &mut grads[gi(Slots::WK)].data, None);
        linear_backward(&dv, &lc.a, w(Slots::WV), d, d, Some(&mut da), &mut grads[gi(Slots::WV)].data, None);
        {
            let (lo, hi) = grads.split_at_mut(gi(Slots::LN1_B));
            layer_norm_backward(
                &da,
                &lc.xhat1,
                &lc.rstd1,
                w(Slots::LN1_G),
                d,
                &mut dx,
                &mut lo[gi(Slots::LN1_G)].data,
                &mut hi[0].data,
            );
        }
        debug_assert_eq!(lc.x_in.len(), dx.len());
    }

    let (tok, rest) = grads.split_at_mut(Slots::POS);
    let dtok = &mut tok[Slots::TOK].data;
    let dpos = &mut rest[0].data;
    for (p, &t) in fw.tokens.iter().enumerate() {
        let t = t as usize;
        for i in 0..d {
            dtok[t * d + i] += dx[p * d + i];
            dpos[p * d + i] += dx[p * d + i];
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{init_model, DecodeState, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64, init_std: f64) -> ModelParams {
        init_model(&ModelConfig {
            vocab_size: 9,
            n_layers: 2,
            dim: 8,
            n_heads: 2,
            max_len: 12,
            seed,
            init_std,
        })
        .unwrap()
    }

    #[test]
    fn uniform_logits_give_exact_length_times_log_v() {
        let mut p = tiny(1, 0.5);
        let s = p.slots();
        p.tensors[s.out_w()].data.fill(0.0);
        let cont = [4, 5, 6, 2];
        let lp = log_prob(&p, &[1, 7], &cont).unwrap();
        assert!((lp + 4.0 * 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn eos_only_continuation_is_single_term() {
        let p = tiny(2, 0.3);
        let lp = log_prob(&p, &[1, 4, 5], &[2]).unwrap();
        let mut st = DecodeState::new(&p);
        for &t in &[1, 4, 5] {
            st.push(&p, t).unwrap();
        }
        let z = st.logits();
        assert!((lp - (z[2] - log_sum_exp(z))).abs() < 1e-12);
    }

    #[test]
    fn matches_stepwise_decoder() {
        let p = tiny(3, 0.4);
        let prompt = [1, 3, 8, 4];
        let cont = [5, 5, 7, 2];
        let full = log_prob(&p, &prompt, &cont).unwrap();
        let mut st = DecodeState::new(&p);
        for &t in &prompt {
            st.push(&p, t).unwrap();
        }
        let mut step = 0.0;
        for &t in &cont {
            let z = st.logits();
            step += z[t as usize] - log_sum_exp(z);
            st.push(&p, t).unwrap();
        }
        assert!((full - step).abs() < 1e-10, "{full} vs {step}");
        assert!(full <= 0.0);
    }

    #[test]
    fn length_one_continuations_normalize() {
        let p = tiny(4, 0.5);
        let total: f64 = (0..9).map(|t| log_prob(&p, &[1, 6], &[t]).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fresh_model_is_near_uniform() {
        let p = tiny(5, 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cont: Vec<TokenId> = (0..8).map(|_| rng.gen_range(0..9)).collect();
        let per_tok = log_prob(&p, &[1], &cont).unwrap() / cont.len() as f64;
        let uniform = -(9f64.ln());
        assert!((per_tok - uniform).abs() < 0.1 * uniform.abs());
    }

    #[test]
    fn overflow_and_bad_tokens_rejected() {
        let p = tiny(6, 0.1);
        assert!(matches!(
            log_prob(&p, &[1; 8], &[2; 5]),
            Err(Error::LengthOverflow { len: 13, max: 12 })
        ));
        assert!(log_prob(&p, &[1], &[99]).is_err());
        assert!(log_prob(&p, &[], &[2]).is_err());
    }

    /// Central differences on random coordinates of every tensor group.
    #[test]
    fn gradient_matches_finite_differences() {
        let p = tiny(7, 0.5);
        let prompt = [1, 4, 6];
        let cont = [7, 3, 5, 2];
        let (lp, g) = grad_log_prob(&p, &prompt, &cont).unwrap();
        assert!((lp - log_prob(&p, &prompt, &cont).unwrap()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-4;
        let mut checked = 0;
        while checked < 40 {
            let ti = rng.gen_range(0..p.tensors.len());
            let ei = rng.gen_range(0..p.tensors[ti].len());
            let mut plus = p.clone();
            plus.tensors[ti].data[ei] += h;
            let mut minus = p.clone();
            minus.tensors[ti].data[ei] -= h;
            let fd = (log_prob(&plus, &prompt, &cont).unwrap() - log_prob(&minus, &prompt, &cont).unwrap()) / (2.0 * h);
            let an = g[ti].data[ei];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-5, "{}[{ei}]: fd={fd} analytic={an}", p.tensors[ti].name);
            checked += 1;
        }
    }

    #[test]
    fn unreachable_embedding_row_has_zero_gradient() {
        let p = tiny(8, 0.3);
        let (_, g) = grad_log_prob(&p, &[1, 4], &[5, 2]).unwrap();
        let d = p.config.dim;
        // token 8 never appears in the sequence
        assert!(g[Slots::TOK].data[8 * d..9 * d].iter().all(|&v| v == 0.0));
        // positions beyond the sequence never receive gradient
        assert!(g[Slots::POS].data[4 * d..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_example_doubles_gradient() {
        let p = tiny(9, 0.3);
        let mut once = p.zero_grads();
        let lp1 = accumulate_grad_log_prob(&p, &[1, 4], &[5, 2], 1.0, &mut once).unwrap();
        let mut twice = p.zero_grads();
        let a = accumulate_grad_log_prob(&p, &[1, 4], &[5, 2], 1.0, &mut twice).unwrap();
        let b = accumulate_grad_log_prob(&p, &[1, 4], &[5, 2], 1.0, &mut twice).unwrap();
        assert_eq!(lp1, a);
        assert_eq!(a + b, 2.0 * lp1);
        for (x, y) in once.iter().zip(&twice) {
            for (u, v) in x.data.iter().zip(&y.data) {
                assert!((2.0 * u - v).abs() <= 1e-15 * u.abs().max(1.0));
            }
        }
    }
}
