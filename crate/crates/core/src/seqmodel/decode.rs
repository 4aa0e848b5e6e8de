//! Incremental decoding with a key/value cache, plus the sampling and greedy drivers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{gelu, layer_norm, linear, softmax_in_place};
use super::{ModelParams, Slots};
use crate::data::{TokenId, Vocabulary};
use crate::error::{Error, Result};

/// Per-layer keys and values for every position pushed so far, and the logits
/// predicting the next position.
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    logits: Vec<f64>,
    forward_passes: usize,
}

impl DecodeState {
    pub fn new(params: &ModelParams) -> Self {
        let n = params.config.n_layers;
        Self {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
            logits: vec![0.0; params.config.vocab_size],
            forward_passes: 0,
        }
    }

    /// Feeds every prompt token. Counts as a single forward pass.
    pub fn prefill(params: &ModelParams, prompt: &[TokenId]) -> Result<Self> {
        if prompt.is_empty() {
            return Err(Error::invalid("prompt must contain at least one token (e.g. BOS)"));
        }
        let mut st = Self::new(params);
        for &t in prompt {
            st.push(params, t)?;
        }
        st.forward_passes = 1;
        Ok(st)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Logits for the token following the last pushed one.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }

    /// Appends one token and recomputes the next-token logits.
    pub fn push(&mut self, params: &ModelParams, token: TokenId) -> Result<()> {
        let cfg = &params.config;
        if self.len >= cfg.max_len {
            return Err(Error::LengthOverflow {
                len: self.len + 1,
                max: cfg.max_len,
            });
        }
        params.check_tokens(&[token])?;
        let (d, hid, nh, dh) = (cfg.dim, cfg.hidden(), cfg.n_heads, cfg.head_dim());
        let s = params.slots();
        let p = self.len;
        let scale = 1.0 / (dh as f64).sqrt();

        let tok = &params.t(Slots::TOK)[token as usize * d..(token as usize + 1) * d];
        let pos = &params.t(Slots::POS)[p * d..(p + 1) * d];
        let mut x: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();

        let mut a = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut rstd = [0.0];
        let mut q = vec![0.0; d];
        let mut kv = vec![0.0; d];
        let mut o = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut u = vec![0.0; hid];
        let mut scores = vec![0.0; p + 1];
        for l in 0..cfg.n_layers {
            let w = |slot| params.t(s.layer(l, slot));
            layer_norm(&x, w(Slots::LN1_G), w(Slots::LN1_B), d, &mut a, &mut xhat, &mut rstd);
            linear(&a, w(Slots::WQ), None, d, d, &mut q);
            linear(&a, w(Slots::WK), None, d, d, &mut kv);
            self.keys[l].extend_from_slice(&kv);
            linear(&a, w(Slots::WV), None, d, d, &mut kv);
            self.values[l].extend_from_slice(&kv);
            let keys = &self.keys[l];
            let values = &self.values[l];
            o.fill(0.0);
            for h in 0..nh {
                let off = h * dh;
                let qh = &q[off..off + dh];
                for (sp, sc) in scores.iter_mut().enumerate() {
                    let ks = &keys[sp * d + off..sp * d + off + dh];
                    *sc = qh.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores);
                for (sp, &wgt) in scores.iter().enumerate() {
                    let vs = &values[sp * d + off..sp * d + off + dh];
                    for j in 0..dh {
                        o[off + j] += wgt * vs[j];
                    }
                }
            }
            linear(&o, w(Slots::WO), None, d, d, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
            layer_norm(&x, w(Slots::LN2_G), w(Slots::LN2_B), d, &mut a, &mut xhat, &mut rstd);
            linear(&a, w(Slots::W1), Some(w(Slots::B1)), d, hid, &mut u);
            for v in &mut u {
                *v = gelu(*v);
            }
            linear(&u, w(Slots::W2), Some(w(Slots::B2)), hid, d, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
        }
        layer_norm(&x, params.t(s.lnf_g()), params.t(s.lnf_b()), d, &mut a, &mut xhat, &mut rstd);
        linear(
            &a,
            params.t(s.out_w()),
            Some(params.t(s.out_b())),
            d,
            cfg.vocab_size,
            &mut self.logits,
        );
        self.len += 1;
        self.forward_passes += 1;
        Ok(())
    }
}

/// Token ids of the `k` largest logits; ties go to the lower id.
fn top_k_ids(logits: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids.truncate(k.max(1));
    ids
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

/// Draws one token from the top-`k` logits at `temperature`.
pub(crate) fn draw(logits: &[f64], temperature: f64, top_k: usize, rng: &mut ChaCha8Rng) -> TokenId {
    let ids = top_k_ids(logits, top_k);
    if ids.len() == 1 {
        return ids[0] as TokenId;
    }
    let mut probs: Vec<f64> = ids.iter().map(|&i| logits[i] / temperature).collect();
    softmax_in_place(&mut probs);
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (&i, &p) in ids.iter().zip(&probs) {
        acc += p;
        if r < acc {
            return i as TokenId;
        }
    }
    *ids.last().expect("non-empty") as TokenId
}

fn check_sampling(temperature: f64, top_k: usize) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if top_k == 0 {
        return Err(Error::invalid("top_k must be at least 1"));
    }
    Ok(())
}

/// Continues from a prefilled state. Returns the emitted tokens (EOS included when drawn)
/// and the number of forward passes spent, counting the prefill.
pub fn sample_from(
    params: &ModelParams,
    mut state: DecodeState,
    temperature: f64,
    top_k: usize,
    max_new: usize,
    seed: u64,
) -> Result<(Vec<TokenId>, usize)> {
    check_sampling(temperature, top_k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let passes_before = state.forward_passes.saturating_sub(1);
    while out.len() < max_new {
        let t = draw(state.logits(), temperature, top_k, &mut rng);
        out.push(t);
        if t == Vocabulary::EOS || state.len() >= params.config.max_len || out.len() == max_new {
            break;
        }
        state.push(params, t)?;
    }
    Ok((out, state.forward_passes - passes_before))
}

/// Top-k temperature sampling; stops after EOS, after `max_new` tokens, or at the
/// position limit. Deterministic in `seed`.
pub fn sample(
    params: &ModelParams,
    prompt: &[TokenId],
    temperature: f64,
    top_k: usize,
    max_new: usize,
    seed: u64,
) -> Result<Vec<TokenId>> {
    check_sampling(temperature, top_k)?;
    let state = DecodeState::prefill(params, prompt)?;
    Ok(sample_from(params, state, temperature, top_k, max_new, seed)?.0)
}

/// Greedy decoding with its forward-pass count.
pub fn greedy_decode_counted(params: &ModelParams, prompt: &[TokenId], max_new: usize) -> Result<(Vec<TokenId>, usize)> {
    if max_new == 0 {
        return Err(Error::invalid("max_new must be at least 1"));
    }
    let mut state = DecodeState::prefill(params, prompt)?;
    let mut out = Vec::new();
    loop {
        let t = argmax(state.logits()) as TokenId;
        out.push(t);
        if t == Vocabulary::EOS || out.len() == max_new || state.len() >= params.config.max_len {
            break;
        }
        state.push(params, t)?;
    }
    Ok((out, state.forward_passes()))
}

/// Argmax decoding, ties to the lowest token id.
pub fn greedy_decode(params: &ModelParams, prompt: &[TokenId], max_new: usize) -> Result<Vec<TokenId>> {
    Ok(greedy_decode_counted(params, prompt, max_new)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{init_model, log_prob, ModelConfig};

    fn tiny(vocab: usize, seed: u64, std: f64) -> ModelParams {
        init_model(&ModelConfig {
            vocab_size: vocab,
            n_layers: 2,
            dim: 8,
            n_heads: 2,
            max_len: 24,
            seed,
            init_std: std,
        })
        .unwrap()
    }

    #[test]
    fn top_k_one_is_greedy() {
        let p = tiny(12, 1, 0.8);
        let g = greedy_decode(&p, &[1, 5, 6], 10).unwrap();
        for seed in 0..5 {
            assert_eq!(sample(&p, &[1, 5, 6], 1.0, 1, 10, seed).unwrap(), g);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p = tiny(12, 2, 0.8);
        let a = sample(&p, &[1, 4], 1.0, 50, 16, 99).unwrap();
        let b = sample(&p, &[1, 4], 1.0, 50, 16, 99).unwrap();
        assert_eq!(a, b);
        let others: Vec<_> = (0..10).map(|s| sample(&p, &[1, 4], 1.0, 50, 16, s).unwrap()).collect();
        assert!(others.iter().any(|o| *o != a));
    }

    #[test]
    fn outputs_are_in_range_and_bounded() {
        let p = tiny(12, 3, 1.0);
        for seed in 0..30 {
            let out = sample(&p, &[1], 1.5, 12, 7, seed).unwrap();
            assert!(!out.is_empty() && out.len() <= 7);
            assert!(out.iter().all(|&t| (t as usize) < 12));
            if out.len() < 7 {
                assert_eq!(*out.last().unwrap(), Vocabulary::EOS);
            }
        }
        // position limit stops generation even with a generous budget
        let out = greedy_decode(&p, &[1; 20], 50).unwrap();
        assert!(out.len() <= 5);
    }

    #[test]
    fn invalid_sampling_arguments() {
        let p = tiny(8, 0, 0.1);
        assert!(sample(&p, &[1], 0.0, 5, 3, 0).is_err());
        assert!(sample(&p, &[1], 1.0, 0, 3, 0).is_err());
        assert!(sample(&p, &[], 1.0, 5, 3, 0).is_err());
        assert!(greedy_decode(&p, &[1], 0).is_err());
    }

    /// 100k draws at one fixed state against the exact softmax.
    #[test]
    fn empirical_frequencies_match_softmax() {
        let p = tiny(8, 4, 0.6);
        let st = DecodeState::prefill(&p, &[1, 5]).unwrap();
        let z = st.logits().to_vec();
        let exact: Vec<f64> = (0..8).map(|t| log_prob(&p, &[1, 5], &[t]).unwrap().exp()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            counts[draw(&z, 1.0, 8, &mut rng) as usize] += 1;
        }
        for t in 0..8 {
            let phat = counts[t] as f64 / n as f64;
            let se = (exact[t] * (1.0 - exact[t]) / n as f64).sqrt();
            assert!((phat - exact[t]).abs() <= 3.0 * se, "token {t}: {phat} vs {}", exact[t]);
        }
    }

    /// Output bias alone decides each step: a, then b, then EOS.
    #[test]
    fn forced_logits_give_forced_sequence() {
        let mut p = tiny(6, 5, 0.0);
        let d = p.config.dim;
        let s = p.slots();
        let (a, b) = (4usize, 5usize);
        // position embedding routes position 1 -> a, 2 -> b, 3 -> EOS through out.w
        for (pos, tok) in [(0usize, a), (1, b), (2, Vocabulary::EOS as usize)] {
            p.tensors[Slots::POS].data[pos * d + pos] = 1.0;
            p.tensors[Slots::POS].data[pos * d + d - 1] = -1.0;
            p.tensors[s.out_w()].data[tok * d + pos] = 20.0;
        }
        let out = greedy_decode(&p, &[1], 10).unwrap();
        assert_eq!(out, vec![a as TokenId, b as TokenId, Vocabulary::EOS]);
        assert_eq!(sample(&p, &[1], 1.0, 1, 10, 7).unwrap(), out);
    }

    #[test]
    fn greedy_tie_goes_to_lowest_id() {
        let p = tiny(7, 6, 0.0);
        // every logit is zero, so token 0 wins
        assert_eq!(greedy_decode(&p, &[1], 3).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn forward_pass_count_equals_tokens_emitted() {
        let p = tiny(12, 7, 0.8);
        let (out, passes) = greedy_decode_counted(&p, &[1, 2, 3], 9).unwrap();
        assert_eq!(passes, out.len());
        let st = DecodeState::prefill(&p, &[1, 3]).unwrap();
        let (out, passes) = sample_from(&p, st, 1.0, 12, 9, 3).unwrap();
        assert_eq!(passes, out.len());
    }
}
