//! Learnable-query fusion adapter: cross-attention onto business-modality
//! keys, shared self-attention with semantic tokens, feed-forward output.
//! Produces fused behavior embeddings and implements the six alignment
//! losses (behavior- and sequence-level contrastive, matching, generation)
//! against a small trainable text tower.

use std::cell::Cell;
use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{broadcast_rows, linear, AttnBlock, Ffn, LN_EPS};
use crate::error::{LumError, Result};
use crate::params::ParamSet;
use crate::tensor::{
    concat_cols, concat_rows, cosine, cross_entropy_rows, gather_rows, layer_norm, log_sum_exp,
    mean_rows, reshape, scale, sigmoid_f, silu, slice_rows, softplus, stack_scalars, sub,
    AttnMask, Tensor,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QFormerConfig {
    pub num_queries: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub tau_align: f64,
    pub window_k: usize,
    pub window_stride: usize,
}

impl Default for QFormerConfig {
    fn default() -> QFormerConfig {
        QFormerConfig {
            num_queries: 8,
            dim: 64,
            layers: 2,
            heads: 4,
            text_dim: 32,
            tau_align: 0.07,
            window_k: 8,
            window_stride: 4,
        }
    }
}

struct QfLayer {
    self_attn: AttnBlock,
    cross_attn: AttnBlock,
    ffn: Ffn,
}

pub struct QFormer {
    pub cfg: QFormerConfig,
    pub queries: Tensor, // [Q, d]
    /// Projection from business-modality space into the adapter space.
    pub biz_proj_w: Tensor,
    pub biz_proj_b: Tensor,
    /// One learned codebook per semantic-id level; level vectors are summed
    /// into a single semantic token per behavior.
    pub codebooks: Vec<Tensor>,
    layers: Vec<QfLayer>,
    final_ln_gain: Tensor,
    final_ln_bias: Tensor,
    fallback_count: Cell<u64>,
}

impl QFormer {
    pub fn init(
        ps: &mut ParamSet,
        cfg: &QFormerConfig,
        level_sizes: &[usize],
        biz_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> QFormer {
        assert!(cfg.num_queries >= 1, "num_queries must be >= 1");
        assert_eq!(cfg.dim % cfg.heads, 0, "dim must be divisible by heads");
        let d = cfg.dim;
        // Queries start small so the residual stream of each query row is
        // dominated by attended content (semantic token, business keys)
        // rather than the query vector itself; otherwise every behavior
        // fuses to nearly the same embedding and ranking cannot bootstrap.
        let queries = ps.init("qformer.queries", &[cfg.num_queries, d], d * 100, rng);
        let biz_proj_w = ps.init("qformer.biz_proj.w", &[biz_dim, d], biz_dim, rng);
        let biz_proj_b = ps.init_zeros("qformer.biz_proj.b", &[d]);
        let codebooks = level_sizes
            .iter()
            .enumerate()
            .map(|(l, &k)| ps.init(&format!("qformer.codebook{l}"), &[k, d], d / 4, rng))
            .collect();
        let layers = (0..cfg.layers)
            .map(|l| QfLayer {
                self_attn: AttnBlock::init(ps, &format!("qformer.layer{l}.self"), d, d, cfg.heads, rng),
                cross_attn: AttnBlock::init(ps, &format!("qformer.layer{l}.cross"), d, d, cfg.heads, rng),
                ffn: Ffn::init(ps, &format!("qformer.layer{l}.ffn"), d, 4 * d, rng),
            })
            .collect();
        QFormer {
            cfg: cfg.clone(),
            queries,
            biz_proj_w,
            biz_proj_b,
            codebooks,
            layers,
            final_ln_gain: ps.init_ones("qformer.final_ln_gain", &[d]),
            final_ln_bias: ps.init_zeros("qformer.final_ln_bias", &[d]),
            fallback_count: Cell::new(0),
        }
    }

    /// Times the cross-attention fallback (no business keys) was taken.
    pub fn fallback_count(&self) -> u64 {
        self.fallback_count.get()
    }

    /// Semantic token for one behavior: per-level codebook rows, summed.
    pub fn semantic_token(&self, path: &[usize]) -> Tensor {
        assert_eq!(path.len(), self.codebooks.len(), "semantic path depth");
        let rows: Vec<Tensor> = path
            .iter()
            .zip(&self.codebooks)
            .map(|(&c, book)| gather_rows(book, &[c]))
            .collect();
        let mut acc = rows[0].clone();
        for r in rows.iter().skip(1) {
            acc = crate::tensor::add(&acc, r);
        }
        reshape(&acc, &[1, self.cfg.dim])
    }

    /// Project raw business-modality vectors [m, biz_dim] into key space.
    pub fn project_keys(&self, raw: &[Vec<f64>]) -> Result<Tensor> {
        let m = raw.len();
        let biz_dim = self.biz_proj_w.shape()[0];
        let mut data = Vec::with_capacity(m * biz_dim);
        for v in raw {
            assert_eq!(v.len(), biz_dim, "business vector width");
            data.extend_from_slice(v);
        }
        let keys = Tensor::new(data, &[m, biz_dim], false);
        linear(&keys, &self.biz_proj_w, &self.biz_proj_b)
    }

    /// Core forward: learnable queries and semantic tokens mix in shared
    /// self-attention; queries cross-attend to business keys; feed-forward
    /// closes each layer. Returns the Q query output rows.
    pub fn forward(&self, semantic_tokens: &Tensor, business_keys: Option<&Tensor>) -> Result<Tensor> {
        let q = self.cfg.num_queries;
        let s = semantic_tokens.shape()[0];
        if business_keys.is_none() {
            self.fallback_count.set(self.fallback_count.get() + 1);
        }
        let mut x = concat_rows(&[self.queries.clone(), semantic_tokens.clone()]);
        for layer in &self.layers {
            x = layer.self_attn.self_forward(&x, None, None)?;
            if let Some(keys) = business_keys {
                let xq = slice_rows(&x, 0, q);
                let xq = layer.cross_attn.cross_forward(&xq, keys)?;
                let rest = slice_rows(&x, q, q + s);
                x = concat_rows(&[xq, rest]);
            }
            x = layer.ffn.forward(&x)?;
        }
        let x = layer_norm(&x, &self.final_ln_gain, &self.final_ln_bias, LN_EPS)?;
        Ok(slice_rows(&x, 0, q))
    }

    /// All Q query outputs for one behavior, e.g. as generation condition.
    pub fn fuse_queries(&self, path: &[usize], business: &[Vec<f64>]) -> Result<Tensor> {
        let sem = self.semantic_token(path);
        let keys = if business.is_empty() {
            None
        } else {
            Some(self.project_keys(business)?)
        };
        self.forward(&sem, keys.as_ref())
    }

    /// Fused behavior embedding: mean over the query outputs.
    pub fn fuse_behavior(&self, path: &[usize], business: &[Vec<f64>]) -> Result<Tensor> {
        Ok(mean_rows(&self.fuse_queries(path, business)?))
    }

    /// Query tower over a window of K behaviors: every behavior's business
    /// vectors become cross-attention keys and its semantic token joins the
    /// shared self-attention. Output arity is always Q.
    pub fn query_tower(&self, window: &[(&[usize], &[Vec<f64>])]) -> Result<Tensor> {
        if window.is_empty() {
            return Err(LumError::Contract("query_tower requires K >= 1 behaviors".into()));
        }
        let sems: Vec<Tensor> = window.iter().map(|(p, _)| self.semantic_token(p)).collect();
        let sem = concat_rows(&sems);
        let raw: Vec<Vec<f64>> = window
            .iter()
            .flat_map(|(_, biz)| biz.iter().cloned())
            .collect();
        let keys = if raw.is_empty() {
            None
        } else {
            Some(self.project_keys(&raw)?)
        };
        self.forward(&sem, keys.as_ref())
    }
}

// ---------------------------------------------------------------------------
// Text tower
// ---------------------------------------------------------------------------

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Small trainable word-level text encoder/decoder over a closed vocabulary.
pub struct TextTower {
    pub vocab: Vec<String>,
    index: BTreeMap<String, usize>,
    pub dim: usize,
    embed: Tensor, // [V, text_dim]
    enc_w: Tensor, // [text_dim, dim]
    enc_b: Tensor,
    dec_self: AttnBlock,
    dec_cross: AttnBlock,
    dec_ffn: Ffn,
    dec_ln_gain: Tensor,
    dec_ln_bias: Tensor,
    out_w: Tensor, // [text_dim, V]
}

pub fn tokenize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

/// Word vocabulary closed over the training corpus plus UNK/BOS/EOS.
pub fn build_vocab(corpus: &[&str]) -> Vec<String> {
    let mut words: Vec<String> = corpus
        .iter()
        .flat_map(|t| tokenize_words(t))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut vocab = vec!["<unk>".to_string(), "<bos>".to_string(), "<eos>".to_string()];
    vocab.append(&mut words);
    vocab
}

impl TextTower {
    pub fn init(
        ps: &mut ParamSet,
        vocab: Vec<String>,
        text_dim: usize,
        fused_dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> TextTower {
        let v = vocab.len();
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        TextTower {
            index,
            dim: fused_dim,
            embed: ps.init("text.embed", &[v, text_dim], text_dim, rng),
            enc_w: ps.init("text.enc.w", &[text_dim, fused_dim], text_dim, rng),
            enc_b: ps.init_zeros("text.enc.b", &[fused_dim]),
            dec_self: AttnBlock::init(ps, "text.dec.self", text_dim, text_dim, heads, rng),
            dec_cross: AttnBlock::init(ps, "text.dec.cross", text_dim, fused_dim, heads, rng),
            dec_ffn: Ffn::init(ps, "text.dec.ffn", text_dim, 4 * text_dim, rng),
            dec_ln_gain: ps.init_ones("text.dec.ln_gain", &[text_dim]),
            dec_ln_bias: ps.init_zeros("text.dec.ln_bias", &[text_dim]),
            out_w: ps.init("text.out.w", &[text_dim, v], text_dim, rng),
            vocab,
        }
    }

    pub fn encode_ids(&self, text: &str) -> Vec<usize> {
        tokenize_words(text)
            .iter()
            .map(|w| *self.index.get(w).unwrap_or(&UNK))
            .collect()
    }

    /// Mean-pooled word embeddings projected into the shared alignment space.
    pub fn text_embedding(&self, text: &str) -> Result<Tensor> {
        let mut ids = self.encode_ids(text);
        if ids.is_empty() {
            ids.push(UNK);
        }
        let rows = gather_rows(&self.embed, &ids);
        let pooled = mean_rows(&rows);
        let proj = linear(&reshape(&pooled, &[1, self.embed.shape()[1]]), &self.enc_w, &self.enc_b)?;
        Ok(reshape(&proj, &[self.dim]))
    }

    /// Teacher-forced token cross entropy of the decoder generating `text`
    /// conditioned (via cross-attention) on the query outputs.
    pub fn generation_loss(&self, condition: Option<&Tensor>, text: &str) -> Result<Tensor> {
        let ids = self.encode_ids(text);
        if ids.is_empty() {
            return Err(LumError::Contract("empty generation target".into()));
        }
        let mut input_ids = vec![BOS];
        input_ids.extend_from_slice(&ids);
        let mut target_ids = ids;
        target_ids.push(EOS);
        let l = input_ids.len();
        let mut x = gather_rows(&self.embed, &input_ids);
        let mask = AttnMask::causal(l);
        let positions: Vec<f64> = (0..l).map(|i| i as f64).collect();
        x = self.dec_self.self_forward(&x, Some(&mask), Some(&positions))?;
        if let Some(cond) = condition {
            x = self.dec_cross.cross_forward(&x, cond)?;
        }
        x = self.dec_ffn.forward(&x)?;
        x = layer_norm(&x, &self.dec_ln_gain, &self.dec_ln_bias, LN_EPS)?;
        let logits = crate::tensor::matmul(&x, &self.out_w)?;
        Ok(cross_entropy_rows(&logits, &target_ids))
    }
}

// ---------------------------------------------------------------------------
// Matching head
// ---------------------------------------------------------------------------

/// Two-layer binary head over concatenated pooled-query and text vectors.
pub struct MatchingHead {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl MatchingHead {
    pub fn init(ps: &mut ParamSet, dim: usize, rng: &mut ChaCha8Rng) -> MatchingHead {
        MatchingHead {
            w1: ps.init("match.w1", &[2 * dim, dim], 2 * dim, rng),
            b1: ps.init_zeros("match.b1", &[dim]),
            w2: ps.init("match.w2", &[dim, 1], dim, rng),
            b2: ps.init_zeros("match.b2", &[1]),
        }
    }

    pub fn logit(&self, pooled_query: &Tensor, text_embedding: &Tensor) -> Result<Tensor> {
        let d = pooled_query.len();
        let x = concat_cols(&[
            reshape(pooled_query, &[1, d]),
            reshape(text_embedding, &[1, d]),
        ]);
        let h = silu(&linear(&x, &self.w1, &self.b1)?);
        let z = crate::tensor::add(
            &crate::tensor::matmul(&h, &self.w2)?,
            &broadcast_rows(&self.b2, 1),
        );
        Ok(reshape(&z, &[1]))
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Symmetric InfoNCE over cosine similarities of matched (pooled, text)
/// pairs with in-batch negatives. Uniform similarities give ln(B).
pub fn loss_contrastive(pooled: &[Tensor], texts: &[Tensor], tau: f64) -> Result<Tensor> {
    let b = pooled.len();
    if b < 2 || texts.len() != b {
        return Err(LumError::Contract(format!(
            "contrastive loss needs a batch of >= 2 matched pairs, got {b}"
        )));
    }
    let mut sims = vec![Vec::with_capacity(b); b];
    for (i, p) in pooled.iter().enumerate() {
        for t in texts.iter() {
            sims[i].push(scale(&cosine(p, t), 1.0 / tau));
        }
    }
    let mut total = Tensor::scalar(0.0);
    for i in 0..b {
        // query -> text
        let row = stack_scalars(&sims[i]);
        let lr = sub(&log_sum_exp(&row), &sims[i][i]);
        // text -> query
        let col = stack_scalars(&(0..b).map(|j| sims[j][i].clone()).collect::<Vec<_>>());
        let lc = sub(&log_sum_exp(&col), &sims[i][i]);
        total = crate::tensor::add(&total, &crate::tensor::add(&lr, &lc));
    }
    Ok(scale(&total, 1.0 / (2.0 * b as f64)))
}

/// Binary cross entropy of the matching head; `matched` is the label.
pub fn loss_matching(
    head: &MatchingHead,
    pooled_query: &Tensor,
    text_embedding: &Tensor,
    matched: bool,
) -> Result<Tensor> {
    let z = head.logit(pooled_query, text_embedding)?;
    let y = if matched { 1.0 } else { 0.0 };
    // softplus(z) - y z, the stable BCE-with-logits form
    Ok(sub(&softplus(&z), &scale(&z, y)))
}

/// Probability the head assigns to "matched", for diagnostics.
pub fn matching_probability(head: &MatchingHead, pooled: &Tensor, text: &Tensor) -> Result<f64> {
    Ok(sigmoid_f(head.logit(pooled, text)?.item()))
}

/// InfoNCE over a positive score and M negative scores.
pub fn infonce(s_pos: &Tensor, s_negs: &[Tensor], tau: f64) -> Tensor {
    assert!(tau > 0.0, "temperature must be positive");
    let mut all = vec![scale(s_pos, 1.0 / tau)];
    all.extend(s_negs.iter().map(|s| scale(s, 1.0 / tau)));
    let scores = stack_scalars(&all);
    sub(&log_sum_exp(&scores), &scale(s_pos, 1.0 / tau))
}

/// Uniform-logit reference value ln(M+1), used in calibration checks.
pub fn infonce_uniform(m: usize) -> f64 {
    ((m + 1) as f64).ln()
}

pub fn sized_add(total: Option<Tensor>, term: Tensor) -> Option<Tensor> {
    Some(match total {
        Some(t) => crate::tensor::add(&t, &term),
        None => term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::Rng;
    use rand::SeedableRng;

    fn setup(rng: &mut ChaCha8Rng) -> (ParamSet, QFormer) {
        let mut ps = ParamSet::new();
        let cfg = QFormerConfig {
            num_queries: 2,
            dim: 8,
            layers: 1,
            heads: 2,
            text_dim: 8,
            ..QFormerConfig::default()
        };
        let qf = QFormer::init(&mut ps, &cfg, &[3, 2], 4, rng);
        (ps, qf)
    }

    #[test]
    fn fuse_behavior_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_ps, qf) = setup(&mut rng);
        let biz = vec![vec![0.1, 0.2, -0.3, 0.4]];
        let a = qf.fuse_behavior(&[1, 0], &biz).unwrap();
        let b = qf.fuse_behavior(&[1, 0], &biz).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn perturbing_business_key_changes_fused_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_ps, qf) = setup(&mut rng);
        let base = qf
            .fuse_behavior(&[1, 0], &[vec![0.1, 0.2, -0.3, 0.4]])
            .unwrap()
            .data();
        let pert = qf
            .fuse_behavior(&[1, 0], &[vec![0.6, 0.2, -0.3, 0.4]])
            .unwrap()
            .data();
        let delta: f64 = base
            .iter()
            .zip(&pert)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(delta > 0.0);
    }

    #[test]
    fn perturbing_semantic_level_changes_fused_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (_ps, qf) = setup(&mut rng);
        let biz = vec![vec![0.1, 0.2, -0.3, 0.4]];
        let a = qf.fuse_behavior(&[1, 0], &biz).unwrap().data();
        let b = qf.fuse_behavior(&[2, 0], &biz).unwrap().data();
        assert_ne!(a, b);
    }

    #[test]
    fn empty_business_keys_falls_back_to_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (_ps, qf) = setup(&mut rng);
        assert_eq!(qf.fallback_count(), 0);
        let out = qf.fuse_behavior(&[0, 0], &[]).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(qf.fallback_count(), 1);
    }

    #[test]
    fn query_tower_arity_is_always_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (_ps, qf) = setup(&mut rng);
        let paths: Vec<Vec<usize>> = vec![vec![0, 0], vec![1, 1], vec![2, 0]];
        let biz: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.1; 4]]; 3];
        for k in 1..=3 {
            let window: Vec<(&[usize], &[Vec<f64>])> = (0..k)
                .map(|i| (paths[i].as_slice(), biz[i].as_slice()))
                .collect();
            let h = qf.query_tower(&window).unwrap();
            assert_eq!(h.shape(), &[2, 8]);
        }
        assert!(qf.query_tower(&[]).is_err());
    }

    #[test]
    fn query_tower_permutation_invariant_without_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (_ps, qf) = setup(&mut rng);
        let p0: Vec<usize> = vec![0, 1];
        let p1: Vec<usize> = vec![2, 0];
        let b0 = vec![vec![0.3, -0.1, 0.2, 0.0]];
        let b1 = vec![vec![-0.4, 0.5, 0.1, 0.2]];
        let fwd = qf
            .query_tower(&[(p0.as_slice(), b0.as_slice()), (p1.as_slice(), b1.as_slice())])
            .unwrap()
            .data();
        let rev = qf
            .query_tower(&[(p1.as_slice(), b1.as_slice()), (p0.as_slice(), b0.as_slice())])
            .unwrap()
            .data();
        for (a, b) in fwd.iter().zip(&rev) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn contrastive_uniform_similarities_give_ln_b() {
        // Identical vectors everywhere -> all cosines equal -> ln(B).
        let v: Vec<Tensor> = (0..4).map(|_| Tensor::new(vec![1.0, 0.5], &[2], false)).collect();
        let loss = loss_contrastive(&v, &v, 0.5).unwrap();
        assert!((loss.item() - (4f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn contrastive_perfect_pairs_small_tau_goes_to_zero() {
        // Orthogonal pairs: sim(i,i)=1, sim(i,j)=0; tau small.
        let a = Tensor::new(vec![1.0, 0.0], &[2], false);
        let b = Tensor::new(vec![0.0, 1.0], &[2], false);
        let loss = loss_contrastive(&[a.clone(), b.clone()], &[a, b], 0.01).unwrap();
        assert!(loss.item() < 1e-10, "loss {}", loss.item());
    }

    #[test]
    fn contrastive_matches_hand_rolled_logsumexp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::new((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[3], false)
        };
        let pooled: Vec<Tensor> = (0..3).map(|_| mk(&mut rng)).collect();
        let texts: Vec<Tensor> = (0..3).map(|_| mk(&mut rng)).collect();
        let tau = 0.3;
        let loss = loss_contrastive(&pooled, &texts, tau).unwrap().item();
        // brute-force oracle
        let cos = |x: &Tensor, y: &Tensor| {
            let (a, b) = (x.data(), y.data());
            let d: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
            let na: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|p| p * p).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut expect = 0.0;
        for i in 0..3 {
            let row: Vec<f64> = (0..3).map(|j| cos(&pooled[i], &texts[j]) / tau).collect();
            let col: Vec<f64> = (0..3).map(|j| cos(&pooled[j], &texts[i]) / tau).collect();
            let lse = |v: &[f64]| v.iter().map(|x| x.exp()).sum::<f64>().ln();
            expect += (lse(&row) - row[i]) + (lse(&col) - col[i]);
        }
        expect /= 6.0;
        assert!((loss - expect).abs() < 1e-10, "{loss} vs {expect}");
    }

    #[test]
    fn contrastive_needs_batch_of_two() {
        let a = Tensor::new(vec![1.0, 0.0], &[2], false);
        assert!(loss_contrastive(&[a.clone()], &[a], 0.1).is_err());
    }

    #[test]
    fn matching_zero_logit_is_ln2_and_label_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ps = ParamSet::new();
        let head = MatchingHead::init(&mut ps, 4, &mut rng);
        // zero inputs with zero biases -> logit 0 -> ln 2
        let z = Tensor::new(vec![0.0; 4], &[4], false);
        let loss = loss_matching(&head, &z, &z, true).unwrap();
        assert!((loss.item() - (2f64).ln()).abs() < 1e-12);

        // label symmetry: loss(z, 1) == loss(-z, 0)
        let p = Tensor::new(vec![0.3, -0.2, 0.9, 0.1], &[4], false);
        let t = Tensor::new(vec![-0.5, 0.4, 0.2, 0.7], &[4], false);
        let z1 = head.logit(&p, &t).unwrap().item();
        let l1 = loss_matching(&head, &p, &t, true).unwrap().item();
        // BCE identity bce(sigmoid(z), 1) == bce(1 - sigmoid(z), 0) == bce(sigmoid(-z), 0)
        let l0_of_neg = softplus_scalar(-z1);
        assert!((l1 - l0_of_neg).abs() < 1e-12);
    }

    fn softplus_scalar(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    #[test]
    fn matching_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ps = ParamSet::new();
        let head = MatchingHead::init(&mut ps, 4, &mut rng);
        let p = Tensor::new(vec![0.3, -0.2, 0.9, 0.1], &[4], true);
        let t = Tensor::new(vec![-0.5, 0.4, 0.2, 0.7], &[4], true);
        let mut all = vec![p, t];
        all.extend(ps.iter().map(|(_, t)| t.clone()));
        let report = grad_check(
            |xs| loss_matching(&head, &xs[0], &xs[1], true).unwrap(),
            &all,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn generation_uniform_logits_give_ln_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut ps = ParamSet::new();
        let vocab = build_vocab(&["alpha beta", "gamma"]);
        let tower = TextTower::init(&mut ps, vocab.clone(), 8, 8, 2, &mut rng);
        // Zero the output projection: logits all equal -> per-token loss ln V.
        tower.out_w.set_data(&vec![0.0; 8 * vocab.len()]);
        let loss = tower.generation_loss(None, "alpha gamma").unwrap();
        assert!((loss.item() - (vocab.len() as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn generation_rejects_empty_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut ps = ParamSet::new();
        let tower = TextTower::init(&mut ps, build_vocab(&["word"]), 8, 8, 2, &mut rng);
        assert!(tower.generation_loss(None, "  ").is_err());
    }

    #[test]
    fn generation_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut ps = ParamSet::new();
        let tower = TextTower::init(&mut ps, build_vocab(&["alpha beta gamma"]), 4, 4, 2, &mut rng);
        let cond = Tensor::new((0..8).map(|_| 0.1).collect(), &[2, 4], true);
        let mut all = vec![cond];
        all.extend(ps.iter().map(|(_, t)| t.clone()));
        let report = grad_check(
            |xs| tower.generation_loss(Some(&xs[0]), "beta alpha").unwrap(),
            &all,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn infonce_reference_values() {
        let pos = Tensor::scalar(0.4);
        let negs: Vec<Tensor> = (0..5).map(|_| Tensor::scalar(0.4)).collect();
        let l = infonce(&pos, &negs, 0.7);
        assert!((l.item() - (6f64).ln()).abs() < 1e-12);

        let pos = Tensor::scalar(50.0);
        let negs: Vec<Tensor> = (0..5).map(|_| Tensor::scalar(0.0)).collect();
        assert!(infonce(&pos, &negs, 1.0).item() < 1e-12);

        let pos = Tensor::scalar(1.0);
        let negs = vec![Tensor::scalar(0.0), Tensor::scalar(0.0)];
        let expect = (1.0 + 2.0 * (-1.0f64).exp()).ln_1p() - 1.0f64.ln_1p() + 0.0;
        // direct arithmetic: -ln(e^1 / (e^1 + 2 e^0)) = ln(1 + 2 e^-1)
        let direct = (1.0 + 2.0 * (-1.0f64).exp()).ln();
        assert!((infonce(&pos, &negs, 1.0).item() - direct).abs() < 1e-12);
        let _ = expect;
    }

    #[test]
    fn infonce_invariant_to_negative_order() {
        let pos = Tensor::scalar(0.3);
        let negs: Vec<Tensor> = [0.9, -0.4, 0.2].iter().map(|&v| Tensor::scalar(v)).collect();
        let mut rev = negs.clone();
        rev.reverse();
        assert_eq!(
            infonce(&pos, &negs, 0.5).item().to_bits(),
            infonce(&pos, &rev, 0.5).item().to_bits()
        );
    }

    #[test]
    fn full_qformer_loss_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut ps = ParamSet::new();
        let cfg = QFormerConfig {
            num_queries: 2,
            dim: 4,
            layers: 1,
            heads: 2,
            text_dim: 4,
            ..QFormerConfig::default()
        };
        let qf = QFormer::init(&mut ps, &cfg, &[2, 2], 3, &mut rng);
        let tower = TextTower::init(&mut ps, build_vocab(&["net slow", "call drop"]), 4, 4, 2, &mut rng);
        let head = MatchingHead::init(&mut ps, 4, &mut rng);
        let all: Vec<Tensor> = ps.iter().map(|(_, t)| t.clone()).collect();
        let report = grad_check(
            |_| {
                let biz0 = vec![vec![0.2, -0.1, 0.4]];
                let biz1 = vec![vec![-0.3, 0.2, 0.1]];
                let f0 = qf.fuse_behavior(&[0, 1], &biz0).unwrap();
                let f1 = qf.fuse_behavior(&[1, 0], &biz1).unwrap();
                let t0 = tower.text_embedding("net slow").unwrap();
                let t1 = tower.text_embedding("call drop").unwrap();
                let lc = loss_contrastive(&[f0.clone(), f1.clone()], &[t0.clone(), t1.clone()], 0.5).unwrap();
                let lm = loss_matching(&head, &f0, &t1, false).unwrap();
                let q = qf.forward(&qf.semantic_token(&[0, 0]), None).unwrap();
                let lg = tower.generation_loss(Some(&q), "net drop").unwrap();
                crate::tensor::add(&crate::tensor::add(&lc, &lm), &lg)
            },
            &all,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
