use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attention_backward, attention_weights};
use super::config::{EncoderConfig, REFERENCE_PARAM_COUNT};
use super::params::{Grads, ParamStore};
use super::tensor::{
    apply_mask, dropout_mask, layer_norm, layer_norm_backward, linear, linear_backward, matmul, relu,
    relu_backward, LnCache, Mat,
};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::rng;

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct ModelIds {
    tok: usize,
    pos: usize,
    conv: Vec<(usize, usize)>,
    proj: Option<(usize, usize)>,
    ln_g: usize,
    ln_b: usize,
    layers: Vec<LayerIds>,
    mlm_w: usize,
    mlm_b: usize,
}

/// Token and position embeddings, an optional convolutional feature stack,
/// post-norm self-attention layers and a masked-token projection.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub cfg: EncoderConfig,
    pub params: ParamStore,
    ids: ModelIds,
}

pub(crate) struct SeqCache {
    ids: Vec<u32>,
    valid: usize,
    pos_drop: Option<Vec<f64>>,
    features: FeatureCache,
    ln_emb: LnCache,
    layers: Vec<LayerCache>,
}

enum FeatureCache {
    Conv(Vec<ConvCache>),
    Proj(Mat),
}

struct ConvCache {
    col: Mat,
    pre: Mat,
    drop: Option<Vec<f64>>,
}

struct LayerCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    attn_drop: Vec<Option<Vec<f64>>>,
    ctx: Mat,
    ln1: LnCache,
    y1: Mat,
    f_pre: Mat,
    f_act: Mat,
    ffn_drop: Option<Vec<f64>>,
    ln2: LnCache,
}

/// Per-layer, per-head attention weights of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    /// `[n_layers, n_heads, max_seq, max_seq]`
    pub shape: [usize; 4],
    pub true_len: usize,
    pub tokens: Vec<u32>,
    /// `weights[layer][head][query][key]`
    pub weights: Vec<Vec<Vec<Vec<f64>>>>,
}

fn pair(g: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// Rows of `x` arranged so that a `[k·cin × cout]` matrix product is a
/// same-length 1-D convolution; rows at or past `valid` read as zero.
fn im2col(x: &Mat, kernel: usize, valid: usize) -> Mat {
    let (n, cin) = (x.rows, x.cols);
    let half = kernel / 2;
    let mut col = Mat::zeros(n, kernel * cin);
    for t in 0..n {
        for j in 0..kernel {
            let src = t + j;
            if src < half || src - half >= valid.min(n) {
                continue;
            }
            let s = src - half;
            col.data[t * kernel * cin + j * cin..t * kernel * cin + (j + 1) * cin].copy_from_slice(x.row(s));
        }
    }
    col
}

fn col2im(dcol: &Mat, n: usize, cin: usize, kernel: usize, valid: usize) -> Mat {
    let half = kernel / 2;
    let mut dx = Mat::zeros(n, cin);
    for t in 0..n {
        for j in 0..kernel {
            let src = t + j;
            if src < half || src - half >= valid.min(n) {
                continue;
            }
            let s = src - half;
            let from = &dcol.data[t * kernel * cin + j * cin..t * kernel * cin + (j + 1) * cin];
            for (d, g) in dx.row_mut(s).iter_mut().zip(from) {
                *d += g;
            }
        }
    }
    dx
}

impl EncoderModel {
    /// Builds a freshly initialized model; the parameter count is logged.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        let mut ps = ParamStore::new();
        let (v, e, h, f) = (cfg.vocab_size, cfg.d_embed, cfg.d_hidden, cfg.d_ffn);
        let tok = ps.add_normal("embed.token", &[v, e], EMBED_STD, &mut r);
        let pos = ps.add_normal("embed.position", &[cfg.max_seq, e], EMBED_STD, &mut r);
        let mut conv = Vec::new();
        let mut proj = None;
        if cfg.conv_enabled {
            for l in 0..cfg.n_conv_layers {
                let cin = if l == 0 { e } else { h };
                let fan_in = cfg.conv_kernel * cin;
                let w = ps.add_normal(
                    &format!("conv.{l}.weight"),
                    &[cfg.conv_kernel, cin, h],
                    (2.0 / fan_in as f64).sqrt(),
                    &mut r,
                );
                let b = ps.add_zeros(&format!("conv.{l}.bias"), &[h]);
                conv.push((w, b));
            }
        } else {
            let w = ps.add_normal("proj.weight", &[e, h], (1.0 / e as f64).sqrt(), &mut r);
            let b = ps.add_zeros("proj.bias", &[h]);
            proj = Some((w, b));
        }
        let ln_g = ps.add_filled("embed.norm.gamma", &[h], 1.0);
        let ln_b = ps.add_zeros("embed.norm.beta", &[h]);
        let xavier = (1.0 / h as f64).sqrt();
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            let wq = ps.add_normal(&p("attn.wq"), &[h, h], xavier, &mut r);
            let bq = ps.add_zeros(&p("attn.bq"), &[h]);
            let wk = ps.add_normal(&p("attn.wk"), &[h, h], xavier, &mut r);
            let bk = ps.add_zeros(&p("attn.bk"), &[h]);
            let wv = ps.add_normal(&p("attn.wv"), &[h, h], xavier, &mut r);
            let bv = ps.add_zeros(&p("attn.bv"), &[h]);
            let wo = ps.add_normal(&p("attn.wo"), &[h, h], xavier, &mut r);
            let bo = ps.add_zeros(&p("attn.bo"), &[h]);
            let ln1_g = ps.add_filled(&p("norm1.gamma"), &[h], 1.0);
            let ln1_b = ps.add_zeros(&p("norm1.beta"), &[h]);
            let w1 = ps.add_normal(&p("ffn.w1"), &[h, f], (2.0 / h as f64).sqrt(), &mut r);
            let b1 = ps.add_zeros(&p("ffn.b1"), &[f]);
            let w2 = ps.add_normal(&p("ffn.w2"), &[f, h], (1.0 / f as f64).sqrt(), &mut r);
            let b2 = ps.add_zeros(&p("ffn.b2"), &[h]);
            let ln2_g = ps.add_filled(&p("norm2.gamma"), &[h], 1.0);
            let ln2_b = ps.add_zeros(&p("norm2.beta"), &[h]);
            layers.push(LayerIds {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_g,
                ln1_b,
                w1,
                b1,
                w2,
                b2,
                ln2_g,
                ln2_b,
            });
        }
        let mlm_w = ps.add_normal("mlm.weight", &[h, v], xavier, &mut r);
        let mlm_b = ps.add_zeros("mlm.bias", &[v]);
        let model = EncoderModel {
            ids: ModelIds {
                tok,
                pos,
                conv,
                proj,
                ln_g,
                ln_b,
                layers,
                mlm_w,
                mlm_b,
            },
            params: ps,
            cfg,
        };
        let n = model.param_count();
        debug_assert_eq!(n, model.cfg.param_count());
        log::info!("encoder has {n} parameters (reference model: {REFERENCE_PARAM_COUNT})");
        Ok(model)
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_params(cfg: EncoderConfig, params: ParamStore) -> Result<Self> {
        let mut model = EncoderModel::new(cfg, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Shape(format!(
                "{} stored tensors for a model of {}",
                params.len(),
                model.params.len()
            )));
        }
        for (want, got) in model.params.tensors().iter().zip(params.tensors()) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} where {} {:?} expected",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.num_params()
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.cfg.max_seq {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max_seq: self.cfg.max_seq,
            });
        }
        if ids.is_empty() {
            return Err(Error::Shape("empty sequence".into()));
        }
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Hidden states `[ids.len() × d_hidden]` of one sequence whose first
    /// `valid` positions are real tokens. Dropout is applied iff `drop` is
    /// given.
    pub(crate) fn forward_seq(
        &self,
        ids: &[u32],
        valid: usize,
        mut drop: Option<&mut ChaCha8Rng>,
    ) -> Result<(Mat, SeqCache)> {
        self.check_ids(ids)?;
        let cfg = &self.cfg;
        let p = &self.params;
        let (n, e, h) = (ids.len(), cfg.d_embed, cfg.d_hidden);
        let valid = valid.min(n);

        let tok = p.get(self.ids.tok);
        let pos = p.get(self.ids.pos);
        let mut x = Mat::zeros(n, e);
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            for (c, v) in x.row_mut(t).iter_mut().enumerate() {
                *v = tok[id * e + c] + pos[t * e + c];
            }
        }
        let pos_drop = dropout_mask(n * e, cfg.dropout_pos, drop.as_deref_mut());
        apply_mask(&mut x, &pos_drop);

        let (x, features) = if let Some((w, b)) = self.ids.proj {
            (linear(&x, p.get(w), p.get(b)), FeatureCache::Proj(x))
        } else {
            let mut caches = Vec::new();
            let mut cur = x;
            for &(w, b) in &self.ids.conv {
                let col = im2col(&cur, cfg.conv_kernel, valid);
                let pre = linear(&col, p.get(w), p.get(b));
                let mut act = relu(&pre);
                let d = dropout_mask(n * h, cfg.dropout_conv, drop.as_deref_mut());
                apply_mask(&mut act, &d);
                caches.push(ConvCache { col, pre, drop: d });
                cur = act;
            }
            (cur, FeatureCache::Conv(caches))
        };
        let (mut x, ln_emb) = layer_norm(&x, p.get(self.ids.ln_g), p.get(self.ids.ln_b));

        let key_valid: Vec<bool> = (0..n).map(|t| t < valid).collect();
        let dh = cfg.head_dim();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for li in &self.ids.layers {
            let q = linear(&x, p.get(li.wq), p.get(li.bq));
            let k = linear(&x, p.get(li.wk), p.get(li.bk));
            let v = linear(&x, p.get(li.wv), p.get(li.bv));
            let mut ctx = Mat::zeros(n, h);
            let mut probs = Vec::with_capacity(cfg.n_heads);
            let mut attn_drop = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let (qh, kh, vh) = (
                    q.cols_slice(hd * dh, dh),
                    k.cols_slice(hd * dh, dh),
                    v.cols_slice(hd * dh, dh),
                );
                let pr = attention_weights(&qh, &kh, Some(&key_valid));
                let d = dropout_mask(n * n, cfg.dropout_attn, drop.as_deref_mut());
                let mut pd = pr.clone();
                apply_mask(&mut pd, &d);
                ctx.set_cols(hd * dh, &matmul(&pd, &vh.data, dh));
                probs.push(pr);
                attn_drop.push(d);
            }
            let mut r1 = linear(&ctx, p.get(li.wo), p.get(li.bo));
            r1.add_assign(&x);
            let (y1, ln1) = layer_norm(&r1, p.get(li.ln1_g), p.get(li.ln1_b));
            let f_pre = linear(&y1, p.get(li.w1), p.get(li.b1));
            let f_act = relu(&f_pre);
            let mut r2 = linear(&f_act, p.get(li.w2), p.get(li.b2));
            let ffn_drop = dropout_mask(n * h, cfg.dropout_ffn, drop.as_deref_mut());
            apply_mask(&mut r2, &ffn_drop);
            r2.add_assign(&y1);
            let (y2, ln2) = layer_norm(&r2, p.get(li.ln2_g), p.get(li.ln2_b));
            layers.push(LayerCache {
                x,
                q,
                k,
                v,
                probs,
                attn_drop,
                ctx,
                ln1,
                y1,
                f_pre,
                f_act,
                ffn_drop,
                ln2,
            });
            x = y2;
        }
        let cache = SeqCache {
            ids: ids.to_vec(),
            valid,
            pos_drop,
            features,
            ln_emb,
            layers,
        };
        Ok((x, cache))
    }

    /// Accumulates parameter gradients given `d hidden` for a cached
    /// forward pass.
    pub(crate) fn backward_seq(&self, cache: &SeqCache, dout: &Mat, grads: &mut Grads) {
        let cfg = &self.cfg;
        let p = &self.params;
        let g = &mut grads.0;
        let n = cache.ids.len();
        let dh = cfg.head_dim();
        let mut dx = dout.clone();
        for (li, lc) in self.ids.layers.iter().zip(&cache.layers).rev() {
            let (dg, db) = pair(g, li.ln2_g, li.ln2_b);
            let dr2 = layer_norm_backward(&lc.ln2, p.get(li.ln2_g), &dx, dg, db);
            let mut df2 = dr2.clone();
            apply_mask(&mut df2, &lc.ffn_drop);
            let (dw, db) = pair(g, li.w2, li.b2);
            let dact = linear_backward(&lc.f_act, p.get(li.w2), &df2, dw, db);
            let dpre = relu_backward(&lc.f_pre, &dact);
            let (dw, db) = pair(g, li.w1, li.b1);
            let mut dy1 = linear_backward(&lc.y1, p.get(li.w1), &dpre, dw, db);
            dy1.add_assign(&dr2);

            let (dg, db) = pair(g, li.ln1_g, li.ln1_b);
            let dr1 = layer_norm_backward(&lc.ln1, p.get(li.ln1_g), &dy1, dg, db);
            let (dw, db) = pair(g, li.wo, li.bo);
            let dctx = linear_backward(&lc.ctx, p.get(li.wo), &dr1, dw, db);
            let mut dq = Mat::zeros(n, cfg.d_hidden);
            let mut dk = Mat::zeros(n, cfg.d_hidden);
            let mut dv = Mat::zeros(n, cfg.d_hidden);
            for hd in 0..cfg.n_heads {
                let ag = attention_backward(
                    &lc.q.cols_slice(hd * dh, dh),
                    &lc.k.cols_slice(hd * dh, dh),
                    &lc.v.cols_slice(hd * dh, dh),
                    &lc.probs[hd],
                    &lc.attn_drop[hd],
                    &dctx.cols_slice(hd * dh, dh),
                );
                dq.set_cols(hd * dh, &ag.dq);
                dk.set_cols(hd * dh, &ag.dk);
                dv.set_cols(hd * dh, &ag.dv);
            }
            let mut dxl = dr1;
            for (w, b, d) in [(li.wq, li.bq, &dq), (li.wk, li.bk, &dk), (li.wv, li.bv, &dv)] {
                let (dw, db) = pair(g, w, b);
                dxl.add_assign(&linear_backward(&lc.x, p.get(w), d, dw, db));
            }
            dx = dxl;
        }

        let (dg, db) = pair(g, self.ids.ln_g, self.ids.ln_b);
        let mut dx = layer_norm_backward(&cache.ln_emb, p.get(self.ids.ln_g), &dx, dg, db);
        match &cache.features {
            FeatureCache::Proj(x) => {
                let (w, b) = self.ids.proj.expect("projection ids");
                let (dw, db) = pair(g, w, b);
                dx = linear_backward(x, p.get(w), &dx, dw, db);
            }
            FeatureCache::Conv(caches) => {
                for (&(w, b), cc) in self.ids.conv.iter().zip(caches).rev() {
                    apply_mask(&mut dx, &cc.drop);
                    let dpre = relu_backward(&cc.pre, &dx);
                    let (dw, db) = pair(g, w, b);
                    let dcol = linear_backward(&cc.col, p.get(w), &dpre, dw, db);
                    let cin = cc.col.cols / cfg.conv_kernel;
                    dx = col2im(&dcol, n, cin, cfg.conv_kernel, cache.valid);
                }
            }
        }
        apply_mask(&mut dx, &cache.pos_drop);
        let e = cfg.d_embed;
        let (dtok, dpos) = pair(g, self.ids.tok, self.ids.pos);
        for (t, &id) in cache.ids.iter().enumerate() {
            let id = id as usize;
            for (c, &v) in dx.row(t).iter().enumerate() {
                dtok[id * e + c] += v;
                dpos[t * e + c] += v;
            }
        }
    }

    /// MLM logits `[rows × vocab_size]` for hidden-state rows.
    pub fn mlm_logits(&self, hidden: &Mat) -> Mat {
        linear(hidden, self.params.get(self.ids.mlm_w), self.params.get(self.ids.mlm_b))
    }

    /// Backward of [`Self::mlm_logits`].
    pub(crate) fn mlm_backward(&self, hidden: &Mat, dlogits: &Mat, grads: &mut Grads) -> Mat {
        let (dw, db) = pair(&mut grads.0, self.ids.mlm_w, self.ids.mlm_b);
        linear_backward(hidden, self.params.get(self.ids.mlm_w), dlogits, dw, db)
    }

    /// Hidden states `[batch][max_seq × d_hidden]` for padded sequences.
    /// With `train_mode` dropout is drawn from streams derived from `seed`
    /// and the row index; otherwise the output is a pure function of the
    /// weights and ids.
    pub fn forward(&self, batch: &[TokenSequence], train_mode: bool, seed: u64) -> Result<Vec<Mat>> {
        batch
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut r = rng::stream(seed, &[rng::tag::DROPOUT, i as u64]);
                let drop = train_mode.then_some(&mut r);
                self.forward_seq(&s.ids, s.true_len, drop).map(|(h, _)| h)
            })
            .collect()
    }

    /// Mean of the final hidden states over the sequence's real tokens.
    pub fn embed_function(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let (h, _) = self.forward_seq(seq.active(), seq.true_len, None)?;
        Ok(mean_rows(&h))
    }

    /// Attention weights of every head in every layer over the padded
    /// sequence. PAD keys receive zero weight.
    pub fn export_attention(&self, seq: &TokenSequence) -> Result<AttentionExport> {
        let (_, cache) = self.forward_seq(&seq.ids, seq.true_len, None)?;
        let n = seq.ids.len();
        let weights = cache
            .layers
            .iter()
            .map(|lc| {
                lc.probs
                    .iter()
                    .map(|m| (0..m.rows).map(|r| m.row(r).to_vec()).collect())
                    .collect()
            })
            .collect();
        Ok(AttentionExport {
            shape: [self.cfg.n_layers, self.cfg.n_heads, n, n],
            true_len: seq.true_len,
            tokens: seq.ids.clone(),
            weights,
        })
    }

    /// Ids of the encoder tensors (everything but the MLM projection).
    pub(crate) fn encoder_tensor_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.params.len()).filter(move |&i| i != self.ids.mlm_w && i != self.ids.mlm_b)
    }
}

pub(crate) fn mean_rows(h: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; h.cols];
    for r in 0..h.rows {
        for (o, v) in out.iter_mut().zip(h.row(r)) {
            *o += v;
        }
    }
    let n = h.rows as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Backward of [`mean_rows`].
pub(crate) fn mean_rows_backward(rows: usize, dmean: &[f64]) -> Mat {
    let mut d = Mat::zeros(rows, dmean.len());
    let inv = 1.0 / rows as f64;
    for r in 0..rows {
        for (x, g) in d.row_mut(r).iter_mut().zip(dmean) {
            *x = g * inv;
        }
    }
    d
}

/// Draws a dropout stream for one sequence of one optimizer step.
pub(crate) fn dropout_stream(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    rng::stream(seed, &[rng::tag::DROPOUT, step, index])
}
