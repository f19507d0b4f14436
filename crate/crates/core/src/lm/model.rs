//! Pre-norm encoder-decoder transformer over a flat parameter vector.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, AttnGrads, AttnWeights, LnCache, Segment};
use super::tokenizer::{BOS, EOS};
use crate::error::{Error, Result};
use crate::numeric::Real;
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub max_input_len: usize,
    pub max_target_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            width: 128,
            ff_width: 512,
            dropout: 0.1,
            max_input_len: 64,
            max_target_len: 24,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("model.layers", "must be >= 1"));
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config("model.width", "must be a positive multiple of model.heads"));
        }
        if self.ff_width == 0 {
            return Err(Error::config("model.ff_width", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must be in [0, 1)"));
        }
        if self.max_input_len == 0 {
            return Err(Error::config("model.max_input_len", "must be >= 1"));
        }
        if self.max_target_len == 0 {
            return Err(Error::config("model.max_target_len", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct TensorInfo {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Subject to weight decay.
    pub decay: bool,
    init: Init,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Ln {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: Ln,
    attn: Attn,
    ln2: Ln,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: Ln,
    self_attn: Attn,
    ln2: Ln,
    cross: Attn,
    ln3: Ln,
    ffn: Ffn,
}

/// Named offsets of every tensor in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc: Vec<EncLayer>,
    enc_ln: Ln,
    dec: Vec<DecLayer>,
    dec_ln: Ln,
    tensors: Vec<TensorInfo>,
    len: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig, vocab: usize) -> Self {
        let d = cfg.width;
        let f = cfg.ff_width;
        let mut tensors: Vec<TensorInfo> = Vec::new();
        let mut len = 0;
        let mut alloc = |name: String, rows: usize, cols: usize, init: Init, decay: bool| {
            let offset = len;
            len += rows * cols;
            tensors.push(TensorInfo {
                name,
                offset,
                rows,
                cols,
                decay,
                init,
            });
            offset
        };
        let wstd = 1.0 / (d as f64).sqrt();
        let ostd = wstd / (2.0 * cfg.layers as f64).sqrt();
        let emb = alloc("embedding".into(), vocab, d, Init::Normal(wstd), true);
        let enc_pos = alloc("encoder.position".into(), cfg.max_input_len, d, Init::Normal(0.5), false);
        let dec_pos = alloc("decoder.position".into(), cfg.max_target_len + 1, d, Init::Normal(0.5), false);
        let ln = |alloc: &mut dyn FnMut(String, usize, usize, Init, bool) -> usize, p: &str| Ln {
            g: alloc(format!("{p}.gain"), 1, d, Init::Ones, false),
            b: alloc(format!("{p}.bias"), 1, d, Init::Zeros, false),
        };
        let attn = |alloc: &mut dyn FnMut(String, usize, usize, Init, bool) -> usize, p: &str| Attn {
            q: alloc(format!("{p}.query"), d, d, Init::Normal(wstd), true),
            k: alloc(format!("{p}.key"), d, d, Init::Normal(wstd), true),
            v: alloc(format!("{p}.value"), d, d, Init::Normal(wstd), true),
            o: alloc(format!("{p}.output"), d, d, Init::Normal(ostd), true),
        };
        let ffn = |alloc: &mut dyn FnMut(String, usize, usize, Init, bool) -> usize, p: &str| Ffn {
            w1: alloc(format!("{p}.w1"), d, f, Init::Normal(wstd), true),
            b1: alloc(format!("{p}.b1"), 1, f, Init::Zeros, false),
            w2: alloc(format!("{p}.w2"), f, d, Init::Normal(1.0 / (f as f64).sqrt() / (2.0 * cfg.layers as f64).sqrt()), true),
            b2: alloc(format!("{p}.b2"), 1, d, Init::Zeros, false),
        };
        let enc = (0..cfg.layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncLayer {
                    ln1: ln(&mut alloc, &format!("{p}.ln1")),
                    attn: attn(&mut alloc, &format!("{p}.attn")),
                    ln2: ln(&mut alloc, &format!("{p}.ln2")),
                    ffn: ffn(&mut alloc, &format!("{p}.ffn")),
                }
            })
            .collect();
        let enc_ln = ln(&mut alloc, "encoder.final_ln");
        let dec = (0..cfg.layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecLayer {
                    ln1: ln(&mut alloc, &format!("{p}.ln1")),
                    self_attn: attn(&mut alloc, &format!("{p}.self_attn")),
                    ln2: ln(&mut alloc, &format!("{p}.ln2")),
                    cross: attn(&mut alloc, &format!("{p}.cross_attn")),
                    ln3: ln(&mut alloc, &format!("{p}.ln3")),
                    ffn: ffn(&mut alloc, &format!("{p}.ffn")),
                }
            })
            .collect();
        let dec_ln = ln(&mut alloc, "decoder.final_ln");
        Layout {
            emb,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            tensors,
            len,
        }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// One source sequence and the targets conditioned on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub source: Vec<u32>,
    /// Target tokens without bos/eos.
    pub targets: Vec<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct Transformer<T> {
    cfg: ModelConfig,
    vocab: usize,
    layout: Layout,
    params: Vec<T>,
}

struct EncLayerCache<T> {
    ln1: LnCache<T>,
    attn: ops::AttnCache<T>,
    drop1: Option<Vec<T>>,
    ln2: LnCache<T>,
    ffn: ops::FfnCache<T>,
    drop2: Option<Vec<T>>,
}

struct DecLayerCache<T> {
    ln1: LnCache<T>,
    self_attn: ops::AttnCache<T>,
    drop1: Option<Vec<T>>,
    ln2: LnCache<T>,
    cross: ops::AttnCache<T>,
    drop2: Option<Vec<T>>,
    ln3: LnCache<T>,
    ffn: ops::FfnCache<T>,
    drop3: Option<Vec<T>>,
}

struct ForwardCache<T> {
    enc_tokens: Vec<u32>,
    enc_positions: Vec<usize>,
    enc_segs: Vec<Segment>,
    enc_drop: Option<Vec<T>>,
    enc_layers: Vec<EncLayerCache<T>>,
    enc_ln: LnCache<T>,
    dec_tokens: Vec<u32>,
    dec_positions: Vec<usize>,
    dec_self_segs: Vec<Segment>,
    dec_cross_segs: Vec<Segment>,
    dec_drop: Option<Vec<T>>,
    dec_layers: Vec<DecLayerCache<T>>,
    dec_ln: LnCache<T>,
    labels: Vec<u32>,
}

/// Encoder output with the cross-attention keys and values of every layer.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    memory: Vec<T>,
    cross_k: Vec<Vec<T>>,
    cross_v: Vec<Vec<T>>,
}

impl<T> Encoded<T> {
    pub fn len(&self, width: usize) -> usize {
        self.cross_k.first().map_or(0, |k| k.len() / width)
    }
}

/// Incremental self-attention cache of one hypothesis.
#[derive(Debug, Clone, Default)]
pub struct DecodeState<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

impl<T> DecodeState<T> {
    /// Tokens consumed so far, including bos.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<T: Real> Transformer<T> {
    pub fn new(cfg: ModelConfig, vocab: usize) -> Result<Self> {
        cfg.validate()?;
        if vocab <= EOS as usize {
            return Err(Error::config("vocab", "too small"));
        }
        let layout = Layout::new(&cfg, vocab);
        let mut rng = util::rng(cfg.seed, "model-init");
        let mut params = vec![T::zero(); layout.len];
        for t in &layout.tensors {
            let slot = &mut params[t.range()];
            match t.init {
                Init::Zeros => {}
                Init::Ones => slot.iter_mut().for_each(|v| *v = T::one()),
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).expect("valid std");
                    slot.iter_mut().for_each(|v| *v = T::of(n.sample(&mut rng)));
                }
            }
        }
        Ok(Transformer { cfg, vocab, layout, params })
    }

    pub fn from_params(cfg: ModelConfig, vocab: usize, params: Vec<T>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg, vocab);
        if params.len() != layout.len {
            return Err(Error::DimensionMismatch {
                expected: layout.len,
                got: params.len(),
            });
        }
        Ok(Transformer { cfg, vocab, layout, params })
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer {
            cfg: self.cfg.clone(),
            vocab: self.vocab,
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn p(&self, off: usize, len: usize) -> &[T] {
        &self.params[off..off + len]
    }

    fn attn_w(&self, a: Attn) -> AttnWeights<'_, T> {
        let dd = self.cfg.width * self.cfg.width;
        AttnWeights {
            q: self.p(a.q, dd),
            k: self.p(a.k, dd),
            v: self.p(a.v, dd),
            o: self.p(a.o, dd),
        }
    }

    fn ln(&self, x: &[T], l: Ln) -> LnCache<T> {
        let d = self.cfg.width;
        ops::layer_norm(x, self.p(l.g, d), self.p(l.b, d))
    }

    fn ffn(&self, x: &[T], f: Ffn) -> (Vec<T>, ops::FfnCache<T>) {
        let (d, ff) = (self.cfg.width, self.cfg.ff_width);
        ops::ffn(x, self.p(f.w1, d * ff), self.p(f.b1, ff), self.p(f.w2, ff * d), self.p(f.b2, d))
    }

    fn embed(&self, tokens: &[u32], positions: &[usize], pos_off: usize) -> Vec<T> {
        let d = self.cfg.width;
        let scale = T::of((d as f64).sqrt());
        let mut x = vec![T::zero(); tokens.len() * d];
        for (r, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            let e = self.p(self.layout.emb + t as usize * d, d);
            let pe = self.p(pos_off + p * d, d);
            for j in 0..d {
                x[r * d + j] = e[j] * scale + pe[j];
            }
        }
        x
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab) {
            Some(t) => Err(Error::InvalidInput(format!("token {t} outside vocabulary of {}", self.vocab))),
            None => Ok(()),
        }
    }

    fn forward(&self, batch: &[Group], mut rng: Option<&mut ChaCha8Rng>) -> Result<(ForwardCache<T>, Vec<T>)> {
        let d = self.cfg.width;
        let heads = self.cfg.heads;
        let p_drop = self.cfg.dropout;

        let mut enc_tokens = Vec::new();
        let mut enc_positions = Vec::new();
        let mut enc_segs = Vec::new();
        let mut group_rows = Vec::new();
        for g in batch {
            if g.source.is_empty() || g.source.len() > self.cfg.max_input_len {
                return Err(Error::InvalidInput(format!(
                    "source length {} outside 1..={}",
                    g.source.len(),
                    self.cfg.max_input_len
                )));
            }
            self.check_tokens(&g.source)?;
            let start = enc_tokens.len();
            enc_tokens.extend(&g.source);
            enc_positions.extend(0..g.source.len());
            let r = start..enc_tokens.len();
            enc_segs.push(Segment {
                q: r.clone(),
                kv: r.clone(),
                causal: false,
            });
            group_rows.push(r);
        }

        let mut x = self.embed(&enc_tokens, &enc_positions, self.layout.enc_pos);
        let enc_drop = ops::dropout_mask(x.len(), p_drop, rng.as_deref_mut());
        ops::apply_mask(&mut x, &enc_drop);
        let mut enc_layers = Vec::with_capacity(self.cfg.layers);
        for l in &self.layout.enc {
            let ln1 = self.ln(&x, l.ln1);
            let (mut a, attn) = ops::attention(self.attn_w(l.attn), &ln1.y, &ln1.y, &enc_segs, heads, d);
            let drop1 = ops::dropout_mask(a.len(), p_drop, rng.as_deref_mut());
            ops::apply_mask(&mut a, &drop1);
            ops::add_into(&mut x, &a);
            let ln2 = self.ln(&x, l.ln2);
            let (mut f, ffn) = self.ffn(&ln2.y, l.ffn);
            let drop2 = ops::dropout_mask(f.len(), p_drop, rng.as_deref_mut());
            ops::apply_mask(&mut f, &drop2);
            ops::add_into(&mut x, &f);
            enc_layers.push(EncLayerCache {
                ln1,
                attn,
                drop1,
                ln2,
                ffn,
                drop2,
            });
        }
        let enc_ln = self.ln(&x, self.layout.enc_ln);

        let mut dec_tokens = Vec::new();
        let mut dec_positions = Vec::new();
        let mut labels = Vec::new();
        let mut dec_self_segs = Vec::new();
        let mut dec_cross_segs = Vec::new();
        for (g, rows) in batch.iter().zip(&group_rows) {
            for t in &g.targets {
                if t.len() > self.cfg.max_target_len {
                    return Err(Error::InvalidInput(format!(
                        "target length {} exceeds {}",
                        t.len(),
                        self.cfg.max_target_len
                    )));
                }
                self.check_tokens(t)?;
                let start = dec_tokens.len();
                dec_tokens.push(BOS);
                dec_tokens.extend(t);
                labels.extend(t);
                labels.push(EOS);
                dec_positions.extend(0..=t.len());
                let r = start..dec_tokens.len();
                dec_self_segs.push(Segment {
                    q: r.clone(),
                    kv: r.clone(),
                    causal: true,
                });
                dec_cross_segs.push(Segment {
                    q: r,
                    kv: rows.clone(),
                    causal: false,
                });
            }
        }
        let mut y = self.embed(&dec_tokens, &dec_positions, self.layout.dec_pos);
        let dec_drop = ops::dropout_mask(y.len(), p_drop, rng.as_deref_mut());
        ops::apply_mask(&mut y, &dec_drop);
        let mut dec_layers = Vec::with_capacity(self.cfg.layers);
        for l in &self.layout.dec {
            let ln1 = self.ln(&y, l.ln1);
            let (mut a, self_attn) = ops::attention(self.attn_w(l.self_attn), &ln1.y, &ln1.y, &dec_self_segs, heads, d);
            let drop1 = ops::dropout_mask(a.len(), p_drop, rng.as_deref_mut());
            ops::apply_mask(&mut a, &drop1);
            ops::add_into(&mut y, &a);
            let ln2 = self.ln(&y, l.ln2);
            let (mut c, cross) = ops::attention(self.attn_w(l.cross), &ln2.y, &enc_ln.y, &dec_cross_segs, heads, d);
            let drop2 = ops::dropout_mask(c.len(), p_drop, rng.as_deref_mut());
            ops::apply_mask(&mut c, &drop2);
            ops::add_into(&mut y, &c);
            let ln3 = self.ln(&y, l.ln3);
            let (mut f, ffn) = self.ffn(&ln3.y, l.ffn);
            let drop3 = ops::dropout_mask(f.len(), p_drop, rng.as_deref_mut());
            ops::apply_mask(&mut f, &drop3);
            ops::add_into(&mut y, &f);
            dec_layers.push(DecLayerCache {
                ln1,
                self_attn,
                drop1,
                ln2,
                cross,
                drop2,
                ln3,
                ffn,
                drop3,
            });
        }
        let dec_ln = self.ln(&y, self.layout.dec_ln);
        let n = dec_tokens.len();
        let mut logits = vec![T::zero(); n * self.vocab];
        T::gemm(n, d, self.vocab, T::one(), &dec_ln.y, false, self.p(self.layout.emb, self.vocab * d), true, T::zero(), &mut logits);
        Ok((
            ForwardCache {
                enc_tokens,
                enc_positions,
                enc_segs,
                enc_drop,
                enc_layers,
                enc_ln,
                dec_tokens,
                dec_positions,
                dec_self_segs,
                dec_cross_segs,
                dec_drop,
                dec_layers,
                dec_ln,
                labels,
            },
            logits,
        ))
    }

    /// Summed cross-entropy and target-token count, in inference mode.
    pub fn loss(&self, batch: &[Group]) -> Result<(f64, usize)> {
        let (cache, logits) = self.forward(batch, None)?;
        let mut total = 0.0;
        for (row, &label) in logits.chunks_exact(self.vocab).zip(&cache.labels) {
            total -= ops::log_softmax(row)[label as usize];
        }
        Ok((total, cache.labels.len()))
    }

    /// Accumulates the gradient of the mean token cross-entropy into
    /// `grads`; returns `(summed loss, token count)`. Dropout is active
    /// when `rng` is given.
    pub fn loss_and_grad(&self, batch: &[Group], rng: Option<&mut ChaCha8Rng>, grads: &mut [T]) -> Result<(f64, usize)> {
        if grads.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let (c, mut logits) = self.forward(batch, rng)?;
        let d = self.cfg.width;
        let v = self.vocab;
        let heads = self.cfg.heads;
        let n_dec = c.labels.len();
        let inv_n = T::of(1.0 / n_dec as f64);
        let mut total = 0.0;
        for (row, &label) in logits.chunks_exact_mut(v).zip(&c.labels) {
            let lp = ops::log_softmax(row);
            total -= lp[label as usize];
            for (g, l) in row.iter_mut().zip(&lp) {
                *g = T::of(l.exp()) * inv_n;
            }
            row[label as usize] -= inv_n;
        }
        let lay = &self.layout;
        let emb = self.p(lay.emb, v * d);
        // Tied output projection.
        T::gemm(v, n_dec, d, T::one(), &logits, true, &c.dec_ln.y, false, T::one(), &mut grads[lay.emb..lay.emb + v * d]);
        let mut dy = vec![T::zero(); n_dec * d];
        T::gemm(n_dec, v, d, T::one(), &logits, false, emb, false, T::zero(), &mut dy);
        drop(logits);
        let mut dy = self.ln_bwd(&dy, &c.dec_ln, lay.dec_ln, grads);

        let mut dmem = vec![T::zero(); c.enc_ln.y.len()];
        for (l, lc) in lay.dec.iter().zip(&c.dec_layers).rev() {
            let mut df = dy.clone();
            ops::apply_mask(&mut df, &lc.drop3);
            let dx = self.ffn_bwd(&lc.ln3.y, &lc.ffn, &df, l.ffn, grads);
            ops::add_into(&mut dy, &self.ln_bwd(&dx, &lc.ln3, l.ln3, grads));

            let mut dc = dy.clone();
            ops::apply_mask(&mut dc, &lc.drop2);
            let (dq, dkv) = self.attn_bwd(l.cross, grads, &lc.ln2.y, &c.enc_ln.y, &lc.cross, &dc, &c.dec_cross_segs, heads);
            ops::add_into(&mut dmem, &dkv);
            ops::add_into(&mut dy, &self.ln_bwd(&dq, &lc.ln2, l.ln2, grads));

            let mut da = dy.clone();
            ops::apply_mask(&mut da, &lc.drop1);
            let (mut dq, dkv) = self.attn_bwd(l.self_attn, grads, &lc.ln1.y, &lc.ln1.y, &lc.self_attn, &da, &c.dec_self_segs, heads);
            ops::add_into(&mut dq, &dkv);
            ops::add_into(&mut dy, &self.ln_bwd(&dq, &lc.ln1, l.ln1, grads));
        }
        ops::apply_mask(&mut dy, &c.dec_drop);
        self.embed_bwd(&dy, &c.dec_tokens, &c.dec_positions, lay.dec_pos, grads);

        let mut dx = self.ln_bwd(&dmem, &c.enc_ln, lay.enc_ln, grads);
        for (l, lc) in lay.enc.iter().zip(&c.enc_layers).rev() {
            let mut df = dx.clone();
            ops::apply_mask(&mut df, &lc.drop2);
            let dh = self.ffn_bwd(&lc.ln2.y, &lc.ffn, &df, l.ffn, grads);
            ops::add_into(&mut dx, &self.ln_bwd(&dh, &lc.ln2, l.ln2, grads));

            let mut da = dx.clone();
            ops::apply_mask(&mut da, &lc.drop1);
            let (mut dq, dkv) = self.attn_bwd(l.attn, grads, &lc.ln1.y, &lc.ln1.y, &lc.attn, &da, &c.enc_segs, heads);
            ops::add_into(&mut dq, &dkv);
            ops::add_into(&mut dx, &self.ln_bwd(&dq, &lc.ln1, l.ln1, grads));
        }
        ops::apply_mask(&mut dx, &c.enc_drop);
        self.embed_bwd(&dx, &c.enc_tokens, &c.enc_positions, lay.enc_pos, grads);
        Ok((total, n_dec))
    }

    fn ln_bwd(&self, dy: &[T], c: &LnCache<T>, l: Ln, grads: &mut [T]) -> Vec<T> {
        let d = self.cfg.width;
        let mut dg = vec![T::zero(); d];
        let mut db = vec![T::zero(); d];
        let dx = ops::layer_norm_bwd(dy, c, self.p(l.g, d), &mut dg, &mut db);
        ops::add_into(&mut grads[l.g..l.g + d], &dg);
        ops::add_into(&mut grads[l.b..l.b + d], &db);
        dx
    }

    fn ffn_bwd(&self, x: &[T], c: &ops::FfnCache<T>, dy: &[T], f: Ffn, grads: &mut [T]) -> Vec<T> {
        let (d, ff) = (self.cfg.width, self.cfg.ff_width);
        // Layout order is w1, b1, w2, b2, contiguous.
        let (_, rest) = grads.split_at_mut(f.w1);
        let (gw1, rest) = rest.split_at_mut(d * ff);
        let (gb1, rest) = rest.split_at_mut(ff);
        let (gw2, rest) = rest.split_at_mut(ff * d);
        let gb2 = &mut rest[..d];
        ops::ffn_bwd(x, c, dy, self.p(f.w1, d * ff), self.p(f.w2, ff * d), [gw1, gb1, gw2, gb2])
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_bwd(
        &self,
        a: Attn,
        grads: &mut [T],
        xq: &[T],
        xkv: &[T],
        cache: &ops::AttnCache<T>,
        dy: &[T],
        segs: &[Segment],
        heads: usize,
    ) -> (Vec<T>, Vec<T>) {
        let dd = self.cfg.width * self.cfg.width;
        // Layout order is q, k, v, o, contiguous.
        let (_, rest) = grads.split_at_mut(a.q);
        let (gq, rest) = rest.split_at_mut(dd);
        let (gk, rest) = rest.split_at_mut(dd);
        let (gv, rest) = rest.split_at_mut(dd);
        let go = &mut rest[..dd];
        let g = AttnGrads { q: gq, k: gk, v: gv, o: go };
        ops::attention_bwd(self.attn_w(a), g, xq, xkv, cache, dy, segs, heads, self.cfg.width)
    }

    fn embed_bwd(&self, dx: &[T], tokens: &[u32], positions: &[usize], pos_off: usize, grads: &mut [T]) {
        let d = self.cfg.width;
        let scale = T::of((d as f64).sqrt());
        for (r, (&t, &p)) in tokens.iter().zip(positions).enumerate() {
            let row = &dx[r * d..(r + 1) * d];
            let e = self.layout.emb + t as usize * d;
            for (g, &v) in grads[e..e + d].iter_mut().zip(row) {
                *g += v * scale;
            }
            let pe = pos_off + p * d;
            ops::add_into(&mut grads[pe..pe + d], row);
        }
    }

    /// Log-probabilities of the next token after `prefix` (without bos),
    /// computed by a full forward pass.
    pub fn step_logits(&self, source: &[u32], prefix: &[u32]) -> Result<Vec<f64>> {
        let group = Group {
            source: source.to_vec(),
            targets: vec![prefix.to_vec()],
        };
        let (_, logits) = self.forward(std::slice::from_ref(&group), None)?;
        let last = logits.len() / self.vocab - 1;
        Ok(ops::log_softmax(&logits[last * self.vocab..]))
    }

    pub fn encode(&self, source: &[u32]) -> Result<Encoded<T>> {
        let d = self.cfg.width;
        if source.is_empty() || source.len() > self.cfg.max_input_len {
            return Err(Error::InvalidInput(format!(
                "source length {} outside 1..={}",
                source.len(),
                self.cfg.max_input_len
            )));
        }
        self.check_tokens(source)?;
        let n = source.len();
        let segs = [Segment {
            q: 0..n,
            kv: 0..n,
            causal: false,
        }];
        let positions: Vec<usize> = (0..n).collect();
        let mut x = self.embed(source, &positions, self.layout.enc_pos);
        for l in &self.layout.enc {
            let ln1 = self.ln(&x, l.ln1);
            let (a, _) = ops::attention(self.attn_w(l.attn), &ln1.y, &ln1.y, &segs, self.cfg.heads, d);
            ops::add_into(&mut x, &a);
            let ln2 = self.ln(&x, l.ln2);
            let (f, _) = self.ffn(&ln2.y, l.ffn);
            ops::add_into(&mut x, &f);
        }
        let memory = self.ln(&x, self.layout.enc_ln).y;
        let dd = d * d;
        let cross_k = self.layout.dec.iter().map(|l| ops::matmul(&memory, n, self.p(l.cross.k, dd), d, d)).collect();
        let cross_v = self.layout.dec.iter().map(|l| ops::matmul(&memory, n, self.p(l.cross.v, dd), d, d)).collect();
        Ok(Encoded { memory, cross_k, cross_v })
    }

    pub fn start_state(&self) -> DecodeState<T> {
        DecodeState {
            k: vec![Vec::new(); self.cfg.layers],
            v: vec![Vec::new(); self.cfg.layers],
            len: 0,
        }
    }

    /// Feeds one token per state (bos first) and returns next-token
    /// log-probabilities for each.
    pub fn step(&self, enc: &Encoded<T>, states: &mut [DecodeState<T>], tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        let d = self.cfg.width;
        let dd = d * d;
        let heads = self.cfg.heads;
        let h = states.len();
        if tokens.len() != h {
            return Err(Error::DimensionMismatch { expected: h, got: tokens.len() });
        }
        self.check_tokens(tokens)?;
        if let Some(s) = states.iter().find(|s| s.len > self.cfg.max_target_len) {
            return Err(Error::InvalidInput(format!("decode position {} beyond {}", s.len, self.cfg.max_target_len)));
        }
        let positions: Vec<usize> = states.iter().map(|s| s.len).collect();
        let mut x = self.embed(tokens, &positions, self.layout.dec_pos);
        let n_mem = enc.memory.len() / d;
        for (li, l) in self.layout.dec.iter().enumerate() {
            let ln1 = self.ln(&x, l.ln1);
            let q = ops::matmul(&ln1.y, h, self.p(l.self_attn.q, dd), d, d);
            let k = ops::matmul(&ln1.y, h, self.p(l.self_attn.k, dd), d, d);
            let v = ops::matmul(&ln1.y, h, self.p(l.self_attn.v, dd), d, d);
            // Gather every hypothesis' cache into one key/value block.
            let mut kk = Vec::new();
            let mut vv = Vec::new();
            let mut segs = Vec::with_capacity(h);
            for (i, s) in states.iter_mut().enumerate() {
                s.k[li].extend_from_slice(&k[i * d..(i + 1) * d]);
                s.v[li].extend_from_slice(&v[i * d..(i + 1) * d]);
                let start = kk.len() / d;
                kk.extend_from_slice(&s.k[li]);
                vv.extend_from_slice(&s.v[li]);
                segs.push(Segment {
                    q: i..i + 1,
                    kv: start..kk.len() / d,
                    causal: false,
                });
            }
            let (a, _) = ops::attention_with_kv(self.attn_w(l.self_attn), q, kk, vv, &segs, heads, d);
            ops::add_into(&mut x, &a);
            let ln2 = self.ln(&x, l.ln2);
            let q = ops::matmul(&ln2.y, h, self.p(l.cross.q, dd), d, d);
            let segs: Vec<Segment> = (0..h)
                .map(|i| Segment {
                    q: i..i + 1,
                    kv: 0..n_mem,
                    causal: false,
                })
                .collect();
            let (c, _) = ops::attention_with_kv(self.attn_w(l.cross), q, enc.cross_k[li].clone(), enc.cross_v[li].clone(), &segs, heads, d);
            ops::add_into(&mut x, &c);
            let ln3 = self.ln(&x, l.ln3);
            let (f, _) = self.ffn(&ln3.y, l.ffn);
            ops::add_into(&mut x, &f);
        }
        for s in states.iter_mut() {
            s.len += 1;
        }
        let out = self.ln(&x, self.layout.dec_ln).y;
        let mut logits = vec![T::zero(); h * self.vocab];
        T::gemm(h, d, self.vocab, T::one(), &out, false, self.p(self.layout.emb, self.vocab * d), true, T::zero(), &mut logits);
        Ok(logits.chunks_exact(self.vocab).map(ops::log_softmax).collect())
    }

    /// Greedy decoding up to the configured target length; returns the
    /// tokens without bos/eos.
    pub fn greedy(&self, source: &[u32]) -> Result<Vec<u32>> {
        let enc = self.encode(source)?;
        let mut state = [self.start_state()];
        let mut tok = BOS;
        let mut out = Vec::new();
        loop {
            let lp = self.step(&enc, &mut state, &[tok])?.remove(0);
            if out.len() == self.cfg.max_target_len {
                break;
            }
            tok = lp
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i as u32)
                .expect("non-empty vocabulary");
            if tok == EOS {
                break;
            }
            out.push(tok);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            width: 8,
            ff_width: 12,
            dropout: 0.0,
            max_input_len: 8,
            max_target_len: 6,
            seed: 3,
        }
    }

    fn batch() -> Vec<Group> {
        vec![
            Group {
                source: vec![5, 6, 7],
                targets: vec![vec![8, 9], vec![10, 5, 6]],
            },
            Group {
                source: vec![9, 4, 8, 11, 3],
                targets: vec![vec![7]],
            },
        ]
    }

    #[test]
    fn finite_difference_gradients() {
        let m: Transformer<f64> = Transformer::new(tiny_cfg(), 12).unwrap();
        let mut grads = vec![0.0; m.params().len()];
        let (loss, n) = m.loss_and_grad(&batch(), None, &mut grads).unwrap();
        assert!((loss / n as f64 - m.loss(&batch()).unwrap().0 / n as f64).abs() < 1e-12);
        let names = [
            "embedding",
            "encoder.position",
            "decoder.position",
            "encoder.0.attn.query",
            "encoder.1.attn.value",
            "decoder.0.self_attn.key",
            "decoder.1.cross_attn.query",
            "decoder.0.cross_attn.value",
            "decoder.1.self_attn.output",
            "encoder.0.ffn.w1",
            "decoder.1.ffn.b2",
            "encoder.1.ln2.gain",
            "decoder.0.ln3.bias",
            "encoder.final_ln.gain",
            "decoder.final_ln.bias",
        ];
        let eps = 1e-6;
        for name in names {
            let t = m.layout().tensor(name).unwrap().clone();
            for i in [0, t.len() / 3, t.len() - 1] {
                let idx = t.offset + i;
                let mut mp = m.clone();
                mp.params_mut()[idx] += eps;
                let mut mm = m.clone();
                mm.params_mut()[idx] -= eps;
                let lp = mp.loss(&batch()).unwrap().0 / n as f64;
                let lm = mm.loss(&batch()).unwrap().0 / n as f64;
                let fd = (lp - lm) / (2.0 * eps);
                let g = grads[idx];
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-7);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {g} vs numeric {fd}");
            }
        }
    }

    #[test]
    fn incremental_steps_match_full_forward() {
        let m: Transformer<f64> = Transformer::new(tiny_cfg(), 12).unwrap();
        let src = [5u32, 6, 7, 3];
        let enc = m.encode(&src).unwrap();
        let mut states = vec![m.start_state()];
        let prefix = [8u32, 9, 10];
        let mut fed = vec![BOS];
        fed.extend(&prefix);
        for (i, &tok) in fed.iter().enumerate() {
            let inc = m.step(&enc, &mut states, &[tok]).unwrap().remove(0);
            let full = m.step_logits(&src, &prefix[..i]).unwrap();
            for (a, b) in inc.iter().zip(&full) {
                assert!((a - b).abs() < 1e-10);
            }
            let total: f64 = inc.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn causal_mask_blocks_future_targets() {
        let m: Transformer<f64> = Transformer::new(tiny_cfg(), 12).unwrap();
        let src = [5u32, 6, 7];
        let a = [8u32, 9, 10, 11];
        let mut b = a;
        b[2] = 4;
        for j in 0..=2 {
            assert_eq!(m.step_logits(&src, &a[..j]).unwrap(), m.step_logits(&src, &b[..j]).unwrap());
        }
        assert_ne!(m.step_logits(&src, &a[..3]).unwrap(), m.step_logits(&src, &b[..3]).unwrap());
    }

    #[test]
    fn batch_order_does_not_change_mean_loss() {
        let m: Transformer<f64> = Transformer::new(tiny_cfg(), 12).unwrap();
        let b = batch();
        let mut r = b.clone();
        r.reverse();
        r[1].targets.reverse();
        let (x, n) = m.loss(&b).unwrap();
        let (y, k) = m.loss(&r).unwrap();
        assert_eq!(n, k);
        assert!((x / n as f64 - y / k as f64).abs() < 1e-6);
    }

    #[test]
    fn oversize_inputs_are_rejected() {
        let m: Transformer<f64> = Transformer::new(tiny_cfg(), 12).unwrap();
        let long = Group {
            source: vec![5; 9],
            targets: vec![vec![6]],
        };
        assert!(m.loss(&[long]).is_err());
        let long_target = Group {
            source: vec![5],
            targets: vec![vec![6; 7]],
        };
        assert!(m.loss(&[long_target]).is_err());
        assert!(m.step_logits(&[40], &[]).is_err());
    }
}
