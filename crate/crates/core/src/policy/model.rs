//! Forward pass, reverse pass and incremental decoding.

use super::kernels::{
    attend_row, attend_row_backward, gelu_grad_slice, gelu_slice, layer_norm, layer_norm_backward,
    log_softmax, matmul, matmul_backward, Heads, Keys, LnCache,
};
use super::{PolicyParams, Scalar};
use crate::error::{CbrlError, Result};

/// Keys visible to one row: `[prefix_start, prefix_end)` followed by
/// `[seg_start, row]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnMask {
    pub prefix_start: usize,
    pub prefix_end: usize,
    pub seg_start: usize,
}

impl AttnMask {
    pub fn causal(seg_start: usize) -> Self {
        Self {
            prefix_start: 0,
            prefix_end: 0,
            seg_start,
        }
    }

    pub fn keys(&self, row: usize) -> Keys {
        Keys {
            prefix: (self.prefix_start, self.prefix_end),
            start: self.seg_start,
            stride: 1,
            count: row + 1 - self.seg_start,
        }
    }
}

/// `(row, token)`: the logits at `row` are scored against `token`.
pub type Target = (usize, u32);

/// Rows of one packed forward pass. Several sequences can share a batch;
/// a prompt can be stored once and read by every continuation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeqBatch {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    pub masks: Vec<AttnMask>,
}

impl SeqBatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends an independent sequence and returns the row of its first token.
    pub fn push_sequence(&mut self, tokens: &[u32]) -> usize {
        let base = self.len();
        for (i, &t) in tokens.iter().enumerate() {
            self.tokens.push(t);
            self.positions.push(i);
            self.masks.push(AttnMask::causal(base));
        }
        base
    }

    /// Appends `prompt` once followed by each continuation. Returns, per
    /// continuation, the targets that score each of its tokens. The last
    /// token of a continuation is scored but never fed.
    pub fn push_shared(&mut self, prompt: &[u32], continuations: &[&[u32]]) -> Vec<Vec<Target>> {
        assert!(!prompt.is_empty(), "shared prefix must not be empty");
        let base = self.push_sequence(prompt);
        let last_prompt = base + prompt.len() - 1;
        let mut out = Vec::with_capacity(continuations.len());
        for cont in continuations {
            let start = self.len();
            let mut targets = Vec::with_capacity(cont.len());
            for (i, &t) in cont.iter().enumerate() {
                let row = if i == 0 { last_prompt } else { start + i - 1 };
                targets.push((row, t));
            }
            for (i, &t) in cont.iter().take(cont.len().saturating_sub(1)).enumerate() {
                self.tokens.push(t);
                self.positions.push(prompt.len() + i);
                self.masks.push(AttnMask {
                    prefix_start: base,
                    prefix_end: base + prompt.len(),
                    seg_start: start,
                });
            }
            out.push(targets);
        }
        out
    }

    pub fn shared_prefix(prompt: &[u32], continuations: &[&[u32]]) -> (Self, Vec<Vec<Target>>) {
        let mut b = Self::new();
        let t = b.push_shared(prompt, continuations);
        (b, t)
    }

    fn keys(&self) -> Vec<Keys> {
        self.masks.iter().enumerate().map(|(r, m)| m.keys(r)).collect()
    }

    /// Number of positions a sequence needs, counting the final scored token.
    pub fn check_context(&self, context: usize, targets: &[Target]) -> Result<()> {
        let mut need = self.positions.iter().map(|p| p + 1).max().unwrap_or(0);
        for &(row, _) in targets {
            need = need.max(self.positions[row] + 2);
        }
        if need > context {
            return Err(CbrlError::ContextOverflow { len: need, context });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenStat<T> {
    pub logp: T,
    pub entropy: T,
}

#[derive(Default)]
struct LayerActs<T> {
    x_in: Vec<T>,
    ln1: LnCache<T>,
    h1: Vec<T>,
    probs: Vec<T>,
    probs_off: Vec<usize>,
    att: Vec<T>,
    x_mid: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

#[derive(Default)]
struct Acts<T> {
    layers: Vec<LayerActs<T>>,
    lnf: LnCache<T>,
    hf: Vec<T>,
}

/// Runs new rows through the stack. `kv[l]` holds the fused `[q|k|v]` rows
/// already processed by layer `l`; new rows are appended and attend to
/// `keys`, expressed in buffer rows.
fn run<T: Scalar>(
    p: &PolicyParams<T>,
    kv: &mut [Vec<T>],
    tokens: &[u32],
    positions: &[usize],
    keys: &[Keys],
    mut rec: Option<&mut Acts<T>>,
) -> Vec<T> {
    let cfg = p.config;
    let (d, f) = (cfg.d_model, cfg.d_ff());
    let lay = &p.layout;
    let w = |off: usize, n: usize| &p.data[off..off + n];
    let n = tokens.len();
    let geo = Heads {
        d,
        heads: cfg.heads,
    };

    let mut x = vec![T::zero(); n * d];
    for (r, xr) in x.chunks_exact_mut(d).enumerate() {
        let te = w(lay.tok_emb + tokens[r] as usize * d, d);
        let pe = w(lay.pos_emb + positions[r] * d, d);
        for k in 0..d {
            xr[k] = te[k] + pe[k];
        }
    }

    for (l, lo) in lay.layers.iter().enumerate() {
        let mut la = LayerActs::default();
        let record = rec.is_some();
        let mut h1 = vec![T::zero(); n * d];
        layer_norm(
            &x,
            w(lo.ln1_g, d),
            w(lo.ln1_b, d),
            d,
            &mut h1,
            record.then_some(&mut la.ln1),
        );
        let base = kv[l].len() / (3 * d);
        let mut qkv = vec![T::zero(); n * 3 * d];
        matmul(&h1, w(lo.w_qkv, d * 3 * d), None, d, 3 * d, &mut qkv);
        kv[l].extend_from_slice(&qkv);
        let mut att = vec![T::zero(); n * d];
        for (i, ar) in att.chunks_exact_mut(d).enumerate() {
            let row = base + i;
            if record {
                la.probs_off.push(la.probs.len());
            }
            attend_row(
                &kv[l],
                geo,
                row,
                &keys[i],
                ar,
                record.then_some(&mut la.probs),
            );
        }
        let mut x_mid = vec![T::zero(); n * d];
        matmul(&att, w(lo.w_o, d * d), None, d, d, &mut x_mid);
        for (a, &b) in x_mid.iter_mut().zip(&x) {
            *a += b;
        }
        let mut h2 = vec![T::zero(); n * d];
        layer_norm(
            &x_mid,
            w(lo.ln2_g, d),
            w(lo.ln2_b, d),
            d,
            &mut h2,
            record.then_some(&mut la.ln2),
        );
        let mut u = vec![T::zero(); n * f];
        matmul(&h2, w(lo.w_1, d * f), Some(w(lo.b_1, f)), d, f, &mut u);
        let mut g = vec![T::zero(); n * f];
        gelu_slice(&u, &mut g);
        let mut x_out = vec![T::zero(); n * d];
        matmul(&g, w(lo.w_2, f * d), Some(w(lo.b_2, d)), f, d, &mut x_out);
        for (a, &b) in x_out.iter_mut().zip(&x_mid) {
            *a += b;
        }
        if let Some(acts) = rec.as_deref_mut() {
            la.x_in = std::mem::take(&mut x);
            la.h1 = h1;
            la.att = att;
            la.x_mid = x_mid;
            la.h2 = h2;
            la.u = u;
            la.g = g;
            acts.layers.push(la);
        }
        x = x_out;
    }

    let mut hf = vec![T::zero(); n * d];
    let lnf_cache = rec.as_deref_mut().map(|a| &mut a.lnf);
    layer_norm(&x, w(lay.lnf_g, d), w(lay.lnf_b, d), d, &mut hf, lnf_cache);
    if let Some(acts) = rec {
        acts.hf = hf.clone();
    }
    hf
}

fn project<T: Scalar>(p: &PolicyParams<T>, h: &[T]) -> Vec<T> {
    let (d, v) = (p.config.d_model, p.config.vocab());
    let lay = &p.layout;
    let mut z = vec![T::zero(); v];
    matmul(
        h,
        &p.data[lay.w_out..lay.w_out + d * v],
        Some(&p.data[lay.b_out..lay.b_out + v]),
        d,
        v,
        &mut z,
    );
    z
}

fn stat_of<T: Scalar>(logits: &[T], token: u32) -> (TokenStat<T>, Vec<T>) {
    let lp = log_softmax(logits);
    let entropy = -lp.iter().map(|&l| l.exp() * l).sum::<T>();
    (
        TokenStat {
            logp: lp[token as usize],
            entropy,
        },
        lp,
    )
}

fn validate<T: Scalar>(p: &PolicyParams<T>, batch: &SeqBatch, targets: &[Target]) -> Result<()> {
    batch.check_context(p.config.context, targets)?;
    let v = p.config.vocab() as u32;
    if batch.tokens.iter().chain(targets.iter().map(|(_, t)| t)).any(|&t| t >= v) {
        return Err(CbrlError::ShapeMismatch("token id outside vocabulary".into()));
    }
    if targets.iter().any(|&(r, _)| r >= batch.len()) {
        return Err(CbrlError::ShapeMismatch("target row outside batch".into()));
    }
    Ok(())
}

/// Log-probability and entropy of the next-token distribution for each target.
pub fn token_stats<T: Scalar>(
    p: &PolicyParams<T>,
    batch: &SeqBatch,
    targets: &[Target],
) -> Result<Vec<TokenStat<T>>> {
    validate(p, batch, targets)?;
    let d = p.config.d_model;
    let mut kv = vec![Vec::new(); p.config.layers];
    let hf = run(p, &mut kv, &batch.tokens, &batch.positions, &batch.keys(), None);
    Ok(targets
        .iter()
        .map(|&(r, t)| stat_of(&project(p, &hf[r * d..(r + 1) * d]), t).0)
        .collect())
}

pub fn logprobs<T: Scalar>(p: &PolicyParams<T>, batch: &SeqBatch, targets: &[Target]) -> Result<Vec<T>> {
    Ok(token_stats(p, batch, targets)?
        .into_iter()
        .map(|s| s.logp)
        .collect())
}

fn pair_mut<T>(buf: &mut [T], a: (usize, usize), b: (usize, usize)) -> (&mut [T], &mut [T]) {
    if a.0 < b.0 {
        let (lo, hi) = buf.split_at_mut(b.0);
        (&mut lo[a.0..a.0 + a.1], &mut hi[..b.1])
    } else {
        let (lo, hi) = buf.split_at_mut(a.0);
        (&mut hi[..a.1], &mut lo[b.0..b.0 + b.1])
    }
}

/// Runs the forward pass, hands the per-target statistics to `objective`,
/// which returns the loss and its partial derivatives `(dL/dlogp, dL/dH)`
/// per target, then adds `dL/dθ` into `grad`. Returns the loss.
pub fn accumulate_grad<T, F>(
    p: &PolicyParams<T>,
    batch: &SeqBatch,
    targets: &[Target],
    objective: F,
    grad: &mut [T],
) -> Result<T>
where
    T: Scalar,
    F: FnOnce(&[TokenStat<T>]) -> (T, Vec<(T, T)>),
{
    validate(p, batch, targets)?;
    if grad.len() != p.len() {
        return Err(CbrlError::ShapeMismatch(format!(
            "gradient has {} entries, parameters {}",
            grad.len(),
            p.len()
        )));
    }
    let cfg = p.config;
    let (d, f, v) = (cfg.d_model, cfg.d_ff(), cfg.vocab());
    let lay = &p.layout;
    let n = batch.len();
    let geo = Heads {
        d,
        heads: cfg.heads,
    };
    let w = |off: usize, len: usize| &p.data[off..off + len];

    let mut acts = Acts::default();
    let mut kv = vec![Vec::new(); cfg.layers];
    let hf = run(
        p,
        &mut kv,
        &batch.tokens,
        &batch.positions,
        &batch.keys(),
        Some(&mut acts),
    );
    let mut stats = Vec::with_capacity(targets.len());
    let mut lps = Vec::with_capacity(targets.len());
    for &(r, t) in targets {
        let (s, lp) = stat_of(&project(p, &hf[r * d..(r + 1) * d]), t);
        stats.push(s);
        lps.push(lp);
    }
    let (loss, dstats) = objective(&stats);
    if dstats.len() != targets.len() {
        return Err(CbrlError::ShapeMismatch(
            "objective returned wrong number of partials".into(),
        ));
    }

    let mut dhf = vec![T::zero(); n * d];
    let mut dz = vec![T::zero(); v];
    for (i, &(r, t)) in targets.iter().enumerate() {
        let (gl, gh) = dstats[i];
        if gl == T::zero() && gh == T::zero() {
            continue;
        }
        let lp = &lps[i];
        let h = stats[i].entropy;
        for k in 0..v {
            let pk = lp[k].exp();
            dz[k] = -gl * pk - gh * pk * (lp[k] + h);
        }
        dz[t as usize] += gl;
        let (dw, db) = pair_mut(grad, (lay.w_out, d * v), (lay.b_out, v));
        matmul_backward(
            &hf[r * d..(r + 1) * d],
            w(lay.w_out, d * v),
            &dz,
            d,
            v,
            Some(&mut dhf[r * d..(r + 1) * d]),
            dw,
            Some(db),
        );
    }

    let mut dx = vec![T::zero(); n * d];
    {
        let (dg, db) = pair_mut(grad, (lay.lnf_g, d), (lay.lnf_b, d));
        layer_norm_backward(&dhf, &acts.lnf, w(lay.lnf_g, d), d, &mut dx, dg, db);
    }

    for (l, lo) in lay.layers.iter().enumerate().rev() {
        let la = &acts.layers[l];
        let mut dx_mid = dx.clone();
        let mut dg = vec![T::zero(); n * f];
        {
            let (dw, db) = pair_mut(grad, (lo.w_2, f * d), (lo.b_2, d));
            matmul_backward(&la.g, w(lo.w_2, f * d), &dx, f, d, Some(&mut dg), dw, Some(db));
        }
        let mut gg = vec![T::zero(); n * f];
        gelu_grad_slice(&la.u, &mut gg);
        for (g, &s) in dg.iter_mut().zip(&gg) {
            *g *= s;
        }
        let mut dh2 = vec![T::zero(); n * d];
        {
            let (dw, db) = pair_mut(grad, (lo.w_1, d * f), (lo.b_1, f));
            matmul_backward(&la.h2, w(lo.w_1, d * f), &dg, d, f, Some(&mut dh2), dw, Some(db));
        }
        {
            let (dgn, dbn) = pair_mut(grad, (lo.ln2_g, d), (lo.ln2_b, d));
            layer_norm_backward(&dh2, &la.ln2, w(lo.ln2_g, d), d, &mut dx_mid, dgn, dbn);
        }
        let mut datt = vec![T::zero(); n * d];
        matmul_backward(
            &la.att,
            w(lo.w_o, d * d),
            &dx_mid,
            d,
            d,
            Some(&mut datt),
            &mut grad[lo.w_o..lo.w_o + d * d],
            None,
        );
        let qkv = &kv[l];
        let mut dqkv = vec![T::zero(); n * 3 * d];
        for r in 0..n {
            let keys = batch.masks[r].keys(r);
            let cnt = keys.len();
            let off = la.probs_off[r];
            attend_row_backward(
                qkv,
                geo,
                r,
                &keys,
                &la.probs[off..off + cnt * cfg.heads],
                &datt[r * d..(r + 1) * d],
                &mut dqkv,
            );
        }
        let mut dh1 = vec![T::zero(); n * d];
        matmul_backward(
            &la.h1,
            w(lo.w_qkv, d * 3 * d),
            &dqkv,
            d,
            3 * d,
            Some(&mut dh1),
            &mut grad[lo.w_qkv..lo.w_qkv + d * 3 * d],
            None,
        );
        {
            let (dgn, dbn) = pair_mut(grad, (lo.ln1_g, d), (lo.ln1_b, d));
            layer_norm_backward(&dh1, &la.ln1, w(lo.ln1_g, d), d, &mut dx_mid, dgn, dbn);
        }
        dx = dx_mid;
    }

    for (r, dr) in dx.chunks_exact(d).enumerate() {
        let te = lay.tok_emb + batch.tokens[r] as usize * d;
        let pe = lay.pos_emb + batch.positions[r] * d;
        for k in 0..d {
            grad[te + k] += dr[k];
            grad[pe + k] += dr[k];
        }
    }
    Ok(loss)
}

/// Incremental decoder that caches keys and values. A shared prefix is fed
/// once, then [`Decoder::fork`] splits it into streams advanced in
/// lock-step. Logits match those of a full forward pass over the same
/// tokens bit for bit.
#[derive(Clone)]
pub struct Decoder<'a, T: Scalar> {
    params: &'a PolicyParams<T>,
    kv: Vec<Vec<T>>,
    prefix: usize,
    streams: usize,
    steps: usize,
}

impl<'a, T: Scalar> Decoder<'a, T> {
    pub fn new(params: &'a PolicyParams<T>) -> Self {
        Self {
            params,
            kv: vec![Vec::new(); params.config.layers],
            prefix: 0,
            streams: 0,
            steps: 0,
        }
    }

    /// Tokens seen by each stream (or by the prefix before forking).
    pub fn len(&self) -> usize {
        self.prefix + self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn context(&self) -> usize {
        self.params.config.context
    }

    pub fn streams(&self) -> usize {
        self.streams
    }

    fn check(&self, tokens: &[u32], extra: usize) -> Result<()> {
        let ctx = self.context();
        if self.len() + extra > ctx {
            return Err(CbrlError::ContextOverflow {
                len: self.len() + extra,
                context: ctx,
            });
        }
        if tokens.iter().any(|&t| t as usize >= self.params.config.vocab()) {
            return Err(CbrlError::ShapeMismatch("token id outside vocabulary".into()));
        }
        Ok(())
    }

    fn logits_of_rows(&self, hf: &[T]) -> Vec<Vec<T>> {
        let d = self.params.config.d_model;
        hf.chunks_exact(d).map(|h| project(self.params, h)).collect()
    }

    /// Extends the shared prefix and returns the logits after its last token.
    pub fn feed(&mut self, tokens: &[u32]) -> Result<Vec<T>> {
        if self.streams > 0 {
            return Err(CbrlError::ShapeMismatch("prefix fed after fork".into()));
        }
        if tokens.is_empty() {
            return Err(CbrlError::ShapeMismatch("decoder fed no tokens".into()));
        }
        self.check(tokens, tokens.len())?;
        let base = self.prefix;
        let positions: Vec<usize> = (base..base + tokens.len()).collect();
        let keys: Vec<Keys> = (0..tokens.len())
            .map(|i| AttnMask::causal(0).keys(base + i))
            .collect();
        let hf = run(self.params, &mut self.kv, tokens, &positions, &keys, None);
        self.prefix += tokens.len();
        let d = self.params.config.d_model;
        Ok(project(self.params, &hf[hf.len() - d..]))
    }

    /// Splits the prefix into `n` independent continuations.
    pub fn fork(&mut self, n: usize) -> Result<()> {
        if self.streams > 0 || n == 0 || self.prefix == 0 {
            return Err(CbrlError::ShapeMismatch("fork needs a fed prefix and n > 0".into()));
        }
        self.streams = n;
        Ok(())
    }

    /// Appends one token to every stream and returns each stream's logits.
    pub fn step(&mut self, tokens: &[u32]) -> Result<Vec<Vec<T>>> {
        if tokens.len() != self.streams || self.streams == 0 {
            return Err(CbrlError::ShapeMismatch(format!(
                "step needs {} tokens, got {}",
                self.streams,
                tokens.len()
            )));
        }
        self.check(tokens, 1)?;
        let n = self.streams;
        let row0 = self.prefix + self.steps * n;
        let positions = vec![self.prefix + self.steps; n];
        let keys: Vec<Keys> = (0..n)
            .map(|j| Keys {
                prefix: (0, self.prefix),
                start: self.prefix + j,
                stride: n,
                count: self.steps + 1,
            })
            .collect();
        debug_assert_eq!(self.kv[0].len() / (3 * self.params.config.d_model), row0);
        let hf = run(self.params, &mut self.kv, tokens, &positions, &keys, None);
        self.steps += 1;
        Ok(self.logits_of_rows(&hf))
    }
}
