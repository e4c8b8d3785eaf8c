use std::sync::atomic::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::{dot, matmul, matmul_at_acc, matmul_bt, Mat};
use super::params::{LayerParams, ModelParameters};
use super::relpos::bucket_table;
use super::{Scalar, Transformer};
use crate::assembly::PmlmInstance;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout off; the tape cannot be used for backward.
    Eval,
    /// Dropout on with masks drawn from `seed`; intermediates recorded.
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Top-layer hidden states, one row per token.
    pub hidden: Mat<T>,
    pub logit_rows: Vec<usize>,
    /// Vocabulary logits for `logit_rows`, in that order.
    pub logits: Mat<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn logits_at(&self, row: usize) -> Option<&[T]> {
        self.logit_rows
            .iter()
            .position(|&r| r == row)
            .map(|i| self.logits.row(i))
    }
}

#[derive(Debug, Clone)]
struct NormTape<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
struct LayerTape<T> {
    input: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    probs: Vec<Mat<T>>,
    context: Mat<T>,
    attn_drop: Option<Vec<T>>,
    ln1: NormTape<T>,
    h1: Mat<T>,
    pre_act: Mat<T>,
    act: Mat<T>,
    ffn_drop: Option<Vec<T>>,
    ln2: NormTape<T>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape<T> {
    recorded: bool,
    token_ids: Vec<u32>,
    position_ids: Vec<usize>,
    segment_ids: Vec<u8>,
    buckets: Vec<usize>,
    emb_drop: Option<Vec<T>>,
    layers: Vec<LayerTape<T>>,
    top: Mat<T>,
    logit_rows: Vec<usize>,
}

impl<T: Scalar> ForwardTape<T> {
    /// Row-softmax attention weights of `head` in `layer`.
    pub fn attention_probs(&self, layer: usize, head: usize) -> &Mat<T> {
        &self.layers[layer].probs[head]
    }

    /// Normalized (pre gain/bias) outputs of the two layer norms of `layer`.
    pub fn normalized(&self, layer: usize) -> (&Mat<T>, &Mat<T>) {
        (&self.layers[layer].ln1.xhat, &self.layers[layer].ln2.xhat)
    }

    /// Output of `layer`'s attention sublayer before dropout and residual.
    pub fn attention_context(&self, layer: usize) -> &Mat<T> {
        &self.layers[layer].context
    }
}

fn dropout<T: Scalar>(x: &mut Mat<T>, p: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    for (v, &m) in x.data.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

fn apply_mask<T: Scalar>(x: &mut Mat<T>, mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.data.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn layer_norm<T: Scalar>(z: &Mat<T>, gain: &Mat<T>, bias: &Mat<T>) -> (Mat<T>, NormTape<T>) {
    let d = T::of(z.cols as f64);
    let eps = T::of(LN_EPS);
    let mut xhat = z.zeros_like();
    let mut out = z.zeros_like();
    let mut inv_std = Vec::with_capacity(z.rows);
    for r in 0..z.rows {
        let row = z.row(r);
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for c in 0..z.cols {
            let xh = (row[c] - mean) * inv;
            xhat.data[r * z.cols + c] = xh;
            out.data[r * z.cols + c] = xh * gain.data[c] + bias.data[c];
        }
    }
    (out, NormTape { xhat, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Mat<T>,
    tape: &NormTape<T>,
    gain: &Mat<T>,
    d_gain: &mut Mat<T>,
    d_bias: &mut Mat<T>,
) -> Mat<T> {
    let cols = dy.cols;
    let d = T::of(cols as f64);
    let mut dz = dy.zeros_like();
    let mut dxhat = vec![T::zero(); cols];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = tape.xhat.row(r);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..cols {
            d_gain.data[c] += dyr[c] * xh[c];
            d_bias.data[c] += dyr[c];
            dxhat[c] = dyr[c] * gain.data[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat /= d;
        mean_dxhat_xhat /= d;
        let inv = tape.inv_std[r];
        let out = dz.row_mut(r);
        for c in 0..cols {
            out[c] = inv * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dz
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn linear<T: Scalar>(x: &Mat<T>, w: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut y = matmul(x, w);
    y.add_row_vector(&b.data);
    y
}

/// `dW += xᵀ dy`, `db += Σ dy`, returns `dy Wᵀ`.
fn linear_backward<T: Scalar>(
    x: &Mat<T>,
    w: &Mat<T>,
    dy: &Mat<T>,
    dw: &mut Mat<T>,
    db: &mut Mat<T>,
) -> Mat<T> {
    matmul_at_acc(dw, x, dy);
    dy.accumulate_column_sums(&mut db.data);
    matmul_bt(dy, w)
}

impl<T: Scalar> Transformer<T> {
    fn check_ids(&self, inst: &PmlmInstance) -> Result<()> {
        let c = &self.config;
        let n = inst.len();
        if inst.position_ids.len() != n
            || inst.segment_ids.len() != n
            || inst.attention_mask.size() != n
        {
            return Err(Error::Inconsistent(
                "token, position, segment and mask sizes differ".into(),
            ));
        }
        if let Some(&t) = inst.token_ids.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::IdOutOfRange {
                table: "token",
                id: t as usize,
                size: c.vocab_size,
            });
        }
        if let Some(&p) = inst.position_ids.iter().find(|&&p| p >= c.max_positions) {
            return Err(Error::IdOutOfRange {
                table: "position",
                id: p,
                size: c.max_positions,
            });
        }
        if let Some(&s) = inst.segment_ids.iter().find(|&&s| s > 1) {
            return Err(Error::IdOutOfRange {
                table: "segment",
                id: s as usize,
                size: 2,
            });
        }
        Ok(())
    }

    /// `H⁰[t] = E[token] + Pos[position] + Seg[segment]`.
    pub fn embed(&self, inst: &PmlmInstance) -> Result<Mat<T>> {
        self.check_ids(inst)?;
        let p = &self.params;
        let d = self.config.hidden_size;
        let mut h = Mat::zeros(inst.len(), d);
        for t in 0..inst.len() {
            let tok = p.token_embedding.row(inst.token_ids[t] as usize);
            let pos = p.position_embedding.row(inst.position_ids[t]);
            let seg = p.segment_embedding.row(inst.segment_ids[t] as usize);
            for (c, out) in h.row_mut(t).iter_mut().enumerate() {
                *out = tok[c] + pos[c] + seg[c];
            }
        }
        Ok(h)
    }

    fn attention(
        &self,
        layer: usize,
        q: &Mat<T>,
        k: &Mat<T>,
        v: &Mat<T>,
        inst: &PmlmInstance,
        buckets: &[usize],
    ) -> Result<(Vec<Mat<T>>, Mat<T>)> {
        let c = &self.config;
        let n = inst.len();
        let dk = c.head_size();
        let scale = T::one() / T::of(dk as f64).sqrt();
        let mut probs = Vec::with_capacity(c.heads);
        let mut context = Mat::zeros(n, c.hidden_size);
        for head in 0..c.heads {
            let off = head * dk;
            let mut pm = Mat::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[off..off + dk];
                let allow = inst.attention_mask.row(i);
                if !allow.iter().any(|&a| a) {
                    return Err(Error::NoAttendableKey { row: i });
                }
                let row = pm.row_mut(i);
                // disallowed keys are left at exactly zero weight, the limit
                // of an additive -inf score
                let mut max = T::neg_infinity();
                for j in (0..n).filter(|&j| allow[j]) {
                    let mut s = dot(qi, &k.row(j)[off..off + dk]) * scale;
                    if c.use_relative_bias {
                        s += self.params.relative_bias.at(head, buckets[i * n + j]);
                    }
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = T::zero();
                for (s, _) in row.iter_mut().zip(allow).filter(|(_, &a)| a) {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
                let ctx = &mut context.row_mut(i)[off..off + dk];
                for (j, &w) in pm.row(i).iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    for (o, &vv) in ctx.iter_mut().zip(&v.row(j)[off..off + dk]) {
                        *o += w * vv;
                    }
                }
            }
            if !pm.is_finite() {
                return Err(Error::NonFinite(format!("layer {layer} attention head {head}")));
            }
            probs.push(pm);
        }
        Ok((probs, context))
    }

    fn layer_forward(
        &self,
        l: usize,
        x: Mat<T>,
        inst: &PmlmInstance,
        buckets: &[usize],
        p_drop: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Mat<T>, LayerTape<T>)> {
        let lp = &self.params.layers[l];
        let q = linear(&x, &lp.query_w, &lp.query_b);
        let k = linear(&x, &lp.key_w, &lp.key_b);
        let v = linear(&x, &lp.value_w, &lp.value_b);
        let (probs, context) = self.attention(l, &q, &k, &v, inst, buckets)?;
        let mut attn = linear(&context, &lp.out_w, &lp.out_b);
        let attn_drop = dropout(&mut attn, p_drop, rng.as_deref_mut());
        attn.add_assign(&x);
        let (h1, ln1) = layer_norm(&attn, &lp.ln1_gain, &lp.ln1_bias);
        let pre_act = linear(&h1, &lp.ffn_in_w, &lp.ffn_in_b);
        let act = Mat {
            rows: pre_act.rows,
            cols: pre_act.cols,
            data: pre_act.data.iter().map(|&u| gelu(u)).collect(),
        };
        let mut ffn = linear(&act, &lp.ffn_out_w, &lp.ffn_out_b);
        let ffn_drop = dropout(&mut ffn, p_drop, rng.as_deref_mut());
        ffn.add_assign(&h1);
        let (h2, ln2) = layer_norm(&ffn, &lp.ln2_gain, &lp.ln2_bias);
        if !h2.is_finite() {
            return Err(Error::NonFinite(format!("layer {l}")));
        }
        let tape = LayerTape {
            input: x,
            q,
            k,
            v,
            probs,
            context,
            attn_drop,
            ln1,
            h1,
            pre_act,
            act,
            ffn_drop,
            ln2,
        };
        Ok((h2, tape))
    }

    /// Runs every layer and returns logits for `logit_rows`.
    pub fn forward(
        &self,
        inst: &PmlmInstance,
        logit_rows: &[usize],
        mode: Mode,
    ) -> Result<(ForwardOutput<T>, ForwardTape<T>)> {
        self.passes.fetch_add(1, Ordering::Relaxed);
        let c = &self.config;
        if let Some(&r) = logit_rows.iter().find(|&&r| r >= inst.len()) {
            return Err(Error::IdOutOfRange {
                table: "logit row",
                id: r,
                size: inst.len(),
            });
        }
        let mut h = self.embed(inst)?;
        let (mut rng, p_drop) = match mode {
            Mode::Train { seed } => (Some(ChaCha8Rng::seed_from_u64(seed)), c.dropout),
            Mode::Eval => (None, 0.0),
        };
        let emb_drop = dropout(&mut h, p_drop, rng.as_mut());
        let buckets = if c.use_relative_bias {
            bucket_table(
                &inst.position_ids,
                c.relative_buckets,
                c.max_relative_distance,
            )
        } else {
            Vec::new()
        };
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let (next, tape) = self.layer_forward(l, h, inst, &buckets, p_drop, rng.as_mut())?;
            layers.push(tape);
            h = next;
        }
        let top_rows = h.select_rows(logit_rows);
        let mut logits = matmul_bt(&top_rows, &self.params.token_embedding);
        logits.add_row_vector(&self.params.output_bias.data);
        if !logits.is_finite() {
            return Err(Error::NonFinite("output logits".into()));
        }
        let tape = ForwardTape {
            recorded: matches!(mode, Mode::Train { .. }),
            token_ids: inst.token_ids.clone(),
            position_ids: inst.position_ids.clone(),
            segment_ids: inst.segment_ids.clone(),
            buckets,
            emb_drop,
            layers,
            top: h.clone(),
            logit_rows: logit_rows.to_vec(),
        };
        Ok((
            ForwardOutput {
                hidden: h,
                logit_rows: logit_rows.to_vec(),
                logits,
            },
            tape,
        ))
    }

    fn layer_backward(
        &self,
        lp: &LayerParams<T>,
        t: &LayerTape<T>,
        dh: &Mat<T>,
        g: &mut LayerParams<T>,
        d_rel: &mut Mat<T>,
        buckets: &[usize],
    ) -> Mat<T> {
        let c = &self.config;
        let n = dh.rows;
        let dk = c.head_size();
        let scale = T::one() / T::of(dk as f64).sqrt();

        // FFN sublayer
        let dz2 = layer_norm_backward(dh, &t.ln2, &lp.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
        let mut dh1 = dz2.clone();
        let mut dffn = dz2;
        apply_mask(&mut dffn, &t.ffn_drop);
        let mut dact = linear_backward(&t.act, &lp.ffn_out_w, &dffn, &mut g.ffn_out_w, &mut g.ffn_out_b);
        for (da, &u) in dact.data.iter_mut().zip(&t.pre_act.data) {
            *da *= gelu_grad(u);
        }
        dh1.add_assign(&linear_backward(&t.h1, &lp.ffn_in_w, &dact, &mut g.ffn_in_w, &mut g.ffn_in_b));

        // attention sublayer
        let dz1 = layer_norm_backward(&dh1, &t.ln1, &lp.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
        let mut dx = dz1.clone();
        let mut dattn = dz1;
        apply_mask(&mut dattn, &t.attn_drop);
        let dctx = linear_backward(&t.context, &lp.out_w, &dattn, &mut g.out_w, &mut g.out_b);

        let mut dq = Mat::zeros(n, c.hidden_size);
        let mut dkm = Mat::zeros(n, c.hidden_size);
        let mut dv = Mat::zeros(n, c.hidden_size);
        let mut dp = vec![T::zero(); n];
        for head in 0..c.heads {
            let off = head * dk;
            let probs = &t.probs[head];
            for i in 0..n {
                let dci = &dctx.row(i)[off..off + dk];
                let pi = probs.row(i);
                let mut weighted = T::zero();
                for j in 0..n {
                    dp[j] = dot(dci, &t.v.row(j)[off..off + dk]);
                    weighted += pi[j] * dp[j];
                    if pi[j] != T::zero() {
                        for (o, &d) in dv.row_mut(j)[off..off + dk].iter_mut().zip(dci) {
                            *o += pi[j] * d;
                        }
                    }
                }
                for j in 0..n {
                    let ds = pi[j] * (dp[j] - weighted);
                    if ds == T::zero() {
                        continue;
                    }
                    if c.use_relative_bias {
                        d_rel.data[head * c.relative_buckets + buckets[i * n + j]] += ds;
                    }
                    let s = ds * scale;
                    for d in 0..dk {
                        dq.data[i * c.hidden_size + off + d] += s * t.k.at(j, off + d);
                        dkm.data[j * c.hidden_size + off + d] += s * t.q.at(i, off + d);
                    }
                }
            }
        }
        dx.add_assign(&linear_backward(&t.input, &lp.query_w, &dq, &mut g.query_w, &mut g.query_b));
        dx.add_assign(&linear_backward(&t.input, &lp.key_w, &dkm, &mut g.key_w, &mut g.key_b));
        dx.add_assign(&linear_backward(&t.input, &lp.value_w, &dv, &mut g.value_w, &mut g.value_b));
        dx
    }

    /// Accumulates parameter gradients into `grads` given the loss gradient
    /// with respect to the requested logits (rows aligned with the forward's
    /// `logit_rows`) and, optionally, with respect to the top hidden states.
    pub fn backward(
        &self,
        tape: &ForwardTape<T>,
        d_logits: &Mat<T>,
        d_hidden: Option<&Mat<T>>,
        grads: &mut ModelParameters<T>,
    ) -> Result<()> {
        if !tape.recorded {
            return Err(Error::NoTape);
        }
        let c = &self.config;
        let p = &self.params;
        if d_logits.rows != tape.logit_rows.len() || d_logits.cols != c.vocab_size {
            return Err(Error::Inconsistent(format!(
                "logit gradient is {}x{}, expected {}x{}",
                d_logits.rows,
                d_logits.cols,
                tape.logit_rows.len(),
                c.vocab_size
            )));
        }
        let n = tape.top.rows;

        // tied classifier: logits = H Eᵀ + b
        let top_rows = tape.top.select_rows(&tape.logit_rows);
        matmul_at_acc(&mut grads.token_embedding, d_logits, &top_rows);
        d_logits.accumulate_column_sums(&mut grads.output_bias.data);
        let d_top_rows = matmul(d_logits, &p.token_embedding);
        let mut dh = match d_hidden {
            Some(d) => d.clone(),
            None => Mat::zeros(n, c.hidden_size),
        };
        for (i, &r) in tape.logit_rows.iter().enumerate() {
            for (o, &v) in dh.row_mut(r).iter_mut().zip(d_top_rows.row(i)) {
                *o += v;
            }
        }

        for l in (0..c.layers).rev() {
            let ModelParameters {
                layers,
                relative_bias,
                ..
            } = grads;
            dh = self.layer_backward(
                &p.layers[l],
                &tape.layers[l],
                &dh,
                &mut layers[l],
                relative_bias,
                &tape.buckets,
            );
        }

        apply_mask(&mut dh, &tape.emb_drop);
        for t in 0..n {
            let row = dh.row(t);
            let tok = tape.token_ids[t] as usize;
            let pos = tape.position_ids[t];
            let seg = tape.segment_ids[t] as usize;
            for (o, &v) in grads.token_embedding.row_mut(tok).iter_mut().zip(row) {
                *o += v;
            }
            for (o, &v) in grads.position_embedding.row_mut(pos).iter_mut().zip(row) {
                *o += v;
            }
            for (o, &v) in grads.segment_embedding.row_mut(seg).iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble_pmlm_input, AttentionMask, PmlmInstance, TokenCategory};
    use crate::corpus::pack_pair;
    use crate::masking::{CorruptionPlan, FactorizationOrder};
    use crate::model::ModelConfig;

    fn plain(tokens: Vec<u32>) -> PmlmInstance {
        let n = tokens.len();
        PmlmInstance {
            token_ids: tokens,
            position_ids: (0..n).collect(),
            segment_ids: vec![0; n],
            categories: vec![TokenCategory::Context; n],
            attention_mask: AttentionMask::full(n),
            ae_targets: vec![],
            par_targets: vec![],
        }
    }

    fn fig() -> PmlmInstance {
        let x = pack_pair(&[11, 12, 13, 14, 15, 10], &[], 16).unwrap();
        let order = FactorizationOrder::new(vec![vec![4, 5], vec![2]], &x).unwrap();
        let plan = CorruptionPlan::all_mask(&order.masked_positions());
        assemble_pmlm_input(&x, &order, &plan).unwrap()
    }

    #[test]
    fn zero_parameters_embed_to_zero() {
        let c = ModelConfig::tiny(16);
        let m = Transformer::<f64>::from_parts(c.clone(), ModelParameters::zeros(&c)).unwrap();
        let h = m.embed(&fig()).unwrap();
        assert!(h.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pseudo_and_original_rows_differ_only_by_token_embedding() {
        let m = Transformer::<f64>::new(ModelConfig::tiny(16), 3).unwrap();
        let inst = fig();
        let h = m.embed(&inst).unwrap();
        // rows 9 ([P] at 4) and 11 (x4)
        let e = &m.params.token_embedding;
        for c in 0..8 {
            let lhs = h.at(9, c) - h.at(11, c);
            let rhs = e.at(inst.token_ids[9] as usize, c) - e.at(inst.token_ids[11] as usize, c);
            assert!((lhs - rhs).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let m = Transformer::<f32>::new(ModelConfig::tiny(16), 0).unwrap();
        assert!(matches!(
            m.embed(&plain(vec![2, 16])),
            Err(Error::IdOutOfRange { table: "token", .. })
        ));
        let mut inst = plain(vec![2, 7]);
        inst.position_ids[1] = 99;
        assert!(matches!(
            m.embed(&inst),
            Err(Error::IdOutOfRange { table: "position", .. })
        ));
    }

    #[test]
    fn single_token_identity_attention_returns_value() {
        let mut c = ModelConfig::tiny(16);
        c.heads = 1;
        c.use_relative_bias = false;
        let m = Transformer::<f64>::new(c, 1).unwrap();
        let inst = plain(vec![7]);
        let x = Mat::from_vec(1, 8, (0..8).map(|i| i as f64 * 0.1).collect());
        let (probs, ctx) = m.attention(0, &x, &x, &x, &inst, &[]).unwrap();
        assert_eq!(probs[0].data, vec![1.0]);
        assert_eq!(ctx, x);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let m = Transformer::<f32>::new(ModelConfig::tiny(16), 0).unwrap();
        let mut inst = plain(vec![2, 7, 3]);
        for k in 0..3 {
            inst.attention_mask.set(1, k, false);
        }
        assert!(matches!(
            m.eval(&inst, &[]),
            Err(Error::NoAttendableKey { row: 1 })
        ));
    }

    #[test]
    fn attention_rows_sum_to_one_and_norms_are_standardized() {
        let m = Transformer::<f32>::new(ModelConfig::tiny(16), 5).unwrap();
        let (_, tape) = m.forward(&fig(), &[], Mode::Eval).unwrap();
        for l in 0..2 {
            for h in 0..2 {
                let p = tape.attention_probs(l, h);
                for r in 0..p.rows {
                    let s: f32 = p.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
            let (a, b) = tape.normalized(l);
            for xh in [a, b] {
                for r in 0..xh.rows {
                    let row: Vec<f64> = xh.row(r).iter().map(|&v| v as f64).collect();
                    let mean = row.iter().sum::<f64>() / 8.0;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                    assert!(mean.abs() < 1e-6, "mean {mean}");
                    assert!((var - 1.0).abs() < 1e-4, "var {var}");
                }
            }
        }
    }

    #[test]
    fn masked_key_perturbation_is_exactly_invisible() {
        let m = Transformer::<f32>::new(ModelConfig::tiny(16), 9).unwrap();
        let inst = fig();
        let (_, base) = m.forward(&inst, &[], Mode::Eval).unwrap();
        // x4 (row 11) is hidden from context row 6; swap its token
        let mut other = inst.clone();
        other.token_ids[11] = 15;
        let (_, pert) = m.forward(&other, &[], Mode::Eval).unwrap();
        for q in 0..inst.len() {
            if !inst.attention_mask.allows(q, 11) && q != 11 {
                assert_eq!(
                    base.attention_context(0).row(q),
                    pert.attention_context(0).row(q),
                    "row {q}"
                );
            }
        }
    }

    #[test]
    fn zero_layers_logits_come_from_embeddings() {
        let mut c = ModelConfig::tiny(16);
        c.layers = 0;
        let m = Transformer::<f64>::new(c, 2).unwrap();
        let inst = plain(vec![2, 7, 3]);
        let out = m.eval(&inst, &[1]).unwrap();
        let h0 = m.embed(&inst).unwrap();
        for v in 0..16 {
            let expect = dot(h0.row(1), m.params.token_embedding.row(v)) + m.params.output_bias.at(0, v);
            assert!((out.logits.at(0, v) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_is_deterministic_and_train_without_dropout_matches_eval() {
        let m = Transformer::<f32>::new(ModelConfig::tiny(16), 4).unwrap();
        let inst = fig();
        let rows = inst.target_rows();
        let a = m.eval(&inst, &rows).unwrap();
        let b = m.eval(&inst, &rows).unwrap();
        assert_eq!(a.logits, b.logits);
        let (c, _) = m.forward(&inst, &rows, Mode::Train { seed: 1 }).unwrap();
        assert_eq!(a.logits, c.logits);
    }

    #[test]
    fn dropout_changes_train_outputs() {
        let mut cfg = ModelConfig::tiny(16);
        cfg.dropout = 0.5;
        let m = Transformer::<f32>::new(cfg, 4).unwrap();
        let inst = fig();
        let e = m.eval(&inst, &[2]).unwrap();
        let (t1, _) = m.forward(&inst, &[2], Mode::Train { seed: 1 }).unwrap();
        let (t2, _) = m.forward(&inst, &[2], Mode::Train { seed: 1 }).unwrap();
        assert_ne!(e.logits, t1.logits);
        assert_eq!(t1.logits, t2.logits);
    }

    #[test]
    fn backward_requires_recorded_forward() {
        let m = Transformer::<f64>::new(ModelConfig::tiny(16), 4).unwrap();
        let (_, tape) = m.forward(&fig(), &[2], Mode::Eval).unwrap();
        let mut g = m.params.zeros_like();
        assert!(matches!(
            m.backward(&tape, &Mat::zeros(1, 16), None, &mut g),
            Err(Error::NoTape)
        ));
    }

    #[test]
    fn unused_segment_row_gets_zero_gradient() {
        let m = Transformer::<f64>::new(ModelConfig::tiny(16), 4).unwrap();
        let inst = plain(vec![2, 7, 8, 3]);
        let (_, tape) = m.forward(&inst, &[1, 2], Mode::Train { seed: 0 }).unwrap();
        let mut g = m.params.zeros_like();
        let d = Mat::filled(2, 16, 0.1);
        m.backward(&tape, &d, None, &mut g).unwrap();
        assert!(g.segment_embedding.row(1).iter().all(|&v| v == 0.0));
        assert!(g.segment_embedding.row(0).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn tied_classifier_gradient_is_sum_of_both_roles() {
        // Untie: treat the output projection as a separate copy of E and
        // check that the tied gradient is the sum of the two gradients.
        let mut cfg = ModelConfig::tiny(16);
        cfg.layers = 0;
        let m = Transformer::<f64>::new(cfg, 8).unwrap();
        let inst = plain(vec![2, 7, 9, 3]);
        let rows = [1usize, 2];
        let (_, tape) = m.forward(&inst, &rows, Mode::Train { seed: 0 }).unwrap();
        let dl = Mat::from_vec(2, 16, (0..32).map(|i| (i as f64 * 0.37).sin()).collect());
        let mut g = m.params.zeros_like();
        m.backward(&tape, &dl, None, &mut g).unwrap();

        // embedding role: dL/dE[tok] = Σ_rows dlogits·E  (H0 = E + Pos + Seg)
        let e = &m.params.token_embedding;
        let h0 = m.embed(&inst).unwrap();
        let mut expect = Mat::<f64>::zeros(16, 8);
        for (i, &r) in rows.iter().enumerate() {
            let tok = inst.token_ids[r] as usize;
            for c in 0..8 {
                let input_role: f64 = (0..16).map(|v| dl.at(i, v) * e.at(v, c)).sum();
                expect.data[tok * 8 + c] += input_role;
            }
            for v in 0..16 {
                for c in 0..8 {
                    expect.data[v * 8 + c] += dl.at(i, v) * h0.at(r, c);
                }
            }
        }
        for (a, b) in g.token_embedding.data.iter().zip(&expect.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
