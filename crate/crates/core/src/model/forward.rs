use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use super::{r, BlockIds, Gradients, ModelParameters, Real};
use crate::error::{Error, Result};
use crate::features::{TrainingToken, TurnType};
use crate::game::{LegalMask, NUM_ACTIONS};
use crate::seed::SeedNamespace;

const LN_EPS: f64 = 1e-5;

/// One token sequence with its turn types and legal masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence<T: Real> {
    pub inputs: Array2<T>,
    pub turns: Vec<TurnType>,
    pub legal: Vec<LegalMask>,
}

impl<T: Real> Sequence<T> {
    /// Uses the first `input_dim` features of each token.
    pub fn from_tokens(tokens: &[TrainingToken], input_dim: usize) -> Sequence<T> {
        let mut inputs = Array2::zeros((tokens.len(), input_dim));
        for (i, t) in tokens.iter().enumerate() {
            for j in 0..input_dim {
                inputs[[i, j]] = r(t.features.0[j]);
            }
        }
        Sequence {
            inputs,
            turns: tokens.iter().map(|t| t.turn).collect(),
            legal: tokens.iter().map(|t| t.legal).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn positions(&self, turn: TurnType) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.turns[i] == turn).collect()
    }
}

/// Head logits at the positions of their own turn type. Policy logits of
/// illegal actions are `-inf`; opponent logits are left unmasked.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<T: Real> {
    pub policy_positions: Vec<usize>,
    pub policy_logits: Array2<T>,
    pub policy_legal: Vec<LegalMask>,
    pub opp_positions: Vec<usize>,
    pub opp_logits: Array2<T>,
    pub opp_legal: Vec<LegalMask>,
}

/// Loss gradients with respect to [`HeadOutputs`] logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads<T: Real> {
    pub policy: Array2<T>,
    pub opp: Array2<T>,
}

impl<T: Real> HeadGrads<T> {
    pub fn zeros(out: &HeadOutputs<T>) -> HeadGrads<T> {
        HeadGrads {
            policy: Array2::zeros(out.policy_logits.raw_dim()),
            opp: Array2::zeros(out.opp_logits.raw_dim()),
        }
    }
}

#[derive(Debug, Clone)]
struct LnCache<T: Real> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

#[derive(Debug, Clone)]
struct BlockTrace<T: Real> {
    ln1: LnCache<T>,
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    attn_mask: Option<Array2<T>>,
    ln2: LnCache<T>,
    c: Array2<T>,
    u: Array2<T>,
    g: Array2<T>,
    ff_mask: Option<Array2<T>>,
}

/// Activations cached by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Real> {
    version: u64,
    x: Array2<T>,
    emb_mask: Option<Array2<T>>,
    blocks: Vec<BlockTrace<T>>,
    lnf: LnCache<T>,
    hf: Array2<T>,
    policy_pos: Vec<usize>,
    opp_pos: Vec<usize>,
    opp_pre: Array2<T>,
    opp_act: Array2<T>,
}

pub(crate) fn positional_encoding<T: Real>(start: usize, len: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((len, d), |(i, j)| {
        let pos = (start + i) as f64;
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        r(if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        })
    })
}

pub(crate) fn layer_norm_row<T: Real>(
    x: ArrayView1<T>,
    g: ArrayView1<T>,
    b: ArrayView1<T>,
) -> (Array1<T>, Array1<T>, T) {
    let n: T = r(x.len() as f64);
    let mean = x.sum() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + r(LN_EPS)).sqrt();
    let xhat = x.mapv(|v| (v - mean) * rstd);
    let y = &xhat * &g + b;
    (y, xhat, rstd)
}

fn layer_norm<T: Real>(
    x: &Array2<T>,
    g: ArrayView1<T>,
    b: ArrayView1<T>,
) -> (Array2<T>, LnCache<T>) {
    let (l, d) = x.dim();
    let mut y = Array2::zeros((l, d));
    let mut xhat = Array2::zeros((l, d));
    let mut rstd = Array1::zeros(l);
    for i in 0..l {
        let (yi, xi, ri) = layer_norm_row(x.row(i), g, b);
        y.row_mut(i).assign(&yi);
        xhat.row_mut(i).assign(&xi);
        rstd[i] = ri;
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Real>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    gamma: ArrayView1<T>,
    grads: &mut Gradients<T>,
    layout: &super::ParamLayout,
    g_id: usize,
    b_id: usize,
) -> Array2<T> {
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    grads
        .mat_mut(layout, g_id)
        .row_mut(0)
        .scaled_add(T::one(), &dgamma);
    grads
        .mat_mut(layout, b_id)
        .row_mut(0)
        .scaled_add(T::one(), &dbeta);
    let dxhat = dy * &gamma;
    let n: T = r(dy.ncols() as f64);
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = dh.sum() / n;
        let m2 = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
        let rs = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(&dh)
            .and(&xh)
            .for_each(|o, &a, &b| *o = rs * (a - m1 - b * m2));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c: T = r(GELU_C);
    let a: T = r(GELU_A);
    let half: T = r(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c: T = r(GELU_C);
    let a: T = r(GELU_A);
    let half: T = r(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + r::<T>(3.0) * a * x * x)
}

fn dropout_mask<T: Real>(seed: u64, site: u64, shape: (usize, usize), rate: f64) -> Array2<T> {
    let mut rng = SeedNamespace::new(seed).rng("dropout", &[site]);
    let keep: T = r(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn(shape, || {
        if rng.gen::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    })
}

fn add_bias<T: Real>(m: &mut Array2<T>, b: ArrayView1<T>) {
    for mut row in m.rows_mut() {
        row += &b;
    }
}

fn linear<T: Real>(x: &ArrayView2<T>, w: ArrayView2<T>, b: ArrayView1<T>) -> Array2<T> {
    let mut y = x.dot(&w);
    add_bias(&mut y, b);
    y
}

/// Row-wise softmax restricted to the lower triangle (column ≤ row).
pub(crate) fn causal_softmax<T: Real>(s: &mut Array2<T>) {
    for (i, mut row) in s.rows_mut().into_iter().enumerate() {
        let max = row
            .iter()
            .take(i + 1)
            .fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut().take(i + 1) {
            *v = (*v - max).exp();
            sum += *v;
        }
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v /= sum;
            } else {
                *v = T::zero();
            }
        }
    }
}

fn gather_rows<T: Real>(m: &Array2<T>, rows: &[usize]) -> Array2<T> {
    m.select(Axis(0), rows)
}

/// Full forward pass. With `dropout_seed` set and a nonzero rate, dropout is
/// applied to the embedding and to both residual branches of every block.
pub fn forward<T: Real>(
    params: &ModelParameters<T>,
    seq: &Sequence<T>,
    dropout_seed: Option<u64>,
) -> Result<(HeadOutputs<T>, ForwardTrace<T>)> {
    let cfg = params.config();
    let lay = params.layout();
    let l = seq.len();
    if l > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: l,
            max: cfg.max_seq_len,
        });
    }
    if seq.inputs.ncols() != cfg.input_dim || seq.inputs.nrows() != l || seq.legal.len() != l {
        return Err(Error::WrongInputWidth {
            expected: cfg.input_dim,
            found: seq.inputs.ncols(),
        });
    }
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale: T = r(1.0 / (dh as f64).sqrt());
    let drop = dropout_seed.filter(|_| cfg.dropout > 0.0);

    let mut h = linear(
        &seq.inputs.view(),
        params.mat(lay.embed_w),
        params.vec(lay.embed_b),
    );
    h += &positional_encoding::<T>(0, l, d);
    let emb_mask = drop.map(|s| dropout_mask::<T>(s, 0, (l, d), cfg.dropout));
    if let Some(m) = &emb_mask {
        h *= m;
    }

    let mut blocks = Vec::with_capacity(lay.blocks.len());
    for (bi, ids) in lay.blocks.iter().enumerate() {
        let (a, ln1) = layer_norm(&h, params.vec(ids.ln1_g), params.vec(ids.ln1_b));
        let q = linear(&a.view(), params.mat(ids.wq), params.vec(ids.bq));
        let k = linear(&a.view(), params.mat(ids.wk), params.vec(ids.bk));
        let v = linear(&a.view(), params.mat(ids.wv), params.vec(ids.bv));
        let mut ctx = Array2::zeros((l, d));
        let mut probs = Vec::with_capacity(cfg.heads);
        for hh in 0..cfg.heads {
            let cols = s![.., hh * dh..(hh + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t());
            sc *= scale;
            causal_softmax(&mut sc);
            ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        let mut attn = linear(&ctx.view(), params.mat(ids.wo), params.vec(ids.bo));
        let attn_mask = drop.map(|s| dropout_mask::<T>(s, 1 + 2 * bi as u64, (l, d), cfg.dropout));
        if let Some(m) = &attn_mask {
            attn *= m;
        }
        h += &attn;
        let (c, ln2) = layer_norm(&h, params.vec(ids.ln2_g), params.vec(ids.ln2_b));
        let u = linear(&c.view(), params.mat(ids.w1), params.vec(ids.b1));
        let g = u.mapv(gelu);
        let mut ff = linear(&g.view(), params.mat(ids.w2), params.vec(ids.b2));
        let ff_mask = drop.map(|s| dropout_mask::<T>(s, 2 + 2 * bi as u64, (l, d), cfg.dropout));
        if let Some(m) = &ff_mask {
            ff *= m;
        }
        h += &ff;
        blocks.push(BlockTrace {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            attn_mask,
            ln2,
            c,
            u,
            g,
            ff_mask,
        });
    }
    let (hf, lnf) = layer_norm(&h, params.vec(lay.lnf_g), params.vec(lay.lnf_b));

    let policy_pos = seq.positions(TurnType::Agent);
    let opp_pos = seq.positions(TurnType::Opponent);
    let policy_legal: Vec<LegalMask> = policy_pos.iter().map(|&i| seq.legal[i]).collect();
    let opp_legal: Vec<LegalMask> = opp_pos.iter().map(|&i| seq.legal[i]).collect();

    let hp = gather_rows(&hf, &policy_pos);
    let mut policy_logits = linear(
        &hp.view(),
        params.mat(lay.policy_w),
        params.vec(lay.policy_b),
    );
    mask_illegal(&mut policy_logits, &policy_legal);

    let ho = gather_rows(&hf, &opp_pos);
    let opp_pre = linear(&ho.view(), params.mat(lay.opp_w1), params.vec(lay.opp_b1));
    let opp_act = opp_pre.mapv(gelu);
    let opp_logits = linear(
        &opp_act.view(),
        params.mat(lay.opp_w2),
        params.vec(lay.opp_b2),
    );

    let out = HeadOutputs {
        policy_positions: policy_pos.clone(),
        policy_logits,
        policy_legal,
        opp_positions: opp_pos.clone(),
        opp_logits,
        opp_legal,
    };
    let trace = ForwardTrace {
        version: params.version(),
        x: seq.inputs.clone(),
        emb_mask,
        blocks,
        lnf,
        hf,
        policy_pos,
        opp_pos,
        opp_pre,
        opp_act,
    };
    Ok((out, trace))
}

pub(crate) fn mask_illegal<T: Real>(logits: &mut Array2<T>, legal: &[LegalMask]) {
    for (mut row, m) in logits.rows_mut().into_iter().zip(legal) {
        for a in 0..NUM_ACTIONS {
            if !m.is_legal(a) {
                row[a] = T::neg_infinity();
            }
        }
    }
}

/// Exact gradients of a scalar loss given its gradients with respect to the
/// head logits. Gradient entries for masked (`-inf`) logits are ignored.
pub fn backward<T: Real>(
    params: &ModelParameters<T>,
    trace: &ForwardTrace<T>,
    head: &HeadGrads<T>,
) -> Result<Gradients<T>> {
    if trace.version != params.version() {
        return Err(Error::StaleTrace);
    }
    let cfg = params.config();
    let lay = params.layout();
    let (l, d) = trace.hf.dim();
    let dh_size = cfg.head_dim();
    let scale: T = r(1.0 / (dh_size as f64).sqrt());
    let mut grads = Gradients::zeros(lay);
    let mut dhf = Array2::<T>::zeros((l, d));

    // Policy head.
    let mut dpol = head.policy.clone();
    dpol.mapv_inplace(|v| if v.is_finite() { v } else { T::zero() });
    if !trace.policy_pos.is_empty() {
        let hp = gather_rows(&trace.hf, &trace.policy_pos);
        grads
            .mat_mut(lay, lay.policy_w)
            .scaled_add(T::one(), &hp.t().dot(&dpol));
        grads
            .mat_mut(lay, lay.policy_b)
            .row_mut(0)
            .scaled_add(T::one(), &dpol.sum_axis(Axis(0)));
        let dhp = dpol.dot(&params.mat(lay.policy_w).t());
        for (k, &i) in trace.policy_pos.iter().enumerate() {
            let mut row = dhf.row_mut(i);
            row += &dhp.row(k);
        }
    }

    // Opponent head.
    if !trace.opp_pos.is_empty() {
        let dol = &head.opp;
        grads
            .mat_mut(lay, lay.opp_w2)
            .scaled_add(T::one(), &trace.opp_act.t().dot(dol));
        grads
            .mat_mut(lay, lay.opp_b2)
            .row_mut(0)
            .scaled_add(T::one(), &dol.sum_axis(Axis(0)));
        let mut dz = dol.dot(&params.mat(lay.opp_w2).t());
        Zip::from(&mut dz)
            .and(&trace.opp_pre)
            .for_each(|g, &z| *g *= gelu_grad(z));
        let ho = gather_rows(&trace.hf, &trace.opp_pos);
        grads
            .mat_mut(lay, lay.opp_w1)
            .scaled_add(T::one(), &ho.t().dot(&dz));
        grads
            .mat_mut(lay, lay.opp_b1)
            .row_mut(0)
            .scaled_add(T::one(), &dz.sum_axis(Axis(0)));
        let dho = dz.dot(&params.mat(lay.opp_w1).t());
        for (k, &i) in trace.opp_pos.iter().enumerate() {
            let mut row = dhf.row_mut(i);
            row += &dho.row(k);
        }
    }

    let mut dh = layer_norm_backward(
        &dhf,
        &trace.lnf,
        params.vec(lay.lnf_g),
        &mut grads,
        lay,
        lay.lnf_g,
        lay.lnf_b,
    );

    for (bt, ids) in trace.blocks.iter().zip(&lay.blocks).rev() {
        dh = block_backward(params, bt, ids, dh, &mut grads, scale, (cfg.heads, dh_size));
    }

    if let Some(m) = &trace.emb_mask {
        dh *= m;
    }
    grads
        .mat_mut(lay, lay.embed_w)
        .scaled_add(T::one(), &trace.x.t().dot(&dh));
    grads
        .mat_mut(lay, lay.embed_b)
        .row_mut(0)
        .scaled_add(T::one(), &dh.sum_axis(Axis(0)));
    Ok(grads)
}

fn block_backward<T: Real>(
    params: &ModelParameters<T>,
    bt: &BlockTrace<T>,
    ids: &BlockIds,
    dh: Array2<T>,
    grads: &mut Gradients<T>,
    scale: T,
    (heads, hd): (usize, usize),
) -> Array2<T> {
    let lay = params.layout();
    let l = dh.nrows();
    let d = dh.ncols();

    // Feed-forward branch.
    let mut dff = dh.clone();
    if let Some(m) = &bt.ff_mask {
        dff *= m;
    }
    grads
        .mat_mut(lay, ids.w2)
        .scaled_add(T::one(), &bt.g.t().dot(&dff));
    grads
        .mat_mut(lay, ids.b2)
        .row_mut(0)
        .scaled_add(T::one(), &dff.sum_axis(Axis(0)));
    let mut du = dff.dot(&params.mat(ids.w2).t());
    Zip::from(&mut du)
        .and(&bt.u)
        .for_each(|g, &u| *g *= gelu_grad(u));
    grads
        .mat_mut(lay, ids.w1)
        .scaled_add(T::one(), &bt.c.t().dot(&du));
    grads
        .mat_mut(lay, ids.b1)
        .row_mut(0)
        .scaled_add(T::one(), &du.sum_axis(Axis(0)));
    let dc = du.dot(&params.mat(ids.w1).t());
    let dh_mid = dh
        + &layer_norm_backward(
            &dc,
            &bt.ln2,
            params.vec(ids.ln2_g),
            grads,
            lay,
            ids.ln2_g,
            ids.ln2_b,
        );

    // Attention branch.
    let mut dattn = dh_mid.clone();
    if let Some(m) = &bt.attn_mask {
        dattn *= m;
    }
    grads
        .mat_mut(lay, ids.wo)
        .scaled_add(T::one(), &bt.ctx.t().dot(&dattn));
    grads
        .mat_mut(lay, ids.bo)
        .row_mut(0)
        .scaled_add(T::one(), &dattn.sum_axis(Axis(0)));
    let dctx = dattn.dot(&params.mat(ids.wo).t());
    let mut dq = Array2::<T>::zeros((l, d));
    let mut dk = Array2::<T>::zeros((l, d));
    let mut dv = Array2::<T>::zeros((l, d));
    for hh in 0..heads {
        let cols = s![.., hh * hd..(hh + 1) * hd];
        let p = &bt.probs[hh];
        let dctx_h = dctx.slice(cols);
        let mut dp = dctx_h.dot(&bt.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
        for (mut dprow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
            let dot = dprow
                .iter()
                .zip(prow.iter())
                .map(|(&a, &b)| a * b)
                .sum::<T>();
            Zip::from(&mut dprow)
                .and(&prow)
                .for_each(|g, &pv| *g = pv * (*g - dot) * scale);
        }
        dq.slice_mut(cols).assign(&dp.dot(&bt.k.slice(cols)));
        dk.slice_mut(cols).assign(&dp.t().dot(&bt.q.slice(cols)));
    }
    let a = bt.a.t();
    grads.mat_mut(lay, ids.wq).scaled_add(T::one(), &a.dot(&dq));
    grads
        .mat_mut(lay, ids.bq)
        .row_mut(0)
        .scaled_add(T::one(), &dq.sum_axis(Axis(0)));
    grads.mat_mut(lay, ids.wk).scaled_add(T::one(), &a.dot(&dk));
    grads
        .mat_mut(lay, ids.bk)
        .row_mut(0)
        .scaled_add(T::one(), &dk.sum_axis(Axis(0)));
    grads.mat_mut(lay, ids.wv).scaled_add(T::one(), &a.dot(&dv));
    grads
        .mat_mut(lay, ids.bv)
        .row_mut(0)
        .scaled_add(T::one(), &dv.sum_axis(Axis(0)));
    let da = dq.dot(&params.mat(ids.wq).t())
        + dk.dot(&params.mat(ids.wk).t())
        + dv.dot(&params.mat(ids.wv).t());
    dh_mid
        + &layer_norm_backward(
            &da,
            &bt.ln1,
            params.vec(ids.ln1_g),
            grads,
            lay,
            ids.ln1_g,
            ids.ln1_b,
        )
}
