use ndarray::{s, Array1, ArrayView1, ArrayView2};

use super::forward::{gelu, layer_norm_row, positional_encoding};
use super::loss::masked_softmax;
use super::{f, r, ModelParameters, Real};
use crate::error::{Error, Result};
use crate::game::{LegalMask, NUM_ACTIONS};
use crate::strategy::ActionDist;

/// Token-at-a-time evaluation with cached keys and values, producing the same
/// outputs as [`super::forward`] without dropout. When the window reaches
/// `max_seq_len`, it is rebuilt from the most recent half of its tokens.
#[derive(Debug, Clone)]
pub struct InferenceSession<'a, T: Real> {
    params: &'a ModelParameters<T>,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    inputs: Vec<Vec<T>>,
    hidden: Option<Array1<T>>,
}

impl<'a, T: Real> InferenceSession<'a, T> {
    pub fn new(params: &'a ModelParameters<T>) -> InferenceSession<'a, T> {
        let layers = params.config().layers;
        InferenceSession {
            params,
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
            inputs: Vec::new(),
            hidden: None,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn reset(&mut self) {
        for k in self.keys.iter_mut().chain(self.values.iter_mut()) {
            k.clear();
        }
        self.inputs.clear();
        self.hidden = None;
    }

    /// Appends one token (its first `input_dim` features are used).
    pub fn push(&mut self, features: &[f64]) -> Result<()> {
        let dim = self.params.config().input_dim;
        if features.len() < dim {
            return Err(Error::WrongInputWidth {
                expected: dim,
                found: features.len(),
            });
        }
        let x: Vec<T> = features[..dim].iter().map(|&v| r(v)).collect();
        if self.inputs.len() == self.params.config().max_seq_len {
            let keep = self.inputs.split_off(self.inputs.len() / 2);
            self.reset();
            for t in keep {
                self.step(t);
            }
        }
        self.step(x);
        Ok(())
    }

    fn step(&mut self, x: Vec<T>) {
        let p = self.params;
        let cfg = p.config();
        let lay = p.layout();
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let scale: T = r(1.0 / (hd as f64).sqrt());
        let pos = self.inputs.len();
        let n = pos + 1;

        let xv = ArrayView1::from(&x[..]);
        let mut h = xv.dot(&p.mat(lay.embed_w)) + p.vec(lay.embed_b);
        h += &positional_encoding::<T>(pos, 1, d).row(0);
        for (li, ids) in lay.blocks.iter().enumerate() {
            let (a, _, _) = layer_norm_row(h.view(), p.vec(ids.ln1_g), p.vec(ids.ln1_b));
            let q = a.dot(&p.mat(ids.wq)) + p.vec(ids.bq);
            let k = a.dot(&p.mat(ids.wk)) + p.vec(ids.bk);
            let v = a.dot(&p.mat(ids.wv)) + p.vec(ids.bv);
            self.keys[li].extend(k.iter());
            self.values[li].extend(v.iter());
            let kc = ArrayView2::from_shape((n, d), &self.keys[li][..]).expect("cache shape");
            let vc = ArrayView2::from_shape((n, d), &self.values[li][..]).expect("cache shape");
            let mut ctx = Array1::<T>::zeros(d);
            for hh in 0..cfg.heads {
                let cols = s![.., hh * hd..(hh + 1) * hd];
                let mut sc = kc.slice(cols).dot(&q.slice(s![hh * hd..(hh + 1) * hd]));
                sc *= scale;
                let max = sc.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                sc.mapv_inplace(|v| (v - max).exp());
                let z = sc.sum();
                sc /= z;
                ctx.slice_mut(s![hh * hd..(hh + 1) * hd])
                    .assign(&sc.dot(&vc.slice(cols)));
            }
            h += &(ctx.dot(&p.mat(ids.wo)) + p.vec(ids.bo));
            let (c, _, _) = layer_norm_row(h.view(), p.vec(ids.ln2_g), p.vec(ids.ln2_b));
            let u = c.dot(&p.mat(ids.w1)) + p.vec(ids.b1);
            h += &(u.mapv(gelu).dot(&p.mat(ids.w2)) + p.vec(ids.b2));
        }
        let (hf, _, _) = layer_norm_row(h.view(), p.vec(lay.lnf_g), p.vec(lay.lnf_b));
        self.inputs.push(x);
        self.hidden = Some(hf);
    }

    /// Final-layer representation of the latest token.
    pub fn hidden(&self) -> Option<ArrayView1<'_, T>> {
        self.hidden.as_ref().map(|h| h.view())
    }

    /// Unmasked policy logits at the latest token.
    pub fn policy_logits(&self) -> Result<[f64; NUM_ACTIONS]> {
        let h = self
            .hidden
            .as_ref()
            .ok_or_else(|| Error::Config("empty inference session".into()))?;
        let lay = self.params.layout();
        let z = h.dot(&self.params.mat(lay.policy_w)) + self.params.vec(lay.policy_b);
        Ok([f(z[0]), f(z[1]), f(z[2])])
    }

    pub fn policy_dist(&self, legal: LegalMask) -> Result<ActionDist> {
        if legal.is_empty() {
            return Err(Error::EmptyMask);
        }
        let z = self.policy_logits()?;
        Ok(masked_softmax(ArrayView1::from(&z[..]), legal))
    }

    /// Unmasked opponent-head logits at the latest token.
    pub fn opp_logits(&self) -> Result<[f64; NUM_ACTIONS]> {
        let h = self
            .hidden
            .as_ref()
            .ok_or_else(|| Error::Config("empty inference session".into()))?;
        let lay = self.params.layout();
        let z = (h.dot(&self.params.mat(lay.opp_w1)) + self.params.vec(lay.opp_b1)).mapv(gelu);
        let o = z.dot(&self.params.mat(lay.opp_w2)) + self.params.vec(lay.opp_b2);
        Ok([f(o[0]), f(o[1]), f(o[2])])
    }
}
