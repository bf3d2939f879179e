//! Router: per-modality input projections, one multi-head self-attention
//! block over the two modality tokens, and a linear head producing one logit
//! per refuser.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{add_assign, dot, softmax1, softmax_backward, Mat, Parameters};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    pub img_projection: Mat,
    pub img_bias: Vec<f64>,
    pub txt_projection: Mat,
    pub txt_bias: Vec<f64>,
    pub query: Mat,
    pub key: Mat,
    pub value: Mat,
    pub attn_out: Mat,
    pub output_head: Mat,
    pub output_bias: Vec<f64>,
    pub heads: usize,
}

/// Router logits and their softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterOutput {
    pub logits: Vec<f64>,
    pub f: Vec<f64>,
}

impl RouterOutput {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let f = softmax1(&logits);
        Self { logits, f }
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct RouterTrace {
    inputs: [Vec<f64>; 2],
    tokens: [Vec<f64>; 2],
    q: [Vec<f64>; 2],
    k: [Vec<f64>; 2],
    v: [Vec<f64>; 2],
    /// `attn[h][i][j]`: weight of token `j` for query token `i` in head `h`.
    attn: Vec<[[f64; 2]; 2]>,
    mixed: [Vec<f64>; 2],
    z: Vec<f64>,
    pub output: RouterOutput,
}

impl RouterState {
    /// Inputs must have exactly `img_dim`/`txt_dim` entries; callers with a
    /// growing concept set pad to a fixed budget.
    pub fn new<R: Rng + ?Sized>(
        img_dim: usize,
        txt_dim: usize,
        hidden: usize,
        heads: usize,
        num_refusers: usize,
        projection_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(Error::config("refusal.heads", format!("must divide the hidden size {hidden}")));
        }
        let attn_scale = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            img_projection: Mat::gaussian(hidden, img_dim, projection_scale, rng),
            img_bias: vec![0.0; hidden],
            txt_projection: Mat::gaussian(hidden, txt_dim, projection_scale, rng),
            txt_bias: vec![0.0; hidden],
            query: Mat::gaussian(hidden, hidden, attn_scale, rng),
            key: Mat::gaussian(hidden, hidden, attn_scale, rng),
            value: Mat::gaussian(hidden, hidden, attn_scale, rng),
            attn_out: Mat::gaussian(hidden, hidden, attn_scale, rng),
            output_head: Mat::gaussian(num_refusers, 2 * hidden, 1.0 / (2.0 * hidden as f64).sqrt(), rng),
            output_bias: vec![0.0; num_refusers],
            heads,
        })
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.img_projection.cols(), self.txt_projection.cols())
    }

    pub fn hidden(&self) -> usize {
        self.query.rows()
    }

    pub fn num_refusers(&self) -> usize {
        self.output_head.rows()
    }

    fn check_input(proj: &Mat, e: &[f64], what: &str) -> Result<Vec<f64>> {
        if e.len() != proj.cols() {
            return Err(Error::Registry(format!(
                "{what} activations have length {} but the router projection expects {}",
                e.len(),
                proj.cols()
            )));
        }
        Ok(e.to_vec())
    }

    pub fn forward(&self, e_img: &[f64], e_txt: &[f64]) -> Result<RouterOutput> {
        Ok(self.forward_trace(e_img, e_txt)?.output)
    }

    pub fn forward_trace(&self, e_img: &[f64], e_txt: &[f64]) -> Result<RouterTrace> {
        let inputs = [
            Self::check_input(&self.img_projection, e_img, "image")?,
            Self::check_input(&self.txt_projection, e_txt, "text")?,
        ];
        let mut t0 = self.img_projection.matvec(&inputs[0]);
        add_assign(&mut t0, &self.img_bias);
        let mut t1 = self.txt_projection.matvec(&inputs[1]);
        add_assign(&mut t1, &self.txt_bias);
        let tokens = [t0, t1];
        let q = [self.query.matvec(&tokens[0]), self.query.matvec(&tokens[1])];
        let k = [self.key.matvec(&tokens[0]), self.key.matvec(&tokens[1])];
        let v = [self.value.matvec(&tokens[0]), self.value.matvec(&tokens[1])];

        let hidden = self.hidden();
        let dh = hidden / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Vec::with_capacity(self.heads);
        let mut mixed = [vec![0.0; hidden], vec![0.0; hidden]];
        for h in 0..self.heads {
            let r = h * dh..(h + 1) * dh;
            let mut weights = [[0.0; 2]; 2];
            for i in 0..2 {
                let scores = [
                    scale * dot(&q[i][r.clone()], &k[0][r.clone()]),
                    scale * dot(&q[i][r.clone()], &k[1][r.clone()]),
                ];
                let a = softmax1(&scores);
                weights[i] = [a[0], a[1]];
                for d in r.clone() {
                    mixed[i][d] = a[0] * v[0][d] + a[1] * v[1][d];
                }
            }
            attn.push(weights);
        }
        let mut z = Vec::with_capacity(2 * hidden);
        for i in 0..2 {
            let mut zi = self.attn_out.matvec(&mixed[i]);
            add_assign(&mut zi, &tokens[i]);
            z.extend(zi);
        }
        let mut logits = self.output_head.matvec(&z);
        add_assign(&mut logits, &self.output_bias);
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("router logits".into()));
        }
        Ok(RouterTrace {
            inputs,
            tokens,
            q,
            k,
            v,
            attn,
            mixed,
            z,
            output: RouterOutput::from_logits(logits),
        })
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
    pub fn backward(&self, trace: &RouterTrace, d_logits: &[f64], grad: &mut RouterState) {
        let hidden = self.hidden();
        grad.output_head.add_outer(1.0, d_logits, &trace.z);
        add_assign(&mut grad.output_bias, d_logits);
        let d_z = self.output_head.matvec_t(d_logits);

        // Residual: d tokens starts as d z.
        let mut d_tokens = [d_z[..hidden].to_vec(), d_z[hidden..].to_vec()];
        let mut d_mixed = [vec![0.0; hidden], vec![0.0; hidden]];
        for i in 0..2 {
            grad.attn_out.add_outer(1.0, &d_tokens[i], &trace.mixed[i]);
            d_mixed[i] = self.attn_out.matvec_t(&d_tokens[i]);
        }

        let dh = hidden / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut d_q = [vec![0.0; hidden], vec![0.0; hidden]];
        let mut d_k = [vec![0.0; hidden], vec![0.0; hidden]];
        let mut d_v = [vec![0.0; hidden], vec![0.0; hidden]];
        for (h, weights) in trace.attn.iter().enumerate() {
            let r = h * dh..(h + 1) * dh;
            for i in 0..2 {
                let dm = &d_mixed[i][r.clone()];
                let d_a = [dot(dm, &trace.v[0][r.clone()]), dot(dm, &trace.v[1][r.clone()])];
                for j in 0..2 {
                    for (dv, m) in d_v[j][r.clone()].iter_mut().zip(dm) {
                        *dv += weights[i][j] * m;
                    }
                }
                let d_s = softmax_backward(&weights[i], &d_a);
                for j in 0..2 {
                    let s = scale * d_s[j];
                    for d in r.clone() {
                        d_q[i][d] += s * trace.k[j][d];
                        d_k[j][d] += s * trace.q[i][d];
                    }
                }
            }
        }
        for i in 0..2 {
            grad.query.add_outer(1.0, &d_q[i], &trace.tokens[i]);
            grad.key.add_outer(1.0, &d_k[i], &trace.tokens[i]);
            grad.value.add_outer(1.0, &d_v[i], &trace.tokens[i]);
            add_assign(&mut d_tokens[i], &self.query.matvec_t(&d_q[i]));
            add_assign(&mut d_tokens[i], &self.key.matvec_t(&d_k[i]));
            add_assign(&mut d_tokens[i], &self.value.matvec_t(&d_v[i]));
        }
        grad.img_projection.add_outer(1.0, &d_tokens[0], &trace.inputs[0]);
        add_assign(&mut grad.img_bias, &d_tokens[0]);
        grad.txt_projection.add_outer(1.0, &d_tokens[1], &trace.inputs[1]);
        add_assign(&mut grad.txt_bias, &d_tokens[1]);
    }

    /// Reorders refusers: row `i` of the new head is row `perm[i]` of this one.
    pub fn permute_refusers(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (i, &p) in perm.iter().enumerate() {
            out.output_head.row_mut(i).copy_from_slice(self.output_head.row(p));
            out.output_bias[i] = self.output_bias[p];
        }
        out
    }
}

impl Parameters for RouterState {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.img_projection.data(),
            &self.img_bias,
            self.txt_projection.data(),
            &self.txt_bias,
            self.query.data(),
            self.key.data(),
            self.value.data(),
            self.attn_out.data(),
            self.output_head.data(),
            &self.output_bias,
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.img_projection.data_mut(),
            &mut self.img_bias,
            self.txt_projection.data_mut(),
            &mut self.txt_bias,
            self.query.data_mut(),
            self.key.data_mut(),
            self.value.data_mut(),
            self.attn_out.data_mut(),
            self.output_head.data_mut(),
            &mut self.output_bias,
        ]
    }
}
