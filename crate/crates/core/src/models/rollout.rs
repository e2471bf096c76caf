//! Differentiable forecast rollouts, batched over sample paths.
//!
//! Losses that need gradients with respect to the model input (attack
//! objectives, the mini-max defender loss) build the autoregressive rollout
//! inside a [`Graph`]: the history enters as a node, the per-step noise as
//! constants, and every emitted step stays differentiable through the
//! reparameterization `mean + scale * eps`.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diff::{Graph, NodeId, Tensor};

use super::{Forecaster, ModelError, ModelParams};

/// Pre-drawn standard-normal noise for a batched rollout: one `[n, d]`
/// tensor per future step, plus `[n, r]` factor noise when the emission has
/// a low-rank component.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    pub state: Vec<Tensor>,
    pub factor: Vec<Tensor>,
}

impl NoiseBundle {
    pub fn draw(rng: &mut ChaCha8Rng, n: usize, d: usize, rank: usize, horizon: usize) -> Self {
        let mut gauss = |rows: usize, cols: usize| {
            Tensor::from_fn(&[rows, cols], |_| StandardNormal.sample(rng))
        };
        let mut state = Vec::with_capacity(horizon);
        let mut factor = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            state.push(gauss(n, d));
            if rank > 0 {
                factor.push(gauss(n, rank));
            }
        }
        Self { state, factor }
    }

    /// All-zero noise: the rollout becomes the iterated predictive mean.
    pub fn zeros(n: usize, d: usize, rank: usize, horizon: usize) -> Self {
        Self {
            state: (0..horizon).map(|_| Tensor::zeros(&[n, d])).collect(),
            factor: if rank > 0 {
                (0..horizon).map(|_| Tensor::zeros(&[n, rank])).collect()
            } else {
                Vec::new()
            },
        }
    }

    pub fn n_paths(&self) -> usize {
        self.state.first().map_or(0, |t| t.shape()[0])
    }

    pub fn horizon(&self) -> usize {
        self.state.len()
    }
}

/// Build the autoregressive rollout in `g` starting from an (already
/// perturbed) unscaled history node of shape `[d, T]`. Model parameters
/// enter as constants; gradients flow to the history and to anything it was
/// built from. Returns one `[n, d]` node of unscaled emissions per step.
pub fn rollout(
    g: &mut Graph,
    forecaster: &Forecaster,
    history: NodeId,
    noise: &NoiseBundle,
) -> Result<Vec<NodeId>, ModelError> {
    let d = forecaster.dims();
    let shape = g.shape(history).to_vec();
    if shape.len() != 2 || shape[0] != d {
        return Err(ModelError::BadConfig(format!(
            "history node shape {shape:?} does not match model dimension {d}"
        )));
    }
    let t_len = shape[1];
    let n = noise.n_paths();
    let tau = noise.horizon();

    // scale into model space
    let recip = Tensor::from_fn(&[d, t_len], |idx| {
        1.0 / forecaster.scaling.factors[idx / t_len]
    });
    let recip = g.constant(recip);
    let xs = g.mul(history, recip)?;

    // unscale factors broadcast over paths
    let nu_row = g.constant(Tensor::from_fn(&[n, d], |idx| {
        forecaster.scaling.factors[idx % d]
    }));

    let mut outputs = Vec::with_capacity(tau);
    match &forecaster.params {
        ModelParams::LinearVar(p) => {
            if t_len < p.order {
                return Err(ModelError::BadConfig(format!(
                    "history length {t_len} below VAR order {}",
                    p.order
                )));
            }
            let coeff_t: Vec<NodeId> = p
                .coeffs
                .iter()
                .map(|a| g.constant(crate::diff::graph::transpose_raw(a)))
                .collect();
            let intercept = g.constant(Tensor::from_fn(&[n, d], |idx| p.intercept.data()[idx % d]));
            let std_row = {
                let s = p.noise_std();
                g.constant(Tensor::from_fn(&[n, d], |idx| s[idx % d]))
            };

            // lag states, most recent first
            let mut lags: Vec<NodeId> = Vec::with_capacity(p.order);
            for back in 0..p.order {
                let col = g.column(xs, t_len - 1 - back)?;
                lags.push(g.broadcast(col, n)?);
            }

            for h in 0..tau {
                let mut mean = intercept;
                for (at, lag) in coeff_t.iter().zip(&lags) {
                    let contrib = g.matmul(*lag, *at)?;
                    mean = g.add(mean, contrib)?;
                }
                let eps = g.constant(noise.state[h].clone());
                let shock = g.mul(std_row, eps)?;
                let y = g.add(mean, shock)?;
                lags.insert(0, y);
                lags.truncate(p.order);
                outputs.push(g.mul(y, nu_row)?);
            }
        }
        ModelParams::Recurrent(p) => {
            let consts = RecurrentConsts::build(g, p, n);
            let mut h_state = g.constant(Tensor::zeros(&[n, p.hidden]));
            for t in 0..t_len {
                let col = g.column(xs, t)?;
                let xt = g.broadcast(col, n)?;
                h_state = consts.cell(g, h_state, xt)?;
            }
            for step in 0..tau {
                let (mu, sd) = consts.emission(g, h_state)?;
                let eps = g.constant(noise.state[step].clone());
                let shock = g.mul(sd, eps)?;
                let mut y = g.add(mu, shock)?;
                if p.rank > 0 {
                    let eps_f = g.constant(noise.factor[step].clone());
                    let lowrank = g.matmul(eps_f, consts.v_t)?;
                    y = g.add(y, lowrank)?;
                }
                outputs.push(g.mul(y, nu_row)?);
                h_state = consts.cell(g, h_state, y)?;
            }
        }
    }
    Ok(outputs)
}

/// Recurrent-cell weights loaded into a graph as constants, transposed for
/// right-multiplication against `[n, *]` states.
struct RecurrentConsts {
    wz_t: NodeId,
    uz_t: NodeId,
    bz: NodeId,
    wr_t: NodeId,
    ur_t: NodeId,
    br: NodeId,
    wn_t: NodeId,
    un_t: NodeId,
    bn: NodeId,
    wmu_t: NodeId,
    bmu: NodeId,
    wsd_t: NodeId,
    bsd: NodeId,
    v_t: NodeId,
}

impl RecurrentConsts {
    fn build(g: &mut Graph, p: &super::RecurrentParams, n: usize) -> Self {
        let t = |g: &mut Graph, name: &str| {
            g.constant(crate::diff::graph::transpose_raw(&p.tensors[name]))
        };
        let row = |g: &mut Graph, name: &str| {
            let b = &p.tensors[name];
            let len = b.len();
            g.constant(Tensor::from_fn(&[n, len], |idx| b.data()[idx % len]))
        };
        Self {
            wz_t: t(g, "wz"),
            uz_t: t(g, "uz"),
            bz: row(g, "bz"),
            wr_t: t(g, "wr"),
            ur_t: t(g, "ur"),
            br: row(g, "br"),
            wn_t: t(g, "wn"),
            un_t: t(g, "un"),
            bn: row(g, "bn"),
            wmu_t: t(g, "w_mu"),
            bmu: row(g, "b_mu"),
            wsd_t: t(g, "w_sd"),
            bsd: row(g, "b_sd"),
            v_t: t(g, "v"),
        }
    }

    /// Gated recurrent cell, batched: h and x are [n, *].
    fn cell(&self, g: &mut Graph, h: NodeId, x: NodeId) -> Result<NodeId, crate::diff::DiffError> {
        let zx = g.matmul(x, self.wz_t)?;
        let zh = g.matmul(h, self.uz_t)?;
        let z = {
            let s = g.add(zx, zh)?;
            let s = g.add(s, self.bz)?;
            g.sigmoid(s)?
        };
        let rx = g.matmul(x, self.wr_t)?;
        let rh = g.matmul(h, self.ur_t)?;
        let r = {
            let s = g.add(rx, rh)?;
            let s = g.add(s, self.br)?;
            g.sigmoid(s)?
        };
        let nx = g.matmul(x, self.wn_t)?;
        let rh = g.mul(r, h)?;
        let nh = g.matmul(rh, self.un_t)?;
        let cand = {
            let s = g.add(nx, nh)?;
            let s = g.add(s, self.bn)?;
            g.tanh(s)?
        };
        // h' = (1 - z) * cand + z * h
        let one = g.scalar_const(1.0);
        let omz = g.sub(one, z)?;
        let a = g.mul(omz, cand)?;
        let b = g.mul(z, h)?;
        g.add(a, b)
    }

    /// Mean and diagonal-scale heads from the hidden state.
    fn emission(
        &self,
        g: &mut Graph,
        h: NodeId,
    ) -> Result<(NodeId, NodeId), crate::diff::DiffError> {
        let mu = {
            let m = g.matmul(h, self.wmu_t)?;
            g.add(m, self.bmu)?
        };
        let sd = {
            let s = g.matmul(h, self.wsd_t)?;
            let s = g.add(s, self.bsd)?;
            g.softplus(s)?
        };
        Ok((mu, sd))
    }
}
