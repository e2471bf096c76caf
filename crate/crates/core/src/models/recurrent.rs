//! Recurrent low-rank forecaster: gated recurrent cell, mean head,
//! diagonal-scale head, unconditional low-rank emission factor.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Window;
use crate::diff::{Graph, NodeId, Tensor};
use crate::optim::Adam;

use super::rollout::NoiseBundle;
use super::{lowrank_logpdf_node, softplus_inv, ModelError, Scaling};

/// Parameter tensors keyed by name:
/// `wz/uz/bz`, `wr/ur/br`, `wn/un/bn` for the cell,
/// `w_mu/b_mu` and `w_sd/b_sd` for the emission heads, `v` for the factor.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentParams {
    pub dims: usize,
    pub hidden: usize,
    pub rank: usize,
    pub tensors: BTreeMap<String, Tensor>,
}

impl RecurrentParams {
    pub fn init(dims: usize, hidden: usize, rank: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |rows: usize, cols: usize| {
            let bound = (1.0 / cols.max(1) as f64).sqrt();
            Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-bound..bound))
        };
        let mut tensors = BTreeMap::new();
        for gate in ["z", "r", "n"] {
            tensors.insert(format!("w{gate}"), mat(hidden, dims));
            tensors.insert(format!("u{gate}"), mat(hidden, hidden));
            tensors.insert(format!("b{gate}"), Tensor::zeros(&[hidden]));
        }
        tensors.insert("w_mu".into(), mat(dims, hidden));
        tensors.insert("b_mu".into(), Tensor::zeros(&[dims]));
        tensors.insert("w_sd".into(), mat(dims, hidden));
        tensors.insert("b_sd".into(), Tensor::filled(&[dims], softplus_inv(0.5)));
        tensors.insert("v".into(), {
            let bound = 0.05;
            Tensor::from_fn(&[dims, rank], |_| rng.gen_range(-bound..bound))
        });
        Self {
            dims,
            hidden,
            rank,
            tensors,
        }
    }

    fn t(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    /// Plain cell evaluation for the non-graph sampler.
    fn cell_direct(&self, h: &[f64], x: &[f64]) -> Vec<f64> {
        let m = self.hidden;
        let gate = |w: &Tensor, u: &Tensor, b: &Tensor, i: usize, hv: &[f64]| {
            let mut s = b.data()[i];
            for (c, v) in w.row(i).iter().zip(x) {
                s += c * v;
            }
            for (c, v) in u.row(i).iter().zip(hv) {
                s += c * v;
            }
            s
        };
        let (wz, uz, bz) = (self.t("wz"), self.t("uz"), self.t("bz"));
        let (wr, ur, br) = (self.t("wr"), self.t("ur"), self.t("br"));
        let (wn, un, bn) = (self.t("wn"), self.t("un"), self.t("bn"));
        let mut out = vec![0.0; m];
        let rh: Vec<f64> = (0..m)
            .map(|i| sigmoid(gate(wr, ur, br, i, h)) * h[i])
            .collect();
        for i in 0..m {
            let z = sigmoid(gate(wz, uz, bz, i, h));
            let cand = gate(wn, un, bn, i, &rh).tanh();
            out[i] = (1.0 - z) * cand + z * h[i];
        }
        out
    }

    fn emission_direct(&self, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dims;
        let (w_mu, b_mu) = (self.t("w_mu"), self.t("b_mu"));
        let (w_sd, b_sd) = (self.t("w_sd"), self.t("b_sd"));
        let head = |w: &Tensor, b: &Tensor, i: usize| {
            let mut s = b.data()[i];
            for (c, v) in w.row(i).iter().zip(h) {
                s += c * v;
            }
            s
        };
        let mu = (0..d).map(|i| head(w_mu, b_mu, i)).collect();
        let sd = (0..d).map(|i| softplus(head(w_sd, b_sd, i))).collect();
        (mu, sd)
    }

    /// Reparameterized rollout; returns n x d x tau, unscaled.
    pub(super) fn sample_direct(
        &self,
        x: &Tensor,
        scaling: &Scaling,
        noise: &NoiseBundle,
    ) -> Result<Tensor, ModelError> {
        let d = self.dims;
        let t_len = x.shape()[1];
        let n = noise.n_paths();
        let tau = noise.horizon();
        let xs = scaling.scale_history(x);

        let mut h = vec![0.0; self.hidden];
        for t in 0..t_len {
            let col = xs.col(t);
            h = self.cell_direct(&h, &col);
        }
        let v = self.t("v");
        let mut states: Vec<Vec<f64>> = (0..n).map(|_| h.clone()).collect();
        let mut out = vec![0.0; n * d * tau];
        for step in 0..tau {
            let eps = &noise.state[step];
            for (j, hj) in states.iter_mut().enumerate() {
                let (mu, sd) = self.emission_direct(hj);
                let mut y: Vec<f64> = (0..d).map(|i| mu[i] + sd[i] * eps.at2(j, i)).collect();
                if self.rank > 0 {
                    let eps_f = &noise.factor[step];
                    for (i, yi) in y.iter_mut().enumerate() {
                        for a in 0..self.rank {
                            *yi += v.at2(i, a) * eps_f.at2(j, a);
                        }
                    }
                }
                for i in 0..d {
                    out[(j * d + i) * tau + step] = y[i] * scaling.factors[i];
                }
                *hj = self.cell_direct(hj, &y);
            }
        }
        Ok(Tensor::new(vec![n, d, tau], out).expect("shape consistent"))
    }

    /// Teacher-forced negative log-likelihood graph over one window's
    /// scaled series. With `as_leaves` the parameters enter as named
    /// variables so the same builder serves training and evaluation.
    pub(crate) fn nll_node(
        &self,
        g: &mut Graph,
        series: &[Vec<f64>],
        as_leaves: bool,
    ) -> Result<NodeId, ModelError> {
        let len = series[0].len();
        let d = self.dims;
        let mut nodes: BTreeMap<&str, NodeId> = BTreeMap::new();
        for (name, tensor) in &self.tensors {
            let id = if as_leaves {
                g.var(name.clone(), tensor.clone())?
            } else {
                g.constant(tensor.clone())
            };
            nodes.insert(name.as_str(), id);
        }
        let col =
            |t: usize| -> Tensor { Tensor::from_vec(series.iter().map(|row| row[t]).collect()) };

        let mut h = g.constant(Tensor::zeros(&[self.hidden]));
        let mut lls: Vec<NodeId> = Vec::with_capacity(len.saturating_sub(1));
        for t in 0..len - 1 {
            let xt = g.constant(col(t));
            h = self.cell_node(g, &nodes, h, xt)?;
            let mu = {
                let m = g.matmul(nodes["w_mu"], h)?;
                g.add(m, nodes["b_mu"])?
            };
            let sd = {
                let s = g.matmul(nodes["w_sd"], h)?;
                let s = g.add(s, nodes["b_sd"])?;
                g.softplus(s)?
            };
            let var = g.square(sd)?;
            let target = g.constant(col(t + 1));
            let factor = if self.rank > 0 {
                Some(nodes["v"])
            } else {
                None
            };
            let ll = lowrank_logpdf_node(g, target, mu, var, factor)?;
            lls.push(ll);
        }
        let stacked: Vec<NodeId> = lls
            .iter()
            .map(|id| g.reshape(*id, &[1]))
            .collect::<Result<_, _>>()?;
        let all = g.concat(&stacked, 0)?;
        let mean_ll = g.mean(all)?;
        let scale = -1.0 / d as f64; // per-observation NLL
        Ok(g.scale(mean_ll, scale)?)
    }

    fn cell_node(
        &self,
        g: &mut Graph,
        nodes: &BTreeMap<&str, NodeId>,
        h: NodeId,
        x: NodeId,
    ) -> Result<NodeId, ModelError> {
        let gate = |g: &mut Graph, w: NodeId, u: NodeId, b: NodeId, hv: NodeId| {
            let a = g.matmul(w, x)?;
            let c = g.matmul(u, hv)?;
            let s = g.add(a, c)?;
            g.add(s, b)
        };
        let z = {
            let s = gate(g, nodes["wz"], nodes["uz"], nodes["bz"], h)?;
            g.sigmoid(s)?
        };
        let r = {
            let s = gate(g, nodes["wr"], nodes["ur"], nodes["br"], h)?;
            g.sigmoid(s)?
        };
        let rh = g.mul(r, h)?;
        let cand = {
            let a = g.matmul(nodes["wn"], x)?;
            let c = g.matmul(nodes["un"], rh)?;
            let s = g.add(a, c)?;
            let s = g.add(s, nodes["bn"])?;
            g.tanh(s)?
        };
        let one = g.scalar_const(1.0);
        let omz = g.sub(one, z)?;
        let a = g.mul(omz, cand)?;
        let b = g.mul(z, h)?;
        Ok(g.add(a, b)?)
    }

    /// Mean per-observation NLL across windows (plain evaluation).
    pub fn mean_nll(&self, windows: &[Window], scaling: &Scaling) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for w in windows {
            let series = scaled_series(w, scaling);
            let mut g = Graph::new();
            let nll = self.nll_node(&mut g, &series, false)?;
            total += g.value(nll).item();
        }
        Ok(total / windows.len() as f64)
    }
}

pub(crate) fn scaled_series(w: &Window, scaling: &Scaling) -> Vec<Vec<f64>> {
    let d = w.dims();
    (0..d)
        .map(|i| {
            let nu = scaling.factors[i];
            let mut row: Vec<f64> = w.x.row(i).iter().map(|v| v / nu).collect();
            row.extend(w.y_true.row(i).iter().map(|v| v / nu));
            row
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Adam on the teacher-forced NLL; keeps the best parameters seen and
/// requires a strict improvement over the initialization.
pub(super) fn fit(
    windows: &[Window],
    hidden: usize,
    rank: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
    scaling: &Scaling,
) -> Result<RecurrentParams, ModelError> {
    let d = windows[0].dims();
    let mut params = RecurrentParams::init(d, hidden, rank, seed);
    let init_nll = params.mean_nll(windows, scaling)?;
    let mut best = (init_nll, params.clone());
    let mut adam = Adam::new(lr);

    let series: Vec<Vec<Vec<f64>>> = windows.iter().map(|w| scaled_series(w, scaling)).collect();
    for epoch in 0..epochs {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut epoch_nll = 0.0;
        for s in &series {
            let mut g = Graph::new();
            let nll = params.nll_node(&mut g, s, true)?;
            epoch_nll += g.value(nll).item();
            let gs = g.backward(nll)?;
            for (name, grad) in gs {
                match grads.get_mut(&name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        grads.insert(name, grad);
                    }
                }
            }
        }
        epoch_nll /= series.len() as f64;
        if !epoch_nll.is_finite() {
            return Err(ModelError::Divergence(format!(
                "non-finite NLL at epoch {epoch}"
            )));
        }
        if epoch_nll < best.0 {
            best = (epoch_nll, params.clone());
        }
        adam.step(&mut params.tensors, &grads);
    }
    let final_nll = params.mean_nll(windows, scaling)?;
    if final_nll < best.0 {
        best = (final_nll, params);
    }
    if best.0 >= init_nll {
        return Err(ModelError::Divergence(format!(
            "no likelihood improvement over initialization ({init_nll:.6} -> {:.6})",
            best.0
        )));
    }
    Ok(best.1)
}
