//! Channel-wise rectification: both branches' channels become tokens of one
//! sequence, a selective scan mixes them, and each channel gets a weight in
//! `(0, 1)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{LayerNorm, Linear, ParamBuilder};
use crate::ssm::{SelectiveSsm, SsmConfig};
use crate::tensor::Float;
use crate::vss::hwc;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrmConfig {
    /// Channels per branch.
    pub channels: usize,
    /// Length every channel token is pooled to.
    pub token_len: usize,
    pub state: usize,
    pub bidirectional: bool,
}

impl CrmConfig {
    pub fn new(channels: usize, state: usize) -> Self {
        Self {
            channels,
            token_len: 64,
            state,
            bidirectional: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Crm {
    pub cfg: CrmConfig,
    pub norm: LayerNorm,
    pub compress: Linear,
    pub ssm: SelectiveSsm,
    pub head: Linear,
}

impl Crm {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: CrmConfig) -> Result<Self> {
        let mut pb = pb.sub(name);
        let p = cfg.token_len;
        Ok(Self {
            cfg,
            norm: LayerNorm::new(&mut pb, "norm", 2 * cfg.channels)?,
            compress: Linear::new(&mut pb, "compress", p, p, true)?,
            ssm: SelectiveSsm::new(&mut pb, "ssm", SsmConfig::new(p, cfg.state))?,
            head: Linear::new(&mut pb, "head", p, 1, true)?,
        })
    }

    /// The `2C` channel weights, PET channels first.
    pub fn weights<T: Float>(&self, g: &mut Graph<'_, T>, x_pet: Var, x_ct: Var) -> Result<Var> {
        let (h, w, c) = hwc("crm", g.shape(x_pet))?;
        if g.shape(x_ct) != g.shape(x_pet) || c != self.cfg.channels {
            return Err(Error::contract(format!(
                "crm: inputs {:?} and {:?} for {} channels",
                g.shape(x_pet),
                g.shape(x_ct),
                self.cfg.channels
            )));
        }
        let x = g.concat(&[x_pet, x_ct], 2)?;
        let x = self.norm.forward(g, x)?;
        let x = g.reshape(x, &[h * w, 2 * c])?;
        let tokens = g.transpose(x)?;
        let tokens = g.adaptive_avg_pool_last(tokens, self.cfg.token_len)?;
        let tokens = self.compress.forward(g, tokens)?;
        let mut mixed = self.ssm.forward(g, tokens)?;
        if self.cfg.bidirectional {
            let rev = g.flip(tokens, 0)?;
            let rev = self.ssm.forward(g, rev)?;
            let rev = g.flip(rev, 0)?;
            mixed = g.add(mixed, rev)?;
        }
        let logits = self.head.forward(g, mixed)?;
        let logits = g.reshape(logits, &[2 * c])?;
        g.sigmoid(logits)
    }

    /// Rescales both inputs channelwise by their learned weights.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x_pet: Var, x_ct: Var) -> Result<(Var, Var)> {
        let wts = self.weights(g, x_pet, x_ct)?;
        let c = self.cfg.channels;
        let parts = g.split(wts, 0, &[c, c])?;
        Ok((g.mul(x_pet, parts[0])?, g.mul(x_ct, parts[1])?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn crm(c: usize) -> (ParamStore, Crm) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let m = Crm::new(&mut pb, "crm", CrmConfig::new(c, 4)).unwrap();
        (store, m)
    }

    #[test]
    fn outputs_are_bounded_rescalings() {
        let (store, m) = crm(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (pt, ct) = (random(&[5, 3, 4], &mut rng), random(&[5, 3, 4], &mut rng));
            let mut g = Graph::inference(&store);
            let (p, c) = (g.input(pt.clone()), g.input(ct.clone()));
            let w = m.weights(&mut g, p, c).unwrap();
            let wv = g.value(w).data().to_vec();
            assert_eq!(wv.len(), 8);
            assert!(wv.iter().all(|&v| v > 0.0 && v < 1.0));
            let (op, oc) = m.forward(&mut g, p, c).unwrap();
            for (i, (o, x)) in g.value(op).data().iter().zip(pt.data()).enumerate() {
                assert!(o.abs() <= x.abs());
                assert_eq!(*o, x * wv[i % 4]);
            }
            for (i, (o, x)) in g.value(oc).data().iter().zip(ct.data()).enumerate() {
                assert_eq!(*o, x * wv[4 + i % 4]);
            }
        }
    }

    #[test]
    fn zero_modality_stays_zero() {
        let (store, m) = crm(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::inference(&store);
        let p = g.input(Tensor::zeros(vec![4, 4, 4]));
        let c = g.input(random(&[4, 4, 4], &mut rng));
        let (op, _) = m.forward(&mut g, p, c).unwrap();
        assert!(g.value(op).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_order_matters() {
        let (store, m) = crm(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut differs = 0;
        for _ in 0..5 {
            let (pt, ct) = (random(&[8, 8, 4], &mut rng), random(&[8, 8, 4], &mut rng));
            let mut g = Graph::inference(&store);
            let (p, c) = (g.input(pt), g.input(ct));
            let (a, _) = m.forward(&mut g, p, c).unwrap();
            let (_, b) = m.forward(&mut g, c, p).unwrap();
            if g.value(a).max_abs_diff(g.value(b)).unwrap() > 1e-6 {
                differs += 1;
            }
        }
        assert_eq!(differs, 5);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (store, m) = crm(4);
        let mut g = Graph::inference(&store);
        let p = g.input(Tensor::zeros(vec![4, 4, 4]));
        let c = g.input(Tensor::zeros(vec![4, 2, 4]));
        assert!(matches!(m.forward(&mut g, p, c), Err(Error::Contract(_))));
    }

    #[test]
    fn bidirectional_variant_keeps_the_range() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let cfg = CrmConfig {
            bidirectional: true,
            ..CrmConfig::new(2, 4)
        };
        let m = Crm::new(&mut pb, "crm", cfg).unwrap();
        let mut g = Graph::inference(&store);
        let p = g.input(random(&[3, 3, 2], &mut rng));
        let c = g.input(random(&[3, 3, 2], &mut rng));
        let w = m.weights(&mut g, p, c).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
