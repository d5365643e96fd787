//! AdamW training with a cosine schedule. Each step draws its batch and
//! augmentations from a random stream keyed by `(seed, step)`, so a resumed
//! run replays exactly what an uninterrupted one would have done.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{augment, ModalityPair};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, Report};
use crate::net::{infer, segmentation_loss, CipaConfig, CipaNet};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Learning rate at step 0; annealed to zero at `steps`.
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            lr: 6e-5,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return fail("steps and batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {}", self.lr));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail(format!("betas {:?}", self.betas));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return fail("eps must be positive and weight decay non-negative".into());
        }
        Ok(())
    }

    /// Cosine-annealed learning rate for the update made at `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let t = step.min(self.steps) as f64 / self.steps as f64;
        0.5 * self.lr * (1.0 + (PI * t).cos())
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn zeros(store: &ParamStore) -> Self {
        let m: Vec<Vec<f32>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self { v: m.clone(), m }
    }

    /// One decoupled-weight-decay Adam update; `t` counts from 1.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f32>], cfg: &TrainConfig, lr: f64, t: u64) {
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let decay = (1.0 - lr * cfg.weight_decay) as f32;
        for (i, (_, _, p)) in store.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let step = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
                *w = *w * decay - step as f32;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Loss and per-parameter gradients of one sample.
pub fn sample_gradients(
    net: &CipaNet,
    store: &ParamStore,
    pair: &ModalityPair,
) -> Result<(f64, Vec<(ParamId, Vec<f32>)>)> {
    let mask = pair
        .mask
        .as_ref()
        .ok_or_else(|| Error::contract(format!("{}: training needs a mask", pair.id)))?;
    let mut g = Graph::with_params(store);
    let p = g.input(pair.pet.clone());
    let c = g.input(pair.ct.clone());
    let logits = net.forward(&mut g, p, c)?;
    let loss = segmentation_loss(&mut g, logits, mask)?;
    let value = g.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NumericFault { op: "loss" });
    }
    g.backward(loss)?;
    let grads = g
        .param_leaves()
        .filter_map(|(id, v)| g.grad(v).map(|d| (id, d.to_vec())))
        .collect();
    Ok((value, grads))
}

/// Network, parameters and optimizer state of one run.
pub struct Trainer {
    pub model: CipaConfig,
    pub cfg: TrainConfig,
    pub net: CipaNet,
    pub store: ParamStore,
    pub adam: AdamState,
    /// Number of updates applied so far.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: CipaConfig, cfg: TrainConfig) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        let (net, store) = CipaNet::init(&model, cfg.seed)?;
        let adam = AdamState::zeros(&store);
        Ok(Self {
            model,
            cfg,
            net,
            store,
            adam,
            step: 0,
        })
    }

    /// Rebuilds a trainer around saved state, checking names and shapes.
    pub fn from_parts(model: CipaConfig, cfg: TrainConfig, store: ParamStore, adam: AdamState, step: u64) -> Result<Self> {
        let mut fresh = Self::new(model, cfg)?;
        if fresh.store.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, the configured network {}",
                store.len(),
                fresh.store.len()
            )));
        }
        for ((_, a, ta), (_, b, tb)) in fresh.store.iter().zip(store.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {b} {:?} does not match {a} {:?}",
                    tb.shape(),
                    ta.shape()
                )));
            }
        }
        let sizes_ok = store
            .iter()
            .enumerate()
            .all(|(i, (_, _, t))| adam.m[i].len() == t.numel() && adam.v[i].len() == t.numel());
        if adam.m.len() != store.len() || adam.v.len() != store.len() || !sizes_ok {
            return Err(Error::Config("optimizer moments do not match the parameters".into()));
        }
        fresh.store = store;
        fresh.adam = adam;
        fresh.step = step;
        Ok(fresh)
    }

    pub fn finished(&self) -> bool {
        self.step >= self.cfg.steps
    }

    /// Batch of the upcoming step: sample ids and (possibly augmented) pairs.
    pub fn batch(&self, data: &[ModalityPair]) -> Result<Vec<ModalityPair>> {
        if data.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step);
        let n = self.cfg.batch_size.min(data.len());
        let mut picks = sample(&mut rng, data.len(), n).into_vec();
        picks.sort_unstable();
        picks
            .into_iter()
            .map(|i| {
                if self.cfg.augment {
                    augment(&data[i], &mut rng).map(|(p, _)| p)
                } else {
                    Ok(data[i].clone())
                }
            })
            .collect()
    }

    /// Forward, backward and one optimizer update on the next batch.
    pub fn train_step(&mut self, data: &[ModalityPair]) -> Result<StepStats> {
        let batch = self.batch(data)?;
        let results: Vec<Result<(f64, Vec<(ParamId, Vec<f32>)>)>> = batch
            .par_iter()
            .map(|pair| sample_gradients(&self.net, &self.store, pair))
            .collect();
        let diverged = |step| Error::Diverged {
            step,
            ids: batch.iter().map(|p| p.id.clone()).collect(),
        };
        let mut grads: Vec<Vec<f32>> = self.store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let mut loss = 0.0;
        for r in results {
            let (l, gs) = match r {
                Err(e) if e.is_numeric_fault() => return Err(diverged(self.step)),
                other => other?,
            };
            loss += l;
            for (id, d) in gs {
                let slot = &mut grads[id.0];
                slot.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
            }
        }
        let scale = 1.0 / batch.len() as f32;
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(diverged(self.step));
        }
        let lr = self.cfg.lr_at(self.step);
        self.adam.update(&mut self.store, &grads, &self.cfg, lr, self.step + 1);
        let stats = StepStats {
            step: self.step,
            lr,
            loss: loss / batch.len() as f64,
        };
        self.step += 1;
        Ok(stats)
    }

    pub fn evaluate(&self, data: &[ModalityPair]) -> Result<Report> {
        evaluate_model(&self.net, &self.store, data)
    }
}

/// Metrics of the network's predictions against the pairs' masks.
pub fn evaluate_model(net: &CipaNet, store: &ParamStore, data: &[ModalityPair]) -> Result<Report> {
    let preds: Vec<_> = data
        .par_iter()
        .map(|p| infer(net, store, &p.pet, &p.ct))
        .collect::<Result<_>>()?;
    let gts: Vec<_> = data
        .iter()
        .map(|p| {
            p.mask
                .clone()
                .ok_or_else(|| Error::contract(format!("{}: evaluation needs a mask", p.id)))
        })
        .collect::<Result<_>>()?;
    let ids: Vec<String> = data.iter().map(|p| p.id.clone()).collect();
    let spacing = data.first().map_or((1.0, 1.0), |p| p.spacing);
    evaluate_dataset(&ids, &preds, &gts, spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    fn tiny() -> CipaConfig {
        CipaConfig {
            resolution: 32,
            widths: [4, 8, 16, 32],
            depths: [1, 1, 1, 1],
            state: 4,
            crm_token_len: 8,
            ..CipaConfig::default()
        }
    }

    fn data(n: usize) -> Vec<ModalityPair> {
        synth_generate(&SynthSpec {
            count: n,
            resolution: 32,
            radius: [3.0, 6.0],
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 6e-5);
        assert!(cfg.lr_at(cfg.steps).abs() < 1e-20);
        assert!((cfg.lr_at(250) - 3e-5).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (_, mut store) = CipaNet::init(&tiny(), 0).unwrap();
        let before: Vec<Vec<f32>> = store.iter().map(|(_, _, t)| t.data().to_vec()).collect();
        let grads: Vec<Vec<f32>> = before.iter().map(|p| vec![0.5; p.len()]).collect();
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut adam = AdamState::zeros(&store);
        adam.update(&mut store, &grads, &cfg, 1e-3, 1);
        for ((_, _, t), b) in store.iter().zip(&before) {
            for (x, y) in t.data().iter().zip(b) {
                assert!(((y - x) as f64 - 1e-3).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let d = data(4);
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut t = Trainer::new(tiny(), cfg.clone()).unwrap();
            (0..3).map(|_| t.train_step(&d).unwrap().loss).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let d = data(2);
        let cfg = TrainConfig {
            steps: 50,
            batch_size: 2,
            lr: 3e-3,
            augment: false,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(tiny(), cfg).unwrap();
        let losses: Vec<f64> = (0..50).map(|_| t.train_step(&d).unwrap().loss).collect();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn non_finite_parameters_report_the_batch() {
        let d = data(3);
        let mut t = Trainer::new(tiny(), TrainConfig::default()).unwrap();
        let id = t.store.find("head.weight").unwrap();
        t.store.get_mut(id).unwrap().data_mut()[0] = f32::NAN;
        match t.train_step(&d) {
            Err(Error::Diverged { step: 0, ids }) => assert!(!ids.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
