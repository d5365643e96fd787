//! The full dual-branch segmentation network, its loss and inference rule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::crm::{Crm, CrmConfig};
use crate::dcim::{Dcim, DcimConfig, DcimVariant};
use crate::error::{Error, Result};
use crate::params::{Linear, ParamBuilder, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::vss::{hwc, CvssBlock, Downsample, PatchEmbed, Upsample, VssBlock, VssConfig};

pub const STAGES: usize = 4;
const PATCH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CipaConfig {
    /// Side of the (square) input planes.
    pub resolution: usize,
    pub widths: [usize; STAGES],
    pub depths: [usize; STAGES],
    pub decoder_depth: usize,
    /// Region side of the interaction module, capped per stage at the
    /// stage's extent.
    pub region: usize,
    pub state: usize,
    pub classes: usize,
    pub enable_crm: bool,
    pub enable_dcim: bool,
    pub dcim_variant: DcimVariant,
    pub crm_token_len: usize,
    pub crm_bidirectional: bool,
    pub per_direction_ss2d: bool,
}

impl Default for CipaConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            widths: [32, 64, 128, 256],
            depths: [2, 2, 2, 2],
            decoder_depth: 1,
            region: 4,
            state: 16,
            classes: 2,
            enable_crm: true,
            enable_dcim: true,
            dcim_variant: DcimVariant::Full,
            crm_token_len: 64,
            crm_bidirectional: false,
            per_direction_ss2d: false,
        }
    }
}

impl CipaConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let down = PATCH << (STAGES - 1);
        if self.resolution == 0 || !self.resolution.is_multiple_of(down) {
            return fail(format!("resolution {} is not a multiple of {down}", self.resolution));
        }
        if self.widths.iter().any(|&w| w == 0 || w % 2 != 0) {
            return fail(format!("stage widths {:?} must be even and positive", self.widths));
        }
        if self.widths.windows(2).any(|p| p[1] != 2 * p[0]) {
            return fail(format!("stage widths {:?} must double per stage", self.widths));
        }
        if self.depths.contains(&0) || self.decoder_depth == 0 {
            return fail("block depths must be positive".into());
        }
        if !self.region.is_power_of_two() {
            return fail(format!("region side {} must be a power of two", self.region));
        }
        if self.state == 0 || self.crm_token_len == 0 {
            return fail("state size and token length must be positive".into());
        }
        if self.classes != 2 {
            return fail(format!("only binary segmentation is supported, got {} classes", self.classes));
        }
        Ok(())
    }

    /// Spatial side of stage `s` (0-based).
    pub fn stage_extent(&self, s: usize) -> usize {
        (self.resolution / PATCH) >> s
    }

    /// The configuration with both cross-modal modules removed.
    pub fn ablated(&self) -> Self {
        Self {
            enable_crm: false,
            enable_dcim: false,
            ..self.clone()
        }
    }
}

/// Features of one encoder stage.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    pub pet: Var,
    pub ct: Var,
    pub pet_rec: Var,
    pub ct_rec: Var,
    pub fused: Var,
}

#[derive(Clone, Debug)]
pub struct CipaNet {
    pub cfg: CipaConfig,
    pub patch: PatchEmbed,
    pub downs: Vec<Downsample>,
    pub encoder: Vec<Vec<VssBlock>>,
    pub crms: Vec<Option<Crm>>,
    pub dcims: Vec<Option<Dcim>>,
    pub ups: Vec<Upsample>,
    pub decoder: Vec<Vec<CvssBlock>>,
    pub head: Linear,
}

impl CipaNet {
    pub fn new(pb: &mut ParamBuilder, cfg: &CipaConfig) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.widths;
        let vss_cfg = |c: usize| VssConfig {
            per_direction: cfg.per_direction_ss2d,
            ..VssConfig::new(c, cfg.state)
        };
        let patch = PatchEmbed::new(pb, "patch_embed", 1, w[0], PATCH)?;
        let mut downs = Vec::new();
        let mut encoder = Vec::new();
        let mut crms = Vec::new();
        let mut dcims = Vec::new();
        for s in 0..STAGES {
            let mut pb = pb.sub(&format!("stage{s}"));
            if s > 0 {
                downs.push(Downsample::new(&mut pb, "down", w[s - 1])?);
            }
            encoder.push(
                (0..cfg.depths[s])
                    .map(|i| VssBlock::new(&mut pb, &format!("vss{i}"), vss_cfg(w[s])))
                    .collect::<Result<_>>()?,
            );
            let crm_cfg = CrmConfig {
                token_len: cfg.crm_token_len,
                bidirectional: cfg.crm_bidirectional,
                ..CrmConfig::new(w[s], cfg.state)
            };
            crms.push(cfg.enable_crm.then(|| Crm::new(&mut pb, "crm", crm_cfg)).transpose()?);
            let r = cfg.region.min(cfg.stage_extent(s));
            let dcim_cfg = DcimConfig::new(w[s], r, cfg.state, cfg.dcim_variant);
            dcims.push(cfg.enable_dcim.then(|| Dcim::new(&mut pb, "dcim", dcim_cfg)).transpose()?);
        }
        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        for s in 0..STAGES {
            let mut pb = pb.sub(&format!("decoder{s}"));
            if s < STAGES - 1 {
                ups.push(Upsample::new(&mut pb, "up", w[s + 1])?);
            }
            decoder.push(
                (0..cfg.decoder_depth)
                    .map(|i| CvssBlock::new(&mut pb, &format!("cvss{i}"), vss_cfg(w[s])))
                    .collect::<Result<_>>()?,
            );
        }
        let head = Linear::new(pb, "head", w[0], cfg.classes, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            patch,
            downs,
            encoder,
            crms,
            dcims,
            ups,
            decoder,
            head,
        })
    }

    /// Builds a network and its freshly initialised parameters.
    pub fn init(cfg: &CipaConfig, seed: u64) -> Result<(Self, ParamStore)> {
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let net = Self::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg)?;
        Ok((net, store))
    }

    /// Maps preprocessed `[0, 255]` planes to `[−1, 1]` network inputs.
    fn input<T: Float>(&self, g: &mut Graph<'_, T>, plane: Var) -> Result<Var> {
        let shape = g.shape(plane).to_vec();
        let res = self.cfg.resolution;
        let (h, w) = match shape[..] {
            [h, w] | [h, w, 1] => (h, w),
            _ => return Err(Error::shape("cipa_net", format!("input plane {shape:?}"))),
        };
        if (h, w) != (res, res) {
            return Err(Error::Config(format!("input {h}x{w} for a {res}x{res} network")));
        }
        let x = g.reshape(plane, &[h, w, 1])?;
        let x = g.scale(x, 1.0 / 127.5)?;
        g.add_scalar(x, -1.0)
    }

    /// Runs the encoder and the cross-modal modules of every stage.
    pub fn encode<T: Float>(&self, g: &mut Graph<'_, T>, pet: Var, ct: Var) -> Result<Vec<StageFeatures>> {
        let mut p = self.input(g, pet)?;
        let mut c = self.input(g, ct)?;
        p = self.patch.forward(g, p)?;
        c = self.patch.forward(g, c)?;
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            if s > 0 {
                p = self.downs[s - 1].forward(g, p)?;
                c = self.downs[s - 1].forward(g, c)?;
            }
            for block in &self.encoder[s] {
                p = block.forward(g, p)?;
                c = block.forward(g, c)?;
            }
            let (pet_feat, ct_feat) = (p, c);
            if let Some(crm) = &self.crms[s] {
                (p, c) = crm.forward(g, p, c)?;
            }
            let fused = match &self.dcims[s] {
                Some(dcim) => dcim.forward(g, p, c)?,
                None => {
                    let sum = g.add(p, c)?;
                    g.scale(sum, 0.5)?
                }
            };
            stages.push(StageFeatures {
                pet: pet_feat,
                ct: ct_feat,
                pet_rec: p,
                ct_rec: c,
                fused,
            });
        }
        Ok(stages)
    }

    /// Per-pixel class logits `[H, W, K]` for a pair of `[H, W]` planes.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, pet: Var, ct: Var) -> Result<Var> {
        let stages = self.encode(g, pet, ct)?;
        let mut d = stages[STAGES - 1].fused;
        for s in (0..STAGES).rev() {
            if s < STAGES - 1 {
                d = self.ups[s].forward(g, d)?;
                d = g.add(d, stages[s].fused)?;
            }
            for block in &self.decoder[s] {
                d = block.forward(g, d)?;
            }
        }
        let logits = self.head.forward(g, d)?;
        let res = self.cfg.resolution;
        g.resize_bilinear(logits, res, res)
    }
}

fn check_mask(mask: &Tensor<f32>, h: usize, w: usize) -> Result<()> {
    if mask.numel() != h * w {
        return Err(Error::shape("loss", format!("mask {:?} for {h}x{w} logits", mask.shape())));
    }
    if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!("mask must be binary, found {v}")));
    }
    Ok(())
}

/// Mean pixelwise cross-entropy of two-class logits `[H, W, 2]`.
pub fn cross_entropy<T: Float>(g: &mut Graph<'_, T>, logits: Var, mask: &Tensor<f32>) -> Result<Var> {
    let (h, w, k) = hwc("cross_entropy", g.shape(logits))?;
    if k != 2 {
        return Err(Error::shape("cross_entropy", format!("{k} classes")));
    }
    check_mask(mask, h, w)?;
    let onehot: Vec<T> = mask
        .data()
        .iter()
        .flat_map(|&m| [T::of(1.0 - m as f64), T::of(m as f64)])
        .collect();
    let onehot = g.constant(Tensor::new(vec![h, w, 2], onehot)?);
    let logp = g.log_softmax(logits)?;
    let picked = g.mul(logp, onehot)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0 / (h * w) as f64)
}

/// `1 − (2·Σpg + 1) / (Σp + Σg + 1)` on the tumour-class probabilities.
pub fn soft_dice<T: Float>(g: &mut Graph<'_, T>, logits: Var, mask: &Tensor<f32>) -> Result<Var> {
    let (h, w, _) = hwc("soft_dice", g.shape(logits))?;
    check_mask(mask, h, w)?;
    let probs = g.softmax(logits)?;
    let tumour = g.narrow(probs, 2, 1, 1)?;
    let target = g.constant(Tensor::new(
        vec![h, w, 1],
        mask.data().iter().map(|&m| T::of(m as f64)).collect(),
    )?);
    let inter = g.mul(tumour, target)?;
    let inter = g.sum(inter)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, 1.0)?;
    let psum = g.sum(tumour)?;
    let gsum: f64 = mask.data().iter().map(|&m| m as f64).sum();
    let den = g.add_scalar(psum, gsum + 1.0)?;
    let ratio = g.div(num, den)?;
    let neg = g.neg(ratio)?;
    g.add_scalar(neg, 1.0)
}

/// Cross-entropy plus soft Dice, equally weighted.
pub fn segmentation_loss<T: Float>(g: &mut Graph<'_, T>, logits: Var, mask: &Tensor<f32>) -> Result<Var> {
    let ce = cross_entropy(g, logits, mask)?;
    let dice = soft_dice(g, logits, mask)?;
    g.add(ce, dice)
}

/// Binary mask from `[H, W, 2]` logits; exact ties go to background.
pub fn predict_mask<T: Float>(logits: &Tensor<T>) -> Result<Tensor<f32>> {
    let (h, w) = match *logits.shape() {
        [h, w, 2] => (h, w),
        _ => return Err(Error::shape("predict_mask", format!("logits {:?}", logits.shape()))),
    };
    let data = logits
        .data()
        .chunks_exact(2)
        .map(|p| if p[1] > p[0] { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Runs the network without recording gradients and thresholds the logits.
pub fn infer(net: &CipaNet, store: &ParamStore, pet: &Tensor<f32>, ct: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::inference(store);
    let p = g.input(pet.clone());
    let c = g.input(ct.clone());
    let logits = net.forward(&mut g, p, c)?;
    predict_mask(g.value(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    fn plane(res: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![res, res], (0..res * res).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
    }

    #[test]
    fn logits_cover_the_input_grid() {
        let cfg = tiny();
        let (net, store) = CipaNet::init(&cfg, 0).unwrap();
        let mut g = Graph::inference(&store);
        let p = g.input(plane(32, 1));
        let c = g.input(plane(32, 2));
        let y = net.forward(&mut g, p, c).unwrap();
        assert_eq!(g.shape(y), &[32, 32, 2]);
    }

    #[test]
    fn config_validation() {
        assert!(CipaConfig::default().validate().is_ok());
        let bad = CipaConfig {
            resolution: 48,
            ..CipaConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = CipaConfig {
            widths: [8, 16, 16, 32],
            ..CipaConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_counts_follow_the_ablation_ladder() {
        let base = tiny().ablated();
        let crm = CipaConfig {
            enable_crm: true,
            ..base.clone()
        };
        let full = tiny();
        let count = |c: &CipaConfig| CipaNet::init(c, 0).unwrap().1.num_elements();
        assert!(count(&base) < count(&crm));
        assert!(count(&crm) < count(&full));
    }

    #[test]
    fn ablated_network_has_no_cross_modal_modules() {
        let (net, store) = CipaNet::init(&tiny().ablated(), 0).unwrap();
        assert!(net.crms.iter().all(Option::is_none));
        assert!(net.dcims.iter().all(Option::is_none));
        assert!(store.iter().all(|(_, n, _)| !n.contains("crm") && !n.contains("dcim")));
    }

    #[test]
    fn identical_inputs_give_identical_branch_features() {
        let x = plane(32, 4);
        // rectification weighs the two branches differently, so equality
        // below the first stage needs the module switched off
        let no_crm = CipaConfig {
            enable_crm: false,
            ..tiny()
        };
        for (cfg, stages) in [(tiny(), 1), (no_crm, STAGES)] {
            let (net, store) = CipaNet::init(&cfg, 3).unwrap();
            let mut g = Graph::inference(&store);
            let p = g.input(x.clone());
            let c = g.input(x.clone());
            for st in &net.encode(&mut g, p, c).unwrap()[..stages] {
                assert_eq!(g.value(st.pet).data(), g.value(st.ct).data());
            }
        }
    }

    #[test]
    fn uniform_logits_on_a_balanced_mask() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::zeros(vec![2, 2, 2]));
        let mask = Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let ce = cross_entropy(&mut g, logits, &mask).unwrap();
        assert!((g.value(ce).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logits_give_small_loss() {
        let mask = Tensor::from_f64(vec![4, 4], &[[0.0, 1.0]; 8].concat()).unwrap();
        let logits: Vec<f64> = mask
            .data()
            .iter()
            .flat_map(|&m| if m == 1.0 { [-20.0, 20.0] } else { [20.0, -20.0] })
            .collect();
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::from_f64(vec![4, 4, 2], &logits).unwrap());
        let loss = segmentation_loss(&mut g, l, &mask).unwrap();
        assert!(g.value(loss).item().unwrap() < 0.01);
    }

    #[test]
    fn non_binary_masks_are_rejected() {
        let mut g = Graph::<f32>::new();
        let l = g.input(Tensor::zeros(vec![2, 2, 2]));
        let mask = Tensor::from_f64(vec![2, 2], &[0.0, 0.5, 1.0, 0.0]).unwrap();
        assert!(matches!(segmentation_loss(&mut g, l, &mask), Err(Error::Contract(_))));
    }

    #[test]
    fn argmax_and_ties() {
        let l = Tensor::from_f64(vec![1, 2, 2], &[1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(predict_mask::<f32>(&l).unwrap().data(), &[1.0, 1.0]);
        let l = Tensor::from_f64(vec![1, 2, 2], &[0.5, 0.5, -1.0, -1.0]).unwrap();
        assert_eq!(predict_mask::<f32>(&l).unwrap().data(), &[0.0, 0.0]);
    }
}
