//! Four-direction 2D selective scanning and the encoder/decoder blocks built
//! on it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Conv2d, LayerNorm, Linear, ParamBuilder, ParamId};
use crate::ssm::{SelectiveSsm, SsmConfig};
use crate::tensor::Float;

/// Scan directions, in merge order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    RowForward,
    RowReverse,
    ColForward,
    ColReverse,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowForward,
        Direction::RowReverse,
        Direction::ColForward,
        Direction::ColReverse,
    ];

    /// `order[t]` is the row-major pixel index visited at step `t`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let n = h * w;
        let col = |t: usize| (t % h) * w + t / h;
        match self {
            Direction::RowForward => (0..n).collect(),
            Direction::RowReverse => (0..n).rev().collect(),
            Direction::ColForward => (0..n).map(col).collect(),
            Direction::ColReverse => (0..n).rev().map(col).collect(),
        }
    }
}

pub(crate) fn hwc(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
        _ => Err(Error::shape(op, format!("expected non-empty [H, W, C], got {shape:?}"))),
    }
}

/// 2D selective scan over `[H, W, E]` maps: one scan per direction, folded
/// back to the grid and summed.
#[derive(Clone, Debug)]
pub struct Ss2d {
    /// One SSM shared by all directions, or one per direction.
    pub ssms: Vec<SelectiveSsm>,
}

impl Ss2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: SsmConfig, per_direction: bool) -> Result<Self> {
        let mut pb = pb.sub(name);
        let ssms = if per_direction {
            (0..4)
                .map(|i| SelectiveSsm::new(&mut pb, &format!("ssm{i}"), cfg))
                .collect::<Result<_>>()?
        } else {
            vec![SelectiveSsm::new(&mut pb, "ssm", cfg)?]
        };
        Ok(Self { ssms })
    }

    fn gathered<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Vec<usize>, usize, usize)> {
        let (h, w, e) = hwc("ss2d", g.shape(x))?;
        let flat = g.reshape(x, &[h * w, e])?;
        let index: Vec<usize> = Direction::ALL.iter().flat_map(|d| d.order(h, w)).collect();
        let seqs = g.gather_rows(flat, &index)?;
        let seqs = g.reshape(seqs, &[4, h * w, e])?;
        let y = if let [ssm] = &self.ssms[..] {
            ssm.forward(g, seqs)?
        } else {
            let lanes = g.split(seqs, 0, &[1; 4])?;
            let outs = lanes
                .into_iter()
                .zip(&self.ssms)
                .map(|(lane, ssm)| ssm.forward(g, lane))
                .collect::<Result<Vec<_>>>()?;
            g.concat(&outs, 0)?
        };
        Ok((y, index, h, w))
    }

    /// The four directional outputs, each folded back onto the `[H, W, E]`
    /// grid, before merging.
    pub fn directions<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Vec<Var>> {
        let (y, index, h, w) = self.gathered(g, x)?;
        let e = *g.shape(y).last().unwrap();
        let n = h * w;
        g.split(y, 0, &[1; 4])?
            .into_iter()
            .enumerate()
            .map(|(k, lane)| {
                let lane = g.reshape(lane, &[n, e])?;
                let folded = g.scatter_add_rows(lane, &index[k * n..(k + 1) * n], n)?;
                g.reshape(folded, &[h, w, e])
            })
            .collect()
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (y, index, h, w) = self.gathered(g, x)?;
        let e = *g.shape(y).last().unwrap();
        let y = g.reshape(y, &[4 * h * w, e])?;
        let merged = g.scatter_add_rows(y, &index, h * w)?;
        g.reshape(merged, &[h, w, e])
    }
}

/// Width, state size and SS2D sharing of a VSS block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VssConfig {
    pub width: usize,
    pub state: usize,
    pub expand: usize,
    pub mlp_ratio: usize,
    pub per_direction: bool,
}

impl VssConfig {
    pub fn new(width: usize, state: usize) -> Self {
        Self {
            width,
            state,
            expand: 2,
            mlp_ratio: 4,
            per_direction: false,
        }
    }
}

/// Encoder block: `x + mix(LN(x))`, then `x + MLP(LN(x))`, where the mixer
/// is the gated SS2D path.
#[derive(Clone, Debug)]
pub struct VssBlock {
    pub cfg: VssConfig,
    pub norm1: LayerNorm,
    pub in_proj: Linear,
    pub dw_weight: ParamId,
    pub dw_bias: ParamId,
    pub ss2d: Ss2d,
    pub out_proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl VssBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: VssConfig) -> Result<Self> {
        let mut pb = pb.sub(name);
        let (c, e) = (cfg.width, cfg.width * cfg.expand);
        let hidden = c * cfg.mlp_ratio;
        Ok(Self {
            cfg,
            norm1: LayerNorm::new(&mut pb, "norm1", c)?,
            in_proj: Linear::new(&mut pb, "in_proj", c, 2 * e, false)?,
            dw_weight: pb.uniform("dwconv.weight", &[3, 3, e], 1.0 / 3.0)?,
            dw_bias: pb.zeros("dwconv.bias", &[e])?,
            ss2d: Ss2d::new(&mut pb, "ss2d", SsmConfig::new(e, cfg.state), cfg.per_direction)?,
            out_proj: Linear::new(&mut pb, "out_proj", e, c, false)?,
            norm2: LayerNorm::new(&mut pb, "norm2", c)?,
            fc1: Linear::new(&mut pb, "fc1", c, hidden, true)?,
            fc2: Linear::new(&mut pb, "fc2", hidden, c, true)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, _, c) = hwc("vss_block", g.shape(x))?;
        if c != self.cfg.width {
            return Err(Error::shape("vss_block", format!("{c} channels for width {}", self.cfg.width)));
        }
        let e = self.cfg.width * self.cfg.expand;
        let h = self.norm1.forward(g, x)?;
        let h = self.in_proj.forward(g, h)?;
        let parts = g.split(h, 2, &[e, e])?;
        let w = g.param(self.dw_weight)?;
        let b = g.param(self.dw_bias)?;
        let content = g.depthwise_conv2d(parts[0], w, b)?;
        let content = g.silu(content)?;
        let y = self.ss2d.forward(g, content)?;
        let gate = g.silu(parts[1])?;
        let y = g.mul(y, gate)?;
        let y = self.out_proj.forward(g, y)?;
        let x = g.add(x, y)?;

        let h = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.silu(h)?;
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

/// Decoder block: a [`VssBlock`] whose output is rescaled per channel by a
/// squeeze-excitation gate.
#[derive(Clone, Debug)]
pub struct CvssBlock {
    pub vss: VssBlock,
    pub att1: Linear,
    pub att2: Linear,
}

impl CvssBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: VssConfig) -> Result<Self> {
        let mut pb = pb.sub(name);
        let c = cfg.width;
        let r = (c / 4).max(1);
        Ok(Self {
            vss: VssBlock::new(&mut pb, "vss", cfg)?,
            att1: Linear::new(&mut pb, "att1", c, r, true)?,
            att2: Linear::new(&mut pb, "att2", r, c, true)?,
        })
    }

    /// Per-channel gate in `(0, 1)` for a `[H, W, C]` map.
    pub fn gate<T: Float>(&self, g: &mut Graph<'_, T>, v: Var) -> Result<Var> {
        let pooled = g.mean_leading(v, 2)?;
        let a = self.att1.forward(g, pooled)?;
        let a = g.silu(a)?;
        let a = self.att2.forward(g, a)?;
        g.sigmoid(a)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let v = self.vss.forward(g, x)?;
        let gate = self.gate(g, v)?;
        g.mul(v, gate)
    }
}

/// `k×k` stride-`k` convolution followed by layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, patch: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        let spec = Conv2dSpec {
            kernel: patch,
            stride: patch,
            padding: 0,
        };
        Ok(Self {
            conv: Conv2d::new(&mut pb, "conv", cin, cout, spec)?,
            norm: LayerNorm::new(&mut pb, "norm", cout)?,
            patch,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (h, w, _) = hwc("patch_embed", g.shape(x))?;
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::contract(format!(
                "patch_embed: {h}x{w} not divisible by {}",
                self.patch
            )));
        }
        let y = self.conv.forward(g, x)?;
        self.norm.forward(g, y)
    }
}

/// `2×2` stride-2 convolution doubling the channel count.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
}

impl Downsample {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize) -> Result<Self> {
        let spec = Conv2dSpec {
            kernel: 2,
            stride: 2,
            padding: 0,
        };
        Ok(Self {
            conv: Conv2d::new(pb, name, cin, 2 * cin, spec)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (h, w, _) = hwc("downsample", g.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract(format!("downsample: odd extent {h}x{w}")));
        }
        self.conv.forward(g, x)
    }
}

/// Bilinear `2×` upsampling followed by a pointwise projection halving the
/// channel count.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub proj: Linear,
}

impl Upsample {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize) -> Result<Self> {
        if !cin.is_multiple_of(2) {
            return Err(Error::contract(format!("upsample: odd channel count {cin}")));
        }
        Ok(Self {
            proj: Linear::new(pb, name, cin, cin / 2, true)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (h, w, _) = hwc("upsample", g.shape(x))?;
        let y = g.resize_bilinear(x, 2 * h, 2 * w)?;
        self.proj.forward(g, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// 180° rotation of an `[H, W, C]` map.
    fn rot180(t: &Tensor<f32>) -> Tensor<f32> {
        let c = t.shape()[2];
        let pixels = t.numel() / c;
        let mut out = Vec::with_capacity(t.numel());
        for p in (0..pixels).rev() {
            out.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
        }
        Tensor::new(t.shape().to_vec(), out).unwrap()
    }

    fn ss2d(e: usize, per_direction: bool) -> (ParamStore, Ss2d) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let s = Ss2d::new(&mut pb, "s", SsmConfig::new(e, 4), per_direction).unwrap();
        (store, s)
    }

    #[test]
    fn orders_are_permutations() {
        for d in Direction::ALL {
            let mut o = d.order(3, 5);
            o.sort_unstable();
            assert_eq!(o, (0..15).collect::<Vec<_>>());
        }
        assert_eq!(Direction::ColForward.order(2, 3), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn single_pixel_is_four_single_steps() {
        let (store, s) = ss2d(3, false);
        let mut g = Graph::with_params(&store);
        let x = g.input(random(&[1, 1, 3], 1));
        let merged = s.forward(&mut g, x).unwrap();
        let flat = g.reshape(x, &[1, 3]).unwrap();
        let one = s.ssms[0].forward(&mut g, flat).unwrap();
        for (m, o) in g.value(merged).data().iter().zip(g.value(one).data()) {
            assert!((m - 4.0 * o).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_input_gives_zero() {
        let (store, s) = ss2d(3, false);
        let mut g = Graph::with_params(&store);
        let x = g.input(Tensor::zeros(vec![4, 5, 3]));
        let y = s.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotation_swaps_direction_pairs() {
        let (store, s) = ss2d(3, false);
        let xt = random(&[4, 4, 3], 5);
        let mut g = Graph::with_params(&store);
        let x = g.input(xt.clone());
        let xr = g.input(rot180(&xt));
        let d = s.directions(&mut g, x).unwrap();
        let dr = s.directions(&mut g, xr).unwrap();
        for (a, b) in [(0, 1), (1, 0), (2, 3), (3, 2)] {
            assert_eq!(rot180(g.value(dr[a])).data(), g.value(d[b]).data());
        }
        let m = s.forward(&mut g, x).unwrap();
        let mr = s.forward(&mut g, xr).unwrap();
        let diff = rot180(g.value(mr)).max_abs_diff(g.value(m)).unwrap();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn single_row_flip_duality() {
        let (store, s) = ss2d(3, false);
        let xt = random(&[1, 6, 3], 9);
        let mut g = Graph::with_params(&store);
        let x = g.input(xt);
        let xf = g.flip(x, 1).unwrap();
        let d = s.directions(&mut g, x).unwrap();
        let df = s.directions(&mut g, xf).unwrap();
        let back = g.flip(df[1], 1).unwrap();
        assert_eq!(g.value(back).data(), g.value(d[0]).data());
    }

    #[test]
    fn per_direction_parameters_break_rotation_symmetry() {
        let (store, s) = ss2d(3, true);
        assert_eq!(s.ssms.len(), 4);
        let xt = random(&[4, 4, 3], 5);
        let mut g = Graph::with_params(&store);
        let x = g.input(xt.clone());
        let xr = g.input(rot180(&xt));
        let m = s.forward(&mut g, x).unwrap();
        let mr = s.forward(&mut g, xr).unwrap();
        assert!(rot180(g.value(mr)).max_abs_diff(g.value(m)).unwrap() > 1e-4);
    }

    fn vss(c: usize) -> (ParamStore, VssBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let b = VssBlock::new(&mut pb, "v", VssConfig::new(c, 4)).unwrap();
        (store, b)
    }

    fn zero(store: &mut ParamStore, id: ParamId) {
        let shape = store.get(id).unwrap().shape().to_vec();
        store.set(id, Tensor::zeros(shape)).unwrap();
    }

    #[test]
    fn vss_shapes_are_preserved() {
        for hw in [8, 16] {
            for c in [8, 16] {
                let (store, b) = vss(c);
                let mut g = Graph::inference(&store);
                let x = g.input(random(&[hw, hw, c], 3));
                let y = b.forward(&mut g, x).unwrap();
                assert_eq!(g.shape(y), &[hw, hw, c]);
            }
        }
    }

    #[test]
    fn vss_with_zeroed_branches_is_identity() {
        let (mut store, b) = vss(4);
        zero(&mut store, b.out_proj.weight);
        zero(&mut store, b.fc2.weight);
        zero(&mut store, b.fc2.bias.unwrap());
        let xt = random(&[4, 4, 4], 8);
        let mut g = Graph::inference(&store);
        let x = g.input(xt.clone());
        let y = b.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), xt.data());
    }

    #[test]
    fn cvss_with_saturated_gate_matches_vss() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let b = CvssBlock::new(&mut pb, "c", VssConfig::new(4, 4)).unwrap();
        zero(&mut store, b.att2.weight);
        store
            .set(b.att2.bias.unwrap(), Tensor::full(vec![4], 40.0))
            .unwrap();
        let mut g = Graph::inference(&store);
        let x = g.input(random(&[4, 4, 4], 6));
        let y = b.forward(&mut g, x).unwrap();
        let v = b.vss.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(v).data());
    }

    #[test]
    fn cvss_gates_lie_in_open_unit_interval() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let b = CvssBlock::new(&mut pb, "c", VssConfig::new(8, 4)).unwrap();
        for seed in 0..5 {
            let mut g = Graph::inference(&store);
            let x = g.input(random(&[4, 4, 8], seed));
            let v = b.vss.forward(&mut g, x).unwrap();
            let gate = b.gate(&mut g, v).unwrap();
            assert!(g.value(gate).data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn resolution_changes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let pe = PatchEmbed::new(&mut pb, "pe", 1, 8, 4).unwrap();
        let downs: Vec<_> = (0..3)
            .map(|i| Downsample::new(&mut pb, &format!("d{i}"), 8 << i).unwrap())
            .collect();
        let up = Upsample::new(&mut pb, "up", 16).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.input(random(&[64, 64, 1], 0));
        let mut f = pe.forward(&mut g, x).unwrap();
        let mut sides = vec![g.shape(f)[0]];
        for d in &downs {
            f = d.forward(&mut g, f).unwrap();
            sides.push(g.shape(f)[0]);
        }
        assert_eq!(sides, vec![16, 8, 4, 2]);

        let x = g.input(random(&[8, 8, 8], 1));
        let d = downs[0].forward(&mut g, x).unwrap();
        let u = up.forward(&mut g, d).unwrap();
        assert_eq!(g.shape(u), &[8, 8, 8]);

        let odd = g.input(random(&[6, 6, 1], 1));
        assert!(matches!(pe.forward(&mut g, odd), Err(Error::Contract(_))));
    }

    #[test]
    fn upsampled_constant_map_is_constant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let up = Upsample::new(&mut pb, "up", 4).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::from_f64(vec![3, 3, 4], &[0.25, -1.0, 2.0, 0.5].repeat(9)).unwrap());
        let u = up.forward(&mut g, x).unwrap();
        let v = g.value(u).data();
        for p in 0..36 {
            for ch in 0..2 {
                assert!((v[p * 2 + ch] - v[ch]).abs() < 1e-6);
            }
        }
    }
}
