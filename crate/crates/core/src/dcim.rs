//! Cross-modality interaction between regional tokens (one per `r×r`
//! region) and local tokens (one per pixel inside a region).
//!
//! Regional tokens are scanned across the whole map, local tokens within
//! their own region, and each regional token is then added onto every local
//! token of its region.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Conv2d, LayerNorm, Linear, ParamBuilder};
use crate::ssm::{MambaBlock, MambaConfig};
use crate::tensor::{Float, Tensor};
use crate::vss::hwc;

/// How an `H×W` map splits into `n` regions of `m = r²` local tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionGeometry {
    pub height: usize,
    pub width: usize,
    pub r: usize,
}

impl RegionGeometry {
    pub fn new(height: usize, width: usize, r: usize) -> Result<Self> {
        if r == 0 || height == 0 || width == 0 || !height.is_multiple_of(r) || !width.is_multiple_of(r) {
            return Err(Error::contract(format!(
                "region side {r} does not tile a {height}x{width} map"
            )));
        }
        Ok(Self { height, width, r })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.r, self.width / self.r)
    }

    /// Number of regions.
    pub fn n(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Local tokens per region.
    pub fn m(&self) -> usize {
        self.r * self.r
    }

    /// `order[i·m + j]` is the row-major pixel holding local token `j` of
    /// region `i`; regions and locals are both row-major.
    pub fn local_order(&self) -> Vec<usize> {
        let (gh, gw) = self.grid();
        let r = self.r;
        let mut order = Vec::with_capacity(self.height * self.width);
        for ry in 0..gh {
            for rx in 0..gw {
                for a in 0..r {
                    for b in 0..r {
                        order.push((ry * r + a) * self.width + rx * r + b);
                    }
                }
            }
        }
        order
    }
}

/// `[H, W, C]` → `[n, m, C]` in region/local order.
pub fn tokenize_locals<T: Float>(g: &mut Graph<'_, T>, geom: &RegionGeometry, x: Var) -> Result<Var> {
    let (h, w, c) = hwc("tokenize", g.shape(x))?;
    if (h, w) != (geom.height, geom.width) {
        return Err(Error::contract(format!("tokenize: {h}x{w} map for geometry {geom:?}")));
    }
    let flat = g.reshape(x, &[h * w, c])?;
    let t = g.gather_rows(flat, &geom.local_order())?;
    g.reshape(t, &[geom.n(), geom.m(), c])
}

/// Inverse of [`tokenize_locals`].
pub fn detokenize<T: Float>(g: &mut Graph<'_, T>, geom: &RegionGeometry, tokens: Var) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    let c = match shape[..] {
        [n, m, c] if n == geom.n() && m == geom.m() => c,
        _ => return Err(Error::contract(format!("detokenize: tokens {shape:?} for geometry {geom:?}"))),
    };
    let flat = g.reshape(tokens, &[geom.n() * geom.m(), c])?;
    let map = g.scatter_add_rows(flat, &geom.local_order(), geom.height * geom.width)?;
    g.reshape(map, &[geom.height, geom.width, c])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Pet,
    Ct,
}

/// The six interaction variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcimVariant {
    RegionPetLocalPet,
    RegionCtLocalCt,
    RegionCtLocalPet,
    LocalCtOnly,
    RegionPetOnly,
    Full,
}

impl DcimVariant {
    pub const ALL: [DcimVariant; 6] = [
        DcimVariant::RegionPetLocalPet,
        DcimVariant::RegionCtLocalCt,
        DcimVariant::RegionCtLocalPet,
        DcimVariant::LocalCtOnly,
        DcimVariant::RegionPetOnly,
        DcimVariant::Full,
    ];

    /// `(region source, local source, region block on, local block on)`.
    pub fn wiring(self) -> (Modality, Modality, bool, bool) {
        use Modality::*;
        match self {
            DcimVariant::RegionPetLocalPet => (Pet, Pet, true, true),
            DcimVariant::RegionCtLocalCt => (Ct, Ct, true, true),
            DcimVariant::RegionCtLocalPet => (Ct, Pet, true, true),
            DcimVariant::LocalCtOnly => (Pet, Ct, false, true),
            DcimVariant::RegionPetOnly => (Pet, Ct, true, false),
            DcimVariant::Full => (Pet, Ct, true, true),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcimConfig {
    /// Channels of the incoming maps and of the local tokens.
    pub channels: usize,
    /// Width of the regional tokens.
    pub token_width: usize,
    /// Region side in pixels; a power of two.
    pub r: usize,
    pub state: usize,
    pub region_source: Modality,
    pub local_source: Modality,
    pub region_block: bool,
    pub local_block: bool,
    /// Replace the conv stems with `r×r` average pooling (regional path)
    /// and the identity (local path).
    pub identity_stems: bool,
}

impl DcimConfig {
    pub fn new(channels: usize, r: usize, state: usize, variant: DcimVariant) -> Self {
        let (region_source, local_source, region_block, local_block) = variant.wiring();
        Self {
            channels,
            token_width: channels,
            r,
            state,
            region_source,
            local_source,
            region_block,
            local_block,
            identity_stems: false,
        }
    }
}

/// `x + Mamba(LN(x))` over a token sequence.
#[derive(Clone, Debug)]
pub struct ResidualMamba {
    pub norm: LayerNorm,
    pub mamba: MambaBlock,
}

impl ResidualMamba {
    pub fn new(pb: &mut ParamBuilder, name: &str, width: usize, state: usize) -> Result<Self> {
        let mut pb = pb.sub(name);
        Ok(Self {
            norm: LayerNorm::new(&mut pb, "norm", width)?,
            mamba: MambaBlock::new(&mut pb, "mamba", MambaConfig::new(width, state))?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.mamba.forward(g, h)?;
        g.add(x, h)
    }
}

/// Stacked 3×3 convolutions with layer norm and SiLU between them.
#[derive(Clone, Debug)]
pub struct ConvStem {
    pub convs: Vec<Conv2d>,
    pub norms: Vec<LayerNorm>,
}

impl ConvStem {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, strides: &[usize]) -> Result<Self> {
        let mut pb = pb.sub(name);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for (i, &stride) in strides.iter().enumerate() {
            if i > 0 {
                norms.push(LayerNorm::new(&mut pb, &format!("norm{i}"), cout)?);
            }
            let spec = Conv2dSpec {
                kernel: 3,
                stride,
                padding: 1,
            };
            let c = if i == 0 { cin } else { cout };
            convs.push(Conv2d::new(&mut pb, &format!("conv{i}"), c, cout, spec)?);
        }
        Ok(Self { convs, norms })
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.run(g, x, self.convs.len(), None)
    }

    /// Runs only as many stride-2 convolutions as a reduction by `r` needs;
    /// `r = 1` runs the first one at stride 1.
    fn forward_downsampling<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, r: usize) -> Result<Var> {
        let steps = r.trailing_zeros() as usize;
        if steps > self.convs.len() {
            return Err(Error::contract(format!("stem cannot reduce by {r}")));
        }
        if steps == 0 {
            self.run(g, x, 1, Some(1))
        } else {
            self.run(g, x, steps, None)
        }
    }

    fn run<T: Float>(&self, g: &mut Graph<'_, T>, mut x: Var, count: usize, stride: Option<usize>) -> Result<Var> {
        for (i, conv) in self.convs[..count].iter().enumerate() {
            if i > 0 {
                x = self.norms[i - 1].forward(g, x)?;
                x = g.silu(x)?;
            }
            let spec = Conv2dSpec {
                stride: stride.unwrap_or(conv.spec.stride),
                ..conv.spec
            };
            let w = g.param(conv.weight)?;
            let b = g.param(conv.bias)?;
            x = g.conv2d(x, w, Some(b), spec)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Dcim {
    pub cfg: DcimConfig,
    pub region_stem: Option<ConvStem>,
    pub local_stem: Option<ConvStem>,
    pub region: Option<ResidualMamba>,
    pub local: Option<ResidualMamba>,
    pub bridge: Linear,
}

impl Dcim {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: DcimConfig) -> Result<Self> {
        if !cfg.r.is_power_of_two() {
            return Err(Error::Config(format!("region side {} is not a power of two", cfg.r)));
        }
        let (c, d) = (cfg.channels, cfg.token_width);
        if cfg.identity_stems && c != d {
            return Err(Error::Config(format!(
                "identity stems need equal widths, got {c} and {d}"
            )));
        }
        let mut pb = pb.sub(name);
        let (region_stem, local_stem) = if cfg.identity_stems {
            (None, None)
        } else {
            let steps = cfg.r.trailing_zeros() as usize;
            let strides = if steps == 0 { vec![1] } else { vec![2; steps] };
            (
                Some(ConvStem::new(&mut pb, "region_stem", c, d, &strides)?),
                Some(ConvStem::new(&mut pb, "local_stem", c, c, &[1, 1])?),
            )
        };
        let region = cfg
            .region_block
            .then(|| ResidualMamba::new(&mut pb, "region", d, cfg.state))
            .transpose()?;
        let local = cfg
            .local_block
            .then(|| ResidualMamba::new(&mut pb, "local", c, cfg.state))
            .transpose()?;
        let bridge = Linear::new(&mut pb, "bridge", d, c, true)?;
        let eye: Vec<f32> = (0..d * c)
            .map(|k| if k / c == k % c { 1.0 } else { 0.0 })
            .collect();
        pb.set(bridge.weight, Tensor::new(vec![d, c], eye)?)?;
        Ok(Self {
            cfg,
            region_stem,
            local_stem,
            region,
            local,
            bridge,
        })
    }

    /// Region side actually used on an `h×w` map.
    pub fn effective_r(&self, h: usize, w: usize) -> usize {
        self.cfg.r.min(h).min(w)
    }

    /// Regional tokens `[n, D]` and local tokens `[n, m, C]`.
    pub fn tokenize<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        geom: &RegionGeometry,
        region_src: Var,
        local_src: Var,
    ) -> Result<(Var, Var)> {
        let (h, w, c) = hwc("dcim", g.shape(region_src))?;
        if g.shape(local_src) != g.shape(region_src) || c != self.cfg.channels {
            return Err(Error::contract(format!(
                "dcim: inputs {:?} and {:?} for {} channels",
                g.shape(region_src),
                g.shape(local_src),
                self.cfg.channels
            )));
        }
        if (h, w) != (geom.height, geom.width) {
            return Err(Error::contract(format!("dcim: {h}x{w} map for geometry {geom:?}")));
        }
        let regional = match &self.region_stem {
            Some(stem) => stem.forward_downsampling(g, region_src, geom.r)?,
            None => g.avg_pool2d(region_src, geom.r)?,
        };
        let d = *g.shape(regional).last().unwrap();
        let regional = g.reshape(regional, &[geom.n(), d])?;
        let local = match &self.local_stem {
            Some(stem) => stem.forward(g, local_src)?,
            None => local_src,
        };
        let local = tokenize_locals(g, geom, local)?;
        Ok((regional, local))
    }

    /// Adds each bridged regional token onto its region's local tokens and
    /// reassembles the map.
    pub fn fuse<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        geom: &RegionGeometry,
        regional: Var,
        local: Var,
    ) -> Result<Var> {
        let n = geom.n();
        match (g.shape(regional), g.shape(local)) {
            ([rn, _], [ln, lm, _]) if *rn == n && *ln == n && *lm == geom.m() => {}
            (a, b) => return Err(Error::contract(format!("fuse: tokens {a:?} and {b:?} for {geom:?}"))),
        }
        let bridged = self.bridge.forward(g, regional)?;
        let c = self.cfg.channels;
        let bridged = g.reshape(bridged, &[n, 1, c])?;
        let fused = g.add(local, bridged)?;
        detokenize(g, geom, fused)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x_pet: Var, x_ct: Var) -> Result<Var> {
        let (h, w, _) = hwc("dcim", g.shape(x_pet))?;
        let geom = RegionGeometry::new(h, w, self.effective_r(h, w))?;
        let pick = |m: Modality| if m == Modality::Pet { x_pet } else { x_ct };
        let (mut regional, mut local) =
            self.tokenize(g, &geom, pick(self.cfg.region_source), pick(self.cfg.local_source))?;
        if let Some(block) = &self.region {
            regional = block.forward(g, regional)?;
        }
        if let Some(block) = &self.local {
            local = block.forward(g, local)?;
        }
        self.fuse(g, &geom, regional, local)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamId, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn build(cfg: DcimConfig) -> (ParamStore, Dcim) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let d = Dcim::new(&mut pb, "dcim", cfg).unwrap();
        (store, d)
    }

    fn zero_all(store: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            let shape = store.get(id).unwrap().shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
    }

    fn mamba_ids(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, name, _)| name.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect()
    }

    #[test]
    fn geometry_counts() {
        let g = RegionGeometry::new(16, 16, 4).unwrap();
        assert_eq!((g.n(), g.m()), (16, 16));
        let g = RegionGeometry::new(8, 8, 8).unwrap();
        assert_eq!((g.n(), g.m()), (1, 64));
        assert!(matches!(RegionGeometry::new(12, 8, 8), Err(Error::Contract(_))));
        let g = RegionGeometry::new(4, 4, 2).unwrap();
        assert_eq!(&g.local_order()[..8], &[0, 1, 4, 5, 2, 3, 6, 7]);
    }

    #[test]
    fn tokenize_round_trips() {
        let geom = RegionGeometry::new(8, 16, 4).unwrap();
        let xt = random(&[8, 16, 3], 0);
        let mut g = Graph::<f32>::new();
        let x = g.input(xt.clone());
        let t = tokenize_locals(&mut g, &geom, x).unwrap();
        assert_eq!(g.shape(t), &[8, 16, 3]);
        let back = detokenize(&mut g, &geom, t).unwrap();
        assert_eq!(g.value(back).data(), xt.data());
    }

    #[test]
    fn six_distinct_variants() {
        let mut wirings: Vec<_> = DcimVariant::ALL.iter().map(|v| v.wiring()).collect();
        wirings.dedup();
        assert_eq!(wirings.len(), 6);
        let full = build(DcimConfig::new(4, 4, 4, DcimVariant::Full)).0.num_elements();
        let local_only = build(DcimConfig::new(4, 4, 4, DcimVariant::LocalCtOnly)).0.num_elements();
        let region_only = build(DcimConfig::new(4, 4, 4, DcimVariant::RegionPetOnly)).0.num_elements();
        assert!(local_only < full && region_only < full);
    }

    #[test]
    fn bypassed_blocks_and_identity_stems_pass_ct_through() {
        let cfg = DcimConfig {
            region_block: false,
            local_block: false,
            identity_stems: true,
            ..DcimConfig::new(3, 4, 4, DcimVariant::Full)
        };
        let (mut store, d) = build(cfg);
        zero_all(&mut store, &[d.bridge.weight, d.bridge.bias.unwrap()]);
        let ct = random(&[8, 8, 3], 2);
        let mut g = Graph::inference(&store);
        let p = g.input(random(&[8, 8, 3], 1));
        let c = g.input(ct.clone());
        let y = d.forward(&mut g, p, c).unwrap();
        assert_eq!(g.value(y).data(), ct.data());
    }

    #[test]
    fn zeroed_mamba_blocks_are_identities() {
        let (mut store, d) = build(DcimConfig::new(4, 2, 4, DcimVariant::Full));
        let ids = mamba_ids(&store, "dcim.region.mamba");
        zero_all(&mut store, &ids);
        let ids = mamba_ids(&store, "dcim.local.mamba");
        zero_all(&mut store, &ids);
        let mut g = Graph::inference(&store);
        let rt = random(&[9, 4], 3);
        let x = g.input(rt.clone());
        let y = d.region.as_ref().unwrap().forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), rt.data());
        let lt = random(&[2, 4, 4], 4);
        let x = g.input(lt.clone());
        let y = d.local.as_ref().unwrap().forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), lt.data());
    }

    #[test]
    fn local_regions_are_independent() {
        let (store, d) = build(DcimConfig::new(4, 2, 4, DcimVariant::Full));
        let local = d.local.as_ref().unwrap();
        let xt = random(&[3, 4, 4], 5);
        let mut g = Graph::inference(&store);
        let x = g.input(xt.clone());
        let y = local.forward(&mut g, x).unwrap();
        let perm = [2, 0, 1];
        let xp = g.gather_rows(x, &perm).unwrap();
        let yp = local.forward(&mut g, xp).unwrap();
        let expect = g.gather_rows(y, &perm).unwrap();
        assert_eq!(g.value(yp).data(), g.value(expect).data());

        let mut zeroed = xt.clone();
        zeroed.data_mut()[16..32].iter_mut().for_each(|v| *v = 0.0);
        let z = g.input(zeroed);
        let yz = local.forward(&mut g, z).unwrap();
        let (a, b) = (g.value(y).data(), g.value(yz).data());
        assert_eq!(a[..16], b[..16]);
        assert_eq!(a[32..], b[32..]);
        assert_ne!(a[16..32], b[16..32]);
    }

    #[test]
    fn fusion_broadcasts_the_bridged_regional_token() {
        let (store, d) = build(DcimConfig::new(4, 4, 4, DcimVariant::Full));
        let geom = RegionGeometry::new(8, 8, 4).unwrap();
        let mut g = Graph::inference(&store);
        let pet = g.input(random(&[4, 4], 6));
        let ct = g.input(random(&[4, 16, 4], 7));
        let fused = d.fuse(&mut g, &geom, pet, ct).unwrap();
        let bridged = d.bridge.forward(&mut g, pet).unwrap();
        let map = detokenize(&mut g, &geom, ct).unwrap();
        let delta = g.sub(fused, map).unwrap();
        let delta = tokenize_locals(&mut g, &geom, delta).unwrap();
        let (dv, bv) = (g.value(delta).data(), g.value(bridged).data());
        for i in 0..4 {
            for j in 0..16 {
                for c in 0..4 {
                    let v = dv[(i * 16 + j) * 4 + c];
                    assert!((v - bv[i * 4 + c]).abs() < 1e-6);
                }
            }
        }

        let zero = g.input(Tensor::zeros(vec![4, 4]));
        let fused = d.fuse(&mut g, &geom, zero, ct).unwrap();
        assert_eq!(g.value(fused).data(), g.value(map).data());
    }

    #[test]
    fn forward_shapes_and_small_maps() {
        let (store, d) = build(DcimConfig::new(4, 4, 4, DcimVariant::Full));
        for hw in [2, 4, 8] {
            let mut g = Graph::inference(&store);
            let p = g.input(random(&[hw, hw, 4], 8));
            let c = g.input(random(&[hw, hw, 4], 9));
            let y = d.forward(&mut g, p, c).unwrap();
            assert_eq!(g.shape(y), &[hw, hw, 4]);
        }
    }
}
