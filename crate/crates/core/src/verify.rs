//! Self-check suites: each compares an implementation against an
//! independent oracle and reports its worst error.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::crm::{Crm, CrmConfig};
use crate::data::{augment, crop_side_range, preprocess_ct, synth_generate, ModalityPair, SynthSpec};
use crate::dcim::{detokenize, tokenize_locals, Dcim, DcimConfig, DcimVariant, RegionGeometry};
use crate::error::{Error, Result};
use crate::gradcheck::{check_input, check_input_in, check_params, GradReport, GRADCHECK_EPS, GRADCHECK_TOL};
use crate::metrics::{boundary, confusion, hd95, percentile};
use crate::net::{segmentation_loss, CipaConfig, CipaNet};
use crate::params::{ParamBuilder, ParamStore};
use crate::ssm::{causal_conv, lti_kernel, zoh_discretize, MambaBlock, MambaConfig, ScanSchedule};
use crate::tensor::Tensor;
use crate::train::{TrainConfig, Trainer};
use crate::vss::{CvssBlock, Ss2d, VssBlock, VssConfig};

/// Deliberate defects used to prove that a suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Perturbs the step sizes fed to the scan under test.
    Scan,
    /// Flips one pixel of the prediction before the metric under test.
    Metrics,
    /// Shifts the round-trip of the token geometry by one row.
    Geometry,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scan" => Ok(Fault::Scan),
            "metrics" => Ok(Fault::Metrics),
            "geometry" => Ok(Fault::Geometry),
            _ => Err(Error::Config(format!("unknown fault {s:?} (scan, metrics, geometry)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Worst error seen, in the suite's own unit.
    pub max_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &str, cases: usize, max_error: f64, tolerance: f64, start: Instant) -> Self {
        Self {
            name: name.to_string(),
            passed: max_error <= tolerance,
            cases,
            max_error,
            tolerance,
            seconds: start.elapsed().as_secs_f64(),
            detail: String::new(),
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// A selective scan whose parameters do not depend on the input equals a
/// causal convolution with its unrolled kernel.
pub fn lti_suite(trials: usize, seed: u64, fault: Option<Fault>) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..trials {
        let l = rng.random_range(1..=64);
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=8);
        let a = uniform(&mut rng, &[d, n], -2.0, -0.05);
        let delta: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = uniform(&mut rng, &[l, d], -1.0, 1.0);

        let c_map = Tensor::new(vec![d, n], (0..d * n).map(|i| c[i % n]).collect())?;
        let (a_bar, b_bar) = zoh_discretize(
            &a,
            &Tensor::new(vec![1, n], b.clone())?,
            &Tensor::new(vec![1, d], delta.clone())?,
        )?;
        let kernel = lti_kernel(&a_bar.reshape(vec![d, n])?, &b_bar.reshape(vec![d, n])?, &c_map, l)?;
        let oracle = causal_conv(&u, &kernel)?;

        let skew = if fault == Some(Fault::Scan) { 1.05 } else { 1.0 };
        let mut g = Graph::<f64>::new();
        let uv = g.input(u.clone().reshape(vec![1, l, d])?);
        let dv = g.input(Tensor::new(vec![1, l, d], (0..l * d).map(|i| delta[i % d] * skew).collect())?);
        let av = g.input(a.clone());
        let bv = g.input(Tensor::new(vec![1, l, n], (0..l * n).map(|i| b[i % n]).collect())?);
        let cv = g.input(Tensor::new(vec![1, l, n], (0..l * n).map(|i| c[i % n]).collect())?);
        let zero = g.input(Tensor::zeros(vec![d]));
        for schedule in [ScanSchedule::Sequential, ScanSchedule::Chunked(7)] {
            let y = g.selective_scan(uv, dv, av, bv, cv, zero, schedule)?;
            worst = worst.max(g.value(y).max_abs_diff(&oracle.clone().reshape(vec![1, l, d])?)?);
        }
    }
    Ok(SuiteResult::new("lti_equivalence", trials, worst, 1e-4, start))
}

fn block_store<F, B>(seed: u64, build: F) -> Result<(B, ParamStore<f64>)>
where
    F: FnOnce(&mut ParamBuilder) -> Result<B>,
{
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = build(&mut ParamBuilder::new(&mut store, &mut rng))?;
    // Break symmetric initialisations so every gradient path is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, _, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    Ok((block, store.cast()))
}

/// Weighted sum so that every output element carries a distinct gradient.
fn probe_loss(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn worst(reports: &[GradReport]) -> (f64, String) {
    reports
        .iter()
        .map(|r| (r.rel_err, r.name.clone()))
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a })
}

/// Analytic gradients of primitives and blocks against central differences.
pub fn gradient_suite(seed: u64, max_coords: usize) -> Result<(SuiteResult, Vec<GradReport>)> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports: Vec<GradReport> = Vec::new();
    let eps = GRADCHECK_EPS;

    // Primitives, checked through their inputs.
    let x = uniform(&mut rng, &[3, 4, 5], -1.0, 1.0);
    let prims: Vec<(&str, Box<dyn Fn(&mut Graph<'_, f64>, Var) -> Result<Var>>)> = vec![
        ("silu", Box::new(|g, x| g.silu(x))),
        ("softplus", Box::new(|g, x| g.softplus(x))),
        ("sigmoid", Box::new(|g, x| g.sigmoid(x))),
        ("log_softmax", Box::new(|g, x| g.log_softmax(x))),
        ("transpose", Box::new(|g, x| {
            let r = g.reshape(x, &[12, 5])?;
            g.transpose(r)
        })),
        ("flip", Box::new(|g, x| g.flip(x, 1))),
        ("resize_bilinear", Box::new(|g, x| g.resize_bilinear(x, 7, 5))),
        ("avg_pool2d", Box::new(|g, x| {
            let n = g.narrow(x, 1, 0, 2)?;
            let n = g.narrow(n, 0, 0, 2)?;
            g.avg_pool2d(n, 2)
        })),
        ("adaptive_avg_pool", Box::new(|g, x| g.adaptive_avg_pool_last(x, 3))),
        ("div", Box::new(|g, x| {
            let y = g.sigmoid(x)?;
            let y = g.add_scalar(y, 0.5)?;
            g.div(x, y)
        })),
    ];
    for (i, (name, f)) in prims.iter().enumerate() {
        let f = |g: &mut Graph<'_, f64>, v: Var| -> Result<Var> {
            let y = f(g, v)?;
            probe_loss(g, y, 100 + i as u64)
        };
        reports.push(check_input(name, &f, &x, eps)?);
    }
    let w = uniform(&mut rng, &[5, 3], -1.0, 1.0);
    let matmul = |g: &mut Graph<'_, f64>, v: Var| -> Result<Var> {
        let a = g.reshape(v, &[12, 5])?;
        let b = g.constant(w.clone());
        let y = g.matmul(a, b)?;
        probe_loss(g, y, 1)
    };
    reports.push(check_input("matmul", &matmul, &x, eps)?);
    let gamma = uniform(&mut rng, &[5], 0.5, 1.5);
    let beta = uniform(&mut rng, &[5], -0.5, 0.5);
    let ln = |g: &mut Graph<'_, f64>, v: Var| -> Result<Var> {
        let (ga, be) = (g.input(gamma.clone()), g.input(beta.clone()));
        let y = g.layer_norm(v, ga, be)?;
        probe_loss(g, y, 2)
    };
    reports.push(check_input("layer_norm", &ln, &x, eps)?);
    let kernel = uniform(&mut rng, &[3, 3, 5, 2], -0.5, 0.5);
    let conv = |g: &mut Graph<'_, f64>, v: Var| -> Result<Var> {
        let k = g.constant(kernel.clone());
        let spec = Conv2dSpec {
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let y = g.conv2d(v, k, None, spec)?;
        probe_loss(g, y, 3)
    };
    reports.push(check_input("conv2d", &conv, &x, eps)?);
    let dw = uniform(&mut rng, &[3, 3, 5], -0.5, 0.5);
    let dwb = uniform(&mut rng, &[5], -0.5, 0.5);
    let dwconv = |g: &mut Graph<'_, f64>, v: Var| -> Result<Var> {
        let (k, b) = (g.constant(dw.clone()), g.constant(dwb.clone()));
        let y = g.depthwise_conv2d(v, k, b)?;
        probe_loss(g, y, 4)
    };
    reports.push(check_input("depthwise_conv2d", &dwconv, &x, eps)?);

    // The scan primitive through all six operands.
    let (s, l, e, n) = (2, 6, 3, 4);
    let operands = [
        uniform(&mut rng, &[s, l, e], -1.0, 1.0),
        uniform(&mut rng, &[s, l, e], 0.05, 0.8),
        uniform(&mut rng, &[e, n], -1.5, -0.1),
        uniform(&mut rng, &[s, l, n], -1.0, 1.0),
        uniform(&mut rng, &[s, l, n], -1.0, 1.0),
        uniform(&mut rng, &[e], -1.0, 1.0),
    ];
    for (k, label) in ["u", "delta", "A", "B", "C", "D"].iter().enumerate() {
        let f = |g: &mut Graph<'_, f64>, v: Var| -> Result<Var> {
            let mut vars: Vec<Var> = operands.iter().map(|t| g.constant(t.clone())).collect();
            vars[k] = v;
            let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], ScanSchedule::Sequential)?;
            probe_loss(g, y, 5)
        };
        reports.push(check_input(&format!("selective_scan.{label}"), &f, &operands[k], eps)?);
    }

    // Blocks, checked through their parameters and their input.
    let mut block = |name: &str, store: &ParamStore<f64>, input: Tensor<f64>, f: &dyn Fn(&mut Graph<'_, f64>, Var) -> Result<Var>, rng: &mut ChaCha8Rng| -> Result<()> {
        let pf = |g: &mut Graph<'_, f64>| -> Result<Var> {
            let x = g.input(input.clone());
            let y = f(g, x)?;
            probe_loss(g, y, 7)
        };
        reports.extend(check_params(name, &pf, store, eps, max_coords, rng)?);
        let xf = |g: &mut Graph<'_, f64>, x: Var| -> Result<Var> {
            let y = f(g, x)?;
            probe_loss(g, y, 7)
        };
        reports.push(check_input_in(&format!("{name}:input"), &xf, &input, eps, Some(store))?);
        Ok(())
    };

    let (mamba, store) = block_store(1, |pb| MambaBlock::new(pb, "mamba", MambaConfig::new(4, 3)))?;
    block("mamba_block", &store, uniform(&mut rng, &[2, 5, 4], -1.0, 1.0), &|g, x| mamba.forward(g, x), &mut rng)?;

    let (ss2d, store) = block_store(2, |pb| Ss2d::new(pb, "ss2d", crate::ssm::SsmConfig::new(3, 3), false))?;
    block("ss2d", &store, uniform(&mut rng, &[3, 4, 3], -1.0, 1.0), &|g, x| ss2d.forward(g, x), &mut rng)?;

    let vcfg = VssConfig::new(4, 3);
    let (vss, store) = block_store(3, |pb| VssBlock::new(pb, "vss", vcfg))?;
    block("vss_block", &store, uniform(&mut rng, &[4, 3, 4], -1.0, 1.0), &|g, x| vss.forward(g, x), &mut rng)?;

    let (cvss, store) = block_store(4, |pb| CvssBlock::new(pb, "cvss", vcfg))?;
    block("cvss_block", &store, uniform(&mut rng, &[4, 3, 4], -1.0, 1.0), &|g, x| cvss.forward(g, x), &mut rng)?;

    let crm_cfg = CrmConfig {
        token_len: 6,
        ..CrmConfig::new(8, 3)
    };
    let (crm, store) = block_store(5, |pb| Crm::new(pb, "crm", crm_cfg))?;
    let other = uniform(&mut rng, &[4, 4, 8], -1.0, 1.0);
    block("crm", &store, uniform(&mut rng, &[4, 4, 8], -1.0, 1.0), &|g, x| {
        let ct = g.constant(other.clone());
        let (p, c) = crm.forward(g, x, ct)?;
        let both = g.concat(&[p, c], 2)?;
        Ok(both)
    }, &mut rng)?;

    // Layer norm over very few channels is sharply curved; 8 keeps central differences honest.
    let (dcim, store) = block_store(6, |pb| Dcim::new(pb, "dcim", DcimConfig::new(8, 2, 3, DcimVariant::Full)))?;
    let ct = uniform(&mut rng, &[4, 4, 8], -1.0, 1.0);
    block("dcim", &store, uniform(&mut rng, &[4, 4, 8], -1.0, 1.0), &|g, x| {
        let c = g.constant(ct.clone());
        dcim.forward(g, x, c)
    }, &mut rng)?;

    // Loss at 8x8 through the logits.
    let mask = Tensor::new(vec![8, 8], (0..64).map(|i| if (i * 7) % 5 < 2 { 1.0 } else { 0.0 }).collect())?;
    let logits = uniform(&mut rng, &[8, 8, 2], -2.0, 2.0);
    let loss = |g: &mut Graph<'_, f64>, v: Var| segmentation_loss(g, v, &mask);
    reports.push(check_input("loss", &loss, &logits, eps)?);

    // The whole network on a tiny configuration.
    let tiny = CipaConfig {
        resolution: 32,
        widths: [8, 16, 32, 64],
        depths: [1, 1, 1, 1],
        state: 2,
        crm_token_len: 4,
        ..CipaConfig::default()
    };
    let (net, store) = block_store(8, |pb| CipaNet::new(pb, &tiny))?;
    let pet = uniform(&mut rng, &[32, 32], 0.0, 255.0);
    let ctp = uniform(&mut rng, &[32, 32], 0.0, 255.0);
    let mask32 = Tensor::new(vec![32, 32], (0..1024).map(|i| if i % 9 < 3 { 1.0 } else { 0.0 }).collect())?;
    let net_loss = |g: &mut Graph<'_, f64>| -> Result<Var> {
        let (p, c) = (g.input(pet.clone()), g.input(ctp.clone()));
        let logits = net.forward(g, p, c)?;
        segmentation_loss(g, logits, &mask32)
    };
    reports.extend(check_params("cipa_net", &net_loss, &store, eps, 2, &mut rng)?);

    let (max, name) = worst(&reports);
    let result = SuiteResult::new("gradients", reports.len(), max, GRADCHECK_TOL, start)
        .with_detail(format!("worst: {name}"));
    Ok((result, reports))
}

/// Region counts, exact token round trips and per-region constancy of the
/// fusion offset over all supported map sizes and region sides.
pub fn geometry_suite(seed: u64, fault: Option<Fault>) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    let mut cases = 0;
    let c = 3;
    let mut store = ParamStore::new();
    let mut prng = ChaCha8Rng::seed_from_u64(seed);
    let dcim = Dcim::new(&mut ParamBuilder::new(&mut store, &mut prng), "dcim", DcimConfig::new(c, 2, 2, DcimVariant::Full))?;
    let store = store.cast::<f64>();
    for h in [8, 16, 32] {
        for w in [8, 16, 32] {
            for r in [2, 4, 8] {
                let geom = RegionGeometry::new(h, w, r)?;
                cases += 1;
                if geom.n() * geom.m() != h * w {
                    worst = f64::INFINITY;
                }
                let x = uniform(&mut rng, &[h, w, c], -1.0, 1.0);
                let mut g = Graph::inference(&store);
                let xv = g.input(x.clone());
                let t = tokenize_locals(&mut g, &geom, xv)?;
                let t = if fault == Some(Fault::Geometry) {
                    let rows = g.reshape(t, &[h * w, c])?;
                    let order: Vec<usize> = (0..h * w).map(|i| (i + 1) % (h * w)).collect();
                    let shifted = g.gather_rows(rows, &order)?;
                    g.reshape(shifted, &[geom.n(), geom.m(), c])?
                } else {
                    t
                };
                let back = detokenize(&mut g, &geom, t)?;
                worst = worst.max(g.value(back).max_abs_diff(&x)?);

                let regional = g.input(uniform(&mut rng, &[geom.n(), c], -1.0, 1.0));
                let fused = dcim.fuse(&mut g, &geom, regional, t)?;
                let base = detokenize(&mut g, &geom, t)?;
                let offset = g.sub(fused, base)?;
                let offset = tokenize_locals(&mut g, &geom, offset)?;
                let ov = g.value(offset).data();
                for region in 0..geom.n() {
                    for j in 0..geom.m() {
                        for ch in 0..c {
                            let first = ov[(region * geom.m()) * c + ch];
                            let v = ov[(region * geom.m() + j) * c + ch];
                            worst = worst.max((v - first).abs());
                        }
                    }
                }
            }
        }
    }
    Ok(SuiteResult::new("token_geometry", cases, worst, 1e-12, start))
}

/// Channel weights stay in `(0, 1)`, outputs never grow and a zero
/// modality stays zero. Reports the number of violations.
pub fn crm_suite(trials: usize, seed: u64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut store = ParamStore::new();
    let mut prng = ChaCha8Rng::seed_from_u64(seed);
    let c = 4;
    let crm = Crm::new(&mut ParamBuilder::new(&mut store, &mut prng), "crm", CrmConfig { token_len: 8, ..CrmConfig::new(c, 4) })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let mut violations = 0usize;
    for trial in 0..trials {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let scale = rng.random_range(0.1..20.0);
        let rand_map = |rng: &mut ChaCha8Rng| -> Tensor<f32> {
            Tensor::new(vec![h, w, c], (0..h * w * c).map(|_| rng.random_range(-scale..scale) as f32).collect()).expect("sized")
        };
        let pet = if trial % 10 == 0 { Tensor::zeros(vec![h, w, c]) } else { rand_map(&mut rng) };
        let ct = rand_map(&mut rng);
        let mut g = Graph::inference(&store);
        let (p, cv) = (g.input(pet.clone()), g.input(ct.clone()));
        let wts = crm.weights(&mut g, p, cv)?;
        violations += g.value(wts).data().iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count();
        let (op, oc) = crm.forward(&mut g, p, cv)?;
        for (out, inp) in [(op, &pet), (oc, &ct)] {
            violations += g.value(out).data().iter().zip(inp.data()).filter(|(o, i)| o.abs() > i.abs()).count();
        }
        if trial % 10 == 0 {
            violations += g.value(op).data().iter().filter(|&&v| v != 0.0).count();
        }
    }
    Ok(SuiteResult::new("crm_bounds", trials, violations as f64, 0.0, start))
}

fn brute_force_hd95(p: &[bool], g: &[bool], n: usize) -> f64 {
    let (bp, bg) = (boundary(p, n, n), boundary(g, n, n));
    let dist = |a: (usize, usize), b: (usize, usize)| (a.0 as f64 - b.0 as f64).hypot(a.1 as f64 - b.1 as f64);
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter().map(|&a| to.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min)).collect()
    };
    let mut all = directed(&bp, &bg);
    all.extend(directed(&bg, &bp));
    percentile(&mut all, 0.95)
}

/// Overlap scores against set arithmetic and HD95 against an all-pairs
/// boundary oracle on random masks.
pub fn metrics_suite(trials: usize, seed: u64, fault: Option<Fault>) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 16;
    let mut worst = 0f64;
    let single = |at: (usize, usize)| {
        let mut d = vec![0.0f32; 64];
        d[at.0 * 8 + at.1] = 1.0;
        Tensor::new(vec![8, 8], d).expect("sized")
    };
    worst = worst.max((hd95(&single((0, 0)), &single((3, 4)), (1.0, 1.0))? - 5.0).abs());
    for _ in 0..trials {
        let density = rng.random_range(0.05..0.6);
        let mut mask = || -> Vec<bool> { (0..n * n).map(|_| rng.random_bool(density)).collect() };
        let (p, g) = (mask(), mask());
        let to_t = |m: &[bool]| Tensor::new(vec![n, n], m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).expect("sized");
        let mut pt = to_t(&p);
        if fault == Some(Fault::Metrics) {
            let v = &mut pt.data_mut()[0];
            *v = 1.0 - *v;
        }
        let gt = to_t(&g);
        let c = confusion(&pt, &gt)?;
        let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count() as f64;
        let union = p.iter().zip(&g).filter(|(a, b)| **a || **b).count() as f64;
        let sizes = (p.iter().filter(|v| **v).count() + g.iter().filter(|v| **v).count()) as f64;
        let agree = p.iter().zip(&g).filter(|(a, b)| a == b).count() as f64;
        let iou = if union == 0.0 { 1.0 } else { inter / union };
        let f1 = if sizes == 0.0 { 1.0 } else { 2.0 * inter / sizes };
        worst = worst
            .max((c.iou() - iou).abs())
            .max((c.f1() - f1).abs())
            .max((c.acc() - agree / (n * n) as f64).abs())
            .max((c.f1() - 2.0 * c.iou() / (1.0 + c.iou())).abs());
        if p.iter().any(|&v| v) && g.iter().any(|&v| v) {
            worst = worst.max((hd95(&pt, &gt, (1.0, 1.0))? - brute_force_hd95(&p, &g, n)).abs());
        }
    }
    Ok(SuiteResult::new("metric_oracles", trials, worst, 1e-9, start))
}

/// HU window endpoints, crop bounds and seeded augmentation repeatability.
pub fn preprocessing_suite(trials: usize, seed: u64) -> Result<SuiteResult> {
    let start = Instant::now();
    let mut worst = 0f64;
    let hu = Tensor::new(vec![1, 2], vec![-1200.0, -200.0])?;
    let out = preprocess_ct(&hu);
    worst = worst.max(out.data()[0].abs() as f64).max((out.data()[1] - 255.0).abs() as f64);
    let pair = synth_generate(&SynthSpec {
        count: 1,
        seed,
        ..SynthSpec::default()
    })?
    .remove(0);
    let (h, w) = pair.dims();
    let (lo, hi) = crop_side_range(h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let (_, a) = augment(&pair, &mut rng)?;
        let frac = a.side as f64 / h as f64;
        if !(0.7..=0.9).contains(&frac) || a.side < lo || a.side > hi {
            worst = f64::INFINITY;
        }
    }
    let once = |s| augment(&pair, &mut ChaCha8Rng::seed_from_u64(s)).map(|(p, _)| p);
    for s in 0..10 {
        if once(s)? != once(s)? {
            worst = f64::INFINITY;
        }
    }
    Ok(SuiteResult::new("preprocessing", trials, worst, 0.0, start))
}

fn tiny_training() -> (CipaConfig, TrainConfig, Vec<ModalityPair>) {
    let model = CipaConfig {
        resolution: 32,
        widths: [4, 8, 16, 32],
        depths: [1, 1, 1, 1],
        state: 4,
        crm_token_len: 8,
        ..CipaConfig::default()
    };
    let train = TrainConfig {
        steps: 6,
        batch_size: 2,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let data = synth_generate(&SynthSpec {
        count: 4,
        resolution: 32,
        radius: [3.0, 6.0],
        ..SynthSpec::default()
    })
    .expect("valid spec");
    (model, train, data)
}

/// Two identical runs agree bit for bit, and so does a run resumed from a
/// mid-way checkpoint. Reports the number of mismatching artifacts.
pub fn determinism_suite() -> Result<SuiteResult> {
    let start = Instant::now();
    let (model, cfg, data) = tiny_training();
    let run = |stop: Option<u64>, from: Option<Vec<u8>>| -> Result<(Vec<u64>, Vec<u8>)> {
        let mut t = match from {
            Some(bytes) => Checkpoint::from_bytes(&bytes, std::path::Path::new("memory"))?.into_trainer()?,
            None => Trainer::new(model.clone(), cfg.clone())?,
        };
        let mut trace = Vec::new();
        while !t.finished() && Some(t.step) != stop {
            trace.push(t.train_step(&data)?.loss.to_bits());
        }
        Ok((trace, Checkpoint::of(&t).to_bytes()?))
    };
    let (a, ca) = run(None, None)?;
    let (b, cb) = run(None, None)?;
    let (head, mid) = run(Some(3), None)?;
    let (tail, cr) = run(None, Some(mid))?;
    let resumed = [head, tail].concat();
    let mismatches = [a != b, ca != cb, a != resumed, ca != cr].iter().filter(|&&m| m).count();
    Ok(SuiteResult::new("determinism", 4, mismatches as f64, 0.0, start))
}

/// Every suite at the sizes used by the command-line verifier.
pub fn run_all(seed: u64, fault: Option<Fault>) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        lti_suite(100, seed, fault)?,
        gradient_suite(seed, 4)?.0,
        geometry_suite(seed, fault)?,
        crm_suite(1000, seed)?,
        metrics_suite(200, seed, fault)?,
        preprocessing_suite(500, seed)?,
        determinism_suite()?,
    ])
}
