//! Procedural PET-CT slices with irregular tumour blobs inside two lung
//! fields. Every sample is a pure function of `(seed, index)`.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{preprocess_ct, preprocess_pet, ModalityPair};
use crate::error::{Error, Result};
use crate::imgops::resize_bilinear;
use crate::tensor::Tensor;

/// PET background stays inside this SUV band; tumours sit strictly above it.
const PET_BACKGROUND: (f64, f64) = (0.5, 1.5);
/// SUV threshold separating the clean tumour signal from the background.
pub const PET_THRESHOLD: f64 = 2.0;
const LUNG_HU: f64 = -850.0;
const TISSUE_HU: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    /// Inclusive range of tumours per slice.
    pub tumors: [usize; 2],
    /// Range of base tumour radii in pixels; draws are skewed towards the
    /// lower end.
    pub radius: [f64; 2],
    /// SUV added over each tumour.
    pub pet_contrast: [f64; 2],
    /// HU added over each tumour.
    pub ct_contrast: [f64; 2],
    /// Amplitude of the smooth CT background texture in HU.
    pub ct_texture: f64,
    pub pet_noise: f64,
    pub ct_noise: f64,
    /// Relative boundary perturbation, in `[0, 0.5)`.
    pub irregularity: f64,
    pub harmonics: usize,
    pub spacing: (f64, f64),
    pub slices_per_patient: usize,
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 40,
            resolution: 64,
            tumors: [1, 3],
            radius: [3.0, 10.0],
            pet_contrast: [3.0, 8.0],
            ct_contrast: [450.0, 700.0],
            ct_texture: 40.0,
            pet_noise: 0.15,
            ct_noise: 20.0,
            irregularity: 0.25,
            harmonics: 3,
            spacing: (1.0, 1.0),
            slices_per_patient: 1,
            test_fraction: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.count == 0 {
            return fail("count must be at least 1".into());
        }
        if self.resolution < 8 {
            return fail(format!("resolution {} is too small", self.resolution));
        }
        if self.tumors[0] == 0 || self.tumors[0] > self.tumors[1] {
            return fail(format!("tumour count range {:?}", self.tumors));
        }
        if !(self.radius[0] >= 2.0 && self.radius[0] <= self.radius[1]) {
            return fail(format!("radius range {:?} must start at 2 px or more", self.radius));
        }
        if !(0.0..0.5).contains(&self.irregularity) {
            return fail(format!("irregularity {} outside [0, 0.5)", self.irregularity));
        }
        let reach = self.radius[1] * (1.0 + self.irregularity) + 1.0;
        if 2.0 * reach >= self.resolution as f64 {
            return fail(format!("radius {:?} does not fit a {} px slice", self.radius, self.resolution));
        }
        let gap = PET_THRESHOLD - PET_BACKGROUND.0;
        if !(self.pet_contrast[0] > gap && self.pet_contrast[0] <= self.pet_contrast[1]) {
            return fail(format!("PET contrast range {:?} must exceed {gap}", self.pet_contrast));
        }
        if self.ct_contrast[0] > self.ct_contrast[1] {
            return fail(format!("CT contrast range {:?}", self.ct_contrast));
        }
        if self.pet_noise < 0.0 || self.ct_noise < 0.0 || self.ct_texture < 0.0 {
            return fail("noise levels must be non-negative".into());
        }
        if self.slices_per_patient == 0 || !(0.0..1.0).contains(&self.test_fraction) {
            return fail("slices per patient must be positive and test fraction in [0, 1)".into());
        }
        if !(self.spacing.0 > 0.0 && self.spacing.1 > 0.0) {
            return fail(format!("spacing {:?}", self.spacing));
        }
        Ok(())
    }

    pub fn patients(&self) -> usize {
        self.count.div_ceil(self.slices_per_patient)
    }

    pub fn sample_id(&self, index: usize) -> String {
        let p = index / self.slices_per_patient;
        let s = index % self.slices_per_patient;
        format!("p{p:04}s{s:02}")
    }
}

/// One tumour: `r(θ) = R·(1 + ε·Σ_k w_k cos(kθ + φ_k))` with `Σ w_k = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tumor {
    pub center: (f64, f64),
    pub radius: f64,
    pub irregularity: f64,
    /// `(k, w_k, φ_k)`
    pub harmonics: Vec<(f64, f64, f64)>,
}

impl Tumor {
    pub fn radius_at(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .map(|&(k, w, phi)| w * (k * theta + phi).cos())
            .sum();
        self.radius * (1.0 + self.irregularity * wobble)
    }

    /// Whether the pixel centre `(y, x)` lies inside the boundary.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 - self.center.0;
        let dx = x as f64 - self.center.1;
        let d = dy.hypot(dx);
        d <= self.inner_radius() || (d <= self.outer_radius() && d <= self.radius_at(dy.atan2(dx)))
    }

    pub fn inner_radius(&self) -> f64 {
        self.radius * (1.0 - self.irregularity)
    }

    pub fn outer_radius(&self) -> f64 {
        self.radius * (1.0 + self.irregularity)
    }
}

/// Unpreprocessed slice plus generator ground truth.
#[derive(Clone, Debug)]
pub struct RawSample {
    pub id: String,
    /// Hounsfield units.
    pub hu: Tensor<f32>,
    /// SUV with noise.
    pub suv: Tensor<f32>,
    /// SUV before noise.
    pub clean_suv: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub tumors: Vec<Tumor>,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        ((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2) <= 1.0
    }
}

/// Sum of a few random low-frequency plane waves, unit amplitude.
fn smooth_field(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (v, u) = (y as f64 / n as f64, x as f64 / n as f64);
            let s: f64 = waves
                .iter()
                .map(|&(fy, fx, p)| (2.0 * PI * (fy * v + fx * u) + p).sin())
                .sum();
            out.push(s / 4.0);
        }
    }
    out
}

fn place_tumor(spec: &SynthSpec, rng: &mut ChaCha8Rng, lungs: &[Ellipse]) -> Tumor {
    let n = spec.resolution as f64;
    let [rlo, rhi] = spec.radius;
    let u: f64 = rng.random();
    let radius = rlo + (rhi - rlo) * u * u;
    let mut weights: Vec<f64> = (0..spec.harmonics).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let harmonics = weights
        .into_iter()
        .enumerate()
        .map(|(i, w)| ((i + 2) as f64, w, rng.random_range(0.0..2.0 * PI)))
        .collect();
    let margin = radius * (1.0 + spec.irregularity) + 1.0;
    let mut center = (n / 2.0, n / 2.0);
    for _ in 0..64 {
        let lung = &lungs[rng.random_range(0..lungs.len())];
        let y = rng.random_range(margin..n - margin);
        let x = rng.random_range(margin..n - margin);
        center = (y, x);
        if lung.contains(y, x) {
            break;
        }
    }
    Tumor {
        center,
        radius,
        irregularity: spec.irregularity,
        harmonics,
    }
}

/// Generates sample `index` of a spec.
pub fn generate_raw(spec: &SynthSpec, index: usize) -> Result<RawSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let n = spec.resolution;
    let nf = n as f64;
    let lungs: Vec<Ellipse> = [0.3, 0.7]
        .iter()
        .map(|&fx| Ellipse {
            cy: nf * rng.random_range(0.45..0.55),
            cx: nf * (fx + rng.random_range(-0.03..0.03)),
            ry: nf * rng.random_range(0.3..0.38),
            rx: nf * rng.random_range(0.14..0.18),
        })
        .collect();
    let count = rng.random_range(spec.tumors[0]..=spec.tumors[1]);
    let tumors: Vec<Tumor> = (0..count).map(|_| place_tumor(spec, &mut rng, &lungs)).collect();
    let ct_gain: Vec<f64> = (0..count)
        .map(|_| rng.random_range(spec.ct_contrast[0]..=spec.ct_contrast[1]))
        .collect();
    let pet_gain: Vec<f64> = (0..count)
        .map(|_| rng.random_range(spec.pet_contrast[0]..=spec.pet_contrast[1]))
        .collect();

    let texture = smooth_field(&mut rng, n);
    let coarse: Vec<f32> = (0..16)
        .map(|_| rng.random_range(PET_BACKGROUND.0..PET_BACKGROUND.1) as f32)
        .collect();
    let pet_bg = resize_bilinear(&coarse, 4, 4, n, n);

    let mut hu = Vec::with_capacity(n * n);
    let mut clean = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let in_lung = lungs.iter().any(|l| l.contains(y as f64, x as f64));
            let mut h = if in_lung { LUNG_HU } else { TISSUE_HU } + spec.ct_texture * texture[i];
            let mut p = pet_bg[i] as f64;
            let mut hit = false;
            for (k, t) in tumors.iter().enumerate() {
                if t.contains(y, x) {
                    if !hit {
                        h += ct_gain[k];
                        p += pet_gain[k];
                    }
                    hit = true;
                }
            }
            hu.push(h);
            clean.push(p);
            mask.push(if hit { 1.0f32 } else { 0.0 });
        }
    }
    let ct_noise = Normal::new(0.0, spec.ct_noise).map_err(|e| Error::Config(e.to_string()))?;
    let pet_noise = Normal::new(0.0, spec.pet_noise).map_err(|e| Error::Config(e.to_string()))?;
    let hu: Vec<f32> = hu.iter().map(|&v| (v + ct_noise.sample(&mut rng)) as f32).collect();
    let suv: Vec<f32> = clean
        .iter()
        .map(|&v| (v + pet_noise.sample(&mut rng)).max(0.0) as f32)
        .collect();
    let clean: Vec<f32> = clean.iter().map(|&v| v as f32).collect();
    Ok(RawSample {
        id: spec.sample_id(index),
        hu: Tensor::new(vec![n, n], hu)?,
        suv: Tensor::new(vec![n, n], suv)?,
        clean_suv: Tensor::new(vec![n, n], clean)?,
        mask: Tensor::new(vec![n, n], mask)?,
        tumors,
    })
}

/// Preprocessed pairs for every index of the spec, in index order.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<ModalityPair>> {
    spec.validate()?;
    (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let raw = generate_raw(spec, i)?;
            Ok(ModalityPair {
                id: raw.id,
                pet: preprocess_pet(&raw.suv),
                ct: preprocess_ct(&raw.hu),
                mask: Some(raw.mask),
                spacing: spec.spacing,
            })
        })
        .collect()
}

/// Sample ids split into `(train, test)` by whole patients.
pub fn split_patients(spec: &SynthSpec) -> (Vec<String>, Vec<String>) {
    let patients = spec.patients();
    let mut order: Vec<usize> = (0..patients).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let mut n_test = (patients as f64 * spec.test_fraction).round() as usize;
    if patients >= 2 && spec.test_fraction > 0.0 {
        n_test = n_test.clamp(1, patients - 1);
    }
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut train: Vec<usize> = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    let ids = |ps: &[usize]| -> Vec<String> {
        ps.iter()
            .flat_map(|&p| {
                let lo = p * spec.slices_per_patient;
                let hi = (lo + spec.slices_per_patient).min(spec.count);
                (lo..hi).map(|i| spec.sample_id(i))
            })
            .collect()
    };
    (ids(&train), ids(&test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            count: 12,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn samples_are_pure_functions_of_seed_and_index() {
        let s = spec();
        let a = generate_raw(&s, 3).unwrap();
        let b = generate_raw(&s, 3).unwrap();
        assert_eq!(a.hu, b.hu);
        assert_eq!(a.suv, b.suv);
        assert_eq!(a.mask, b.mask);
        assert_ne!(generate_raw(&s, 4).unwrap().mask, a.mask);
    }

    #[test]
    fn mask_area_respects_radius_bounds() {
        let s = spec();
        let half_diag = std::f64::consts::FRAC_1_SQRT_2;
        for i in 0..s.count {
            let raw = generate_raw(&s, i).unwrap();
            let area: f64 = raw.mask.data().iter().map(|&v| v as f64).sum();
            let lower = raw
                .tumors
                .iter()
                .map(|t| PI * (t.inner_radius() - half_diag).max(0.0).powi(2))
                .fold(0.0, f64::max);
            let upper: f64 = raw
                .tumors
                .iter()
                .map(|t| PI * (t.outer_radius() + half_diag).powi(2))
                .sum();
            assert!(area >= lower && area <= upper, "{i}: {area} not in [{lower}, {upper}]");
        }
    }

    #[test]
    fn clean_pet_threshold_recovers_the_mask() {
        let s = spec();
        for i in 0..s.count {
            let raw = generate_raw(&s, i).unwrap();
            for (&p, &m) in raw.clean_suv.data().iter().zip(raw.mask.data()) {
                assert_eq!(p as f64 > PET_THRESHOLD, m == 1.0);
            }
        }
    }

    #[test]
    fn pet_is_brighter_inside_the_mask() {
        for pair in synth_generate(&spec()).unwrap() {
            pair.validate().unwrap();
            let mask = pair.mask.as_ref().unwrap().data();
            let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
            for (&p, &m) in pair.pet.data().iter().zip(mask) {
                if m == 1.0 {
                    si += p as f64;
                    ni += 1;
                } else {
                    so += p as f64;
                    no += 1;
                }
            }
            assert!(si / ni as f64 > so / no as f64, "{}", pair.id);
        }
    }

    #[test]
    fn split_is_eight_to_two_and_disjoint() {
        let s = SynthSpec {
            count: 50,
            ..SynthSpec::default()
        };
        let (train, test) = split_patients(&s);
        assert_eq!((train.len(), test.len()), (40, 10));
        assert!(train.iter().all(|id| !test.contains(id)));
        let s = SynthSpec {
            count: 20,
            slices_per_patient: 4,
            ..SynthSpec::default()
        };
        let (train, test) = split_patients(&s);
        assert_eq!((train.len(), test.len()), (16, 4));
        let patient = |id: &String| id[..5].to_string();
        assert!(train.iter().all(|a| test.iter().all(|b| patient(a) != patient(b))));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [
            SynthSpec { count: 0, ..SynthSpec::default() },
            SynthSpec { radius: [1.0, 4.0], ..SynthSpec::default() },
            SynthSpec { tumors: [3, 1], ..SynthSpec::default() },
            SynthSpec { pet_contrast: [1.0, 4.0], ..SynthSpec::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
