use rand::Rng;

use super::ModalityPair;
use crate::error::{Error, Result};
use crate::imgops::{crop, flip_horizontal, flip_vertical, resize_bilinear, resize_nearest};
use crate::tensor::Tensor;

/// What [`augment`] did to a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    /// Side of the square crop, before resizing back.
    pub side: usize,
    pub top: usize,
    pub left: usize,
}

/// Inclusive range of crop sides for an `h×w` plane: 70–90% of the shorter
/// side, rounded inwards.
pub fn crop_side_range(h: usize, w: usize) -> (usize, usize) {
    let n = h.min(w) as f64;
    let lo = (0.7 * n).ceil() as usize;
    let hi = ((0.9 * n).floor() as usize).max(lo);
    (lo.max(1), hi.max(1))
}

fn apply(plane: &Tensor<f32>, a: &Augmentation, nearest: bool) -> Tensor<f32> {
    let (h, w) = (plane.shape()[0], plane.shape()[1]);
    let mut data = plane.data().to_vec();
    if a.hflip {
        flip_horizontal(&mut data, w);
    }
    if a.vflip {
        flip_vertical(&mut data, h, w);
    }
    let cropped = crop(&data, w, a.top, a.left, a.side, a.side);
    let resized = if nearest {
        resize_nearest(&cropped, a.side, a.side, h, w)
    } else {
        resize_bilinear(&cropped, a.side, a.side, h, w)
    };
    Tensor::new(vec![h, w], resized).expect("resized to the original shape")
}

/// Random flips (each with probability 1/2) followed by a random square
/// crop resized back to the original grid; the same transform hits all
/// three planes.
pub fn augment<R: Rng>(pair: &ModalityPair, rng: &mut R) -> Result<(ModalityPair, Augmentation)> {
    let mask = pair
        .mask
        .as_ref()
        .ok_or_else(|| Error::contract(format!("{}: augmentation needs a mask", pair.id)))?;
    let (h, w) = pair.dims();
    let hflip = rng.random_bool(0.5);
    let vflip = rng.random_bool(0.5);
    let (lo, hi) = crop_side_range(h, w);
    let side = rng.random_range(lo..=hi);
    let top = rng.random_range(0..=h - side);
    let left = rng.random_range(0..=w - side);
    let a = Augmentation {
        hflip,
        vflip,
        side,
        top,
        left,
    };
    let out = ModalityPair {
        id: pair.id.clone(),
        pet: apply(&pair.pet, &a, false),
        ct: apply(&pair.ct, &a, false),
        mask: Some(apply(mask, &a, true)),
        spacing: pair.spacing,
    };
    Ok((out, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(seed: u64) -> ModalityPair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plane = || {
            Tensor::new(vec![20, 20], (0..400).map(|_| rng.random_range(0.0..255.0)).collect()).unwrap()
        };
        let (pet, ct) = (plane(), plane());
        let mask = Tensor::new(
            vec![20, 20],
            pet.data().iter().map(|&v| if v > 128.0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        ModalityPair {
            id: "a".into(),
            pet,
            ct,
            mask: Some(mask),
            spacing: (1.0, 1.0),
        }
    }

    #[test]
    fn seeded_augmentation_repeats() {
        let p = pair(0);
        let a = augment(&p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(&p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_sides_stay_in_range() {
        let p = pair(1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let (out, a) = augment(&p, &mut rng).unwrap();
            assert!((14..=18).contains(&a.side));
            assert!(a.top + a.side <= 20 && a.left + a.side <= 20);
            out.validate().unwrap();
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let p = pair(2);
        let mut data = p.pet.data().to_vec();
        flip_horizontal(&mut data, 20);
        flip_horizontal(&mut data, 20);
        assert_eq!(data, p.pet.data());
    }

    #[test]
    fn full_crop_without_flips_is_identity() {
        let p = pair(3);
        let a = Augmentation {
            hflip: false,
            vflip: false,
            side: 20,
            top: 0,
            left: 0,
        };
        assert_eq!(apply(&p.pet, &a, false), p.pet);
        assert_eq!(apply(p.mask.as_ref().unwrap(), &a, true), *p.mask.as_ref().unwrap());
    }
}
