//! Resampling tables and plane helpers shared by the graph ops and the data
//! pipeline. Planes are row-major `[H, W]` slices.

/// One bilinear tap pair along an axis: `out = (1-w)·src[lo] + w·src[hi]`.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w: f64,
}

/// Half-pixel-center bilinear taps mapping `src` samples onto `dst`.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let w = if hi == lo { 0.0 } else { pos - lo as f64 };
            Tap { lo, hi, w }
        })
        .collect()
}

/// Half-pixel-center nearest-neighbour source indices.
pub fn nearest_index(src: usize, dst: usize) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| (((i as f64 + 0.5) * scale).floor() as usize).min(src - 1))
        .collect()
}

pub fn resize_bilinear(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for y in &ty {
        for x in &tx {
            let at = |r: usize, c: usize| plane[r * w + c] as f64;
            let top = (1.0 - x.w) * at(y.lo, x.lo) + x.w * at(y.lo, x.hi);
            let bot = (1.0 - x.w) * at(y.hi, x.lo) + x.w * at(y.hi, x.hi);
            out.push(((1.0 - y.w) * top + y.w * bot) as f32);
        }
    }
    out
}

pub fn resize_nearest(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let iy = nearest_index(h, oh);
    let ix = nearest_index(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &r in &iy {
        for &c in &ix {
            out.push(plane[r * w + c]);
        }
    }
    out
}

pub fn flip_horizontal(plane: &mut [f32], w: usize) {
    for row in plane.chunks_mut(w) {
        row.reverse();
    }
}

pub fn flip_vertical(plane: &mut [f32], h: usize, w: usize) {
    for r in 0..h / 2 {
        let (top, bottom) = plane.split_at_mut((h - 1 - r) * w);
        top[r * w..(r + 1) * w].swap_with_slice(&mut bottom[..w]);
    }
}

pub fn crop(plane: &[f32], w: usize, top: usize, left: usize, ch: usize, cw: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(ch * cw);
    for r in top..top + ch {
        out.extend_from_slice(&plane[r * w + left..r * w + left + cw]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_preserves_constants() {
        let plane = vec![3.25f32; 12];
        let out = resize_bilinear(&plane, 3, 4, 7, 5);
        assert!(out.iter().all(|&v| v == 3.25));
    }

    #[test]
    fn half_pixel_upsample_of_ramp() {
        // [0, 1] upsampled 2x with half-pixel centers -> [0, .25, .75, 1]
        let out = resize_bilinear(&[0.0, 1.0], 1, 2, 1, 4);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn flips_are_involutions() {
        let orig: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let mut p = orig.clone();
        flip_horizontal(&mut p, 4);
        assert_eq!(&p[..4], &[3.0, 2.0, 1.0, 0.0]);
        flip_horizontal(&mut p, 4);
        assert_eq!(p, orig);
        flip_vertical(&mut p, 3, 4);
        assert_eq!(&p[..4], &[8.0, 9.0, 10.0, 11.0]);
        flip_vertical(&mut p, 3, 4);
        assert_eq!(p, orig);
    }
}
