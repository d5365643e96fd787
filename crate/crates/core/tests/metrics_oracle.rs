use cipa_core::metrics::{boundary, confusion, hd95, percentile};
use cipa_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f32> {
    let density = rng.random_range(0.0..0.6);
    let data = (0..n * n).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![n, n], data).unwrap()
}

fn brute_force_hd95(p: &Tensor<f32>, g: &Tensor<f32>, spacing: (f64, f64)) -> (f64, f64) {
    let n = p.shape()[0];
    let bools = |m: &Tensor<f32>| m.data().iter().map(|&v| v == 1.0).collect::<Vec<_>>();
    let (bp, bg) = (boundary(&bools(p), n, n), boundary(&bools(g), n, n));
    let dist = |a: (usize, usize), b: (usize, usize)| {
        let dy = (a.0 as f64 - b.0 as f64) * spacing.0;
        let dx = (a.1 as f64 - b.1 as f64) * spacing.1;
        (dy * dy + dx * dx).sqrt()
    };
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&a| to.iter().map(|&b| dist(a, b)).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let mut all = directed(&bp, &bg);
    all.extend(directed(&bg, &bp));
    let max = all.iter().cloned().fold(0.0, f64::max);
    (percentile(&mut all, 0.95), max)
}

#[test]
fn overlap_metrics_match_set_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (p, g) = (random_mask(&mut rng, 16), random_mask(&mut rng, 16));
        let c = confusion(&p, &g).unwrap();
        let both = |f: fn(bool, bool) -> bool| {
            p.data().iter().zip(g.data()).filter(|(&a, &b)| f(a == 1.0, b == 1.0)).count() as u64
        };
        let inter = both(|a, b| a && b);
        let union = both(|a, b| a || b);
        let agree = both(|a, b| a == b);
        let sizes = both(|a, _| a) + both(|_, b| b);
        let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let f1 = if sizes == 0 { 1.0 } else { 2.0 * inter as f64 / sizes as f64 };
        assert_eq!(c.iou(), iou);
        assert_eq!(c.f1(), f1);
        assert_eq!(c.acc(), agree as f64 / 256.0);
        assert!((c.f1() - 2.0 * c.iou() / (1.0 + c.iou())).abs() < 1e-12);
        assert!(c.iou() <= c.f1());
    }
}

#[test]
fn hd95_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    for trial in 0..200 {
        let (p, g) = (random_mask(&mut rng, 16), random_mask(&mut rng, 16));
        let spacing = if trial % 2 == 0 { (1.0, 1.0) } else { (0.7, 1.3) };
        let empty = |m: &Tensor<f32>| m.data().iter().all(|&v| v == 0.0);
        if empty(&p) || empty(&g) {
            continue;
        }
        let fast = hd95(&p, &g, spacing).unwrap();
        let (oracle, max) = brute_force_hd95(&p, &g, spacing);
        assert!((fast - oracle).abs() <= 1e-9, "trial {trial}: {fast} vs {oracle}");
        assert!(fast <= max + 1e-12);
        assert_eq!(fast, hd95(&g, &p, spacing).unwrap());
        checked += 1;
    }
    assert!(checked > 150);
}

#[test]
fn metrics_survive_joint_transposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let transpose = |m: &Tensor<f32>| {
        let n = m.shape()[0];
        let d = m.data();
        Tensor::new(vec![n, n], (0..n * n).map(|i| d[(i % n) * n + i / n]).collect()).unwrap()
    };
    for _ in 0..50 {
        let (p, g) = (random_mask(&mut rng, 16), random_mask(&mut rng, 16));
        let (pt, gt) = (transpose(&p), transpose(&g));
        assert_eq!(confusion(&p, &g).unwrap(), confusion(&pt, &gt).unwrap());
        let a = hd95(&p, &g, (1.0, 1.0)).unwrap();
        let b = hd95(&pt, &gt, (1.0, 1.0)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
