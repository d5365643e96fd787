use crate::tensor::Tensor;

/// Lung window in Hounsfield units.
pub const HU_WINDOW: (f64, f64) = (-1200.0, -200.0);

/// Clips HU to the lung window and maps it affinely onto `[0, 255]`.
pub fn preprocess_ct(raw_hu: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = HU_WINDOW;
    let data = raw_hu
        .data()
        .iter()
        .map(|&v| ((v as f64).clamp(lo, hi) - lo) / (hi - lo) * 255.0)
        .map(|v| v as f32)
        .collect();
    Tensor::new(raw_hu.shape().to_vec(), data).expect("same shape")
}

/// Min-max scales an SUV plane onto `[0, 255]`; a constant plane maps to
/// zeros.
pub fn preprocess_pet(raw_suv: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = raw_suv
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let data = if hi > lo {
        raw_suv
            .data()
            .iter()
            .map(|&v| ((v as f64 - lo) / (hi - lo) * 255.0) as f32)
            .collect()
    } else {
        vec![0.0; raw_suv.numel()]
    };
    Tensor::new(raw_suv.shape().to_vec(), data).expect("same shape")
}
