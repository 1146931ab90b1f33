//! Binary PGM (P5) export of single feature maps.

/// Encodes an `h x w` map as 8-bit grayscale, min-max scaled. Constant maps
/// become uniform 128; non-finite values are treated as the minimum.
pub fn encode_pgm(values: &[f32], h: usize, w: usize) -> Vec<u8> {
    assert_eq!(values.len(), h * w, "map size must be h * w");
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    if !(hi > lo) {
        out.extend(std::iter::repeat_n(128u8, h * w));
        return out;
    }
    let scale = 255.0 / (hi as f64 - lo as f64);
    out.extend(values.iter().map(|&v| {
        if v.is_finite() {
            ((v as f64 - lo as f64) * scale).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}
