//! CLS-attention dumps: one CSV row per layer over the original patch
//! grid, and grayscale PGM images.

use std::fmt::Write as _;

use crate::scalar::Scalar;
use crate::vit::AttnTrace;

/// Marks patches that no longer exist as their own token.
pub const SENTINEL: f64 = -1.0;

/// Scores of one layer over the original patch grid: the head-averaged
/// CLS attention for every patch that leaves the layer as itself, `None`
/// for patches discarded or merged away by this or earlier layers.
pub fn patch_scores<T: Scalar>(trace: &AttnTrace<T>, num_patches: usize) -> Vec<Option<f64>> {
    let mut out = vec![None; num_patches];
    for &i in &trace.survivors {
        if let Some(Some(p)) = trace.origins.get(i) {
            if *p < num_patches {
                out[*p] = Some(trace.avg_cls_attn[i].as_f64());
            }
        }
    }
    out
}

/// `layer,v0,…,v{P−1}` rows with a header line.
pub fn to_csv<T: Scalar>(traces: &[AttnTrace<T>], num_patches: usize) -> String {
    let mut s = String::from("layer");
    for p in 0..num_patches {
        let _ = write!(s, ",p{p}");
    }
    s.push('\n');
    for t in traces {
        let _ = write!(s, "{}", t.layer);
        for v in patch_scores(t, num_patches) {
            let _ = write!(s, ",{}", v.unwrap_or(SENTINEL));
        }
        s.push('\n');
    }
    s
}

/// Binary P5 image of `grid × grid` pixels. Scores are scaled so the
/// layer maximum is white; missing patches are black.
pub fn to_pgm(scores: &[Option<f64>], grid: usize) -> Vec<u8> {
    let max = scores.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
    let mut out = format!("P5\n{grid} {grid}\n255\n").into_bytes();
    for v in scores.iter().take(grid * grid) {
        let px = match v {
            Some(v) if max > 0.0 => (v / max * 255.0).round().clamp(0.0, 255.0) as u8,
            _ => 0,
        };
        out.push(px);
    }
    out
}
