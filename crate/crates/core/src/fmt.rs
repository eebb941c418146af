//! Fixed-precision numeric printing for every machine-readable output.
//!
//! All floats are printed at six significant digits in exponent form so
//! reruns produce byte-identical files and diffs stay meaningful.

/// Six-significant-digit formatting, e.g. `9.50000e-1`; `nan` for NaN.
pub fn fmt_g6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    format!("{x:.5e}")
}
