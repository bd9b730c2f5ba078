//! Inputs shared by the benchmarks.

use dvm_core::{Point3, PointCloud};

/// `n` points on a ribbed ellipsoid, deterministic and tie-free.
pub fn surface(n: usize) -> PointCloud {
    let pts = (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let z = 1.0 - 2.0 * t;
            let r = (1.0 - z * z).sqrt();
            let a = i as f64 * 2.399_963;
            let rib = 1.0 + 0.05 * (7.0 * a).sin();
            Point3::new(rib * r * a.cos(), 0.6 * rib * r * a.sin(), 0.8 * z)
        })
        .collect();
    PointCloud::new(pts).expect("finite points")
}
