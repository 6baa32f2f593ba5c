use std::collections::HashMap;
use std::f64::consts::PI;

use super::Mesh;

/// Angle and edge-length summary of a triangulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityReport {
    pub min_angle: f64,
    pub max_angle: f64,
    pub min_edge: f64,
    /// Every interior edge has opposite angles summing to at most `pi - theta0`.
    pub is_weakly_acute: bool,
}

/// Interior angles at the three vertices of a triangle.
pub fn triangle_angles(p: [[f64; 2]; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for k in 0..3 {
        let a = p[k];
        let b = p[(k + 1) % 3];
        let c = p[(k + 2) % 3];
        let u = [b[0] - a[0], b[1] - a[1]];
        let v = [c[0] - a[0], c[1] - a[1]];
        let cross = u[0] * v[1] - u[1] * v[0];
        let dot = u[0] * v[0] + u[1] * v[1];
        out[k] = cross.abs().atan2(dot);
    }
    out
}

pub(super) fn assess(mesh: &Mesh, theta0: f64) -> QualityReport {
    let mut min_angle = PI;
    let mut max_angle = 0.0f64;
    // undirected edge -> sum of opposite angles and owner count
    let mut opposite: HashMap<(usize, usize), (f64, u8)> = HashMap::new();
    for t in 0..mesh.num_triangles() {
        let tri = mesh.triangles()[t];
        let angles = triangle_angles(mesh.triangle_points(t));
        for k in 0..3 {
            min_angle = min_angle.min(angles[k]);
            max_angle = max_angle.max(angles[k]);
            // edge (k+1, k+2) is opposite vertex k
            let a = tri[(k + 1) % 3];
            let b = tri[(k + 2) % 3];
            let key = if a < b { (a, b) } else { (b, a) };
            let entry = opposite.entry(key).or_insert((0.0, 0));
            entry.0 += angles[k];
            entry.1 += 1;
        }
    }
    let limit = PI - theta0 + 1e-12;
    let is_weakly_acute = opposite.values().filter(|(_, n)| *n == 2).all(|(s, _)| *s <= limit);
    QualityReport { min_angle, max_angle, min_edge: mesh.min_edge(), is_weakly_acute }
}
