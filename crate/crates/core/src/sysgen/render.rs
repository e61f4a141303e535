use super::{SystemKind, SystemSpec};
use crate::error::{Error, Result};

/// Pixel-space layout shared by every frame of a system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderGeometry {
    pub height: usize,
    pub width: usize,
    /// Pivot position in pixel coordinates (x right, y down).
    pub pivot: (f64, f64),
    /// Pixels per metre.
    pub scale: f64,
    pub bob_radius: f64,
    pub arm_radius: f64,
    /// Half-width of the anti-aliasing ramp, in pixels.
    pub edge: f64,
}

impl RenderGeometry {
    pub fn new(spec: &SystemSpec, height: usize, width: usize) -> Result<Self> {
        if height < 8 || width < 8 {
            return Err(Error::Config(format!(
                "frames must be at least 8x8, got {height}x{width}"
            )));
        }
        let half = 0.5 * height.min(width) as f64;
        let bob_radius = (0.08 * 2.0 * half).max(1.5);
        let edge = 0.75;
        let scale = (half - bob_radius - edge - 0.5) / spec.reach();
        Ok(Self {
            height,
            width,
            pivot: (0.5 * width as f64, 0.5 * height as f64),
            scale,
            bob_radius,
            arm_radius: 0.6,
            edge,
        })
    }

    /// Pixel position of a point `length` metres from `origin` at `angle`
    /// radians from the downward vertical.
    fn offset(&self, origin: (f64, f64), length: f64, angle: f64) -> (f64, f64) {
        let (s, c) = angle.sin_cos();
        (origin.0 + self.scale * length * s, origin.1 + self.scale * length * c)
    }

    /// Pixel positions of the bobs for a state.
    pub fn bob_positions(&self, spec: &SystemSpec, state: &[f64]) -> Vec<(f64, f64)> {
        let p = self.pivot;
        match spec.kind {
            SystemKind::CircularMotion | SystemKind::SinglePendulum => {
                vec![self.offset(p, spec.length1, state[0])]
            }
            SystemKind::DoublePendulum => {
                let b1 = self.offset(p, spec.length1, state[0]);
                vec![b1, self.offset(b1, spec.length2, state[2])]
            }
            SystemKind::ElasticPendulum => {
                let b1 = self.offset(p, spec.length1, state[0]);
                vec![b1, self.offset(b1, spec.rest_length + state[4], state[2])]
            }
        }
    }
}

enum Shape {
    Disk { center: (f64, f64), radius: f64 },
    Capsule { a: (f64, f64), b: (f64, f64), radius: f64 },
}

impl Shape {
    fn distance(&self, p: (f64, f64)) -> (f64, f64) {
        match *self {
            Shape::Disk { center, radius } => (((p.0 - center.0).powi(2) + (p.1 - center.1).powi(2)).sqrt(), radius),
            Shape::Capsule { a, b, radius } => {
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let q = (a.0 + t * dx, a.1 + t * dy);
                (((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt(), radius)
            }
        }
    }
}

/// C1 coverage: 1 inside, 0 outside, cubic smoothstep across the edge.
fn coverage(distance: f64, radius: f64, edge: f64) -> f64 {
    let t = ((distance - (radius - edge)) / (2.0 * edge)).clamp(0.0, 1.0);
    1.0 - t * t * (3.0 - 2.0 * t)
}

/// Renders a grayscale `height x width` frame (row-major, values in [0, 1]).
///
/// Bodies are anti-aliased disks and capsules whose coverage is
/// continuously differentiable in the state. Overlapping bodies combine as
/// `1 - prod(1 - intensity * coverage)`.
pub fn render_frame(spec: &SystemSpec, state: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    if state.len() != spec.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.state_dim(),
            got: state.len(),
        });
    }
    let geo = RenderGeometry::new(spec, height, width)?;
    let bobs = geo.bob_positions(spec, state);
    let mut shapes: Vec<(Shape, f64)> = Vec::with_capacity(4);
    match spec.kind {
        SystemKind::CircularMotion => {}
        SystemKind::SinglePendulum | SystemKind::DoublePendulum => {
            let mut from = geo.pivot;
            for &b in &bobs {
                shapes.push((Shape::Capsule { a: from, b, radius: geo.arm_radius }, 0.5));
                from = b;
            }
        }
        SystemKind::ElasticPendulum => {
            shapes.push((Shape::Capsule { a: geo.pivot, b: bobs[0], radius: geo.arm_radius }, 0.5));
            shapes.push((Shape::Capsule { a: bobs[0], b: bobs[1], radius: 0.45 * geo.arm_radius + 0.2 }, 0.35));
        }
    }
    for &b in &bobs {
        shapes.push((Shape::Disk { center: b, radius: geo.bob_radius }, 1.0));
    }

    let mut frame = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let mut empty = 1.0;
            for (shape, intensity) in &shapes {
                let (d, r) = shape.distance(p);
                empty *= 1.0 - intensity * coverage(d, r, geo.edge);
            }
            frame[y * width + x] = 1.0 - empty;
        }
    }
    Ok(frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn centroid(frame: &[f64], w: usize) -> (f64, f64) {
        let mut m = 0.0;
        let (mut cx, mut cy) = (0.0, 0.0);
        for (i, v) in frame.iter().enumerate() {
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            m += v;
            cx += v * x;
            cy += v * y;
        }
        (cx / m, cy / m)
    }

    #[test]
    fn tiny_state_change_gives_tiny_pixel_change() {
        let spec = SystemSpec::new(SystemKind::DoublePendulum);
        let a = render_frame(&spec, &[0.7, 0.0, -1.2, 0.0], 32, 32).unwrap();
        let b = render_frame(&spec, &[0.7 + 1e-6, 0.0, -1.2 - 1e-6, 0.0], 32, 32).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-3, "diff {diff}");
    }

    #[test]
    fn mirrored_angles_mirror_the_bob() {
        let spec = SystemSpec::new(SystemKind::CircularMotion);
        let w = 32;
        let pivot_x = 16.0;
        let (x0, _) = centroid(&render_frame(&spec, &[0.0, 0.0], 32, w).unwrap(), w);
        let (xpi, _) = centroid(&render_frame(&spec, &[PI, 0.0], 32, w).unwrap(), w);
        assert!((x0 - pivot_x).abs() < 0.5 && (xpi - pivot_x).abs() < 0.5);
        let (xa, ya) = centroid(&render_frame(&spec, &[0.8, 0.0], 32, w).unwrap(), w);
        let (xb, yb) = centroid(&render_frame(&spec, &[-0.8, 0.0], 32, w).unwrap(), w);
        assert!(((xa - pivot_x) + (xb - pivot_x)).abs() < 0.5);
        assert!((ya - yb).abs() < 0.5);
    }

    #[test]
    fn rendering_is_pure_and_bounded() {
        for kind in [
            SystemKind::CircularMotion,
            SystemKind::SinglePendulum,
            SystemKind::DoublePendulum,
            SystemKind::ElasticPendulum,
        ] {
            let spec = SystemSpec::new(kind);
            let zero = vec![0.0; kind.state_dim()];
            let a = render_frame(&spec, &zero, 16, 24).unwrap();
            let b = render_frame(&spec, &zero, 16, 24).unwrap();
            assert_eq!(a, b);
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(a.iter().any(|&v| v > 0.5));
        }
    }

    #[test]
    fn workspace_fits_in_frame() {
        let spec = SystemSpec::new(SystemKind::DoublePendulum);
        let geo = RenderGeometry::new(&spec, 32, 32).unwrap();
        for i in 0..64 {
            let t = i as f64 * PI / 32.0;
            for (x, y) in geo.bob_positions(&spec, &[t, 0.0, t, 0.0]) {
                assert!(x - geo.bob_radius >= 0.0 && x + geo.bob_radius <= 32.0);
                assert!(y - geo.bob_radius >= 0.0 && y + geo.bob_radius <= 32.0);
            }
        }
    }

    #[test]
    fn too_small_frames_rejected() {
        let spec = SystemSpec::new(SystemKind::SinglePendulum);
        assert!(render_frame(&spec, &[0.0, 0.0], 4, 32).is_err());
    }
}
