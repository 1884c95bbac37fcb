//! Binary shape rasterisation on the 28x28 mask grid.

use crate::rng::SplitMix64;

pub const MASK_SIDE: usize = 28;

/// A random region in continuous grid coordinates; pixel `(y, x)` belongs to
/// it when its centre `(y + 0.5, x + 0.5)` does.
#[derive(Debug, Clone)]
pub(crate) enum Region {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        angle: f64,
    },
    /// Star-shaped polygon, vertices ordered by angle around its centre.
    Polygon { vertices: Vec<(f64, f64)> },
    Union(Box<Region>, Box<Region>),
}

impl Region {
    pub(crate) fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Region::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Region::Polygon { vertices } => {
                // Even-odd crossing test on a horizontal ray.
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (yi, xi) = vertices[i];
                    let (yj, xj) = vertices[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < xi + (y - yi) * (xj - xi) / (yj - yi) {
                        inside = !inside;
                    }
                }
                inside
            }
            Region::Union(a, b) => a.contains(y, x) || b.contains(y, x),
        }
    }

    pub(crate) fn rasterize(&self) -> Vec<f64> {
        let mut mask = vec![0.0; MASK_SIDE * MASK_SIDE];
        for y in 0..MASK_SIDE {
            for x in 0..MASK_SIDE {
                if self.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    mask[y * MASK_SIDE + x] = 1.0;
                }
            }
        }
        mask
    }
}

pub(crate) fn random_ellipse(rng: &mut SplitMix64, radius: (f64, f64)) -> Region {
    Region::Ellipse {
        cy: rng.uniform(9.0, 19.0),
        cx: rng.uniform(9.0, 19.0),
        ry: rng.uniform(radius.0, radius.1),
        rx: rng.uniform(radius.0, radius.1),
        angle: rng.uniform(0.0, std::f64::consts::PI),
    }
}

pub(crate) fn random_polygon(rng: &mut SplitMix64) -> Region {
    let k = 3 + rng.below(5);
    let cy = rng.uniform(10.0, 18.0);
    let cx = rng.uniform(10.0, 18.0);
    let start = rng.uniform(0.0, std::f64::consts::TAU);
    // Evenly spread angles with jitter keep every polygon non-degenerate.
    let step = std::f64::consts::TAU / k as f64;
    let vertices = (0..k)
        .map(|i| {
            let a = start + step * (i as f64 + rng.uniform(-0.3, 0.3));
            let r = rng.uniform(6.0, 11.0);
            (cy + r * a.sin(), cx + r * a.cos())
        })
        .collect();
    Region::Polygon { vertices }
}

pub(crate) fn random_two_blob(rng: &mut SplitMix64) -> Region {
    let a = random_ellipse(rng, (3.5, 7.0));
    let b = random_ellipse(rng, (3.5, 7.0));
    Region::Union(Box::new(a), Box::new(b))
}
