use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 2],
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(x: f64, y: f64, heading: f64, length: f64, width: f64) -> Self {
        OrientedBox { center: [x, y], heading, length, width }
    }

    fn axes(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.heading.sin_cos();
        [[c, s], [-s, c]]
    }

    /// Half-extent of the box projected on a unit axis.
    fn radius_along(&self, axis: [f64; 2]) -> f64 {
        let [u, v] = self.axes();
        0.5 * self.length * (u[0] * axis[0] + u[1] * axis[1]).abs()
            + 0.5 * self.width * (v[0] * axis[0] + v[1] * axis[1]).abs()
    }

    pub fn circumradius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }

    /// Point-in-box test, boundary inclusive.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let [u, v] = self.axes();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        (dx * u[0] + dy * u[1]).abs() <= 0.5 * self.length && (dx * v[0] + dy * v[1]).abs() <= 0.5 * self.width
    }
}

/// Separating-axis test on the four face normals; touching boxes overlap.
pub fn obb_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let dx = b.center[0] - a.center[0];
    let dy = b.center[1] - a.center[1];
    let reach = a.circumradius() + b.circumradius();
    if dx * dx + dy * dy > reach * reach {
        return false;
    }
    for axis in a.axes().into_iter().chain(b.axes()) {
        let dist = (dx * axis[0] + dy * axis[1]).abs();
        if dist > a.radius_along(axis) + b.radius_along(axis) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_overlap() {
        let b = OrientedBox::new(1.0, 2.0, 0.4, 4.0, 2.0);
        assert!(obb_overlap(&b, &b));
    }

    #[test]
    fn distant_unit_squares_do_not() {
        let a = OrientedBox::new(0.0, 0.0, 0.0, 1.0, 1.0);
        let b = OrientedBox::new(10.0, 0.0, 0.0, 1.0, 1.0);
        assert!(!obb_overlap(&a, &b));
    }

    #[test]
    fn touching_counts_as_overlap() {
        let a = OrientedBox::new(0.0, 0.0, 0.0, 2.0, 2.0);
        let b = OrientedBox::new(2.0, 0.0, 0.0, 2.0, 2.0);
        assert!(obb_overlap(&a, &b));
        let c = OrientedBox::new(2.0 + 1e-9, 0.0, 0.0, 2.0, 2.0);
        assert!(!obb_overlap(&a, &c));
    }

    #[test]
    fn rotated_corner_case() {
        // A diamond whose tip sits just short of a square's face.
        let a = OrientedBox::new(0.0, 0.0, 0.0, 2.0, 2.0);
        let tip = 2f64.sqrt();
        let near = OrientedBox::new(1.0 + tip + 0.01, 0.0, std::f64::consts::FRAC_PI_4, 2.0, 2.0);
        let into = OrientedBox::new(1.0 + tip - 0.01, 0.0, std::f64::consts::FRAC_PI_4, 2.0, 2.0);
        assert!(!obb_overlap(&a, &near));
        assert!(obb_overlap(&a, &into));
    }
}
