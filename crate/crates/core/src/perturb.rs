//! Image perturbation: the δ buffer, its feasible set, and signed-gradient
//! descent steps.
//!
//! Feasibility means two box constraints at once: ‖δ‖∞ ≤ ε and x+δ ∈ [0,1]
//! per pixel. `project` enforces both and is idempotent; every update goes
//! through it.

use alloc::vec;
use alloc::vec::Vec;

use crate::processor::{Image, PIXELS};

/// Default ℓ∞ budget (8/255).
pub const DEFAULT_EPS: f64 = 8.0 / 255.0;
/// Default step size (1/255).
pub const DEFAULT_ALPHA: f64 = 1.0 / 255.0;

/// Additive pixel perturbation, same flat HWC layout as `Image`.
#[derive(Clone, Debug, PartialEq)]
pub struct Delta {
    pub data: Vec<f64>,
}

impl Delta {
    pub fn zeros() -> Self {
        Delta { data: vec![0.0; PIXELS] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert_eq!(data.len(), PIXELS, "delta must cover every pixel");
        Delta { data }
    }

    /// Largest absolute entry.
    pub fn linf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// True when both box constraints hold within `slack`.
    pub fn is_feasible(&self, base: &Image, eps: f64, slack: f64) -> bool {
        self.data.iter().zip(base.pixels()).all(|(&d, &x)| {
            d.abs() <= eps + slack && (0.0 - slack..=1.0 + slack).contains(&(x + d))
        })
    }

    /// Apply to the base image, clamping residual rounding into [0,1].
    pub fn apply(&self, base: &Image) -> Image {
        let px: Vec<f64> = base
            .pixels()
            .iter()
            .zip(&self.data)
            .map(|(&x, &d)| (x + d).clamp(0.0, 1.0))
            .collect();
        Image::new(px).expect("projected perturbation stays in range")
    }

    /// Snap every entry through f32, matching the released sidecar encoding.
    pub fn round_f32(&self) -> Delta {
        Delta { data: self.data.iter().map(|&v| v as f32 as f64).collect() }
    }
}

/// Project onto {δ : ‖δ‖∞ ≤ eps, x+δ ∈ [0,1]}: clamp to the ε-box, then to
/// the pixel box. Both are axis-aligned intervals, so one sweep lands exactly
/// on the intersection and a second application is a no-op.
pub fn project(delta: &mut Delta, base: &Image, eps: f64) {
    for (d, &x) in delta.data.iter_mut().zip(base.pixels()) {
        *d = d.clamp(-eps, eps).clamp(-x, 1.0 - x);
    }
}

/// One signed-gradient descent step followed by projection:
/// δ ← Π(δ − α·sign(g)). A zero gradient component leaves its entry alone.
pub fn pgd_step(delta: &mut Delta, grad: &[f64], base: &Image, eps: f64, alpha: f64) {
    assert_eq!(grad.len(), PIXELS);
    for (d, &g) in delta.data.iter_mut().zip(grad) {
        if g > 0.0 {
            *d -= alpha;
        } else if g < 0.0 {
            *d += alpha;
        }
    }
    project(delta, base, eps);
}

/// Signed-gradient *ascent* step for the adversarial variant:
/// δ ← Π(δ + α·sign(g)).
pub fn pgd_step_ascent(delta: &mut Delta, grad: &[f64], base: &Image, eps: f64, alpha: f64) {
    assert_eq!(grad.len(), PIXELS);
    let flipped: Vec<f64> = grad.iter().map(|&g| -g).collect();
    pgd_step(delta, &flipped, base, eps, alpha);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use proptest::prelude::*;

    fn rand_image(seed: u64) -> Image {
        let mut s = Stream::derive(seed, "pimg", 0);
        Image::new((0..PIXELS).map(|_| s.unit()).collect()).unwrap()
    }

    #[test]
    fn project_is_idempotent_and_feasible() {
        let base = rand_image(1);
        let mut s = Stream::derive(2, "delta", 0);
        let mut d = Delta::from_vec((0..PIXELS).map(|_| s.uniform(-0.5, 0.5)).collect());
        project(&mut d, &base, DEFAULT_EPS);
        assert!(d.is_feasible(&base, DEFAULT_EPS, 0.0));
        let once = d.clone();
        project(&mut d, &base, DEFAULT_EPS);
        assert_eq!(d, once, "second projection must be a no-op");
    }

    #[test]
    fn pgd_moves_against_gradient_sign() {
        let base = rand_image(3);
        let mut d = Delta::zeros();
        let mut g = vec![0.0; PIXELS];
        g[0] = 2.5;
        g[1] = -0.7;
        // g[2] stays zero
        pgd_step(&mut d, &g, &base, DEFAULT_EPS, DEFAULT_ALPHA);
        let want0 = (-DEFAULT_ALPHA).max(-base.pixels()[0]);
        let want1 = DEFAULT_ALPHA.min(1.0 - base.pixels()[1]);
        assert!((d.data[0] - want0).abs() < 1e-15);
        assert!((d.data[1] - want1).abs() < 1e-15);
        assert_eq!(d.data[2], 0.0, "zero gradient leaves the entry unchanged");
    }

    #[test]
    fn repeated_steps_never_escape_the_boxes() {
        let base = rand_image(4);
        let mut d = Delta::zeros();
        let mut s = Stream::derive(5, "grads", 0);
        for _ in 0..40 {
            let g: Vec<f64> = (0..PIXELS).map(|_| s.normal()).collect();
            pgd_step(&mut d, &g, &base, DEFAULT_EPS, DEFAULT_ALPHA);
            assert!(d.is_feasible(&base, DEFAULT_EPS, 0.0));
        }
        assert!(d.linf() > 0.0);
    }

    #[test]
    fn ascent_is_descent_on_negated_gradient() {
        let base = rand_image(6);
        let mut s = Stream::derive(7, "g", 0);
        let g: Vec<f64> = (0..PIXELS).map(|_| s.normal()).collect();
        let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
        let mut up = Delta::zeros();
        pgd_step_ascent(&mut up, &g, &base, DEFAULT_EPS, DEFAULT_ALPHA);
        let mut down = Delta::zeros();
        pgd_step(&mut down, &neg, &base, DEFAULT_EPS, DEFAULT_ALPHA);
        assert_eq!(up, down);
    }

    #[test]
    fn f32_rounding_is_idempotent() {
        let mut s = Stream::derive(8, "d", 0);
        let d = Delta::from_vec((0..PIXELS).map(|_| s.uniform(-0.03, 0.03)).collect());
        let r = d.round_f32();
        assert_eq!(r, r.round_f32());
        assert!(r.data.iter().zip(&d.data).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Projection output always satisfies both boxes and fixes feasible
        /// points.
        #[test]
        fn projection_oracle(
            seed in 0u64..1000,
            eps in 0.001f64..0.2,
            scale in 0.0f64..0.6,
        ) {
            let base = rand_image(seed);
            let mut s = Stream::derive(seed.wrapping_add(1), "prop", 0);
            let mut d = Delta::from_vec(
                (0..PIXELS).map(|_| s.uniform(-scale, scale.max(0.001))).collect(),
            );
            let feasible_before = d.is_feasible(&base, eps, 0.0);
            let before = d.clone();
            project(&mut d, &base, eps);
            prop_assert!(d.is_feasible(&base, eps, 0.0));
            if feasible_before {
                prop_assert_eq!(&d, &before, "projection must fix feasible points");
            }
            // Componentwise: the projected value is the closest point of the
            // per-pixel interval.
            for ((&dj, &bj), &x) in d.data.iter().zip(&before.data).zip(base.pixels()) {
                let lo = (-eps).max(-x);
                let hi = eps.min(1.0 - x);
                let want = bj.clamp(lo, hi);
                prop_assert!((dj - want).abs() < 1e-15);
            }
        }
    }
}
