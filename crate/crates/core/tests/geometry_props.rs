mod common;

use beliefplan::geometry::{
    frenet_to_cartesian, obb_overlap, project_to_frenet, rollout_macro_action, CartesianState, FrenetState,
    MacroAction, OrientedBox, ReferencePath,
};
use common::oracles::{closed_form, grid_overlap, inflate, random_box, random_curved_path};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn straight_round_trip_is_exact_to_1e9() {
    let path = ReferencePath::with_uniform_limit(vec![[-5.0, 1.0], [95.0, 1.0]], 10.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let f = FrenetState {
            s: rng.random_range(0.0..100.0),
            s_dot: rng.random_range(0.0..15.0),
            l: rng.random_range(-3.0..3.0),
            l_dot: rng.random_range(-1.0..1.0),
        };
        let (c, _) = frenet_to_cartesian(&[f], &path, 0.0);
        let back = project_to_frenet(&c[0], &path, 5.0).unwrap().state;
        let (c2, _) = frenet_to_cartesian(&[back], &path, 0.0);
        let err = (c[0].x - c2[0].x).hypot(c[0].y - c2[0].y);
        assert!(err < 1e-9, "straight round trip error {err}");
        assert!((back.s - f.s).abs() < 1e-9 && (back.l - f.l).abs() < 1e-9);
        assert!((back.s_dot - f.s_dot).abs() < 1e-9 && (back.l_dot - f.l_dot).abs() < 1e-9);
    }
}

#[test]
fn curved_round_trip_within_1e6() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    while checked < 100 {
        let path = random_curved_path(&mut rng);
        // Sample a Cartesian point near a segment interior, away from junctions.
        let k = rng.random_range(0..path.segment_count());
        let len = path.segment_length(k);
        let s = path.arc_start(k) + rng.random_range(0.2..0.8) * len;
        let l = rng.random_range(-1.5..1.5);
        let ([px, py], h) = path.point_at(s);
        let state = CartesianState {
            x: px - l * h.sin(),
            y: py + l * h.cos(),
            heading: h + rng.random_range(-0.3..0.3),
            v: rng.random_range(0.0..12.0),
            a: 0.0,
        };
        let proj = project_to_frenet(&state, &path, 10.0).unwrap();
        let seg = path.segment_at(proj.state.s);
        let local = proj.state.s - path.arc_start(seg);
        if seg != k || local <= 0.0 || local >= path.segment_length(seg) {
            // Another segment is nearer: a junction-ambiguous sample.
            continue;
        }
        let (c, _) = frenet_to_cartesian(&[proj.state], &path, 0.0);
        let err = (c[0].x - state.x).hypot(c[0].y - state.y);
        assert!(err < 1e-6, "curved round trip error {err}");
        checked += 1;
    }
}

#[test]
fn projection_ties_prefer_lower_segment() {
    // A right-angle corner: the point on the bisector outside the corner is
    // equidistant from both segments' end/start vertex.
    let path = ReferencePath::with_uniform_limit(vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]], 10.0).unwrap();
    let st = CartesianState { x: 11.0, y: -1.0, ..Default::default() };
    let p = project_to_frenet(&st, &path, 5.0).unwrap();
    assert_eq!(p.state.s, 10.0);
    assert!((p.state.l + 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn lateral_rate_sets_heading() {
    let path = ReferencePath::with_uniform_limit(vec![[0.0, 0.0], [0.0, 50.0]], 10.0).unwrap();
    let f = FrenetState { s: 10.0, s_dot: 4.0, l: 0.0, l_dot: 0.0 };
    let (c, _) = frenet_to_cartesian(&[f], &path, 0.0);
    assert!((c[0].heading - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    let f = FrenetState { l_dot: 4.0, ..f };
    let (c, _) = frenet_to_cartesian(&[f], &path, 0.0);
    assert!((c[0].heading - 3.0 * std::f64::consts::FRAC_PI_4).abs() < 1e-12);
    assert!((c[0].v - 32f64.sqrt()).abs() < 1e-12);
}

/// Closed form of constant-acceleration motion with a stop at zero speed.
#[test]
fn rollout_matches_piecewise_closed_form() {
    let accels = [-4.0, -2.0, 0.0, 1.0, 3.0];
    let lats = [-1.0, 0.0, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let start = FrenetState {
            s: rng.random_range(0.0..50.0),
            s_dot: rng.random_range(0.0..12.0),
            l: rng.random_range(-2.0..2.0),
            l_dot: 0.0,
        };
        for &a in &accels {
            for &vl in &lats {
                let m = MacroAction { accel: a, lateral_speed: vl, steps: 20, dt: 0.1 };
                let r = rollout_macro_action(&start, &m);
                let mut prev = start.s;
                for (k, f) in r.iter().enumerate() {
                    let tau = (k + 1) as f64 * 0.1;
                    let (s, v) = closed_form(start.s, start.s_dot, a, tau);
                    assert!((f.s - s).abs() < 1e-12 && (f.s_dot - v).abs() < 1e-12);
                    assert!((f.l - (start.l + vl * tau)).abs() < 1e-12);
                    assert!(f.s >= prev && f.s_dot >= 0.0);
                    prev = f.s;
                }
            }
        }
    }
}

#[test]
fn obb_matches_sampling_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let step = 0.01;
    let cell = step * std::f64::consts::SQRT_2;
    let mut overlaps = 0;
    for _ in 0..1000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let sat = obb_overlap(&a, &b);
        assert_eq!(sat, obb_overlap(&b, &a), "asymmetric result");
        if sat {
            overlaps += 1;
            assert!(grid_overlap(&inflate(&a, cell), &inflate(&b, cell), step));
        } else {
            assert!(!grid_overlap(&a, &b, step));
        }
    }
    assert!(overlaps > 100 && overlaps < 900);
}

proptest! {
    #[test]
    fn obb_symmetry(
        ax in -10.0f64..10.0, ay in -10.0f64..10.0, ah in -3.2f64..3.2,
        bx in -10.0f64..10.0, by in -10.0f64..10.0, bh in -3.2f64..3.2,
        al in 0.1f64..6.0, aw in 0.1f64..3.0, bl in 0.1f64..6.0, bw in 0.1f64..3.0,
    ) {
        let a = OrientedBox::new(ax, ay, ah, al, aw);
        let b = OrientedBox::new(bx, by, bh, bl, bw);
        prop_assert_eq!(obb_overlap(&a, &b), obb_overlap(&b, &a));
    }
}
