//! Tracking invariants on random direction fields.

use dtilearn::tractography::{brute_force_seed, fact_track, DirectionField, TrackParams};
use dtilearn::{Dims, ScalarMap};
use proptest::prelude::*;

const DIMS: Dims = Dims::new(7, 6, 4);

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-3 {
        [1.0, 0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}

/// Random field with a common bias so tracks run across several voxels.
fn field_strategy() -> impl Strategy<Value = (DirectionField, ScalarMap)> {
    let n = DIMS.len();
    (
        prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), n),
        prop::collection::vec(0.0f64..1.0, n),
        prop::array::uniform3(-1.0f64..1.0),
        prop::collection::vec(prop::bool::weighted(0.9), n),
    )
        .prop_map(|(raw, fa, bias, mask)| {
            let dirs = raw
                .iter()
                .map(|v| unit([v[0] + 2.0 * bias[0], v[1] + 2.0 * bias[1], v[2] + 2.0 * bias[2]]))
                .collect();
            let spacing = [1.5, 1.0, 2.0];
            let fa = ScalarMap::from_parts(DIMS, spacing, fa, mask).unwrap();
            (DirectionField { dims: DIMS, spacing, dirs }, fa)
        })
}

fn params(fa_threshold: f64, angle_threshold_deg: f64) -> TrackParams {
    TrackParams { fa_threshold, angle_threshold_deg }
}

fn sorted_points(lines: &[dtilearn::Streamline]) -> Vec<Vec<[i64; 3]>> {
    let mut out: Vec<Vec<[i64; 3]>> = lines
        .iter()
        .map(|l| {
            let mut p: Vec<[i64; 3]> = l.points.iter().map(|q| q.map(|c| (c * 1e6).round() as i64)).collect();
            p.sort_unstable();
            p
        })
        .collect();
    out.sort();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn streamlines_terminate_inside_the_grid((field, fa) in field_strategy()) {
        let seeds = brute_force_seed(&fa, 0.0);
        let lines = fact_track(&field, &fa, &seeds, params(0.1, 60.0)).unwrap();
        let cap = 10.0 * DIMS.max_dim() as f64;
        for l in &lines {
            prop_assert!(l.length <= cap + 1.0);
            for p in &l.points {
                for a in 0..3 {
                    let n = [DIMS.nx, DIMS.ny, DIMS.nz][a] as f64;
                    let v = p[a] / field.spacing[a] + 0.5;
                    prop_assert!((-1e-9..=n + 1e-9).contains(&v), "point {p:?} outside grid");
                }
            }
        }
    }

    #[test]
    fn raising_fa_threshold_never_adds_streamlines((field, fa) in field_strategy()) {
        let seeds = brute_force_seed(&fa, 0.0);
        let counts: Vec<usize> = [0.0, 0.2, 0.4, 0.6, 0.8]
            .iter()
            .map(|&t| fact_track(&field, &fa, &seeds, params(t, 45.0)).unwrap().len())
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
    }

    #[test]
    fn raising_angle_threshold_never_removes_streamlines((field, fa) in field_strategy()) {
        let seeds = brute_force_seed(&fa, 0.0);
        let counts: Vec<usize> = [10.0, 25.0, 40.0, 60.0, 89.0]
            .iter()
            .map(|&a| fact_track(&field, &fa, &seeds, params(0.2, a)).unwrap().len())
            .collect();
        prop_assert!(counts.windows(2).all(|w| w[1] >= w[0]), "{counts:?}");
    }

    #[test]
    fn reversed_field_gives_the_same_point_sets((field, fa) in field_strategy()) {
        let seeds = brute_force_seed(&fa, 0.0);
        let flipped = DirectionField { dirs: field.dirs.iter().map(|d| d.map(|c| -c)).collect(), ..field.clone() };
        let a = fact_track(&field, &fa, &seeds, params(0.2, 40.0)).unwrap();
        let b = fact_track(&flipped, &fa, &seeds, params(0.2, 40.0)).unwrap();
        prop_assert_eq!(sorted_points(&a), sorted_points(&b));
    }
}
