mod common;

use common::*;
use odlnn::matcore;
use odlnn::metrics;
use odlnn::network::{self, Activation, InitScheme, NetworkShape};
use rand::Rng as _;

#[test]
fn depth_two_alignment_matches_o2_grid() {
    let mut rng = matcore::rng_from_seed(21);
    for k in 0..10u64 {
        let d0 = rng.random_range(2..=6);
        let d2 = rng.random_range(2..=6);
        let shape = NetworkShape::columns(vec![d0, 2, d2], Activation::Linear).unwrap();
        let inst = network::make_teacher(&shape, d0 + 2, k).unwrap();
        let student = network::init_student(&shape, InitScheme::Orthogonal, 1000 + k).unwrap();
        let al = metrics::dist_sq(&student, &inst).unwrap();
        let oracle = o2_grid_min(&student, &inst.teacher, inst.spec_norm_y);
        assert!((al.dist_sq - oracle).abs() <= 1e-6, "instance {k}: {} vs {oracle}", al.dist_sq);
        // The objective at the returned rotation is the reported value.
        let at_r = depth_two_objective(&student, &inst.teacher, inst.spec_norm_y, &al.rotations[0]);
        assert!((at_r - al.dist_sq).abs() <= 1e-10 * at_r.max(1.0));
    }
}

#[test]
fn gauge_orbit_inputs_have_zero_distance() {
    for depth in 2..=5 {
        let mut dims = vec![6];
        dims.extend(std::iter::repeat_n(3, depth - 1));
        dims.push(5);
        let shape = NetworkShape::columns(dims, Activation::Linear).unwrap();
        let inst = network::make_teacher(&shape, 8, depth as u64).unwrap();
        let w = gauge_orbit(&inst.teacher, 77);
        let d = metrics::dist_sq(&w, &inst).unwrap().dist_sq;
        assert!(d <= 1e-18, "N={depth}: {d:e}");
    }
}

#[test]
fn near_teacher_distance_is_bounded_by_magnitude() {
    for (k, m) in [1e-4, 1e-2, 0.1, 0.5].into_iter().enumerate() {
        for depth in 2..=4 {
            let shape = NetworkShape::columns(vec![5; depth + 1], Activation::Linear).unwrap();
            let inst = network::make_teacher(&shape, 7, k as u64).unwrap();
            let student = network::init_student(
                &shape,
                InitScheme::NearTeacher {
                    teacher: &inst.teacher,
                    magnitude: m,
                },
                k as u64 + 50,
            )
            .unwrap();
            let bound = (depth - 1) as f64 * inst.spec_norm_y.powi(2) * (2.0 * m).powi(2) + m * m;
            let d = metrics::dist_sq(&student, &inst).unwrap().dist_sq;
            assert!(d <= bound, "N={depth} m={m}: {d} > {bound}");
        }
    }
}
