use pathmpc::path::*;
use proptest::prelude::*;
use std::sync::OnceLock;

fn presets() -> &'static Vec<ArcLengthPath> {
    static P: OnceLock<Vec<ArcLengthPath>> = OnceLock::new();
    P.get_or_init(|| PathPreset::ALL.iter().map(|p| p.build().unwrap()).collect())
}

fn d(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[test]
fn presets_have_unit_speed() {
    for p in presets() {
        assert!(p.max_speed_deviation(10_000) <= 1e-3);
    }
}

#[test]
fn preset_radii_match_targets() {
    for (preset, p) in PathPreset::ALL.iter().zip(presets()) {
        let r = p.min_curvature_radius(20_000);
        let target = preset.min_radius_target();
        assert!((r - target).abs() <= 0.05 * target, "{}: {r} vs {target}", preset.name());
    }
}

#[test]
fn preset_altitudes() {
    for (preset, p) in PathPreset::ALL.iter().zip(presets()) {
        let l = p.total_length();
        let alts: Vec<f64> = (0..2000).map(|i| -p.position(i as f64 * l / 2000.0)[2]).collect();
        let lo = alts.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = alts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        match preset {
            PathPreset::Path1 | PathPreset::Path2 => assert!((lo - 100.0).abs() < 0.1 && (hi - 100.0).abs() < 0.1),
            _ => assert!((lo - 80.0).abs() < 0.2 && (hi - 120.0).abs() < 0.2, "{lo} {hi}"),
        }
    }
    assert!(presets()[2].max_flight_path_angle(5000).to_degrees() < 10.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn global_projection_beats_dense_brute_force(which in 0usize..4, n in -250.0..250.0f64, e in -120.0..120.0f64, alt in 70.0..130.0f64) {
        let p = &presets()[which];
        let q = [n, e, -alt];
        let psi = p.closest_param_global(&q);
        let found = d(&q, &p.position(psi));
        let step = p.cache_spacing() / 10.0;
        let count = (p.total_length() / step) as usize;
        let brute = (0..count).map(|i| d(&q, &p.position(i as f64 * step))).fold(f64::INFINITY, f64::min);
        prop_assert!(found <= brute + 1e-9);
        // The projection residual is orthogonal to the tangent.
        let f = p.frame_at(psi).unwrap();
        let r: Vec<f64> = (0..3).map(|c| q[c] - f.position[c]).collect();
        let dot: f64 = (0..3).map(|c| r[c] * f.tangent[c]).sum();
        prop_assert!(dot.abs() <= 1e-3 * found.max(1e-9) + 1e-9);
    }

    #[test]
    fn on_path_points_project_to_themselves(which in 0usize..4, frac in 0.0..1.0f64) {
        let p = &presets()[which];
        let psi = frac * p.total_length();
        let q = p.position(psi);
        let found = p.closest_param_global(&q);
        prop_assert!(d(&q, &p.position(found)) < 1e-6);
        let local = p.closest_param_local(&q, psi, 14.0);
        prop_assert!(p.param_delta(psi, local).abs() < 1e-4);
    }

    #[test]
    fn wrap_is_periodic(which in 0usize..4, x in 0.0..1000.0f64, k in -3i32..3) {
        let p = &presets()[which];
        let l = p.total_length();
        let a = p.position(x);
        let b = p.position(x + k as f64 * l);
        prop_assert!(d(&a, &b) < 1e-6);
    }
}
