use proptest::prelude::*;

use signorini_core::field::io::{read_field, write_field};
use signorini_core::field::{AnalyticField, Grid, ScalarField, SpatialField};
use signorini_core::grushin::{apply_l0, weighted_norms, GrushinSpace};
use signorini_core::profiles::BlowupProfile;
use signorini_core::runner::ExperimentConfig;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blowup_is_three_halves_homogeneous(
        c0 in 0.1f64..3.0,
        angle in -1.5f64..1.5,
        x in prop::array::uniform3(-1.0f64..1.0),
        lambda in 0.01f64..10.0,
    ) {
        let u0 = BlowupProfile::rotated(c0, angle);
        let scaled: Vec<f64> = x.iter().map(|v| lambda * v).collect();
        let lhs = u0.eval_u0(&scaled);
        let rhs = lambda.powf(1.5) * u0.eval_u0(&x);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
    }

    #[test]
    fn affine_fields_interpolate_exactly(
        c in -2.0f64..2.0,
        a in prop::array::uniform3(-2.0f64..2.0),
        x in (-0.8f64..0.8, -0.8f64..0.8, 0.05f64..0.8),
    ) {
        let grid = Grid::<f64>::half_box(3, 17).unwrap();
        let exact = AnalyticField::affine(c, a.to_vec());
        let u = ScalarField::sample(grid, &exact).unwrap();
        let p = [x.0, x.1, x.2];
        prop_assert!((u.value(&p).unwrap() - exact.value(&p).unwrap()).abs() <= 1e-12);
        let g = u.gradient(&p).unwrap();
        for k in 0..3 {
            prop_assert!((g[k] - a[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn l0_annihilates_affine_functions_of_t(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let space = GrushinSpace::cube(2, 1, 5.0, 1.0, 12).unwrap();
        let u = space.sample(|z| a + b * z[2]);
        let l0 = apply_l0(&space, &u).unwrap();
        prop_assert!(l0.iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn first_weighted_norm_is_absolutely_homogeneous(lambda in -5.0f64..5.0) {
        let space = GrushinSpace::cube(2, 1, 3.0, 1.0, 12).unwrap();
        let u = space.sample(|z| (z[0] - 0.3 * z[2]).sin() * z[1] * z[1]);
        let scaled: Vec<f64> = u.iter().map(|v| lambda * v).collect();
        let n1 = weighted_norms(&space, &u).unwrap().first;
        let n2 = weighted_norms(&space, &scaled).unwrap().first;
        prop_assert!((n2 - lambda.abs() * n1).abs() <= 1e-12 * n1.max(1.0));
    }

    #[test]
    fn config_hash_ignores_layout(pad in "[ \t]{0,4}", blank in 0usize..3) {
        let plain = ExperimentConfig::from_toml("seed = 7\n[grid]\nnodes = 17\n").unwrap();
        let gaps = "\n".repeat(blank);
        let text = format!("{pad}seed{pad}={pad}7{pad}\n{gaps}# comment\n[grid]{pad}\n{pad}nodes = 17{pad}\n{gaps}");
        let padded = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(plain.hash(), padded.hash());
    }

    #[test]
    fn config_hash_tracks_meaningful_fields(seed in 0u64..1000, nodes in 9usize..40) {
        let a = ExperimentConfig::from_toml(&format!("seed = {seed}\n[grid]\nnodes = {nodes}\n")).unwrap();
        let b = ExperimentConfig::from_toml(&format!("seed = {}\n[grid]\nnodes = {nodes}\n", seed + 1)).unwrap();
        let c = ExperimentConfig::from_toml(&format!("seed = {seed}\n[grid]\nnodes = {}\n", nodes + 1)).unwrap();
        prop_assert_ne!(a.hash(), b.hash());
        prop_assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn field_files_round_trip_bit_exactly(values in prop::collection::vec(-1e6f64..1e6, 9 * 5)) {
        let grid = Grid::<f64>::half_box(2, 9).unwrap();
        let u = ScalarField::new(grid, values).unwrap();
        let mut buf = Vec::new();
        write_field(&mut buf, &u).unwrap();
        let back: ScalarField<f64> = read_field(&buf[..]).unwrap();
        prop_assert_eq!(back.grid().nodes(), u.grid().nodes());
        prop_assert!(back.values().iter().zip(u.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
