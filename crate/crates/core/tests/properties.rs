use proptest::prelude::*;

use volgibbs::calibration::{interpolate_params, SabrParamMatrix};
use volgibbs::gibbs::random_mask;
use volgibbs::interp::interpolate_cube;
use volgibbs::sabr::{
    forward_swap_sensitivity, forward_swap_value, hedge_position, sabr_delta, sabr_normal_vol, sabr_price,
    DiscountCurve, SabrParams, SwaptionKind, SwaptionSpec,
};
use volgibbs::volcube::{CubeGrid, VolCube};

const SHIFT: f64 = 0.04;

fn params() -> impl Strategy<Value = SabrParams> {
    (0.002f64..0.05, 0.0f64..=1.0, 0.0f64..1.5, -0.9f64..0.9)
        .prop_map(|(alpha, beta, nu, rho)| SabrParams::new(alpha, beta, nu, rho, SHIFT).unwrap())
}

fn swaption(forward: f64, strike: f64, expiry: f64, tenor: f64, kind: SwaptionKind) -> SwaptionSpec {
    SwaptionSpec::regular(forward, strike, 0.0, expiry, tenor, 4, 1.0, kind, DiscountCurve::flat(0.01)).unwrap()
}

fn small_grid() -> CubeGrid {
    CubeGrid::new(vec![0.5, 1.0, 2.0, 5.0], vec![1.0, 5.0, 10.0], vec![-0.01, -0.005, 0.0, 0.005, 0.01]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn payer_minus_receiver_is_the_forward_swap(
        p in params(),
        f in -0.01f64..0.04,
        dk in -0.02f64..0.02,
        expiry in 0.1f64..10.0,
        tenor in 1u32..10,
    ) {
        let payer = swaption(f, f + dk, expiry, tenor as f64, SwaptionKind::Payer);
        let receiver = swaption(f, f + dk, expiry, tenor as f64, SwaptionKind::Receiver);
        let lhs = sabr_price(&p, &payer).unwrap() - sabr_price(&p, &receiver).unwrap();
        let rhs = forward_swap_value(&payer);
        let scale = payer.annuity() * dk.abs().max(1e-4);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * scale, "{lhs} vs {rhs}");
    }

    #[test]
    fn normal_vol_increases_with_alpha(
        p in params(),
        bump in 0.01f64..1.0,
        f in -0.01f64..0.04,
        dk in -0.02f64..0.02,
        expiry in 0.1f64..10.0,
    ) {
        let higher = SabrParams { alpha: p.alpha * (1.0 + bump), ..p };
        let lo = sabr_normal_vol(&p, f, f + dk, 0.0, expiry).unwrap();
        let hi = sabr_normal_vol(&higher, f, f + dk, 0.0, expiry).unwrap();
        prop_assert!(lo > 0.0 && hi > lo, "{lo} {hi}");
    }

    #[test]
    fn hedge_position_offsets_the_option_delta(
        p in params(),
        f in -0.01f64..0.04,
        dk in -0.02f64..0.02,
        expiry in 0.1f64..10.0,
        payer in any::<bool>(),
    ) {
        let kind = if payer { SwaptionKind::Payer } else { SwaptionKind::Receiver };
        let spec = swaption(f, f + dk, expiry, 2.0, kind);
        let delta = sabr_delta(&p, &spec).unwrap();
        let net = hedge_position(&p, &spec).unwrap() * forward_swap_sensitivity(&spec) - delta;
        prop_assert!(net.abs() <= 1e-12 * delta.abs().max(1e-300));
    }

    #[test]
    fn interpolated_params_are_valid(
        ln_alpha in prop::collection::vec(-9.2f64..0.0, 12),
        ln_nu in prop::collection::vec(-6.9f64..1.6, 12),
        z_rho in prop::collection::vec(-3.0f64..3.0, 12),
        maturity in 0.01f64..40.0,
        tenor in 0.5f64..40.0,
    ) {
        let m = SabrParamMatrix::new(
            vec![0.5, 1.0, 5.0, 10.0],
            vec![1.0, 5.0, 10.0],
            0.5,
            SHIFT,
            ln_alpha.iter().map(|x| x.exp()).collect(),
            ln_nu.iter().map(|x| x.exp()).collect(),
            z_rho.iter().map(|x| x.tanh()).collect(),
        ).unwrap();
        let p = interpolate_params(&m, maturity, tenor);
        prop_assert!(p.validate().is_ok(), "{p:?}");
    }

    #[test]
    fn masks_hide_the_requested_share(n in 1usize..400, rate in 0.0f64..=1.0, seed in any::<u64>()) {
        let mask = random_mask(n, rate, seed);
        let missing = mask.iter().filter(|&&o| !o).count();
        let want = ((rate * n as f64).round() as usize).min(n - 1);
        prop_assert_eq!(missing, want);
        prop_assert!(mask.iter().any(|&o| o));
    }

    #[test]
    fn interpolation_keeps_quotes_and_stays_in_range(
        values in prop::collection::vec(1.0f64..300.0, 60),
        rate in 0.0f64..0.99,
        seed in any::<u64>(),
    ) {
        let grid = small_grid();
        let cube = VolCube::full(grid, values).unwrap();
        let masked = cube.with_mask(&random_mask(cube.grid().len(), rate, seed)).unwrap();
        let filled = interpolate_cube(&masked).unwrap();
        prop_assert!(filled.is_fully_observed());
        let observed: Vec<f64> = (0..masked.grid().len()).filter_map(|i| masked.get(i)).collect();
        let lo = observed.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = observed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for i in 0..masked.grid().len() {
            match masked.get(i) {
                Some(v) => prop_assert_eq!(filled.values()[i], v),
                None => prop_assert!(filled.values()[i] >= lo - 1e-9 && filled.values()[i] <= hi + 1e-9),
            }
        }
    }
}
