use aaa_core::aaa::{def3_residual, def4_residual, sabr_qv_identity, ModelRef, State};
use aaa_core::gfun::{sabr_g, sabr_g_prime};
use aaa_core::pricing::{
    bachelier_call_price, bs_call_price, implied_vol_bachelier, implied_vol_bs, MarketPoint,
};
use aaa_core::smile::{bbf_sigma_bs, sabr_sigma, Backbone, Flavor, LocalVolModel, SabrParams};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn sabr_g_satisfies_its_qv_identity(y in -10.0..10.0f64, rho in -0.95..0.95f64) {
        prop_assert!(sabr_qv_identity(y, rho).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn sabr_g_is_odd_under_correlation_flip(y in -10.0..10.0f64, rho in -0.95..0.95f64) {
        let a = sabr_g(y, rho).unwrap();
        let b = sabr_g(-y, -rho).unwrap();
        prop_assert!((a + b).abs() <= 1e-12 * (1.0 + a.abs()));
        let slope = sabr_g_prime(y, rho).unwrap();
        prop_assert!(slope > 0.0);
    }

    #[test]
    fn black_scholes_round_trip(
        s in 1.0..1000.0f64,
        m in 0.2..5.0f64,
        tau in 1e-4..5.0f64,
        sigma in 0.01..2.0f64,
    ) {
        let p = MarketPoint::spot_start(s, s * m, tau).unwrap();
        let price = bs_call_price(&p, sigma).unwrap();
        prop_assume!(price - p.intrinsic() >= 1e-8 * s);
        let iv = implied_vol_bs(price, &p).unwrap();
        prop_assert!((iv / sigma - 1.0).abs() <= 1e-8, "iv {} sigma {}", iv, sigma);
    }

    #[test]
    fn bachelier_round_trip(
        s in 1.0..1000.0f64,
        m in 0.2..5.0f64,
        tau in 1e-4..5.0f64,
        sigma in 0.01..2.0f64,
    ) {
        let p = MarketPoint::spot_start(s, s * m, tau).unwrap();
        let sigma_n = sigma * s;
        let price = bachelier_call_price(&p, sigma_n).unwrap();
        prop_assume!(price - p.intrinsic() >= 1e-8 * s);
        let iv = implied_vol_bachelier(price, &p).unwrap();
        prop_assert!((iv / sigma_n - 1.0).abs() <= 1e-8, "iv {} sigma {}", iv, sigma_n);
    }

    #[test]
    fn call_prices_respect_bounds_and_order(
        s in 1.0..1000.0f64,
        m in 0.2..5.0f64,
        tau in 1e-3..5.0f64,
        sigma in 0.01..2.0f64,
    ) {
        let p = MarketPoint::spot_start(s, s * m, tau).unwrap();
        let c = bs_call_price(&p, sigma).unwrap();
        prop_assert!(c >= p.intrinsic() && c <= s);
        let higher = bs_call_price(&p, sigma * 1.1).unwrap();
        prop_assert!(higher >= c);
        let wider = bs_call_price(&p.with_strike(p.strike * 1.05).unwrap(), sigma).unwrap();
        prop_assert!(wider <= c);
    }

    // reflecting S about the spot with an additive backbone flips the correlation
    #[test]
    fn normal_sabr_mirror_symmetry(
        d in 0.0..20.0f64,
        rho in -0.9..0.9f64,
        tau in 0.01..1.0f64,
    ) {
        let flat = Backbone::cev(20.0, 0.0).unwrap();
        let up = SabrParams::new(1.0, 0.5, rho, flat.clone()).unwrap();
        let down = SabrParams::new(1.0, 0.5, -rho, flat).unwrap();
        let a = sabr_sigma(Flavor::Normal, &MarketPoint::spot_start(100.0, 100.0 + d, tau).unwrap(), &up, 1.0).unwrap();
        let b = sabr_sigma(Flavor::Normal, &MarketPoint::spot_start(100.0, 100.0 - d, tau).unwrap(), &down, 1.0).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a, "{} vs {}", a, b);
    }

    #[test]
    fn lognormal_bbf_is_flat(m in 0.2..5.0f64, tau in 1e-3..2.0f64, sigma in 0.05..1.0f64) {
        let lv = LocalVolModel::lognormal(sigma).unwrap();
        let v = bbf_sigma_bs(&MarketPoint::spot_start(100.0, 100.0 * m, tau).unwrap(), &lv).unwrap();
        prop_assert!((v - sigma).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normal_residual_mirror_symmetry(
        d in 0.5..15.0f64,
        rho in -0.8..0.8f64,
        tau in 0.02..0.2f64,
        alpha in 0.5..1.5f64,
    ) {
        let flat = Backbone::cev(20.0, 0.0).unwrap();
        let up = SabrParams::new(1.0, 0.5, rho, flat.clone()).unwrap();
        let down = SabrParams::new(1.0, 0.5, -rho, flat).unwrap();
        let state = State::Sabr { t: 0.1, s: 100.0, alpha };
        let a = def4_residual(ModelRef::Sabr(&up), &state, 100.0 + d, 0.1 + tau).unwrap();
        let b = def4_residual(ModelRef::Sabr(&down), &state, 100.0 - d, 0.1 + tau).unwrap();
        prop_assert!((a.r - b.r).abs() <= 1e-6 * (1.0 + a.r.abs()), "{} vs {}", a.r, b.r);
    }

    #[test]
    fn lognormal_bbf_residual_vanishes(
        m in 0.8..1.25f64,
        tau in 0.01..0.5f64,
        s in 50.0..200.0f64,
    ) {
        let lv = LocalVolModel::lognormal(0.2).unwrap();
        let state = State::LocalVol { t: 0.1, s };
        let r = def3_residual(ModelRef::LocalVol(&lv), &state, s * m, 0.1 + tau).unwrap();
        prop_assert!(r.r.abs() <= 1e-10, "r = {}", r.r);
    }
}
