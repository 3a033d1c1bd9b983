use irmap::imageops::Grid;
use irmap::radiometry::*;
use proptest::prelude::*;

/// Closed-form band radiance, written out independently of the library.
fn oracle_signal(t_c: f64) -> f64 {
    let t_k = t_c + 273.15;
    50_000.0 / ((14388.0 / (10.0 * t_k + 100.0)).exp() - 1.0)
}

fn oracle_counts(t: f64, eps: f64, tau: f64, t_refl: f64) -> f64 {
    let s_env = oracle_signal(t_refl);
    tau * (eps * oracle_signal(t) + (1.0 - eps) * s_env) + (1.0 - tau) * s_env
}

#[test]
fn default_profile_uses_the_measured_constants() {
    let p = CalibrationProfile::default();
    assert_eq!(p.emissivity_powder, 0.63);
    assert_eq!(p.emissivity_printed, 0.21);
    assert_eq!(p.window_transmission, 0.75);
}

#[test]
fn forward_matches_closed_form() {
    for tau in [0.75, 1.0] {
        let p = CalibrationProfile::default().with_transmission(tau);
        for eps in [0.1, 0.21, 0.63, 1.0] {
            for t in [-20.0, 25.0, 300.0, 660.0, 1500.0, 2000.0] {
                let got = forward_counts(t, eps, &p).unwrap();
                let want = oracle_counts(t, eps, tau, 25.0);
                assert!((got - want).abs() <= 1e-9 * want, "{t} {eps} {tau}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn forward_is_strictly_increasing() {
    for tau in [0.75, 1.0] {
        let p = CalibrationProfile::default().with_transmission(tau);
        for eps in [0.1, 0.21, 0.63, 1.0] {
            let mut prev = f64::NEG_INFINITY;
            for t in -20..=2000 {
                let c = forward_counts(t as f64, eps, &p).unwrap();
                assert!(c > prev, "not increasing at {t} °C (eps {eps}, tau {tau})");
                prev = c;
            }
        }
    }
}

#[test]
fn fit_recovers_generating_emissivity_without_noise() {
    let p = CalibrationProfile::default();
    for eps in [0.1, 0.21, 0.5, 0.63, 1.0] {
        let samples: Vec<(f64, f64)> = (0..12)
            .map(|i| {
                let t = 100.0 + 40.0 * i as f64;
                (oracle_counts(t, eps, 0.75, 25.0), t)
            })
            .collect();
        let fit = fit_emissivity(&samples, &p).unwrap();
        assert!((fit.value - eps).abs() <= 0.005, "eps {eps}: fitted {}", fit.value);
    }
}

#[test]
fn invert_rejects_counts_at_or_below_floor() {
    let p = CalibrationProfile::default();
    let floor = p.background_floor(0.63);
    assert!(matches!(invert_counts(floor, 0.63, &p), Err(irmap::Error::BelowFloor { .. })));
    assert!(invert_counts(floor + 1.0, 0.63, &p).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invert_undoes_forward(t in -20.0..2000.0f64, eps in 0.05..=1.0f64, tau in 0.3..=1.0f64) {
        let p = CalibrationProfile::default().with_transmission(tau);
        let back = invert_counts(forward_counts(t, eps, &p).unwrap(), eps, &p).unwrap();
        prop_assert!((back - t).abs() <= 0.01);
    }

    #[test]
    fn conversion_is_pixel_local(
        (w, h, counts, classes, seed) in (1usize..8, 1usize..8).prop_flat_map(|(w, h)| (
            Just(w),
            Just(h),
            prop::collection::vec(0u16..=u16::MAX, w * h),
            prop::collection::vec(0u8..3, w * h),
            any::<u64>(),
        ))
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let p = CalibrationProfile::default();
        let class = |c: u8| [SurfaceClass::Powder, SurfaceClass::AsPrinted, SurfaceClass::Unity][c as usize];
        let frame = Grid::from_vec(w, h, counts.clone()).unwrap();
        let cmap = Grid::from_vec(w, h, classes.iter().map(|&c| class(c)).collect()).unwrap();
        let direct = convert_frame(&frame, &cmap, &p).unwrap();

        let mut perm: Vec<usize> = (0..w * h).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let pf = Grid::from_vec(w, h, perm.iter().map(|&i| counts[i]).collect()).unwrap();
        let pc = Grid::from_vec(w, h, perm.iter().map(|&i| class(classes[i])).collect()).unwrap();
        let permuted = convert_frame(&pf, &pc, &p).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(permuted.temperature.values()[k].to_bits(), direct.temperature.values()[i].to_bits());
            prop_assert_eq!(permuted.below_floor.values()[k], direct.below_floor.values()[i]);
        }
    }
}
