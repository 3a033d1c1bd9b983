mod common;

use irmap::features::*;
use irmap::framestack::LayerStack;
use irmap::imageops::Grid;
use irmap::radiometry::{forward_counts, quantize_counts, CalibrationProfile, CountsLut};
use proptest::prelude::*;

fn stack_strategy() -> impl Strategy<Value = LayerStack> {
    (1usize..7, 1usize..7, 2usize..24).prop_flat_map(|(w, h, n)| {
        prop::collection::vec(prop::collection::vec(1000u16..30000, w * h), n).prop_map(move |frames| {
            let frames = frames.into_iter().map(|f| Grid::from_vec(w, h, f).unwrap()).collect();
            LayerStack::new(0, 30.0, frames).unwrap()
        })
    })
}

fn powder() -> CountsLut {
    let p = CalibrationProfile::default();
    CountsLut::new(p.emissivity_powder, &p).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn scan_order_points_at_the_heat_intensity_frame(stack in stack_strategy(), activity in 0.0..20000.0f64) {
        let (heat, order) = heat_intensity_and_scan_order(&stack, activity).unwrap();
        let (w, h) = stack.dims();
        for y in 0..h {
            for x in 0..w {
                if let Some(s) = order.get(x, y) {
                    let raw = stack.frames[s as usize].get(x, y) as f64;
                    prop_assert_eq!(Some(raw), heat.get(x, y));
                    prop_assert!(raw > activity);
                }
            }
        }
    }

    #[test]
    fn max_predeposition_dominates_local(stack in stack_strategy(), offset in 0usize..12) {
        let (_, order) = heat_intensity_and_scan_order(&stack, 0.0).unwrap();
        let lut = powder();
        let local = local_predeposition(&stack, &order, offset, &lut).unwrap();
        let max = max_predeposition(&stack, &order, offset, &lut).unwrap();
        let (w, h) = stack.dims();
        for y in 0..h {
            for x in 0..w {
                if let (Some(l), Some(m)) = (local.get(x, y), max.get(x, y)) {
                    prop_assert!(m >= l, "({x},{y}): max {m} < local {l}");
                }
            }
        }
    }

    /// Each pixel heats to a peak and then only cools.
    #[test]
    fn cooling_rate_is_nonnegative_after_the_peak(
        (w, h, n, peaks, drops) in (1usize..6, 1usize..6, 4usize..40).prop_flat_map(|(w, h, n)| (
            Just(w), Just(h), Just(n),
            prop::collection::vec(0usize..1000, w * h),
            prop::collection::vec(prop::collection::vec(0.0..40.0f64, n), w * h),
        )),
        window in 1usize..10,
    ) {
        let p = CalibrationProfile::default();
        let mut temps = vec![vec![0.0; w * h]; n];
        for px in 0..w * h {
            let peak = peaks[px] % n;
            let mut t = 900.0;
            for f in 0..n {
                temps[f][px] = if f < peak { 150.0 + f as f64 } else { t };
                if f >= peak {
                    t -= drops[px][f];
                }
            }
        }
        let frames = temps
            .iter()
            .map(|ts| Grid::from_vec(w, h, ts.iter().map(|&t| quantize_counts(forward_counts(t, 0.21, &p).unwrap())).collect()).unwrap())
            .collect();
        let stack = LayerStack::new(0, 30.0, frames).unwrap();
        let (_, order) = heat_intensity_and_scan_order(&stack, 0.0).unwrap();
        let printed = CountsLut::new(0.21, &p).unwrap();
        let rate = cooling_rate(&stack, &order, window, &printed).unwrap();
        prop_assert!(rate.valid_values().iter().all(|&r| r >= 0.0));
    }
}

#[test]
fn extraction_is_deterministic() {
    let sim = common::small_sim(8, 60, 2, 30.0);
    let (stack, _) = sim.render(1).unwrap();
    let mask = sim.mask(1).unwrap();
    let p = FeatureParams { offset_frames: 3, cooling_window: 5, ..FeatureParams::default() };
    let a = extract_layer(&stack, &mask, &sim.spec.calibration, &p, &FeatureId::ALL).unwrap();
    let b = extract_layer(&stack, &mask, &sim.spec.calibration, &p, &FeatureId::ALL).unwrap();
    assert_eq!(a.maps.len(), FeatureId::ALL.len());
    for (x, y) in a.maps.iter().zip(&b.maps) {
        let bits = |m: &FeatureMap| m.grid.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(x), bits(y), "{:?}", x.feature);
        assert_eq!(x.validity, y.validity);
    }
    assert_eq!(a.spatters, b.spatters);
}

#[test]
fn spatter_totals_agree() {
    let mut total = 0;
    for seed in 0..6 {
        let sim = common::small_sim(seed, 60, 4, 30.0);
        let (stack, _) = sim.render(0).unwrap();
        let params = FeatureParams::default();
        let conv = Converters::new(&sim.spec.calibration).unwrap();
        let th = params.thresholds(&sim.spec.calibration).unwrap();
        let (_, order) = heat_intensity_and_scan_order(&stack, th.activity).unwrap();
        let sl = spatter_layer(&stack, &order, &conv, &params).unwrap();
        let (w, _) = stack.dims();

        // Generation, totalled per laser location (one scan frame each).
        let mut per_frame = std::collections::BTreeMap::new();
        for (p, v) in sl.generation.grid.values().iter().enumerate() {
            if let Some(s) = order.get(p % w, p / w) {
                let prev = per_frame.insert(s as usize, *v);
                assert!(prev.map_or(true, |q| q == *v), "one location, one count");
            }
        }
        let generated: f64 = per_frame.values().sum();
        assert_eq!(generated as usize, sl.credited(), "seed {seed}");
        assert_eq!(sl.credited(), sl.records.len());

        // Landing clusters are disjoint, so the map totals their sizes.
        let landed: f64 = sl.landing.grid.values().iter().sum();
        assert_eq!(landed as usize, sl.records.iter().map(|r| r.size).sum::<usize>());
        let mut seen = std::collections::HashSet::new();
        for r in &sl.records {
            for p in &r.landing_pixels {
                assert!(seen.insert(*p), "pixel {p:?} in two clusters");
            }
        }
        total += sl.records.len();
    }
    assert!(total >= 12, "only {total} spatters seen");
}

#[test]
fn no_spatter_means_zero_maps() {
    let sim = common::small_sim(2, 60, 0, 0.0);
    let (stack, truth) = sim.render(0).unwrap();
    assert!(truth.spatter_events.is_empty());
    let params = FeatureParams::default();
    let conv = Converters::new(&sim.spec.calibration).unwrap();
    let th = params.thresholds(&sim.spec.calibration).unwrap();
    let (_, order) = heat_intensity_and_scan_order(&stack, th.activity).unwrap();
    let sl = spatter_layer(&stack, &order, &conv, &params).unwrap();
    assert!(sl.records.is_empty());
    assert!(sl.generation.valid_values().iter().all(|&v| v == 0.0));
    assert!(sl.landing.valid_values().iter().all(|&v| v == 0.0));
}

#[test]
fn persistent_spatter_is_counted_once() {
    // A spatter that stays hot for about ten frames.
    let mut spec = common::small_spec(4, 60, 0, 0.0);
    spec.spatter.events = "0,20,20,20,600,0.4\n".into();
    let sim = common::block_sim(7.2, 0.12, spec);
    let (stack, truth) = sim.render(0).unwrap();
    assert_eq!(truth.spatter_events.len(), 1);
    let params = FeatureParams::default();
    let conv = Converters::new(&sim.spec.calibration).unwrap();
    let th = params.thresholds(&sim.spec.calibration).unwrap();
    let (_, order) = heat_intensity_and_scan_order(&stack, th.activity).unwrap();
    let sl = spatter_layer(&stack, &order, &conv, &params).unwrap();
    assert_eq!(sl.records.len(), 1, "{:?}", sl.records);
    let r = &sl.records[0];
    assert_eq!(r.frame, 20);
    assert!((r.centroid.0 - 20.0).abs() <= 1.0 && (r.centroid.1 - 20.0).abs() <= 1.0);
}
