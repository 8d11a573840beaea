use proptest::prelude::*;

use raidr::bloom::{self, fpr_analytic, BloomFilter, BloomParams};
use raidr::config::ConfigMap;
use raidr::overhead::{energy_fraction, throughput_loss, EnergyModel, OverheadInputs, Policy};
use raidr::profiler::{self, ProfileMode, ProfilerConfig};
use raidr::raidr::{refreshes_between, BinConfig, BinSet, BloomBudget, FilterSizing};
use raidr::retention::{DeviceConfig, DpdModel, RetentionDistribution, RetentionGroundTruth, VrtModel, GIBIBIT};
use raidr::simulate::{self, Scenario, SimConfig, Simulation};

fn scenario(rows: u64, horizon: u64, seed: u64, vrt: f64, dpd: bool, measured: bool) -> Scenario {
    Scenario {
        device: DeviceConfig::with_rows(rows),
        retention: RetentionDistribution {
            weak_fraction: 0.1,
            floor_ms: 128.0,
            ..Default::default()
        },
        vrt: VrtModel {
            enabled: vrt > 0.0,
            affected_fraction: vrt,
            low_factor: 0.75,
            p_high_to_low: 0.2,
            p_low_to_high: 0.3,
        },
        dpd: DpdModel {
            enabled: dpd,
            num_patterns: 4,
            worst_pattern_factor: 0.75,
        },
        profiler: ProfilerConfig {
            mode: if measured {
                ProfileMode::Measured
            } else {
                ProfileMode::Oracle
            },
            ..Default::default()
        },
        bloom: FilterSizing::Explicit { m: 256, k: 2 },
        sim: SimConfig {
            horizon_windows: horizon,
            seed,
        },
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn popcount_is_bounded(m in 1u64..2000, k in 1u32..20, seed: u64,
                           keys in proptest::collection::vec(any::<u64>(), 0..50)) {
        let mut f = BloomFilter::new(BloomParams::new(m, k, seed).unwrap()).unwrap();
        prop_assert_eq!(f.popcount(), 0);
        for &key in &keys {
            f.insert(key);
        }
        prop_assert!(f.popcount() <= m.min(u64::from(k) * keys.len() as u64));
        prop_assert_eq!(f.n_inserted(), keys.len() as u64);
    }

    #[test]
    fn empty_filter_contains_nothing(m in 1u64..5000, k in 1u32..64, seed: u64, probe: u64) {
        let f = BloomFilter::new(BloomParams::new(m, k, seed).unwrap()).unwrap();
        prop_assert!(!f.contains(probe));
        prop_assert_eq!(f.expected_fpr(), 0.0);
    }

    #[test]
    fn snapshot_round_trips(m in 1u64..3000, k in 1u32..10, seed: u64,
                            keys in proptest::collection::vec(any::<u64>(), 0..40)) {
        let mut f = BloomFilter::new(BloomParams::new(m, k, seed).unwrap()).unwrap();
        for &key in &keys {
            f.insert(key);
        }
        let back = BloomFilter::from_snapshot(&f.to_snapshot()).unwrap();
        prop_assert_eq!(back, f);
    }

    #[test]
    fn plan_is_minimal(p in 1e-4f64..0.6, n in 1u64..400) {
        let params = bloom::plan(p, n).unwrap();
        prop_assert!(fpr_analytic(&params, n) <= p);
        prop_assert_eq!(params.k, bloom::optimal_k(params.m, n));
        if params.m > 1 {
            let smaller = BloomParams::new(params.m - 1, bloom::optimal_k(params.m - 1, n), 0).unwrap();
            prop_assert!(fpr_analytic(&smaller, n) > p);
        }
    }

    #[test]
    fn analytic_fpr_is_a_probability(m in 1u64..1_000_000, k in 1u32..64, n in 0u64..1_000_000) {
        let f = fpr_analytic(&BloomParams::new(m, k, 0).unwrap(), n);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn bins_are_monotone_in_retention(a in 1.0f64..5000.0, b in 1.0f64..5000.0) {
        let cfg = BinConfig {
            thresholds_ms: vec![128.0, 256.0, 512.0],
            base_interval_ms: 64.0,
        };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(cfg.bin_for(lo) <= cfg.bin_for(hi));
        prop_assert!(cfg.interval_ms(cfg.bin_for(lo)) <= cfg.interval_ms(cfg.bin_for(hi)));
    }

    #[test]
    fn lookups_never_slow_a_row_down(assigned in proptest::collection::vec(0u8..3, 1..400),
                                     m in 8u64..512, k in 1u32..4, seed: u64) {
        let cfg = BinConfig::default();
        let budget = BloomBudget { sizing: FilterSizing::Explicit { m, k }, seed };
        let bins = BinSet::from_assignment(&assigned, &cfg, &budget).unwrap();
        for (row, &b) in assigned.iter().enumerate() {
            prop_assert!(bins.query_bin(row as u64) <= b as usize);
        }
    }

    #[test]
    fn ground_truth_is_reproducible(seed: u64, rows in 1u64..500) {
        let device = DeviceConfig::with_rows(rows);
        let dist = RetentionDistribution { weak_fraction: 0.3, ..Default::default() };
        let vrt = VrtModel { enabled: true, affected_fraction: 0.3, ..Default::default() };
        let dpd = DpdModel { enabled: true, ..Default::default() };
        let a = RetentionGroundTruth::generate(&device, &dist, &vrt, &dpd, seed).unwrap();
        let b = RetentionGroundTruth::generate(&device, &dist, &vrt, &dpd, seed).unwrap();
        prop_assert_eq!(a.to_csv(), b.to_csv());
        for row in 0..rows {
            let base = a.base_retention_ms(row);
            prop_assert!(base >= dist.floor_ms);
            prop_assert!(a.oracle_min_ms(row) <= a.high_state_min_ms(row));
        }
    }

    #[test]
    fn oracle_minimum_bounds_every_window(seed: u64, window in 0u64..200) {
        let device = DeviceConfig::with_rows(200);
        let dist = RetentionDistribution { weak_fraction: 0.2, ..Default::default() };
        let vrt = VrtModel { enabled: true, affected_fraction: 0.5, ..Default::default() };
        let dpd = DpdModel { enabled: true, ..Default::default() };
        let gt = RetentionGroundTruth::generate(&device, &dist, &vrt, &dpd, seed).unwrap();
        for row in 0..200 {
            prop_assert!(gt.oracle_min_ms(row) <= gt.true_min_retention(row, window).unwrap());
        }
    }

    #[test]
    fn measured_profile_never_beats_the_oracle(seed: u64, patterns in 1u32..=8, rounds in 1u32..4, span in 1u64..50) {
        let device = DeviceConfig::with_rows(300);
        let dist = RetentionDistribution { weak_fraction: 0.2, ..Default::default() };
        let vrt = VrtModel { enabled: true, affected_fraction: 0.5, ..Default::default() };
        let dpd = DpdModel { enabled: true, ..Default::default() };
        let gt = RetentionGroundTruth::generate(&device, &dist, &vrt, &dpd, seed).unwrap();
        let cfg = ProfilerConfig {
            mode: ProfileMode::Measured,
            patterns_tested: patterns,
            rounds,
            guard_band_factor: 1.0,
            profiling_window_span: span,
        };
        let p = profiler::profile(&gt, &cfg, seed).unwrap();
        for row in 0..300u64 {
            prop_assert!(p.measured_ms[row as usize] >= gt.oracle_min_ms(row));
            prop_assert!(p.measured_ms[row as usize] <= gt.base_retention_ms(row));
        }
    }

    #[test]
    fn chunked_runs_match_one_shot(seed: u64, cuts in proptest::collection::vec(1u64..40, 1..6),
                                   vrt in prop_oneof![Just(0.0), 0.1f64..0.9], measured: bool) {
        let s = scenario(300, 96, seed, vrt, true, measured);
        let whole = simulate::run(&s).unwrap();
        let mut sim = Simulation::new(&s).unwrap();
        for c in cuts {
            let step = c.min(96 - sim.window());
            sim.advance(step);
            let blob = sim.checkpoint();
            sim = Simulation::restore(&s, &blob).unwrap();
        }
        sim.run_to_horizon();
        prop_assert_eq!(sim.report().unwrap(), whole);
    }

    #[test]
    fn refresh_counts_follow_the_schedule(seed: u64, horizon in 4u64..200, vrt in 0.0f64..0.5) {
        let s = scenario(300, horizon, seed, vrt, true, true);
        let mut sim = Simulation::new(&s).unwrap();
        sim.run_to_horizon();
        let expected: Vec<u64> = (0..300u64)
            .map(|row| refreshes_between(0, horizon, sim.bins().row_multiplier(row)))
            .collect();
        prop_assert_eq!(sim.row_refreshes(), expected);
        let r = sim.report().unwrap();
        prop_assert!(r.savings_fraction <= r.savings_bound() + 1e-12);
        prop_assert_eq!(r.schedule_violations, 0);
    }

    #[test]
    fn oracle_profiling_is_always_safe(seed: u64, vrt in 0.0f64..1.0, dpd: bool) {
        let r = simulate::run(&scenario(400, 128, seed, vrt, dpd, false)).unwrap();
        prop_assert_eq!(r.retention_failures, 0);
        prop_assert!(r.invariant_violations().is_empty());
    }

    #[test]
    fn loss_is_monotone_in_density(a in 1u64..256, b in 1u64..256, savings in 0.0f64..1.0) {
        let at = |gb: u64| OverheadInputs {
            device: DeviceConfig { density_bits: gb * GIBIBIT, ..Default::default() },
            energy: EnergyModel::default(),
        };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let l_lo = throughput_loss(&at(lo), Policy::Baseline).unwrap().value;
        let l_hi = throughput_loss(&at(hi), Policy::Baseline).unwrap().value;
        prop_assert!(l_lo <= l_hi);
        let raidr = throughput_loss(&at(lo), Policy::Raidr { savings }).unwrap().value;
        prop_assert!(raidr <= l_lo);
        let e = energy_fraction(&at(hi), Policy::Raidr { savings }).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn config_render_round_trips(weak in 0.0f64..1.0, guard in 1.0f64..8.0, seed: u64) {
        let mut map = ConfigMap::default();
        map.set("retention.weak_fraction", &weak.to_string()).unwrap();
        map.set("profiler.guard_band_factor", &guard.to_string()).unwrap();
        map.set("experiment.seeds", &seed.to_string()).unwrap();
        let again = ConfigMap::parse_str(&map.render()).unwrap();
        prop_assert_eq!(&again, &map);
        let spec = again.build().unwrap();
        prop_assert_eq!(spec.scenario.retention.weak_fraction, weak);
        prop_assert_eq!(spec.scenario.profiler.guard_band_factor, guard);
        prop_assert_eq!(spec.scenario.sim.seed, seed);
    }
}
