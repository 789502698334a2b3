use chipletsim_core::tuning::{
    crossing_voltage, max_mutually_resonant_set, max_resonant_pairs, reachable_interval, strained_frequency, Tunable,
};
use chipletsim_core::ActuatorConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Tunable>, ActuatorConfig) {
    let n = rng.gen_range(1..=10);
    // integer rest frequencies on a narrow range force shared endpoints
    let coarse = rng.gen_bool(0.3);
    let emitters = (0..n)
        .map(|_| {
            let f0_ghz = if coarse {
                f64::from(rng.gen_range(-5..=5)) * 10.0
            } else {
                rng.gen_range(-60.0..60.0)
            };
            let k_ghz_per_v2 = if rng.gen_bool(0.1) {
                0.0
            } else {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                sign * 0.0167 * 10f64.powf(rng.gen_range(-0.5..0.5))
            };
            Tunable { f0_ghz, k_ghz_per_v2 }
        })
        .collect();
    let actuator = ActuatorConfig {
        v_max: [20.0, 50.0, 100.0][rng.gen_range(0..3)],
        cap_ghz: [5.0, 30.0, 100.0][rng.gen_range(0..3)],
        electrode_gap_um: 1.5,
    };
    (emitters, actuator)
}

/// Best stabbing point by trying every left endpoint.
fn brute_stab(intervals: &[(f64, f64)]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for &(x, _) in intervals {
        let n = intervals.iter().filter(|&&(lo, hi)| lo <= x && x <= hi).count();
        if n > best.1 || (n == best.1 && x < best.0) {
            best = (x, n);
        }
    }
    best
}

fn brute_matching(adj: &[Vec<bool>], used: &mut [bool]) -> usize {
    let Some(i) = (0..adj.len()).find(|&i| !used[i]) else {
        return 0;
    };
    used[i] = true;
    let mut best = brute_matching(adj, used);
    for j in i + 1..adj.len() {
        if !used[j] && adj[i][j] {
            used[j] = true;
            best = best.max(1 + brute_matching(adj, used));
            used[j] = false;
        }
    }
    used[i] = false;
    best
}

#[test]
fn sweep_and_matching_equal_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let (emitters, act) = random_instance(&mut rng);
        let intervals: Vec<_> = emitters.iter().map(|t| reachable_interval(t, &act)).collect();

        let plan = max_mutually_resonant_set(&emitters, &act).unwrap();
        let (x, n) = brute_stab(&intervals);
        assert_eq!(plan.size(), n, "{emitters:?}");
        assert_eq!(plan.target_freq_ghz, x, "{emitters:?}");
        plan.verify(&act).unwrap();

        let adj: Vec<Vec<bool>> = intervals
            .iter()
            .map(|a| intervals.iter().map(|b| a.0 <= b.1 && b.0 <= a.1).collect())
            .collect();
        let pairs = max_resonant_pairs(&emitters, &act).unwrap();
        assert_eq!(pairs.len(), brute_matching(&adj, &mut vec![false; emitters.len()]));
        let mut seen = vec![false; emitters.len()];
        for p in &pairs {
            assert!(adj[p.a][p.b]);
            assert!(!seen[p.a] && !seen[p.b]);
            seen[p.a] = true;
            seen[p.b] = true;
        }
    }
}

fn tunable() -> impl Strategy<Value = Tunable> {
    (-60.0..60.0f64, prop::bool::ANY, -0.5..0.5f64).prop_map(|(f0_ghz, up, e)| Tunable {
        f0_ghz,
        k_ghz_per_v2: if up { 1.0 } else { -1.0 } * 0.0167 * 10f64.powf(e),
    })
}

proptest! {
    #[test]
    fn resonant_set_grows_with_cap_and_voltage(
        emitters in prop::collection::vec(tunable(), 1..12),
        cap in 1.0..100.0f64,
        v in 5.0..100.0f64,
    ) {
        let small = ActuatorConfig { v_max: v, cap_ghz: cap, electrode_gap_um: 1.5 };
        let more_cap = ActuatorConfig { cap_ghz: cap * 1.5, ..small.clone() };
        let more_v = ActuatorConfig { v_max: v * 1.5, ..small.clone() };
        let base = max_mutually_resonant_set(&emitters, &small).unwrap().size();
        prop_assert!(max_mutually_resonant_set(&emitters, &more_cap).unwrap().size() >= base);
        prop_assert!(max_mutually_resonant_set(&emitters, &more_v).unwrap().size() >= base);
    }

    #[test]
    fn lines_coincide_at_the_crossing(a in tunable(), b in tunable()) {
        let act = ActuatorConfig { v_max: 100.0, cap_ghz: 100.0, electrode_gap_um: 1.5 };
        if let Ok(v) = crossing_voltage(&a, &b, &act) {
            prop_assert!(v >= 0.0 && v <= act.v_max);
            let fa = strained_frequency(a.f0_ghz, a.k_ghz_per_v2, v, act.cap_ghz);
            let fb = strained_frequency(b.f0_ghz, b.k_ghz_per_v2, v, act.cap_ghz);
            prop_assert!((fa - fb).abs() < 1e-9);
        }
    }

    #[test]
    fn strain_shift_is_monotone_below_the_cap(k in 1e-3..0.1f64, v in 0.0..100.0f64, dv in 0.0..10.0f64) {
        let cap = 100.0;
        let v_cap = (cap / k).sqrt();
        prop_assume!(v + dv <= v_cap);
        prop_assert!(strained_frequency(0.0, k, v + dv, cap) >= strained_frequency(0.0, k, v, cap));
        prop_assert!(strained_frequency(0.0, -k, v + dv, cap) <= strained_frequency(0.0, -k, v, cap));
    }
}
