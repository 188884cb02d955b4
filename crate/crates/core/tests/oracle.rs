use std::f64::consts::PI;

use mmcache::geometry::{caching_duration_cdf, hof_probability, BeamGeometry, Pose};
use mmcache::matching::{dynamic_match_in, example_instance, DynamicMatching, Game, PlayerId, Slot};
use mmcache::oracle::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ilp_mue(speed: f64, segments: f64, p_th: f64, allowed: Vec<usize>) -> IlpMue {
    IlpMue {
        speed,
        cache_segments: segments,
        p_th,
        scan_interval: 1.0,
        allowed,
    }
}

fn ilp(mues: Vec<IlpMue>, sbss: Vec<IlpSbs>) -> IlpInstance {
    IlpInstance {
        mues,
        sbss,
        t_mts: 1.0,
        play_rate: 1e3,
        budget: 10_000_000,
    }
}

/// Fewest MBS users by depth-first search over per-MUE options.
fn min_mbs(inst: &IlpInstance) -> usize {
    fn go(inst: &IlpInstance, u: usize, load: &mut Vec<usize>) -> usize {
        if u == inst.mues.len() {
            return 0;
        }
        let m = &inst.mues[u];
        let mut best = 1 + go(inst, u + 1, load);
        if m.cache_segments / inst.play_rate >= m.scan_interval {
            best = best.min(go(inst, u + 1, load));
        }
        for &k in &m.allowed {
            let hof = hof_probability(m.speed, inst.t_mts, inst.sbss[k].radius).unwrap().probability;
            if hof <= m.p_th && load[k] < inst.sbss[k].quota {
                load[k] += 1;
                best = best.min(go(inst, u + 1, load));
                load[k] -= 1;
            }
        }
        best
    }
    go(inst, 0, &mut vec![0; inst.sbss.len()])
}

#[test]
fn ilp_examples() {
    let cell = vec![IlpSbs { radius: 30.0, quota: 1 }];
    let fits = ilp(vec![ilp_mue(5.0, 0.0, 0.2, vec![0])], cell.clone());
    let sol = solve_offload_bruteforce(&fits).unwrap();
    assert_eq!((sol.assignment.as_slice(), sol.objective), ([Choice::Sbs(0)].as_slice(), 0));

    // HOF above tolerance and half a second of cache
    let forced = ilp(vec![ilp_mue(16.0, 500.0, 0.1, vec![0])], cell);
    let sol = solve_offload_bruteforce(&forced).unwrap();
    assert_eq!((sol.assignment.as_slice(), sol.objective), ([Choice::Mbs].as_slice(), 1));
    assert!(check_assignment(&forced, &[Choice::Sbs(0)]).is_err());
    assert!(check_assignment(&forced, &[Choice::None]).is_err());
}

#[test]
fn ilp_budget_guard() {
    let mut inst = ilp(vec![ilp_mue(5.0, 0.0, 0.2, vec![0]); 4], vec![IlpSbs { radius: 30.0, quota: 1 }]);
    inst.budget = 80;
    assert!(matches!(solve_offload_bruteforce(&inst), Err(OracleError::BudgetExceeded { .. })));
    inst.budget = 81;
    assert!(solve_offload_bruteforce(&inst).is_ok());
}

#[test]
fn ilp_matches_search_and_bounds_matching() {
    for seed in 0..300u64 {
        let game_inst = random_game_instance(seed, 6, 3);
        let inst = IlpInstance::from_game(&game_inst);
        let sol = solve_offload_bruteforce(&inst).unwrap();
        assert_eq!(sol.objective, min_mbs(&inst), "seed {seed}");
        assert!(check_assignment(&inst, &sol.assignment).is_ok());

        let g = Game::new(&game_inst).unwrap();
        let out = dynamic_match_in(&g);
        let a = assignment_from_matching(&game_inst, &out.matching);
        assert_eq!(check_assignment(&inst, &a), Ok(()), "seed {seed}");
        assert!(a.iter().filter(|c| **c == Choice::Mbs).count() >= sol.objective);
    }
}

#[test]
fn ilp_invariant_to_input_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..100u64 {
        let inst = IlpInstance::from_game(&random_game_instance(seed, 6, 3));
        let base = solve_offload_bruteforce(&inst).unwrap().objective;
        let mut mue_order: Vec<usize> = (0..inst.mues.len()).collect();
        let mut sbs_order: Vec<usize> = (0..inst.sbss.len()).collect();
        mue_order.shuffle(&mut rng);
        sbs_order.shuffle(&mut rng);
        let new_index = |k: usize| sbs_order.iter().position(|&x| x == k).unwrap();
        let mut shuffled = inst.clone();
        shuffled.sbss = sbs_order.iter().map(|&k| inst.sbss[k].clone()).collect();
        shuffled.mues = mue_order
            .iter()
            .map(|&u| {
                let mut m = inst.mues[u].clone();
                m.allowed = m.allowed.iter().map(|&k| new_index(k)).collect();
                m
            })
            .collect();
        assert_eq!(solve_offload_bruteforce(&shuffled).unwrap().objective, base, "seed {seed}");
    }
}

#[test]
fn coverage_estimates() {
    let full = mc_coverage_probability(3, 2.0 * PI / 3.0, 100_000, 4).unwrap();
    assert_eq!((full.mean, full.stderr), (1.0, 0.0));
    let thin = mc_coverage_probability(2, 1e-9, 100_000, 4).unwrap();
    assert!((thin.mean - 0.25).abs() <= 3.0 * thin.stderr, "{thin:?}");
    let four = mc_coverage_probability(4, PI / 6.0, 100_000, 4).unwrap();
    assert!((four.mean - 0.6111).abs() <= 3.0 * four.stderr, "{four:?}");
    assert!(mc_coverage_probability(3, 0.5, 0, 1).is_err());
}

#[test]
fn estimates_reproducible_and_converge() {
    let a = mc_coverage_probability(4, 0.4, 30_000, 11).unwrap();
    assert_eq!(a, mc_coverage_probability(4, 0.4, 30_000, 11).unwrap());
    // mean absolute error over many seeds shrinks by about √3 per tripling
    let mean_err = |n: usize| {
        let exact = mmcache::geometry::beam_coverage_probability(4, 0.4).unwrap();
        (0..40).map(|s| (mc_coverage_probability(4, 0.4, n, s).unwrap().mean - exact).abs()).sum::<f64>() / 40.0
    };
    let (coarse, fine) = (mean_err(3_000), mean_err(27_000));
    assert!(fine < coarse / 2.0, "{coarse} → {fine}");
}

#[test]
fn caching_duration_samples() {
    let width = 10f64.to_radians();
    for r in [10.0, 20.0, 40.0] {
        let pose = Pose::new(r, 0.0, PI / 2.0, 16.0);
        let beam = BeamGeometry::from_entry_pose([0.0, 0.0], 3, width, &pose).unwrap();
        let cdf = mc_caching_duration(&pose, &beam, 20_000, 2).unwrap();
        let floor = r * width.sin() / 16.0;
        assert_eq!(cdf.eval(floor * (1.0 - 1e-9)), 0.0);
        assert_eq!(cdf.eval(f64::INFINITY), 1.0);
        let ks = cdf.ks_distance(|t| caching_duration_cdf(&pose, &beam, t).unwrap());
        assert!(ks < 0.02, "r={r}: {ks}");
    }
}

#[test]
fn hof_frequency_matches_formula() {
    for (speed, radius) in [(16.0, 30.0), (4.0, 30.0), (10.0, 8.0)] {
        let exact = hof_probability(speed, 1.0, radius).unwrap().probability;
        let mc = mc_hof_frequency(speed, 1.0, radius, 100_000, 9).unwrap();
        assert!((mc.mean - exact).abs() < 0.01, "{speed} {radius}: {} vs {exact}", mc.mean);
    }
}

#[test]
fn blocking_scan_on_example() {
    let (inst, util) = example_instance(0.02);
    let g = Game::with_utilities(&inst, util).unwrap();
    let out = dynamic_match_in(&g);
    assert!(scan_all_blockings(&g, &out.matching).unwrap().is_empty());
    let report = scan_all_blockings(&g, &out.ex_ante).unwrap();
    assert_eq!(report.violations.len(), 1);
    let v = &report.violations[0];
    assert_eq!((v.period, v.mue, v.bs), (2, Some(0), Some(PlayerId::mbs())));
    assert_eq!(report.to_string(), "period 2: u1 with k0 (PairMatch)\n");
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "period,mue,bs,clause\n2,u1,k0,PairMatch\n");

    let k1 = Slot::Partner(PlayerId::sbs(0));
    let breach = DynamicMatching {
        mu1: vec![k1, k1],
        mu2: vec![Slot::Own, Slot::Own],
    };
    assert!(scan_all_blockings(&g, &breach).is_err());
}

#[test]
fn suite_names_round_trip() {
    for s in Suite::ALL {
        assert_eq!(Suite::parse(s.name()), Some(s));
    }
    assert_eq!(Suite::parse("bogus"), None);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn algorithm_outputs_scan_clean(seed in any::<u64>()) {
        let inst = random_game_instance(seed, 6, 3);
        let g = Game::new(&inst).unwrap();
        let out = dynamic_match_in(&g);
        let report = scan_all_blockings(&g, &out.matching).unwrap();
        prop_assert!(report.is_empty(), "{}", report);
    }
}
