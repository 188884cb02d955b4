use mmcache::scenario::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(replications: usize) -> ScenarioConfig {
    ScenarioConfig {
        replications,
        ..Default::default()
    }
}

fn csv_bytes(res: &ExperimentResult) -> Vec<u8> {
    let mut buf = Vec::new();
    res.write_csv(&mut buf).unwrap();
    buf
}

#[test]
fn experiments_are_deterministic() {
    let cfg = small(6);
    for exp in Experiment::ALL {
        let a = run_experiment(exp, &cfg).unwrap();
        let b = run_experiment(exp, &cfg).unwrap();
        assert_eq!((&a.columns, &a.rows), (&b.columns, &b.rows), "{exp}");
        assert_eq!(csv_bytes(&a), csv_bytes(&b), "{exp}");
    }
    let other = ScenarioConfig { seed: 2, ..cfg.clone() };
    let a = run_experiment(Experiment::LoadVsUsers, &cfg).unwrap();
    let b = run_experiment(Experiment::LoadVsUsers, &other).unwrap();
    assert_ne!(a.rows, b.rows);
}

#[test]
fn csv_and_manifest_layout() {
    let cfg = small(3);
    let res = run_experiment(Experiment::EnergyVsUsers, &cfg).unwrap();
    let text = String::from_utf8(csv_bytes(&res)).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(
        header,
        "users [count],speed [m/s],baseline_energy [mJ],saved_energy [mJ],saved_energy_ci95 [mJ],savings [percent],seed,replications"
    );
    assert!(text.lines().skip(1).all(|l| l.ends_with(",1,3")));

    let mut buf = Vec::new();
    res.write_manifest(&cfg, &mut buf).unwrap();
    let manifest: toml::Table = toml::from_str(&String::from_utf8(buf).unwrap()).unwrap();
    assert_eq!(manifest["experiment"].as_str(), Some("energy_vs_users"));
    assert_eq!(manifest["config_sha256"].as_str(), Some(cfg.hash().unwrap().as_str()));
    assert_eq!(manifest["seed"].as_integer(), Some(1));
}

#[test]
fn sweep_axes() {
    let cfg = small(2);
    let hof = run_experiment(Experiment::HofVsSpeed, &cfg).unwrap();
    let speeds = hof.column("speed").unwrap();
    assert_eq!(&speeds[..16], (1..=16).map(f64::from).collect::<Vec<_>>().as_slice());
    assert!((hof.column("speed_kmh").unwrap()[16] - 60.0).abs() < 1e-9);

    let energy = run_experiment(Experiment::EnergyVsUsers, &cfg).unwrap();
    assert_eq!(energy.rows.len(), 15);
    assert_eq!(energy.value("baseline_energy", &[("users", 50.0), ("speed", 8.0)]), Some(150.0));
    for row in energy.select(&[]) {
        assert!([8.0, 10.0, 12.0].contains(&row[1]));
    }
    let users = energy.column("users").unwrap();
    assert_eq!(users.iter().cloned().fold(0.0, f64::max), 50.0);
}

#[test]
fn config_round_trip_and_hash() {
    let cfg = ScenarioConfig::default();
    let back = ScenarioConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    let changed = cfg.with_overrides(&["quota=4".to_string()]).unwrap();
    assert_eq!(changed.quota, 4);
    assert_ne!(changed.hash().unwrap(), cfg.hash().unwrap());
    assert!(cfg.with_overrides(&["quota".to_string()]).is_err());
    assert!(cfg.with_overrides(&["n_beams=0".to_string()]).is_err());
    let partial = ScenarioConfig::from_toml_str("seed = 9\nn_sbs = 12\n").unwrap();
    assert_eq!((partial.seed, partial.n_sbs, partial.area_radius), (9, 12, 500.0));
}

#[test]
fn replications_are_independent_of_thread_count() {
    let cfg = small(5);
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let a = serial.install(|| run_experiment(Experiment::OverheadVsUsers, &cfg).unwrap());
    let b = run_experiment(Experiment::OverheadVsUsers, &cfg).unwrap();
    assert_eq!(a.rows, b.rows);
}

/// Per-replication games at the trend speeds with the default population.
fn each_game(reps: usize, users: usize, mut f: impl FnMut(&[MultiUserOutcome], usize)) {
    let cfg = ScenarioConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..reps {
        let scn = generate_scenario(&cfg, rng.random()).unwrap();
        let target = scn.central_sbs();
        let entrants = draw_entrants(&cfg, &scn, target, users, &mut rng);
        let cells = 1 + entrants
            .iter()
            .filter_map(|e| e.next)
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        let outs: Vec<MultiUserOutcome> = cfg
            .trend_speeds
            .iter()
            .map(|&v| multiuser_round(&cfg, &scn, target, &entrants, v).unwrap())
            .collect();
        f(&outs, cells);
    }
}

#[test]
fn proposals_bounded_per_replication() {
    each_game(40, 50, |outs, cells| {
        for o in outs {
            assert!(o.proposals_total <= 50 * cells, "{} > 50·{cells}", o.proposals_total);
            assert!(o.proposals_target <= o.proposals_total);
            assert!(o.load <= 10);
        }
    });
}

#[test]
fn target_load_nonincreasing_in_speed() {
    let cfg = small(40);
    let res = run_experiment(Experiment::LoadVsUsers, &cfg).unwrap();
    for &u in &cfg.user_counts {
        let loads: Vec<f64> = cfg
            .trend_speeds
            .iter()
            .map(|&v| res.value("load", &[("users", u as f64), ("speed", v)]).unwrap())
            .collect();
        assert!(loads.windows(2).all(|w| w[1] <= w[0]), "U={u}: {loads:?}");
    }
}

#[test]
fn focal_overhead_near_reported_bound() {
    let cfg = small(100);
    let res = run_experiment(Experiment::OverheadVsUsers, &cfg).unwrap();
    let at = res.value("proposals_target", &[("users", 50.0), ("speed", 8.0)]).unwrap();
    assert!(at <= 20.0, "{at}");
}

#[test]
fn simulation_is_reproducible() {
    let cfg = ScenarioConfig {
        n_mues: 5,
        frame: 20.0,
        ..small(1)
    };
    for caching in [false, true] {
        let a = simulate(&cfg, 4, caching).unwrap();
        let b = simulate(&cfg, 4, caching).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.summary.len(), 5);
        assert!(a.events.windows(2).all(|w| w[0].time <= w[1].time));
        for s in &a.summary {
            assert!(s.failures <= s.handovers + 1);
            assert!(s.cache_segments >= 0.0 && s.cache_segments <= cfg.cache_capacity);
            if !caching {
                assert_eq!(s.cache_segments, 0.0);
            }
        }
    }
}
