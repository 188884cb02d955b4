//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::f64::consts::{PI, TAU};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mmcache::geometry::{beam_coverage_probability, caching_duration_cdf, BeamGeometry, Pose};
use mmcache::matching::{
    dynamic_match_in, example_instance, find_blocking_pairs, is_dynamically_stable, Game, PlayerId,
};
use mmcache::oracle::{run_suite, Check, Suite};
use mmcache::scenario::{caching_rate, run_experiment, Experiment, ExperimentResult, ScenarioConfig};

const SEED: u64 = 1;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn suite_verdict(suite: Suite, extra: Vec<(bool, String)>) -> Verdict {
    let checks: Vec<Check> = match run_suite(suite, SEED) {
        Ok(c) => c,
        Err(e) => return verdict(false, format!("suite error: {e}")),
    };
    let mut failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} (error {:e} > {:e})", c.case, c.error, c.tolerance))
        .collect();
    let worst = checks.iter().map(|c| c.error).fold(0.0, f64::max);
    failed.extend(extra.into_iter().filter(|(ok, _)| !ok).map(|(_, m)| m));
    if failed.is_empty() {
        verdict(true, format!("{} checks, worst error {worst:e}", checks.len()))
    } else {
        verdict(false, failed.join("; "))
    }
}

fn within(elapsed: Duration, budget_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < budget_s, format!("runtime {s:.1} s over {budget_s} s budget"))
}

fn coverage() -> Verdict {
    let start = Instant::now();
    let anchor = beam_coverage_probability(3, TAU / 3.0).unwrap_or(f64::NAN);
    let v = suite_verdict(
        Suite::Coverage,
        vec![((anchor - 1.0).abs() < 1e-12, format!("anchor P(3, 2pi/3) = {anchor}"))],
    );
    with_budget(v, start.elapsed(), 5.0)
}

fn with_budget(v: Verdict, elapsed: Duration, budget_s: f64) -> Verdict {
    let (ok, msg) = within(elapsed, budget_s);
    if ok {
        verdict(v.passed, format!("{}, {:.2} s", v.detail, elapsed.as_secs_f64()))
    } else {
        verdict(false, format!("{}; {msg}", v.detail))
    }
}

fn cdf() -> Verdict {
    let start = Instant::now();
    let mut extra = Vec::new();
    for r in [10.0, 20.0, 40.0] {
        let pose = Pose::new(r, 0.0, PI / 2.0, 16.0);
        let monotone = BeamGeometry::from_entry_pose([0.0, 0.0], 3, 10f64.to_radians(), &pose)
            .ok()
            .and_then(|beam| {
                let grid: Option<Vec<f64>> = (0..1000)
                    .map(|i| caching_duration_cdf(&pose, &beam, 5.0 * i as f64 / 999.0).ok())
                    .collect();
                grid
            })
            .is_some_and(|g| g.windows(2).all(|w| w[1] >= w[0]) && g.iter().all(|p| (0.0..=1.0).contains(p)));
        extra.push((monotone, format!("cdf not monotone at r = {r}")));
    }
    let v = suite_verdict(Suite::Cdf, extra);
    with_budget(v, start.elapsed(), 10.0)
}

fn rate_closed_form() -> Verdict {
    let start = Instant::now();
    let v = suite_verdict(Suite::Rate, Vec::new());
    with_budget(v, start.elapsed(), 10.0)
}

fn rate_anchors() -> Verdict {
    let cfg = ScenarioConfig::default();
    let headings: Vec<f64> = cfg.rate_headings_deg.iter().map(|h| h.to_radians()).collect();
    let sweep = |los: bool| -> Option<Vec<f64>> {
        headings.iter().map(|&h| caching_rate(&cfg, 20.0, h, los).ok()).collect()
    };
    let (Some(los), Some(nlos)) = (sweep(true), sweep(false)) else {
        return verdict(false, "rate evaluation failed");
    };
    let los_min = los.iter().copied().fold(f64::INFINITY, f64::min) / 1e9;
    let nlos_max = nlos.iter().copied().fold(0.0, f64::max) / 1e9;
    verdict(
        los_min > 10.0 && (1.0..=4.0).contains(&nlos_max),
        format!("LoS at 20 m >= {los_min:.2} Gbit/s, NLoS peak {nlos_max:.2} Gbit/s"),
    )
}

fn hof_geometry() -> Verdict {
    suite_verdict(Suite::Hof, Vec::new())
}

fn single_user() -> Verdict {
    let cfg = ScenarioConfig { seed: SEED, ..ScenarioConfig::default() };
    let start = Instant::now();
    let res = match run_experiment(Experiment::HofVsSpeed, &cfg) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("experiment failed: {e}")),
    };
    let elapsed = start.elapsed();
    let kmh = res.column("speed_kmh").unwrap_or_default();
    let red = res.column("reduction").unwrap_or_default();
    let Some(i) = kmh.iter().position(|k| (k - 60.0).abs() < 1e-9) else {
        return verdict(false, "no 60 km/h row");
    };
    let v = verdict(
        red[i] >= 0.35,
        format!("reduction {:.1}% at 60 km/h over {} replications", 100.0 * red[i], res.replication_count),
    );
    with_budget(v, elapsed, 120.0)
}

fn stability() -> Verdict {
    let start = Instant::now();
    let v = suite_verdict(Suite::Stability, Vec::new());
    with_budget(v, start.elapsed(), 60.0)
}

fn example_golden() -> Verdict {
    let mut problems = Vec::new();
    let (inst, util) = example_instance(0.02);
    let game = match Game::with_utilities(&inst, util) {
        Ok(g) => g,
        Err(e) => return verdict(false, format!("example rejected: {e}")),
    };
    let p = &game.profiles;
    let expect: [(&str, Vec<String>, &[&str]); 5] = [
        ("u1", p.mues[0].labels(), &["k1k0", "k1u1", "u1k0", "u1u1"]),
        ("u2", p.mues[1].labels(), &["k1u2", "u2k2", "u2u2"]),
        ("k1", p.sbss[0].labels(), &["u1k1", "u2k1", "k1k1"]),
        ("k2", p.sbss[1].labels(), &["k2u2", "k2k2"]),
        ("k0", p.mbs.labels(), &["k0u1", "k0k0"]),
    ];
    for (who, got, want) in expect {
        if got != want {
            problems.push(format!("profile {who} is {got:?}"));
        }
    }
    let out = dynamic_match_in(&game);
    let plans = [
        out.matching.plan(0).label(PlayerId::mue(0)),
        out.matching.plan(1).label(PlayerId::mue(1)),
    ];
    if plans != ["k1k0", "u2k2"] || !is_dynamically_stable(&game, &out.matching) {
        problems.push(format!("dynamic outcome {plans:?}"));
    }
    let blocks = find_blocking_pairs(&game, &out.ex_ante, 2);
    if !blocks.iter().any(|v| v.mue == Some(0) && v.bs == Some(PlayerId::mbs())) {
        problems.push("ex ante (u1, k0) block not reported".into());
    }

    let (inst, util) = example_instance(0.08);
    match Game::with_utilities(&inst, util) {
        Ok(g) => {
            let out = dynamic_match_in(&g);
            let plans = [
                out.matching.plan(0).label(PlayerId::mue(0)),
                out.matching.plan(1).label(PlayerId::mue(1)),
            ];
            if plans != ["k1u1", "u2k2"] || out.matching != out.ex_ante {
                problems.push(format!("gate-off variant gives {plans:?}"));
            }
        }
        Err(e) => problems.push(format!("gate-off variant rejected: {e}")),
    }
    if problems.is_empty() {
        verdict(true, "profiles, outcome, period-2 block and gate-off variant match")
    } else {
        verdict(false, problems.join("; "))
    }
}

fn ilp() -> Verdict {
    let start = Instant::now();
    let v = suite_verdict(Suite::Ilp, Vec::new());
    with_budget(v, start.elapsed(), 60.0)
}

fn run_all(cfg: &ScenarioConfig) -> Result<Vec<ExperimentResult>, String> {
    Experiment::ALL
        .iter()
        .map(|&e| run_experiment(e, cfg).map_err(|err| format!("{e}: {err}")))
        .collect()
}

fn find(all: &[ExperimentResult], exp: Experiment) -> &ExperimentResult {
    all.iter().find(|r| r.name == exp.name()).expect("experiment present")
}

fn multi_user_trends(all: &[ExperimentResult], elapsed: Duration) -> Vec<(&'static str, Verdict)> {
    let cfg = ScenarioConfig::default();

    let hof = find(all, Experiment::HofMultiuser);
    let speeds = hof.column("speed").unwrap_or_default();
    let matched = hof.column("hof_matched").unwrap_or_default();
    let tail: Vec<f64> = speeds
        .iter()
        .zip(&matched)
        .filter(|(v, _)| **v >= 8.0)
        .map(|(_, h)| *h)
        .collect();
    let declines = tail.len() > 1 && tail.windows(2).all(|w| w[1] <= w[0]);
    let a = verdict(
        declines,
        format!(
            "matched HOF {} from v = 8 to {}",
            tail.iter().map(|h| format!("{h:.4}")).collect::<Vec<_>>().join(" > "),
            speeds.last().copied().unwrap_or(0.0)
        ),
    );

    let load = find(all, Experiment::LoadVsUsers);
    let (l8, l10) = (
        load.value("load", &[("users", 40.0), ("speed", 8.0)]),
        load.value("load", &[("users", 40.0), ("speed", 10.0)]),
    );
    let b = match (l8, l10) {
        (Some(l8), Some(l10)) => {
            let drop = 1.0 - l10 / l8;
            verdict(drop >= 0.30, format!("load {l8:.2} -> {l10:.2} at U = 40, drop {:.0}%", 100.0 * drop))
        }
        _ => verdict(false, "U = 40 load rows missing"),
    };

    let energy = find(all, Experiment::EnergyVsUsers);
    let mut ok = true;
    let mut parts = Vec::new();
    for (v, target) in [(8.0, 80.0), (10.0, 52.0), (12.0, 29.0)] {
        let f = [("users", 50.0), ("speed", v)];
        match (energy.value("savings", &f), energy.value("baseline_energy", &f)) {
            (Some(s), Some(base)) => {
                let hit = (s - target).abs() <= 15.0 && (base - 50.0 * cfg.energy_per_scan * 1e3).abs() < 1e-9;
                ok &= hit;
                parts.push(format!("v = {v}: {s:.0}% (target {target}%), baseline {base} mJ"));
            }
            _ => {
                ok = false;
                parts.push(format!("v = {v}: missing"));
            }
        }
    }
    let c = verdict(ok, parts.join(", "));

    let over = find(all, Experiment::OverheadVsUsers);
    let d = match over.value("proposals_target", &[("users", 50.0), ("speed", 8.0)]) {
        Some(n) => verdict(n <= 20.0, format!("{n:.1} proposals to the target at U = 50, v = 8")),
        None => verdict(false, "U = 50, v = 8 row missing"),
    };
    let (fast, msg) = within(elapsed, 600.0);
    let runtime = verdict(fast, if fast { format!("full reproduce {:.1} s", elapsed.as_secs_f64()) } else { msg });
    vec![("10a", a), ("10b", b), ("10c", c), ("10d", d), ("10 runtime", runtime)]
}

fn csv_bytes(all: &[ExperimentResult]) -> Vec<Vec<u8>> {
    all.iter()
        .map(|r| {
            let mut buf = Vec::new();
            r.write_csv(&mut buf).expect("csv to memory");
            buf
        })
        .collect()
}

fn main() -> ExitCode {
    let mut results: Vec<(String, Verdict)> = Vec::new();
    let mut record = |name: &str, v: Verdict| {
        println!("{} criterion {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        results.push((name.to_string(), v));
    };

    record("1", coverage());
    record("2", cdf());
    record("3", rate_closed_form());
    record("4", rate_anchors());
    record("5", hof_geometry());
    record("6", single_user());
    record("7", stability());
    record("8", example_golden());
    record("9", ilp());

    let cfg = ScenarioConfig { seed: SEED, ..ScenarioConfig::default() };
    let start = Instant::now();
    match run_all(&cfg) {
        Ok(first) => {
            let elapsed = start.elapsed();
            for (name, v) in multi_user_trends(&first, elapsed) {
                record(name, v);
            }
            let second = run_all(&cfg);
            let same = second.as_ref().is_ok_and(|s| csv_bytes(s) == csv_bytes(&first));
            record("11", verdict(same, format!("{} experiment CSVs compared byte for byte", first.len())));
        }
        Err(e) => {
            record("10", verdict(false, e.clone()));
            record("11", verdict(false, e));
        }
    }

    let failed: Vec<&str> = results.iter().filter(|(_, v)| !v.passed).map(|(n, _)| n.as_str()).collect();
    println!("{}/{} acceptance checks passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failing: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
