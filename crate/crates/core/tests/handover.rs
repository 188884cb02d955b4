use mmcache::caching::CacheState;
use mmcache::geometry::{hof_probability, sample_chord, CellDisk};
use mmcache::handover::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MBS: CellId = 0;

/// Runs a measurement stream through the state machine, collecting every
/// event, HOF record and the phase after each step.
fn run(
    cfg: &HandoverConfig,
    start: HandoverState,
    stream: &[Vec<(CellId, f64)>],
    dt: f64,
) -> (HandoverState, Vec<HandoverEvent>, Vec<HofRecord>, Vec<Phase>) {
    let mut s = start;
    let (mut events, mut records, mut phases) = (Vec::new(), Vec::new(), Vec::new());
    for m in stream {
        let (next, out) = step(&s, m, dt, cfg, &AcceptAll).unwrap();
        s = next;
        events.extend(out.events);
        records.extend(out.records);
        phases.push(s.phase);
    }
    (s, events, records, phases)
}

fn attached_to_mbs(mue: usize) -> HandoverState {
    let mut s = HandoverState::new(mue, None);
    s.serving = Some(MBS);
    s
}

#[test]
fn indicator_examples() {
    assert_eq!(hof_indicator(0.5, 1.0), 1);
    assert_eq!(hof_indicator(1.0, 1.0), 0);
    let r = HofRecord::new(3, 1, 0.99, 1.0);
    assert!(r.failed);
}

#[test]
fn chord_tos_indicator_matches_formula() {
    let cell = CellDisk::new([0.0, 0.0], 30.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let hits: u32 = (0..n)
        .map(|_| u32::from(hof_indicator(sample_chord(&cell, &mut rng).length / 16.0, 1.0)))
        .sum();
    let freq = f64::from(hits) / f64::from(n);
    assert!((freq - 0.1718).abs() < 0.01, "{freq}");
}

#[test]
fn static_attach_after_ttt_and_execution() {
    for dt in [0.01, 0.05] {
        let cfg = HandoverConfig::new([1], Some(MBS));
        let stream = vec![vec![(1, -60.0)]; 40];
        let (s, events, _, _) = run(&cfg, HandoverState::new(0, None), &stream, dt);
        assert_eq!(s.serving, Some(1));
        assert_eq!(s.phase, Phase::SBSAttached);
        let done = events.iter().find(|e| e.kind == EventKind::HoComplete).unwrap();
        assert!((done.time - (cfg.ttt + cfg.execution_delay)).abs() < 1e-9, "dt {dt}: {}", done.time);
    }
}

#[test]
fn crossing_hof_frequency_matches_formula() {
    let (speed, radius, dt) = (16.0, 30.0, 0.01);
    let cell = CellDisk::new([0.0, 0.0], radius).unwrap();
    let cfg = HandoverConfig::new([1], Some(MBS));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let crossings = 10_000;
    let mut failures = 0;
    for i in 0..crossings {
        let chord = sample_chord(&cell, &mut rng).length;
        let inside = (chord / speed / dt).ceil() as usize;
        let mut stream = vec![vec![(1, -60.0)]; inside];
        stream.push(vec![]);
        let (_, _, records, _) = run(&cfg, attached_to_mbs(i), &stream, dt);
        assert_eq!(records.len(), 1);
        failures += usize::from(records[0].failed);
    }
    let freq = failures as f64 / crossings as f64;
    let exact = hof_probability(speed, 1.0, radius).unwrap().probability;
    assert!((freq - exact).abs() < 0.02, "{freq} vs {exact}");
}

#[test]
fn coasting_mutes_scans() {
    let mut cfg = HandoverConfig::new([1], Some(MBS));
    cfg.caching = true;
    let start = HandoverState::new(0, Some(CacheState::standard(5000.0)));
    let dt = 0.05;
    let stream = vec![vec![]; (8.0 / dt) as usize];
    let (_, events, _, phases) = run(&cfg, start, &stream, dt);
    assert_eq!(phases[0], Phase::Coasting);
    let scans: Vec<f64> = events.iter().filter(|e| e.kind == EventKind::Scan).map(|e| e.time).collect();
    // playback lasts 5 s and scanning resumes once less than ΔT is left
    let muted_until = 5.0 - cfg.ttt;
    assert!(scans.iter().all(|&t| t >= muted_until - dt - 1e-9), "{scans:?}");
    assert!(!scans.is_empty());
}

#[test]
fn periodic_scans_without_cache() {
    let cfg = HandoverConfig::new([1], Some(MBS));
    let dt = 0.05;
    let frame: f64 = 60.0;
    let stream = vec![vec![(1, -95.0)]; (frame / dt).round() as usize];
    let (_, events, _, _) = run(&cfg, attached_to_mbs(0), &stream, dt);
    let scans = events.iter().filter(|e| e.kind == EventKind::Scan).count() as f64;
    assert!((scans - frame / cfg.scan_interval).abs() <= 1.0, "{scans}");
}

#[test]
fn rejected_inputs() {
    let cfg = HandoverConfig::new([1], Some(MBS));
    let s = HandoverState::new(0, None);
    assert_eq!(step(&s, &[(7, -60.0)], 0.01, &cfg, &AcceptAll).unwrap_err(), HandoverError::UnknownCell(7));
    assert!(step(&s, &[], 0.0, &cfg, &AcceptAll).is_err());
    let mut bad = cfg.clone();
    bad.ttt = 0.0;
    assert!(bad.validate().is_err());
    assert!(HandoverConfig::new([0, 1], Some(0)).validate().is_err());
    assert!(cfg.validate().is_ok());
}

#[test]
fn allow_list_blocks_disallowed_cells() {
    let cfg = HandoverConfig::new([1, 2], Some(MBS));
    let policy = AllowList([2].into_iter().collect());
    let mut s = attached_to_mbs(0);
    for _ in 0..50 {
        s = step(&s, &[(1, -50.0), (2, -70.0)], 0.02, &cfg, &policy).unwrap().0;
    }
    assert_eq!(s.serving, Some(2));
}

#[test]
fn merge_keeps_per_mue_order() {
    let ev = |time, mue| HandoverEvent {
        time,
        mue,
        kind: EventKind::Scan,
        cell: None,
        tos: None,
    };
    let merged = merge_events(vec![vec![ev(0.0, 1), ev(1.0, 1)], vec![ev(0.5, 0), ev(1.0, 0)]]);
    let order: Vec<(f64, usize)> = merged.iter().map(|e| (e.time, e.mue)).collect();
    assert_eq!(order, [(0.0, 1), (0.5, 0), (1.0, 0), (1.0, 1)]);
}

fn rss_stream() -> impl Strategy<Value = Vec<Vec<(CellId, f64)>>> {
    prop::collection::vec(
        prop::collection::vec((1usize..4, -100.0f64..-40.0), 0..3).prop_map(|mut v| {
            v.sort_by_key(|(c, _)| *c);
            v.dedup_by_key(|(c, _)| *c);
            v
        }),
        1..300,
    )
}

proptest! {
    #[test]
    fn protocol_invariants(stream in rss_stream(), caching in any::<bool>(), segments in 0.0f64..1e4) {
        let mut cfg = HandoverConfig::new([1, 2, 3], Some(MBS));
        cfg.caching = caching;
        let start = HandoverState::new(0, Some(CacheState::standard(segments)));
        let dt = 0.02;
        let mut s = start.clone();
        let mut ttt_started: Option<f64> = None;
        let mut prev = s.phase;
        for m in &stream {
            let (next, out) = step(&s, m, dt, &cfg, &AcceptAll).unwrap();
            prop_assert!(next.ttt_elapsed >= 0.0 && next.ttt_elapsed <= cfg.ttt + 1e-12);
            if next.phase == Phase::Executing {
                prop_assert!(matches!(prev, Phase::TTTWait | Phase::Executing));
            }
            for e in &out.events {
                match e.kind {
                    EventKind::TttStart => ttt_started = Some(e.time),
                    EventKind::HoTrigger => {
                        let t0 = ttt_started.expect("trigger without TTT");
                        prop_assert!(e.time - t0 >= cfg.ttt - 1e-9);
                    }
                    _ => {}
                }
            }
            for r in &out.records {
                prop_assert_eq!(r.failed, r.tos < cfg.t_mts);
            }
            if let Some(c) = next.cache {
                prop_assert!(c.segments >= 0.0 && c.segments <= c.capacity);
            }
            prev = next.phase;
            s = next;
        }
        let again = run(&cfg, start.clone(), &stream, dt);
        let once = run(&cfg, start, &stream, dt);
        prop_assert_eq!(again.1, once.1);
        prop_assert_eq!(again.0, once.0);
    }
}
