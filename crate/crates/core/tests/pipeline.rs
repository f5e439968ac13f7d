use std::collections::HashMap;

use orbitfl_core::cu;
use orbitfl_core::fl::Weighting;
use orbitfl_core::orbital::{gs_position_at, is_visible_gs, propagate, SatelliteId, VisibilityPattern};
use orbitfl_core::ring::{Endpoint, HopKind};
use orbitfl_core::scenario::{preset, Mode, ScenarioFile};
use orbitfl_core::sim::{self, MetricsLog, World};

fn small(name: &str, slots: u32, horizon_s: f64) -> ScenarioFile {
    let mut sc = preset(name).unwrap();
    sc.simulation.slots = slots;
    sc.simulation.horizon_s = horizon_s;
    sc
}

fn first_rise(p: &VisibilityPattern, t: f64) -> f64 {
    for iv in &p.intervals {
        if iv.rise_s <= t && t <= iv.set_s {
            return t;
        }
        if iv.rise_s > t {
            return iv.rise_s;
        }
    }
    panic!("no rise after {t}");
}

#[test]
fn schedule_matches_straight_line_rederivation() {
    for name in ["bremen_delta", "saopaulo_delta"] {
        let sc = small(name, 4, 4.0 * 86_400.0);
        let world = World::build(&sc).unwrap();
        let log = sim::run_world(&sc, &world, None).unwrap();
        let mut t_prev = 0.0;
        for rec in &log.slots {
            let mut t_n = f64::NEG_INFINITY;
            for (c, t) in world.clusters.iter().zip(&world.timings) {
                let rise = first_rise(&c.pattern, t_prev);
                let demand = rise + t.gs_to_cluster_s + 2.0 * t.isl_round_s + t.epoch_s;
                let start = if c.pattern.is_visible(demand) { demand } else { first_rise(&c.pattern, demand) };
                let feasible = start + t.cluster_to_gs_s;
                let got = &rec.clusters[c.orbit - 1];
                assert_eq!(got.rise_s, rise);
                assert!((got.demand_s - demand).abs() < 1e-9);
                assert!((got.feasible_s - feasible).abs() < 1e-9);
                t_n = t_n.max(feasible);
            }
            assert!((rec.t_n_s - t_n).abs() < 1e-9, "slot {}", rec.slot);
            assert_eq!(rec.t_prev_s, t_prev);
            t_prev = rec.t_n_s;
        }
    }
}

fn check_causal(log: &MetricsLog) {
    for w in log.events.windows(2) {
        assert!(w[0].hop.time_s <= w[1].hop.time_s);
    }
    let mut first_receipt: HashMap<(u32, SatelliteId), f64> = HashMap::new();
    for e in &log.events {
        assert!(e.hop.sent_s <= e.hop.time_s);
        if let Endpoint::Sat(s) = e.hop.to {
            let r = first_receipt.entry((e.slot, s)).or_insert(f64::INFINITY);
            *r = r.min(e.hop.time_s);
        }
    }
    for e in &log.events {
        if let Endpoint::Sat(s) = e.hop.from {
            let got = first_receipt.get(&(e.slot, s)).copied().unwrap_or(f64::INFINITY);
            assert!(got <= e.hop.sent_s, "{s} sends at {} before receiving anything", e.hop.sent_s);
        }
    }
    for rec in &log.slots {
        let down = log
            .events
            .iter()
            .filter(|e| e.slot == rec.slot && e.hop.kind == HopKind::Downlink)
            .count();
        assert_eq!(down, log.clusters);
        let up: Vec<f64> = log
            .events
            .iter()
            .filter(|e| e.slot == rec.slot && e.hop.to == Endpoint::Gs)
            .map(|e| e.hop.time_s)
            .collect();
        assert_eq!(up.len(), log.clusters);
        assert!(up.iter().all(|&a| a <= rec.t_n_s));
    }
}

#[test]
fn event_log_is_causal() {
    for mode in [Mode::Scheduled, Mode::Fixed(2)] {
        let mut sc = small("bremen_star", 3, 4.0 * 86_400.0);
        sc.simulation.mode = mode;
        let world = World::build(&sc).unwrap();
        check_causal(&sim::run_world(&sc, &world, None).unwrap());
    }
}

#[test]
fn fixed_budget_within_schedule_updates_no_later() {
    for name in ["bremen_delta", "saopaulo_delta", "bremen_star"] {
        let mut sc = small(name, 1, 3.0 * 86_400.0);
        let world = World::build(&sc).unwrap();
        let sched = sim::run_world(&sc, &world, None).unwrap();
        let min_i = *sched.rows[0].epochs.iter().min().unwrap();
        for i in 1..=min_i {
            sc.simulation.mode = Mode::Fixed(i);
            let fixed = sim::run_world(&sc, &world, None).unwrap();
            assert!(
                fixed.rows[0].t_n_s <= sched.rows[0].t_n_s,
                "{name} fixed:{i}: {} > {}",
                fixed.rows[0].t_n_s,
                sched.rows[0].t_n_s
            );
        }
    }
}

#[test]
fn contact_instant_is_visible() {
    for name in ["bremen_delta", "saopaulo_delta", "bremen_star"] {
        let sc = small(name, 4, 4.0 * 86_400.0);
        let world = World::build(&sc).unwrap();
        let log = sim::run_world(&sc, &world, None).unwrap();
        for rec in &log.slots {
            for p in &rec.plans {
                let c = &world.clusters[p.cluster - 1];
                let contact = p.t_x_s + p.t_a_s.unwrap();
                assert!(c.pattern.is_visible(contact));
                assert!(c.member(p.sink.unwrap()).unwrap().is_visible(contact));
                assert!(p.raw_epochs.unwrap() >= 1, "{name} slot {} cluster {}", rec.slot, p.cluster);
            }
        }
    }
}

#[test]
fn sink_matches_one_second_scan() {
    let sc = small("bremen_delta", 1, 86_400.0);
    let world = World::build(&sc).unwrap();
    let log = sim::run_world(&sc, &world, None).unwrap();
    let config = sc.constellation();
    let gs = sc.ground_station().unwrap();
    let el = sc.ground_station.min_elevation_deg;
    let visible = |sat, t: f64| {
        let s = propagate(&config, sat, t).unwrap();
        is_visible_gs(&s, &gs_position_at(&config, &gs, t), el).unwrap()
    };
    let rec = &log.slots[0];
    for p in &rec.plans {
        let contact = p.t_x_s + p.t_a_s.unwrap();
        let at = contact.floor();
        let mut best: Option<(f64, SatelliteId)> = None;
        for sat in config.members(p.cluster).unwrap() {
            if !visible(sat, at) {
                continue;
            }
            let mut t = at;
            while visible(sat, t + 1.0) {
                t += 1.0;
            }
            let remaining = t - at;
            if best.is_none_or(|(r, _)| remaining > r + 2.0) {
                best = Some((remaining, sat));
            }
        }
        assert_eq!(p.sink, best.map(|b| b.1), "cluster {}", p.cluster);
        assert_eq!(cu::select_sink(&world.clusters[p.cluster - 1], contact).ok(), p.sink);
    }
}

#[test]
fn runs_are_deterministic() {
    let mut sc = small("bremen_delta", 2, 2.0 * 86_400.0);
    sc.learning.train_samples = 800;
    sc.learning.test_samples = 200;
    let a = sim::run(&sc).unwrap();
    let b = sim::run(&sc).unwrap();
    assert_eq!(a, b);
    sc.learning.weighting = Weighting::PreWeighted;
    let c = sim::run(&sc).unwrap();
    for (x, y) in a.rows.iter().zip(&c.rows) {
        assert!((x.accuracy - y.accuracy).abs() < 1e-9);
        assert!((x.loss - y.loss).abs() < 1e-9);
    }
}

#[test]
fn compare_is_reflexive_and_targets_match_csv() {
    let mut sc = small("bremen_delta", 3, 3.0 * 86_400.0);
    sc.learning.train_samples = 800;
    sc.learning.test_samples = 200;
    let out = sim::compare(&[("a".into(), sc.clone()), ("b".into(), sc)]).unwrap();
    assert_eq!(out[0].1, out[1].1);

    let log = &out[0].1;
    let mut buf = Vec::new();
    sim::write_metrics_csv(&mut buf, log).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    for target in [0.1, 0.2, 0.3, 0.4, 0.5] {
        let from_csv = rows.iter().find(|r| r.1 >= target).map(|r| r.0);
        let direct = log.time_to_target(target);
        match (from_csv, direct) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 5e-4),
            (a, b) => assert_eq!(a.is_some(), b.is_some(), "target {target}"),
        }
    }
}

#[test]
fn mismatched_learning_setups_refuse_to_compare() {
    let a = preset("bremen_delta").unwrap();
    let mut b = a.clone();
    b.simulation.seed += 1;
    assert!(sim::compare(&[("a".into(), a), ("b".into(), b)]).is_err());
}
