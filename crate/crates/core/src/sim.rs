//! Event-driven orchestration of whole training runs.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cu::{self, ClusterPlan};
use crate::des::EventQueue;
use crate::error::{Error, Result};
use crate::fl::{self, Contribution, Dataset, LogisticModel, SyntheticTask};
use crate::gu::{self, ClusterInput, ClusterSchedule, ClusterTiming};
use crate::linkmodel::{ring_hop_timing, worst_case_gs_timing};
use crate::orbital::{satellite_pattern, ClusterVisibility, SatelliteId};
use crate::ring::{self, Endpoint, HopEvent, HopKind, LocalUpdate, RingTopology};
use crate::scenario::{Mode, ScenarioFile};

/// Geometry and link timing of every cluster, fixed for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub clusters: Vec<ClusterVisibility>,
    pub timings: Vec<ClusterTiming>,
    pub rings: Vec<RingTopology>,
}

impl World {
    pub fn build(sc: &ScenarioFile) -> Result<World> {
        sc.validate()?;
        let config = sc.constellation();
        let gs = sc.ground_station()?;
        let query = sc.query();
        let budget = sc.budget()?;
        let bits = sc.payload_bits() as f64;
        let sats: Vec<SatelliteId> = config.satellites().collect();
        let patterns = sats
            .par_iter()
            .map(|&s| satellite_pattern(&config, s, &gs, &query))
            .collect::<Result<Vec<_>>>()?;
        let k = sc.constellation.sats_per_orbit;
        let mut clusters = Vec::new();
        let mut timings = Vec::new();
        let mut rings = Vec::new();
        for (i, members) in patterns.chunks(k).enumerate() {
            let p = i + 1;
            let cluster = ClusterVisibility::from_members(p, members.to_vec())?;
            let plane = config.plane(p)?;
            let hop = ring_hop_timing(plane, &budget, bits)?.transfer_s;
            let gsl = worst_case_gs_timing(&config, p, &cluster.pattern, query.min_elevation_deg, &budget, bits)?;
            timings.push(ClusterTiming {
                gs_to_cluster_s: gsl.gs_to_cluster.transfer_s,
                cluster_to_gs_s: gsl.cluster_to_gs.transfer_s,
                isl_round_s: cu::isl_round_time(k, hop),
                min_learning_s: sc.learning.epoch_s,
                epoch_s: sc.learning.epoch_s,
            });
            rings.push(RingTopology::new(p, config.members(p)?, hop)?);
            clusters.push(cluster);
        }
        Ok(World { clusters, timings, rings })
    }

    pub fn horizon_s(&self) -> f64 {
        self.clusters.first().map(|c| c.pattern.horizon_s).unwrap_or(0.0)
    }
}

/// Datasets and model shared by all runs of a scenario seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub model: LogisticModel,
    /// One dataset per satellite, orbit-major.
    pub clients: Vec<Dataset>,
    pub test: Dataset,
    pub sats_per_orbit: usize,
}

impl Learner {
    pub fn build(sc: &ScenarioFile) -> Result<Learner> {
        let l = &sc.learning;
        let seed = sc.simulation.seed;
        let task = SyntheticTask::new(l.classes, l.features, l.class_separation, l.noise_std, fl::derive_seed(seed, &[1]))?;
        let train = task.sample(l.train_samples, fl::derive_seed(seed, &[2]));
        let test = task.sample(l.test_samples, fl::derive_seed(seed, &[3]));
        let k = sc.constellation.sats_per_orbit;
        let clients = fl::dirichlet_partition(&train, sc.constellation.orbits * k, l.dirichlet_alpha, fl::derive_seed(seed, &[4]))?;
        Ok(Learner {
            model: LogisticModel::new(l.classes, l.features),
            clients,
            test,
            sats_per_orbit: k,
        })
    }

    pub fn data(&self, sat: SatelliteId) -> &Dataset {
        &self.clients[(sat.orbit - 1) * self.sats_per_orbit + sat.slot - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub slot: u32,
    pub t_n_s: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub epochs: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub slot: u32,
    #[serde(flatten)]
    pub hop: HopEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub cluster: usize,
    pub rise_s: f64,
    pub t_x_s: f64,
    /// Budget announced to the cluster; absent in fixed mode.
    pub t_a_s: Option<f64>,
    pub epochs: u32,
    pub raw_epochs: Option<i64>,
    pub source: SatelliteId,
    pub sink: Option<SatelliteId>,
    pub arrival_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: u32,
    pub t_prev_s: f64,
    pub t_n_s: f64,
    pub clusters: Vec<ClusterSchedule>,
    pub plans: Vec<PlanRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub mode: Mode,
    pub clusters: usize,
    pub rows: Vec<MetricsRow>,
    pub slots: Vec<SlotRecord>,
    pub events: Vec<LoggedEvent>,
    /// Set when the visibility horizon ran out before all slots completed.
    pub truncated: Option<String>,
}

impl MetricsLog {
    /// First update instant at which accuracy reaches `target`.
    pub fn time_to_target(&self, target: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.accuracy >= target).map(|r| r.t_n_s)
    }
}

#[derive(Debug, Clone, Copy)]
enum Step {
    GlobalSend(usize),
    SourceReceive(usize),
    TrainingDone(usize),
    AggregateReady(usize),
    UplinkArrive(usize),
    GlobalUpdate,
}

struct ClusterRun {
    rise_s: f64,
    t_x_s: f64,
    epochs: u32,
    source: SatelliteId,
    plan: Option<ClusterPlan>,
    sink: Option<SatelliteId>,
    locals: Vec<LocalUpdate>,
    collected: Option<ring::Collected>,
    arrival_s: Option<f64>,
}

/// Runs `sc` end to end, building geometry and data from the scenario.
pub fn run(sc: &ScenarioFile) -> Result<MetricsLog> {
    let world = World::build(sc)?;
    let learner = Learner::build(sc)?;
    run_world(sc, &world, Some(&learner))
}

/// Runs `sc` on precomputed geometry. Without a learner no training takes
/// place and the metrics carry NaN accuracy and loss.
pub fn run_world(sc: &ScenarioFile, world: &World, learner: Option<&Learner>) -> Result<MetricsLog> {
    let mut sim = Sim {
        sc,
        world,
        learner,
        queue: EventQueue::new(),
        log: MetricsLog {
            mode: sc.simulation.mode,
            clusters: world.clusters.len(),
            rows: Vec::new(),
            slots: Vec::new(),
            events: Vec::new(),
            truncated: None,
        },
        global: learner.map(|l| l.model.zeros()).unwrap_or_default(),
    };
    let mut t_prev = 0.0;
    for slot in 1..=sc.simulation.slots {
        match sim.slot(slot, t_prev) {
            Ok(t_n) => t_prev = t_n,
            Err(e @ Error::HorizonExhausted { .. }) if slot > 1 => {
                log::warn!("stopping after slot {}: {e}", slot - 1);
                sim.log.truncated = Some(format!("slot {slot} not completed: {e}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let mut log = sim.log;
    log.events.sort_by(|a, b| a.hop.time_s.total_cmp(&b.hop.time_s));
    Ok(log)
}

struct Sim<'a> {
    sc: &'a ScenarioFile,
    world: &'a World,
    learner: Option<&'a Learner>,
    queue: EventQueue<Step>,
    log: MetricsLog,
    global: Vec<f64>,
}

impl Sim<'_> {
    fn emit(&mut self, slot: u32, hop: HopEvent) {
        self.log.events.push(LoggedEvent { slot, hop });
    }

    fn slot(&mut self, slot: u32, t_prev: f64) -> Result<f64> {
        let w = self.world;
        let mode = self.sc.simulation.mode;
        let bits = self.sc.payload_bits();
        let p_count = w.clusters.len();

        let (deadline, schedules) = match mode {
            Mode::Scheduled => {
                let inputs: Vec<ClusterInput> = w
                    .clusters
                    .iter()
                    .zip(&w.timings)
                    .map(|(c, t)| ClusterInput {
                        cluster: c.orbit,
                        pattern: &c.pattern,
                        timing: *t,
                    })
                    .collect();
                let s = gu::next_global_update(slot, &inputs, t_prev, self.sc.feasibility())?;
                (Some(s.global_update_s), s.clusters)
            }
            Mode::Fixed(_) => (None, Vec::new()),
        };

        let mut runs = Vec::with_capacity(p_count);
        for (i, (c, t)) in w.clusters.iter().zip(&w.timings).enumerate() {
            let rise_s = match deadline {
                Some(_) => schedules[i].rise_s,
                None => gu::first_rise(&c.pattern, t_prev)?,
            };
            let plan = match deadline {
                Some(t_n) => Some(cu::plan_cluster(slot, c, t, rise_s, t_n)?),
                None => None,
            };
            let source = match &plan {
                Some(p) => p.source,
                None => cu::select_sink(c, rise_s)?,
            };
            runs.push(ClusterRun {
                rise_s,
                t_x_s: rise_s + t.gs_to_cluster_s,
                epochs: match (&plan, mode) {
                    (Some(p), _) => p.epochs,
                    (None, Mode::Fixed(i)) => i,
                    (None, Mode::Scheduled) => unreachable!("scheduled runs always plan"),
                },
                sink: plan.as_ref().map(|p| p.sink),
                source,
                plan,
                locals: Vec::new(),
                collected: None,
                arrival_s: None,
            });
            self.queue.schedule(rise_s, Step::GlobalSend(i))?;
        }

        let mut arrived = 0;
        let t_n = loop {
            let (now, step) = self
                .queue
                .pop()
                .ok_or_else(|| Error::Protocol(format!("event queue drained in slot {slot}")))?;
            match step {
                Step::GlobalSend(i) => {
                    let r = &runs[i];
                    let hop = HopEvent {
                        time_s: r.t_x_s,
                        sent_s: now,
                        from: Endpoint::Gs,
                        to: Endpoint::Sat(r.source),
                        kind: HopKind::Downlink,
                        payload_bits: bits,
                        cluster: w.clusters[i].orbit,
                    };
                    self.emit(slot, hop);
                    self.queue.schedule(r.t_x_s, Step::SourceReceive(i))?;
                }
                Step::SourceReceive(i) => {
                    let ring = &w.rings[i];
                    let (events, _) = ring::distribute(ring, runs[i].source, bits, now)?;
                    let mut receipt: Vec<(SatelliteId, f64)> = ring.sats.iter().map(|&s| (s, f64::INFINITY)).collect();
                    for e in &events {
                        if let Endpoint::Sat(to) = e.to {
                            let r = &mut receipt[ring.position(to)?].1;
                            *r = r.min(e.time_s);
                        }
                    }
                    receipt[ring.position(runs[i].source)?].1 = now;
                    for e in events {
                        self.emit(slot, e);
                    }
                    let locals = self.train(slot, &receipt, runs[i].epochs)?;
                    let done = locals.iter().map(|l| l.ready_s).fold(now, f64::max);
                    runs[i].locals = locals;
                    self.queue.schedule(done, Step::TrainingDone(i))?;
                }
                Step::TrainingDone(i) => {
                    let t = &w.timings[i];
                    let sink = match runs[i].sink {
                        Some(s) => s,
                        None => {
                            // earliest contact a finished collection could make
                            let probe = now + t.isl_round_s + t.cluster_to_gs_s;
                            let contact = w.clusters[i].pattern.first_visible_at_or_after(probe).ok_or(
                                Error::HorizonExhausted {
                                    after_s: probe,
                                    horizon_s: w.horizon_s(),
                                },
                            )?;
                            cu::select_sink(&w.clusters[i], contact)?
                        }
                    };
                    runs[i].sink = Some(sink);
                    let c = ring::collect(&w.rings[i], sink, &runs[i].locals, runs[i].t_x_s, bits)?;
                    for e in &c.events {
                        self.emit(slot, *e);
                    }
                    self.queue.schedule(c.completion_s, Step::AggregateReady(i))?;
                    runs[i].collected = Some(c);
                }
                Step::AggregateReady(i) => {
                    let sink = runs[i].sink.expect("sink chosen before collection");
                    let up = w.timings[i].cluster_to_gs_s;
                    let cluster = &w.clusters[i];
                    let sink_pat = cluster
                        .member(sink)
                        .ok_or_else(|| Error::Protocol(format!("no visibility pattern for satellite {sink}")))?;
                    let handoff = if self.sc.simulation.fallback {
                        ring::fallback_handoff(&w.rings[i], sink, cluster, now, up, bits)?
                    } else {
                        None
                    };
                    let arrival = match handoff {
                        Some(h) => {
                            for e in h.events {
                                self.emit(slot, e);
                            }
                            h.arrival_s
                        }
                        None => {
                            let a = ring::uplink_arrival(sink_pat, now, up).ok_or(Error::HorizonExhausted {
                                after_s: now + up,
                                horizon_s: w.horizon_s(),
                            })?;
                            self.emit(
                                slot,
                                HopEvent {
                                    time_s: a,
                                    sent_s: a - up,
                                    from: Endpoint::Sat(sink),
                                    to: Endpoint::Gs,
                                    kind: HopKind::Uplink,
                                    payload_bits: bits,
                                    cluster: cluster.orbit,
                                },
                            );
                            a
                        }
                    };
                    self.queue.schedule(arrival, Step::UplinkArrive(i))?;
                }
                Step::UplinkArrive(i) => {
                    if let Some(t_n) = deadline {
                        if now > t_n {
                            return Err(Error::DeadlineViolation {
                                slot,
                                cluster: w.clusters[i].orbit,
                                arrival_s: now,
                                deadline_s: t_n,
                            });
                        }
                    }
                    runs[i].arrival_s = Some(now);
                    arrived += 1;
                    if arrived == p_count {
                        self.queue.schedule(deadline.unwrap_or(now), Step::GlobalUpdate)?;
                    }
                }
                Step::GlobalUpdate => break now,
            }
        };

        let (accuracy, loss) = self.aggregate(&runs)?;
        self.log.rows.push(MetricsRow {
            slot,
            t_n_s: t_n,
            accuracy,
            loss,
            epochs: runs.iter().map(|r| r.epochs).collect(),
        });
        self.log.slots.push(SlotRecord {
            slot,
            t_prev_s: t_prev,
            t_n_s: t_n,
            clusters: schedules,
            plans: runs
                .iter()
                .zip(&w.clusters)
                .map(|(r, c)| PlanRecord {
                    cluster: c.orbit,
                    rise_s: r.rise_s,
                    t_x_s: r.t_x_s,
                    t_a_s: r.plan.as_ref().map(|p| p.t_a),
                    epochs: r.epochs,
                    raw_epochs: r.plan.as_ref().map(|p| p.raw_epochs),
                    source: r.source,
                    sink: r.sink,
                    arrival_s: r.arrival_s,
                })
                .collect(),
        });
        Ok(t_n)
    }

    /// Local training of every ring member, each starting when it first holds
    /// the global model.
    fn train(&self, slot: u32, receipt: &[(SatelliteId, f64)], epochs: u32) -> Result<Vec<LocalUpdate>> {
        let epoch_s = self.sc.learning.epoch_s;
        let Some(learner) = self.learner else {
            return Ok(receipt
                .iter()
                .map(|&(sat, t)| LocalUpdate {
                    sat,
                    samples: 1,
                    params: Vec::new(),
                    ready_s: t + epochs as f64 * epoch_s,
                })
                .collect());
        };
        receipt
            .par_iter()
            .map(|&(sat, t)| {
                let data = learner.data(sat);
                let mut hp = self.sc.hyper_params(epochs);
                hp.seed = fl::derive_seed(self.sc.simulation.seed, &[slot as u64, sat.orbit as u64, sat.slot as u64]);
                let params = fl::local_sgd(&learner.model, &self.global, data, &hp, &self.global)?;
                Ok(LocalUpdate {
                    sat,
                    samples: data.len() as u64,
                    params,
                    ready_s: t + epochs as f64 * epoch_s,
                })
            })
            .collect()
    }

    fn aggregate(&mut self, runs: &[ClusterRun]) -> Result<(f64, f64)> {
        let Some(learner) = self.learner else {
            return Ok((f64::NAN, f64::NAN));
        };
        let weighting = self.sc.learning.weighting;
        let contributions = runs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let agg = &r.collected.as_ref().expect("collected before update").aggregate;
                let params = match weighting {
                    fl::Weighting::Raw => agg.finalize()?,
                    fl::Weighting::PreWeighted => agg.weighted_sum.clone(),
                };
                Ok(Contribution {
                    id: i,
                    samples: agg.weight,
                    params,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.global = fl::global_update(&contributions, weighting)?;
        let e = fl::evaluate(&learner.model, &self.global, &learner.test)?;
        Ok((e.accuracy, e.loss))
    }
}

/// Runs several scenarios that must share their dataset definition.
pub fn compare(scenarios: &[(String, ScenarioFile)]) -> Result<Vec<(String, MetricsLog)>> {
    let Some((_, first)) = scenarios.first() else {
        return Err(Error::Config("nothing to compare".into()));
    };
    for (name, sc) in scenarios {
        if sc.simulation.seed != first.simulation.seed || sc.learning != first.learning {
            return Err(Error::Config(format!(
                "scenario `{name}` uses a different dataset seed or learning setup"
            )));
        }
    }
    scenarios
        .par_iter()
        .map(|(name, sc)| Ok((name.clone(), run(sc)?)))
        .collect()
}

pub fn write_metrics_csv<W: Write>(out: W, log: &MetricsLog) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["slot".to_string(), "t_n_s".into(), "accuracy".into(), "loss".into()];
    header.extend((1..=log.clusters).map(|p| format!("I_{p}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in &log.rows {
        let mut rec = vec![
            r.slot.to_string(),
            format!("{:.3}", r.t_n_s),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.loss),
        ];
        rec.extend(r.epochs.iter().map(u32::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let mut out = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    if let Some(t) = &log.truncated {
        writeln!(out, "# truncated: {t}")?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn write_events_jsonl<W: Write>(mut out: W, log: &MetricsLog) -> Result<()> {
    for e in &log.events {
        let h = &e.hop;
        writeln!(
            out,
            r#"{{"slot":{},"kind":"{}","cluster":{},"from":"{}","to":"{}","sent_s":{:.3},"time_s":{:.3},"payload_bits":{}}}"#,
            e.slot, h.kind, h.cluster, h.from, h.to, h.sent_s, h.time_s, h.payload_bits
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ScheduleDoc<'a> {
    mode: Mode,
    slots: &'a [SlotRecord],
    truncated: &'a Option<String>,
}

pub fn write_schedule_json<W: Write>(out: W, log: &MetricsLog) -> Result<()> {
    let doc = ScheduleDoc {
        mode: log.mode,
        slots: &log.slots,
        truncated: &log.truncated,
    };
    serde_json::to_writer_pretty(out, &doc).map_err(|e| Error::Io(e.to_string()))
}
