//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers. Criteria act on the library through its
//! public surface only; analytical oracles are computed independently in
//! the test body wherever a value needs cross-checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::Instant;
use tempo_core::component::{Component, Ctx};
use tempo_core::ft::vote::{vote, VoteResult, Voter};
use tempo_core::ft::watchdog::{Watchdog, WatchdogSpec};
use tempo_core::harness::components::Controller;
use tempo_core::harness::experiments as exp;
use tempo_core::harness::plant::vector_value;
use tempo_core::kernel::{RmPlacement, ThreadSchedulingRule};
use tempo_core::message::{self, Content, Message, QosSpec, Reliability, Value};
use tempo_core::sched::sim::{simulate_jobs, simulate_schedule, JobSpec, Policy, SimOptions};
use tempo_core::sched::{
    edf_schedulable, response_time_analysis, rm_lub, rm_pip_schedulable, rm_schedulable_lub,
    CriticalSection, ResponseTime, TaskSet, TaskSpec, Verdict,
};
use tempo_core::services::link::{LinkEndpoint, RetryConfig};
use tempo_core::time::{ms_to_us, AffineClock};
use tempo_core::world::{LinkModel, World};

fn budget(name: &str, started: Instant, limit_s: f64) {
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        elapsed < limit_s,
        "{name} exceeded its runtime budget: {elapsed:.1}s >= {limit_s}s"
    );
}

fn ms(v: f64) -> u64 {
    ms_to_us(v).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Scheduling math exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_scheduling_math_exactness() {
    let t0 = Instant::now();

    assert_eq!(rm_lub(1).unwrap(), 1.0);
    let exact_two = 2.0 * (std::f64::consts::SQRT_2 - 1.0);
    assert!((rm_lub(2).unwrap() - exact_two).abs() < 1e-9, "rm_lub(2) = {}", rm_lub(2).unwrap());
    assert!((rm_lub(1_000_000).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);

    // EDF boundary is exact, including U = 1 from awkward fractions.
    let set = |tasks: &[(f64, f64)]| {
        TaskSet::new(
            tasks
                .iter()
                .enumerate()
                .map(|(i, &(c, t))| TaskSpec::new(format!("t{i}"), ms(c), ms(t)))
                .collect(),
        )
        .unwrap()
    };
    assert!(edf_schedulable(&set(&[(2.0, 4.0), (2.0, 4.0)])).unwrap());
    // 1/3 + 2/3 = 1 exactly in rationals, inexactly in floats.
    assert!(edf_schedulable(&set(&[(1.0, 3.0), (2.0, 3.0)])).unwrap());
    assert!(!edf_schedulable(&set(&[(1.0, 3.0), (2.001, 3.0)])).unwrap());

    // Blocking-aware rate-monotonic bound, hand-computed examples.
    let one = TaskSet::new(vec![TaskSpec::new("a", ms(1.0), ms(4.0)).with_blocking(ms(1.0))])
        .unwrap();
    assert_eq!(rm_pip_schedulable(&one).unwrap(), Verdict::Guaranteed);
    let two = TaskSet::new(vec![
        TaskSpec::new("a", ms(1.0), ms(4.0)).with_blocking(ms(1.0)),
        TaskSpec::new("b", ms(2.0), ms(8.0)),
    ])
    .unwrap();
    assert_eq!(rm_pip_schedulable(&two).unwrap(), Verdict::Guaranteed);
    // Same sets with zero blocking match the plain utilization test.
    let plain = set(&[(1.0, 4.0), (2.0, 8.0)]);
    assert_eq!(rm_pip_schedulable(&plain).unwrap(), rm_schedulable_lub(&plain).unwrap());

    budget("criterion 1", t0, 1.0);
    println!(
        "ACCEPTANCE 1 PASS: rm_lub exact at n=1,2 and within 1e-6 of ln 2 at n=1e6; EDF boundary exact; blocking-aware bound matches hand computation"
    );
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalence
// ---------------------------------------------------------------------------

fn random_taskset(rng: &mut ChaCha12Rng, u_max: f64, u_min: f64) -> TaskSet {
    loop {
        let n = rng.random_range(1..=4usize);
        let mut tasks = Vec::new();
        let target = rng.random_range(u_min..u_max);
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        let wsum: f64 = weights.iter().sum();
        for (i, w) in weights.iter().enumerate() {
            let period_ms = rng.random_range(4..=40u64);
            let share = target * w / wsum;
            let exec_us = ((share * (period_ms * 1000) as f64).floor() as u64).max(1);
            tasks.push(TaskSpec::new(format!("t{i}"), exec_us, period_ms * 1000));
        }
        let Ok(ts) = TaskSet::new(tasks) else { continue };
        // Keep one hyperperiod cheap enough for a hundred runs.
        match ts.hyperperiod_us() {
            Ok(h) if h <= 12_000_000 => return ts,
            _ => continue,
        }
    }
}

#[test]
fn criterion_02_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(0x0dd5eed);

    let mut guaranteed_sets = 0;
    for _ in 0..100 {
        let ts = random_taskset(&mut rng, 0.95, 0.3);
        let horizon = ts.hyperperiod_us().unwrap();
        let rta = response_time_analysis(&ts);
        let trace =
            simulate_schedule(&ts, Policy::FixedPriorityRm, SimOptions::over(horizon)).unwrap();
        let all_converged = rta.iter().all(|r| matches!(r, ResponseTime::Converged(_)));
        if all_converged {
            assert!(trace.misses.is_empty(), "converged set missed a deadline: {ts:?}");
            for (i, r) in rta.iter().enumerate() {
                let ResponseTime::Converged(r) = r else { unreachable!() };
                assert_eq!(
                    trace.worst_response_us(i),
                    Some(*r),
                    "worst simulated response != analytical fixed point for task {i} in {ts:?}"
                );
            }
        } else {
            for (i, r) in rta.iter().enumerate() {
                if matches!(r, ResponseTime::Divergent) {
                    assert!(
                        trace.misses.iter().any(|m| m.task == i),
                        "divergent task {i} never missed in simulation: {ts:?}"
                    );
                }
            }
        }
        // The utilization bound is sufficient: guaranteed sets never miss.
        if rm_schedulable_lub(&ts).unwrap() == Verdict::Guaranteed {
            guaranteed_sets += 1;
            assert!(trace.misses.is_empty(), "bound-guaranteed set missed: {ts:?}");
        }
        // EDF is exact at U <= 1: these sets are all under 0.95.
        let edf = simulate_schedule(
            &ts,
            Policy::Edf,
            SimOptions::over(horizon).stopping_at_first_miss(),
        )
        .unwrap();
        assert!(edf.misses.is_empty(), "EDF missed with U < 1: {ts:?}");
    }
    // Overloaded sets must miss under EDF within one hyperperiod.
    for _ in 0..20 {
        let ts = random_taskset(&mut rng, 1.3, 1.01);
        if edf_schedulable(&ts).unwrap() {
            continue; // rounding nudged U to exactly <= 1; skip
        }
        let horizon = ts.hyperperiod_us().unwrap();
        let trace = simulate_schedule(
            &ts,
            Policy::Edf,
            SimOptions::over(horizon).stopping_at_first_miss(),
        )
        .unwrap();
        assert!(!trace.misses.is_empty(), "EDF overload did not miss: {ts:?}");
    }

    budget("criterion 2", t0, 30.0);
    println!(
        "ACCEPTANCE 2 PASS: 100 random task sets, response-time fixed points equal worst simulated responses exactly; {guaranteed_sets} bound-guaranteed sets never missed; EDF misses iff U > 1"
    );
}

// ---------------------------------------------------------------------------
// 3. Priority inversion
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_priority_inversion() {
    let t0 = Instant::now();

    let (_, blocked_off) = exp::inversion(false);
    let (_, blocked_on) = exp::inversion(true);
    assert_eq!(blocked_off, 5.0, "without inheritance the high job is blocked 5 ms");
    assert_eq!(blocked_on, 1.0, "with inheritance blocking shrinks to the critical section");

    // Randomized single-resource scenarios: under inheritance, blocking
    // is bounded by the longest lower-priority critical section.
    let mut rng = ChaCha12Rng::seed_from_u64(0xb10c);
    for round in 0..50 {
        let n_low = rng.random_range(1..=3usize);
        let mut jobs = Vec::new();
        let mut longest_cs = 0u64;
        for task in 1..=n_low {
            let exec = rng.random_range(2_000..10_000u64);
            let has_cs = rng.random_range(0.0..1.0) < 0.8;
            let mut sections = Vec::new();
            if has_cs {
                let len = rng.random_range(1_000..exec.min(5_000));
                let offset = rng.random_range(0..=exec - len);
                longest_cs = longest_cs.max(len);
                sections.push(CriticalSection { offset_us: offset, len_us: len, resource: "R".into() });
            }
            jobs.push(JobSpec {
                task,
                job: 0,
                release_us: rng.random_range(0..4_000),
                exec_us: exec,
                deadline_us: None,
                sections,
            });
        }
        let high_exec = rng.random_range(1_000..4_000u64);
        let len = rng.random_range(500..high_exec.min(2_000));
        let offset = rng.random_range(0..=high_exec - len);
        jobs.push(JobSpec {
            task: 0,
            job: 0,
            release_us: rng.random_range(2_000..8_000),
            exec_us: high_exec,
            deadline_us: None,
            sections: vec![CriticalSection { offset_us: offset, len_us: len, resource: "R".into() }],
        });
        let trace = simulate_jobs(
            jobs,
            Policy::FixedPriorityRm,
            SimOptions::over(ms(200.0)).with_pip(true),
        )
        .unwrap();
        let blocked = trace.worst_blocking_us(0);
        assert!(
            blocked <= longest_cs,
            "round {round}: blocking {blocked} us exceeds the longest lower critical section {longest_cs} us"
        );
    }

    budget("criterion 3", t0, 10.0);
    println!(
        "ACCEPTANCE 3 PASS: canonical scenario blocks 5 ms without inheritance, 1 ms with; 50 randomized scenarios stayed within the longest lower critical section"
    );
}

// ---------------------------------------------------------------------------
// 4. Scheduling-table pattern
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_rm_table_pattern() {
    let t0 = Instant::now();
    let outcome = exp::rm_table(42, 30_000).unwrap();
    assert_eq!(outcome.cases.len(), 4);

    let short_jitter: Vec<f64> = outcome.cases.iter().map(|c| c.tasks[0].period_jitter_ms).collect();
    let long_jitter: Vec<f64> = outcome.cases.iter().map(|c| c.tasks[2].period_jitter_ms).collect();

    let max = short_jitter.iter().cloned().fold(0.0, f64::max);
    let min = short_jitter.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread_ok = if max == 0.0 { true } else { (max - min) / max < 0.05 };
    assert!(spread_ok, "80 ms task's jitter varied across cases: {short_jitter:?}");

    for pair in long_jitter.windows(2) {
        assert!(
            pair[1] >= pair[0] - 1e-9,
            "350 ms task's jitter decreased across cases: {long_jitter:?}"
        );
    }

    budget("criterion 4", t0, 30.0);
    println!(
        "ACCEPTANCE 4 PASS: 80 ms task period jitter {short_jitter:?} (spread < 5%); 350 ms task jitter non-decreasing {long_jitter:?}"
    );
}

// ---------------------------------------------------------------------------
// 5. Stress pattern
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_stress_pattern() {
    let t0 = Instant::now();
    let plant = exp::default_cartpole();
    let channel = exp::serial_channel();

    let positive = exp::stress(&plant, &channel, 42, 60_000, false).unwrap();
    let mean = positive.control.period_mean_ms;
    assert!(
        (mean - 15.0).abs() <= 0.15,
        "control mean period {mean} ms deviates more than 1% from nominal"
    );
    assert!(positive.diverged.is_none(), "plant diverged under the lower-priority stress task");
    assert!(
        positive.peak_state <= positive.envelope,
        "state peak {} left the envelope {}",
        positive.peak_state,
        positive.envelope
    );

    let negative = exp::stress(&plant, &channel, 42, 30_000, true).unwrap();
    assert!(
        negative.control.misses >= 1,
        "equal-priority negative control produced no deadline misses"
    );

    budget("criterion 5", t0, 60.0);
    println!(
        "ACCEPTANCE 5 PASS: control mean period {mean:.4} ms under stress (nominal 15, no divergence); negative control missed {} deadlines",
        negative.control.misses
    );
}

// ---------------------------------------------------------------------------
// 6. Upgrade pattern
// ---------------------------------------------------------------------------

/// Observational equivalence of the memento round trip: a controller that
/// is snapshotted and restored mid-stream emits exactly what an
/// uninterrupted one does on the same input sequence.
fn memento_observational_equivalence() {
    let plant = exp::default_cartpole();
    let config = controller_config_for(&plant);

    let drive = |component: &mut Box<dyn Component>, k: u64, x: &[f64]| -> Vec<Message> {
        let mut out = Vec::new();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let mut ctx = Ctx { now_ms: k * 15, node_id: "n", rng: &mut rng };
        let mut c = Content::new();
        c.set("k", Value::text(k.to_string())).unwrap();
        let tick =
            Message::new("Notify", Reliability::BestEffort, "ctrl", c, k * 15, None).unwrap();
        out.extend(component.process_message(&tick, &mut ctx).unwrap());
        let mut c = Content::new();
        c.set("activation", Value::text(k.to_string())).unwrap();
        c.set("x", vector_value(x)).unwrap();
        let reply =
            Message::new("SensorReply", Reliability::BestEffort, "ctrl", c, k * 15 + 5, None)
                .unwrap();
        out.extend(component.process_message(&reply, &mut ctx).unwrap());
        out
    };
    let states: Vec<Vec<f64>> = (0..20)
        .map(|k| vec![0.1 - 0.004 * k as f64, 0.01, 0.05 - 0.002 * k as f64, -0.01])
        .collect();

    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let mut ctx = Ctx { now_ms: 0, node_id: "n", rng: &mut rng };
    let mut uninterrupted = Controller::empty();
    uninterrupted.initialize(&config, &mut ctx).unwrap();
    let mut resumed = Controller::empty();
    resumed.initialize(&config, &mut ctx).unwrap();

    let mut full = Vec::new();
    let mut spliced = Vec::new();
    for (k, x) in states.iter().enumerate() {
        let k = k as u64 + 1;
        full.extend(drive(&mut uninterrupted, k, x));
        if k == 10 {
            // Externalize, restore into a fresh instance, continue there.
            let snapshot = resumed.memento();
            let mut fresh = Controller::empty();
            fresh.initialize(&config, &mut ctx).unwrap();
            fresh.restore(&snapshot).unwrap();
            resumed = fresh;
        }
        spliced.extend(drive(&mut resumed, k, x));
    }
    let render = |msgs: &[Message]| -> Vec<String> {
        msgs.iter().map(message::serialize).collect()
    };
    assert_eq!(render(&full), render(&spliced), "memento round trip changed behavior");
}

fn controller_config_for(plant: &tempo_core::config::PlantConfig) -> Content {
    use tempo_core::harness::components::plant_config_content;
    use tempo_core::harness::plant::{matrix_value, PlantModel};
    let model = PlantModel::from_config(plant);
    let mut c = plant_config_content(&model);
    c.set("profile", Value::text("ctrl")).unwrap();
    c.set("sensor_profile", Value::text("dsp")).unwrap();
    c.set("gain_label", Value::text("K2")).unwrap();
    c.set("k", matrix_value(&plant.gain("K2").unwrap().k)).unwrap();
    c.set("period_ms", Value::text("15")).unwrap();
    c.set("block_depth", Value::text("3")).unwrap();
    c
}

#[test]
fn criterion_06_upgrade_pattern() {
    let t0 = Instant::now();
    memento_observational_equivalence();

    let plant = exp::default_cartpole();
    let channel = exp::serial_channel();
    let outcome = exp::upgrade(&plant, &channel, 42, 60_000, 30_000).unwrap();
    assert!(outcome.upgraded_at.is_some(), "upgrade never happened");
    assert!(outcome.diverged.is_none(), "plant diverged around the swap");
    assert!(
        outcome.peak_state <= outcome.envelope,
        "state peak {} left the envelope {}",
        outcome.peak_state,
        outcome.envelope
    );
    assert!(
        outcome.nominal_cost_new < outcome.nominal_cost_old,
        "the new gain is not better on the nominal model"
    );
    assert!(
        outcome.post_cost_rate < outcome.pre_cost_rate,
        "post-swap cost rate {} is not below pre-swap {}",
        outcome.post_cost_rate,
        outcome.pre_cost_rate
    );
    // The swap pause stayed under a control period: no activation was
    // lost around it.
    assert!(
        outcome.missing_activations.is_empty(),
        "activations lost across the swap: {:?}",
        outcome.missing_activations
    );

    budget("criterion 6", t0, 60.0);
    println!(
        "ACCEPTANCE 6 PASS: memento round trip observationally equivalent; swap at 30 s kept the state bounded and cut the cost rate from {:.3e} to {:.3e}",
        outcome.pre_cost_rate, outcome.post_cost_rate
    );
}

// ---------------------------------------------------------------------------
// 7. Migration pattern
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_migration_pattern() {
    let t0 = Instant::now();
    let plant = exp::default_cartpole();
    let channel = exp::serial_channel();
    let outcome = exp::migrate(&plant, &channel, 42, 60_000, 40_000).unwrap();

    assert!(outcome.migrated_at.is_some(), "migration never completed");
    assert!(
        outcome.missing_activations.is_empty(),
        "lost control activations: {:?}",
        outcome.missing_activations
    );
    assert!(
        outcome.duplicated_activations.is_empty(),
        "duplicated control activations: {:?}",
        outcome.duplicated_activations
    );
    assert!(
        outcome.audit_duplicates.is_empty(),
        "messages delivered more than once: {:?}",
        outcome.audit_duplicates
    );
    let rebind = outcome.rebind_us.expect("rebind observed");
    assert!(
        rebind <= 15_000,
        "rebind took {rebind} us, more than one control period"
    );
    assert!(outcome.diverged.is_none(), "plant diverged during migration");
    assert!(outcome.peak_state <= outcome.envelope);

    budget("criterion 7", t0, 60.0);
    println!(
        "ACCEPTANCE 7 PASS: {} activations, none lost or duplicated; every audited message delivered exactly once; rebind in {} us; state bounded",
        outcome.expected_activations, rebind
    );
}

// ---------------------------------------------------------------------------
// 8. Clock synchronization
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_clock_sync() {
    let t0 = Instant::now();
    let tsr = || ThreadSchedulingRule::descending(1);
    let rule = |tsr: &ThreadSchedulingRule| Box::new(RmPlacement::new(vec![], tsr).unwrap());

    let mut w = World::new(8);
    let t = tsr();
    let r = rule(&t);
    w.add_node("local", t, r, AffineClock::default()).unwrap();
    let t = tsr();
    let r = rule(&t);
    // Peer clock: +50 ms offset, +100 ppm skew.
    w.add_node("peer", t, r, AffineClock { offset_us: 50_000, skew_ppm: 100.0 }).unwrap();
    // Symmetric delay with up to 5 ms of jitter each way.
    let link = || LinkModel::new(2_000, 5_000, 0.0);
    w.connect("local", "peer", link(), link()).unwrap();
    w.enable_ping("local", 1000).unwrap();
    w.run_until(ms(30_000.0));

    let cm = w.node("local").unwrap().clock_model("peer").expect("model built");
    assert!(cm.sample_count() >= 16, "window not yet full");
    // True offset at the estimate's peer-time anchor: peer local time is
    // world * (1 + skew) + offset, so world = (peer - 50) / (1 + 1e-4).
    let world_at_anchor = (cm.reference_peer_ms - 50.0) / (1.0 + 100e-6);
    let true_offset = 50.0 + 100e-6 * world_at_anchor;
    let error = (cm.offset_ms - true_offset).abs();
    assert!(
        error <= 2.5,
        "steady-state offset error {error:.3} ms exceeds half the max asymmetry (estimate {}, truth {true_offset:.3})",
        cm.offset_ms
    );

    // Translation strict monotonicity over a long remote span.
    let mut prev = f64::NEG_INFINITY;
    for i in 0..10_000u64 {
        let local = cm.translate(1_000.0 + i as f64);
        assert!(local > prev, "translation not strictly monotone at step {i}");
        prev = local;
    }

    budget("criterion 8", t0, 10.0);
    println!(
        "ACCEPTANCE 8 PASS: offset estimate error {error:.3} ms <= 2.5 ms against 50 ms offset + 100 ppm skew; translation strictly monotone (skew estimate {:.1} ppm)",
        cm.skew_ppm
    );
}

// ---------------------------------------------------------------------------
// 9. Fault tolerance
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_fault_tolerance() {
    let t0 = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(0xfa117);

    // Voter correctness under one deviating module, 1000 random triples.
    let epsilon = 0.05;
    for round in 0..1000 {
        let dim = rng.random_range(1..=3usize);
        let correct: Vec<f64> = (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut faulty = correct.clone();
        let idx = rng.random_range(0..dim);
        faulty[idx] += rng.random_range(1.0..10.0) * if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
        let mut outputs =
            vec![(correct.clone(), 1.0), (correct.clone(), 1.0), (faulty.clone(), 1.0)];
        let swap = rng.random_range(0..3usize);
        outputs.swap(2, swap);
        match vote(Voter::FormalizedMajority, &outputs, epsilon).unwrap() {
            VoteResult::Value { value, dissenters } => {
                assert_eq!(value, correct, "round {round}: vote picked the faulty output");
                assert_eq!(dissenters.len(), 1);
            }
            VoteResult::NoConsensus => panic!("round {round}: majority of identical outputs"),
        }
    }

    // Recovery-block checkpoint safety is exercised in the fault module's
    // unit tests on scripted failure injections; here the same scripted
    // injection runs through a shell-level sequence to double-check no
    // erroneous state leaks between attempts.
    recovery_block_sequence_safety();

    // Watchdog completeness: exactly one timing fault per expired request.
    let mut dog = Watchdog::new(WatchdogSpec::new("Req", "Resp", 50, "ifd").unwrap());
    let mut expected = 0;
    let mut rng2 = ChaCha12Rng::seed_from_u64(3);
    for id in 0..200u64 {
        let sent = id * 7;
        dog.on_request(id, sent);
        if rng2.random_range(0.0..1.0) < 0.5 {
            dog.on_response(id, sent + rng2.random_range(0..50));
        } else {
            expected += 1;
        }
    }
    let mut raised = 0;
    for now in (0..3000).step_by(13) {
        raised += dog.check(now).len();
    }
    raised += dog.check(1_000_000).len();
    assert_eq!(raised, expected, "one timing fault per unanswered request");

    // Local temporal autonomy: outages up to the block depth leave the
    // actuator input sequence identical to the outage-free run.
    let plant = exp::default_cartpole();
    for steps in [1u64, 3, 5] {
        let outcome = exp::lta_outage(&plant, 42, 20_000, 10_005, steps, 5).unwrap();
        assert!(
            outcome.applied_inputs_equal && outcome.states_equal,
            "{steps}-step outage changed the trajectory (first difference at {:?})",
            outcome.first_difference_at
        );
        assert!(outcome.estimated_activations >= steps, "estimator did not cover the outage");
    }

    budget("criterion 9", t0, 30.0);
    println!(
        "ACCEPTANCE 9 PASS: 1000 single-fault votes all correct; checkpoint safety held under scripted injections; watchdog raised exactly {expected} timing faults; outages of 1/3/5 periods left the trajectory bit-identical"
    );
}

/// Scripted failure injections against a recovery-block component: after
/// every failed attempt the primary's memento equals the checkpoint taken
/// before the attempt.
fn recovery_block_sequence_safety() {
    use tempo_core::component::{ComponentError, Memento};
    use tempo_core::ft::{AcceptanceSpec, FtComponent, FtConfig};

    /// Integrates its input; can be scripted to emit garbage on chosen
    /// calls (design faults that also corrupt its own state first).
    struct Integrator {
        acc: f64,
        calls: u64,
        poisoned_calls: Vec<u64>,
    }
    impl Component for Integrator {
        fn initialize(&mut self, _: &Content, _: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
            Ok(vec![])
        }
        fn process_message(&mut self, m: &Message, ctx: &mut Ctx) -> Result<Vec<Message>, ComponentError> {
            let call = self.calls;
            self.calls += 1;
            let x = m.content().f64("x").unwrap_or(0.0);
            let poisoned = self.poisoned_calls.contains(&call);
            if poisoned {
                self.acc = f64::NAN; // erroneous internal state
            } else {
                self.acc += x;
            }
            let mut c = Content::new();
            c.set("u", Value::text(if poisoned { "999".into() } else { format!("{}", self.acc) }))?;
            Ok(vec![Message::new("Out", Reliability::BestEffort, "sink", c, ctx.now_ms, None)?])
        }
        fn memento(&self) -> Memento {
            let mut s = Content::new();
            s.set("acc", Value::text(format!("{}", self.acc))).unwrap();
            s.set("calls", Value::text(self.calls.to_string())).unwrap();
            Memento::new("integrator/v1", 1, s)
        }
        fn restore(&mut self, m: &Memento) -> Result<(), ComponentError> {
            m.expect_schema("integrator/v1")?;
            self.acc = m.state.f64("acc").unwrap_or(0.0);
            self.calls = m.state.u64("calls").unwrap_or(0);
            Ok(())
        }
    }

    let mut spec = AcceptanceSpec::default();
    spec.ranges.insert("u".into(), (-100.0, 100.0));
    let mut ft = FtComponent::new(
        vec![
            ("primary".into(), Box::new(Integrator { acc: 0.0, calls: 0, poisoned_calls: vec![2, 5] })),
            ("alternate".into(), Box::new(Integrator { acc: 0.0, calls: 0, poisoned_calls: vec![] })),
        ],
        FtConfig::recovery_block(spec, "FaultLog@n"),
    )
    .unwrap();

    let mut rng = ChaCha12Rng::seed_from_u64(1);
    for call in 0..8u64 {
        let checkpoint = ft.module_memento(ft.primary_index());
        let mut c = Content::new();
        c.set("x", Value::text("1.5")).unwrap();
        let m = Message::new("In", Reliability::BestEffort, "ft", c, call, None).unwrap();
        let mut ctx = Ctx { now_ms: call, node_id: "n", rng: &mut rng };
        let out = ft.process_message(&m, &mut ctx).unwrap();
        let failed = out.iter().any(|m| m.msg_type() == "FaultEvent");
        if failed {
            // No erroneous-state leakage: the module that failed is back
            // at the pre-attempt checkpoint.
            assert_eq!(
                ft.module_memento(0),
                checkpoint,
                "post-failure memento differs from the pre-attempt checkpoint"
            );
        }
    }
}

// ---------------------------------------------------------------------------
// 10. Wire and message formats
// ---------------------------------------------------------------------------

fn random_text(rng: &mut ChaCha12Rng, max_len: usize) -> String {
    let alphabet: Vec<char> =
        "abcXYZ019 _-./@<>&\"'\u{e9}\u{4e2d}\u{1f600}".chars().collect();
    let len = rng.random_range(0..max_len);
    (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

fn random_content(rng: &mut ChaCha12Rng, depth: u32) -> Content {
    let mut c = Content::new();
    for i in 0..rng.random_range(0..5usize) {
        let key = format!("k{i}");
        if depth > 0 && rng.random_range(0.0..1.0) < 0.3 {
            let nested = random_content(rng, depth - 1);
            if !nested.is_empty() {
                c.set(key, Value::Map(nested)).unwrap();
                continue;
            }
        }
        c.set(key, Value::text(random_text(rng, 24))).unwrap();
    }
    c
}

fn random_message(rng: &mut ChaCha12Rng) -> Message {
    let rel = if rng.random_range(0.0..1.0) < 0.5 {
        Reliability::Reliable
    } else {
        Reliability::BestEffort
    };
    let qos = if rng.random_range(0.0..1.0) < 0.5 {
        let deadline = rng.random_range(0.0..1.0).lt(&0.7).then(|| rng.random_range(1..10_000u64));
        let wcet = match deadline {
            Some(d) if rng.random_range(0.0..1.0) < 0.5 => Some(rng.random_range(1..=d)),
            _ => None,
        };
        Some(QosSpec {
            crit: (rng.random_range(0.0..1.0) < 0.5).then(|| rng.random_range(0..100)),
            period_ms: (rng.random_range(0.0..1.0) < 0.7).then(|| rng.random_range(1..1000)),
            deadline_ms: deadline,
            wcet_ms: wcet,
        })
    } else {
        None
    };
    Message::new(
        format!("T{}", random_text(rng, 12)),
        rel,
        format!("p{}", random_text(rng, 16)),
        random_content(rng, 2),
        rng.random_range(0..u64::MAX / 2),
        qos,
    )
    .expect("generator emits valid messages")
}

#[test]
fn criterion_10_wire_formats() {
    let t0 = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(0x3373);

    // Serialize/parse round trip for ten thousand generated messages,
    // plus frame encode/decode identity on each.
    for i in 0..10_000 {
        let m = random_message(&mut rng);
        let text = message::serialize(&m);
        let back = message::parse(&text).unwrap_or_else(|e| panic!("message {i}: {e}\n{text}"));
        assert_eq!(back, m, "round trip changed message {i}");
        assert_eq!(message::serialize(&back), text, "canonical text unstable for message {i}");
        let frame = tempo_core::services::link::encode_frame(&m);
        assert_eq!(
            tempo_core::services::link::decode_frame(&frame).unwrap(),
            m,
            "frame round trip changed message {i}"
        );
    }

    // Exactly-once reliable delivery over a 30%-loss link.
    let mut tx = LinkEndpoint::new(RetryConfig { initial_us: 5_000, cap_us: 50_000 });
    let mut rx = LinkEndpoint::new(RetryConfig::default());
    let total = 200u64;
    let mut now = 0u64;
    let mut to_rx: Vec<Vec<u8>> = Vec::new();
    let mut to_tx: Vec<Vec<u8>> = Vec::new();
    let mut delivered: Vec<u64> = Vec::new();
    for i in 0..total {
        let mut c = Content::new();
        c.set("i", Value::text(i.to_string())).unwrap();
        let m = Message::new("Data", Reliability::Reliable, "sink", c, i, None).unwrap();
        to_rx.push(tx.send(&m, now).unwrap().bytes);
    }
    while tx.in_flight() > 0 || !to_rx.is_empty() || !to_tx.is_empty() {
        now += 1_000;
        for bytes in std::mem::take(&mut to_rx) {
            if rng.random_range(0.0..1.0) < 0.30 {
                continue;
            }
            let input = rx.on_frame(&bytes, now).unwrap();
            delivered.extend(input.delivered.iter().map(|m| m.content().u64("i").unwrap()));
            to_tx.extend(input.acks.into_iter().map(|f| f.bytes));
        }
        for bytes in std::mem::take(&mut to_tx) {
            if rng.random_range(0.0..1.0) < 0.30 {
                continue;
            }
            tx.on_frame(&bytes, now).unwrap();
        }
        to_rx.extend(tx.poll_retransmits(now).into_iter().map(|f| f.bytes));
        assert!(now < 60_000_000, "link never quiesced");
    }
    assert_eq!(delivered, (0..total).collect::<Vec<_>>(), "exactly once, in order");

    budget("criterion 10", t0, 30.0);
    println!(
        "ACCEPTANCE 10 PASS: 10^4 messages round-tripped byte-stably; frames invert; {total} reliable messages delivered exactly once over a 30% lossy link"
    );
}
