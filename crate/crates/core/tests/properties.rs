//! Property tests for the cross-cutting invariants: wire round trips,
//! queue ordering, delivery conservation, and notifier timestamps.

use proptest::prelude::*;
use tempo_core::kernel::{Kernel, QueueKey, RmPlacement, ThreadSchedulingRule};
use tempo_core::message::{self, Content, Message, QosSpec, Reliability, Value};
use tempo_core::services::notifier::NotificationSchedule;

fn arb_text() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            proptest::char::range('a', 'z'),
            proptest::char::range('A', 'Z'),
            proptest::char::range('0', '9'),
            Just('<'),
            Just('>'),
            Just('&'),
            Just('"'),
            Just('\''),
            Just(' '),
            Just('\u{e9}'),
            Just('\u{4e16}'),
        ],
        0..20,
    )
    .prop_map(|v| v.into_iter().collect())
}

fn arb_content(depth: u32) -> BoxedStrategy<Content> {
    let leaf = proptest::collection::vec(arb_text(), 0..4).prop_map(|texts| {
        let mut c = Content::new();
        for (i, t) in texts.into_iter().enumerate() {
            c.set(format!("k{i}"), Value::text(t)).unwrap();
        }
        c
    });
    if depth == 0 {
        leaf.boxed()
    } else {
        (leaf, proptest::option::of(arb_content(depth - 1)))
            .prop_map(|(mut c, nested)| {
                if let Some(n) = nested {
                    if !n.is_empty() {
                        c.set("nested", Value::Map(n)).unwrap();
                    }
                }
                c
            })
            .boxed()
    }
}

fn arb_qos() -> impl Strategy<Value = Option<QosSpec>> {
    proptest::option::of(
        (
            proptest::option::of(0u64..100),
            proptest::option::of(1u64..10_000),
            proptest::option::of(1u64..10_000),
            proptest::bool::ANY,
        )
            .prop_map(|(crit, period_ms, deadline_ms, with_wcet)| QosSpec {
                crit,
                period_ms,
                deadline_ms,
                wcet_ms: match (deadline_ms, with_wcet) {
                    (Some(d), true) => Some(d.min(1 + d / 2)),
                    _ => None,
                },
            }),
    )
}

fn arb_message() -> impl Strategy<Value = Message> {
    (
        "[A-Za-z][A-Za-z0-9_.-]{0,12}",
        proptest::bool::ANY,
        "[A-Za-z][A-Za-z0-9@_.-]{0,16}",
        arb_content(2),
        proptest::num::u64::ANY,
        arb_qos(),
    )
        .prop_map(|(ty, reliable, profile, content, ts, qos)| {
            let rel = if reliable { Reliability::Reliable } else { Reliability::BestEffort };
            Message::new(ty, rel, profile, content, ts, qos).expect("generator emits valid fields")
        })
}

proptest! {
    /// parse(serialize(m)) = m, and the canonical text is a fixed point.
    #[test]
    fn message_round_trip(m in arb_message()) {
        let text = message::serialize(&m);
        let back = message::parse(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(message::serialize(&back), text);
    }

    /// Frames invert regardless of reliability class.
    #[test]
    fn frame_round_trip(m in arb_message()) {
        let frame = tempo_core::services::link::encode_frame(&m);
        prop_assert_eq!(tempo_core::services::link::decode_frame(&frame).unwrap(), m);
    }

    /// Within one dispatcher, delivery order is exactly non-decreasing
    /// queue key with FIFO ties, and every submitted message is either
    /// delivered or undeliverable exactly once (conservation).
    #[test]
    fn per_dispatcher_order_and_conservation(
        periods in proptest::collection::vec(proptest::option::of(0usize..4), 1..40)
    ) {
        use tempo_core::component::{Component, ComponentError, Ctx, Memento};

        struct Sink;
        impl Component for Sink {
            fn initialize(&mut self, _: &Content, _: &mut Ctx) -> Result<Vec<Message>, ComponentError> { Ok(vec![]) }
            fn process_message(&mut self, _: &Message, _: &mut Ctx) -> Result<Vec<Message>, ComponentError> { Ok(vec![]) }
            fn memento(&self) -> Memento { Memento::new("sink/v1", 1, Content::new()) }
            fn restore(&mut self, _: &Memento) -> Result<(), ComponentError> { Ok(()) }
        }

        let table = [80u64, 200, 350, 500];
        let tsr = ThreadSchedulingRule::descending(3);
        let rule = RmPlacement::new(vec![(80, 1), (200, 2), (350, 3)], &tsr).unwrap();
        let mut kernel = Kernel::new("n", tsr, Box::new(rule)).unwrap();
        kernel
            .register_component(tempo_core::component::Shell::new(
                "sink",
                "sink",
                Content::new(),
                Box::new(Sink),
            ))
            .unwrap();

        let mut submitted = 0u32;
        for (i, p) in periods.iter().enumerate() {
            let qos = p.map(|idx| QosSpec::periodic(table[idx]));
            let m = Message::new("W", Reliability::BestEffort, "sink", Content::new(), i as u64, qos)
                .unwrap();
            kernel.submit(m, i as u64).unwrap();
            submitted += 1;
        }

        let mut popped = 0u32;
        for d in kernel.dispatcher_ids() {
            let mut last: Option<QueueKey> = None;
            let mut last_enqueue = 0;
            while let Some(job) = kernel.pop_next(d) {
                popped += 1;
                if let Some(prev) = last {
                    prop_assert!(job.queue_key >= prev, "keys out of order");
                    if job.queue_key == prev {
                        prop_assert!(job.enqueue_us >= last_enqueue, "FIFO tie broken");
                    }
                }
                last = Some(job.queue_key);
                last_enqueue = job.enqueue_us;
            }
        }
        prop_assert_eq!(popped, submitted, "every message dequeues exactly once");
    }

    /// The k-th notification is stamped phase + k*period exactly, no
    /// matter how raggedly the notifier is polled.
    #[test]
    fn notifier_nominal_timestamps(
        period in 1u64..50,
        phase in 0u64..100,
        polls in proptest::collection::vec(1u64..200, 1..20)
    ) {
        let mut schedule = NotificationSchedule::new("t", period, phase, QosSpec::default()).unwrap();
        let mut now = 0;
        let mut expected_k = 1u64;
        for step in polls {
            now += step;
            for m in schedule.due(now) {
                prop_assert_eq!(m.timestamp_ms(), phase + expected_k * period);
                expected_k += 1;
            }
        }
        // Never early: everything emitted so far was due.
        prop_assert!(phase + (expected_k - 1) * period <= now || expected_k == 1);
    }
}
