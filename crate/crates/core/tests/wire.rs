use std::rc::Rc;

use aurasim_core::agent::{AgentRecord, Behavior, SirState};
use aurasim_core::geom::Vec3;
use aurasim_core::ids::GlobalAgentId;
use aurasim_core::testkit::{fuzz_registry, random_agent, random_node, FuzzRng};
use aurasim_core::wire::schema::{self, agent_registry, AgentLike, AgentView, BatchEncoder};
use aurasim_core::wire::{
    decode, encode, skip_subtree, BufferAccounting, FieldValue, Node, SeqValue, Target, Value, WireBuffer, WireError,
    HEADER_LEN,
};
use proptest::prelude::*;

fn cell_with(behaviors: Vec<Behavior>) -> AgentRecord {
    let mut a = AgentRecord::cell(Vec3::new(1.0, 2.0, 3.0), 4.0, 1).with_id(GlobalAgentId::new(0, 7));
    a.behaviors = behaviors;
    a
}

fn word(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

#[test]
fn agent_without_behaviors_is_a_single_block() {
    let reg = agent_registry();
    let acc = BufferAccounting::new();
    let node = schema::record_to_node(&cell_with(vec![]));
    let buf = encode(&*node, &reg, &acc).unwrap();
    let b = buf.as_bytes();
    assert_eq!(&b[..4], b"TAI0");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), schema::CELL);
    assert_eq!(word(b, 8), 76);
    assert_eq!(b.len(), HEADER_LEN + 76);
    // gid origin(4) + counter(8) + position(24) + diameter(8) -> behaviors word
    assert_eq!(word(b, HEADER_LEN + 44), 0);
    let msg = decode(buf, &reg).unwrap();
    assert_eq!(msg.block_count(), 1);
}

#[test]
fn null_reference_is_one_zero_word() {
    let reg = fuzz_registry();
    let root = reg.id_of("Root").unwrap();
    let n = Node::new(
        root,
        vec![
            FieldValue::Scalar(Value::U8(9)),
            FieldValue::Seq(SeqValue::Nodes(vec![])),
            FieldValue::Ref(None),
            FieldValue::Ref(None),
        ],
    );
    let acc = BufferAccounting::new();
    let buf = encode(&n, &reg, &acc).unwrap();
    let b = buf.as_bytes();
    assert_eq!(b.len(), HEADER_LEN + 1 + 8 * 3);
    assert_eq!(word(b, HEADER_LEN + 9), 0);
    assert_eq!(word(b, HEADER_LEN + 17), 0);
}

#[test]
fn two_behaviors_follow_their_agent() {
    let reg = agent_registry();
    let acc = BufferAccounting::new();
    let a = cell_with(vec![Behavior::RandomWalk { step: 0.5 }, Behavior::Recovery { gamma: 0.25 }]);
    let node = schema::record_to_node(&a);
    let buf = encode(&*node, &reg, &acc).unwrap();
    let b = buf.as_bytes().to_vec();
    let agent_end = HEADER_LEN + 76;
    assert_eq!(word(&b, HEADER_LEN + 44), 1);
    assert_eq!(word(&b, agent_end), 2);
    assert_eq!(word(&b, agent_end + 8), 1);
    assert_eq!(word(&b, agent_end + 16), 1);
    let first = agent_end + 24;
    assert_eq!(u32::from_le_bytes(b[first..first + 4].try_into().unwrap()), schema::RANDOM_WALK);
    assert_eq!(f64::from_le_bytes(b[first + 4..first + 12].try_into().unwrap()), 0.5);
    let second = first + 12;
    assert_eq!(u32::from_le_bytes(b[second..second + 4].try_into().unwrap()), schema::RECOVERY);
    assert_eq!(b.len(), second + 12);

    let msg = decode(buf, &reg).unwrap();
    assert_eq!(msg.block_count(), 3);
    assert_eq!(msg.to_node(msg.root()), *node);
    assert_eq!(AgentView::new(&msg, msg.root()).to_record(), a);
}

#[test]
fn every_truncation_is_rejected() {
    let reg = agent_registry();
    let acc = BufferAccounting::new();
    let a = cell_with(vec![Behavior::Periodic {
        every: 3,
        inner: Some(Box::new(Behavior::RandomWalk { step: 1.0 })),
    }]);
    let full = encode(&*schema::record_to_node(&a), &reg, &acc).unwrap().as_bytes().to_vec();
    for cut in 0..full.len() {
        let mut bytes = full[..cut].to_vec();
        if cut >= HEADER_LEN {
            // keep the declared length consistent so the walker itself must notice
            let body = (cut - HEADER_LEN) as u64;
            bytes[8..16].copy_from_slice(&body.to_le_bytes());
        }
        let err = decode(WireBuffer::adopt(bytes, &acc), &reg).unwrap_err();
        assert!(
            matches!(err, WireError::TruncatedBuffer(_) | WireError::LengthMismatch { .. }),
            "cut {cut}: {err:?}"
        );
    }
    assert_eq!(acc.live(), 0);
}

#[test]
fn malformed_words_and_classes_are_rejected() {
    let reg = agent_registry();
    let acc = BufferAccounting::new();
    let a = cell_with(vec![Behavior::RandomWalk { step: 0.5 }]);
    let good = encode(&*schema::record_to_node(&a), &reg, &acc).unwrap().as_bytes().to_vec();

    let mut bad = good.clone();
    bad[HEADER_LEN + 44] = 2;
    assert_eq!(
        decode(WireBuffer::adopt(bad, &acc), &reg).unwrap_err(),
        WireError::MalformedSentinel {
            offset: HEADER_LEN + 44,
            value: 2
        }
    );

    let mut bad = good.clone();
    let prefix = HEADER_LEN + 76 + 16;
    bad[prefix..prefix + 4].copy_from_slice(&99u32.to_le_bytes());
    assert_eq!(decode(WireBuffer::adopt(bad, &acc), &reg).unwrap_err(), WireError::UnknownClassId(99));

    let mut bad = good.clone();
    bad[prefix..prefix + 4].copy_from_slice(&schema::CELL.to_le_bytes());
    assert!(matches!(
        decode(WireBuffer::adopt(bad, &acc), &reg).unwrap_err(),
        WireError::TypeMismatch { .. }
    ));

    let mut bad = good;
    bad[0] = b'X';
    assert_eq!(decode(WireBuffer::adopt(bad, &acc), &reg).unwrap_err(), WireError::BadMagic);
}

#[test]
fn shared_nodes_are_refused() {
    let reg = fuzz_registry();
    let leaf = Node::leaf(
        reg.id_of("Leaf").unwrap(),
        vec![FieldValue::Scalar(Value::I64(1)), FieldValue::Seq(SeqValue::Scalars(vec![]))],
    );
    let b = Node::new(
        reg.id_of("ItemB").unwrap(),
        vec![
            FieldValue::Scalar(Value::U32(0)),
            FieldValue::Seq(SeqValue::Nodes(vec![Some(leaf.clone()), Some(leaf)])),
            FieldValue::Ref(None),
        ],
    );
    let acc = BufferAccounting::new();
    assert_eq!(encode(&b, &reg, &acc).unwrap_err(), WireError::SharedNodeDetected);
    assert_eq!(acc.snapshot().acquired, 0);
}

#[test]
fn mutated_fields_survive_reencoding() {
    let reg = agent_registry();
    let acc = BufferAccounting::new();
    let a = cell_with(vec![Behavior::RandomWalk { step: 0.5 }]);
    let mut msg = decode(encode(&*schema::record_to_node(&a), &reg, &acc).unwrap(), &reg).unwrap();
    let root = msg.root();
    schema::set_position(&mut msg, root, Vec3::new(-1.0, 0.25, 9.0));
    schema::set_diameter(&mut msg, root, 6.5);
    let again = decode(encode(&msg.to_node(root), &reg, &acc).unwrap(), &reg).unwrap();
    let r = AgentView::new(&again, again.root()).to_record();
    assert_eq!(r.position, Vec3::new(-1.0, 0.25, 9.0));
    assert_eq!(r.diameter, 6.5);
    assert_eq!(r.behaviors, a.behaviors);
}

#[test]
fn buffer_is_held_until_the_last_release() {
    let reg = agent_registry();
    let acc = BufferAccounting::new();
    let a = cell_with(vec![Behavior::RandomWalk { step: 0.5 }, Behavior::Recovery { gamma: 0.25 }]);
    let mut msg = decode(encode(&*schema::record_to_node(&a), &reg, &acc).unwrap(), &reg).unwrap();
    let root = msg.root();
    let b0 = msg.seq_node(root, schema::field::BEHAVIORS, 0).unwrap();
    let b1 = msg.seq_node(root, schema::field::BEHAVIORS, 1).unwrap();
    let (h0, h1, hr) = (msg.handle(b0), msg.handle(b1), msg.handle(root));
    msg.release(h0).unwrap();
    assert_eq!(msg.release(h0), Err(WireError::DoubleRelease));
    msg.release(h1).unwrap();
    assert_eq!(msg.live_count(), 1);
    assert!(!msg.is_reclaimed());
    assert_eq!(acc.live(), 1);
    msg.release(hr).unwrap();
    assert!(msg.is_reclaimed());
    assert_eq!(acc.live(), 0);
    let s = acc.snapshot();
    assert_eq!((s.acquired, s.reclaimed, s.double_reclaims), (1, 1, 0));

    let other = decode(encode(&*schema::record_to_node(&a), &reg, &acc).unwrap(), &reg).unwrap();
    let mut third = decode(encode(&*schema::record_to_node(&a), &reg, &acc).unwrap(), &reg).unwrap();
    assert_eq!(third.release(other.handle(other.root())), Err(WireError::ForeignHandle));
    third.release_all();
    drop(other);
    let s = acc.snapshot();
    assert_eq!(s.dropped_with_live_blocks, 1);
    assert_eq!(s.acquired, s.reclaimed);
}

#[test]
fn growing_a_sequence_relocates_it() {
    let reg = agent_registry();
    let acc = BufferAccounting::new();
    let a = cell_with(vec![Behavior::RandomWalk { step: 0.5 }]);
    let mut msg = decode(encode(&*schema::record_to_node(&a), &reg, &acc).unwrap(), &reg).unwrap();
    let root = msg.root();
    let extra = schema::record_to_node(&cell_with(vec![Behavior::Recovery { gamma: 0.75 }]));
    let FieldValue::Seq(SeqValue::Nodes(bs)) = &extra.fields[schema::field::BEHAVIORS] else {
        unreachable!()
    };
    msg.seq_push_node(root, schema::field::BEHAVIORS, bs[0].as_ref().unwrap())
        .unwrap();
    assert!(acc.snapshot().relocated_bytes > 0);
    let r = AgentView::new(&msg, root).to_record();
    assert_eq!(
        r.behaviors,
        vec![Behavior::RandomWalk { step: 0.5 }, Behavior::Recovery { gamma: 0.75 }]
    );
    msg.seq_remove(root, schema::field::BEHAVIORS, 0).unwrap();
    assert_eq!(msg.live_count(), 1);
    assert_eq!(
        AgentView::new(&msg, root).to_record().behaviors,
        vec![Behavior::Recovery { gamma: 0.75 }]
    );
    assert_eq!(msg.release_subtree(root).unwrap(), 1);
    assert!(msg.is_reclaimed());
    assert_eq!(acc.live(), 0);
}

#[test]
fn skip_subtree_matches_encoded_size() {
    let reg = agent_registry();
    let mut r = FuzzRng::new(3);
    for i in 0..200 {
        let a = random_agent(GlobalAgentId::new(1, i), 4, &mut r);
        let mut bytes = Vec::new();
        schema::encode_agent_subtree(&a, &mut bytes);
        assert_eq!(bytes.len(), schema::agent_size(&a));
        let end = skip_subtree(&bytes, 0, &Target::Derived("Agent".into()), &reg).unwrap();
        assert_eq!(end, bytes.len());
    }
}

fn random_batch(r: &mut FuzzRng) -> (u64, Vec<Option<AgentRecord>>) {
    let n = r.below(17);
    let slots = (0..n)
        .map(|i| (!r.chance(0.2)).then(|| random_agent(GlobalAgentId::new(2, i as u64), 4, r)))
        .collect();
    (r.next_u64(), slots)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn generic_trees_roundtrip(seed in any::<u64>()) {
        let reg = fuzz_registry();
        let mut r = FuzzRng::new(seed);
        let root = random_node(&reg, reg.id_of("Root").unwrap(), 4, 16, &mut r);
        let acc = BufferAccounting::new();
        let buf = encode(&root, &reg, &acc).unwrap();
        prop_assert_eq!(buf.len(), buf.capacity());
        prop_assert_eq!(acc.snapshot().acquired, 1);
        let reg = std::sync::Arc::new(reg);
        let msg = decode(buf, &reg).unwrap();
        let s = acc.snapshot();
        prop_assert_eq!(s.acquired, 1);
        prop_assert_eq!(s.payload_bytes_copied, 0);
        prop_assert_eq!(msg.to_node(msg.root()), root);
    }

    #[test]
    fn typed_encoder_matches_generic_route(seed in any::<u64>()) {
        let reg = agent_registry();
        let mut r = FuzzRng::new(seed);
        let (iteration, slots) = random_batch(&mut r);
        let acc = BufferAccounting::new();
        let refs: Vec<Option<&AgentRecord>> = slots.iter().map(Option::as_ref).collect();
        let typed = encode(&BatchEncoder { iteration, slots: &refs }, &reg, &acc).unwrap();
        let generic = encode(&schema::batch_to_node(iteration, &refs), &reg, &acc).unwrap();
        prop_assert_eq!(typed.as_bytes(), generic.as_bytes());

        let msg = decode(typed, &reg).unwrap();
        let root = msg.root();
        prop_assert_eq!(msg.seq_len(root, schema::field::AGENTS), slots.len());
        for (i, s) in slots.iter().enumerate() {
            let got = msg.seq_node(root, schema::field::AGENTS, i).map(|n| AgentView::new(&msg, n).to_record());
            match (got, s) {
                (Some(g), Some(w)) => prop_assert!(g.bitwise_eq(w)),
                (g, w) => prop_assert!(g.is_none() && w.is_none()),
            }
        }
    }

    #[test]
    fn release_schedules_reclaim_exactly_once(seed in any::<u64>(), order in any::<u64>()) {
        let reg = agent_registry();
        let acc = BufferAccounting::new();
        let mut r = FuzzRng::new(seed);
        let agents: Vec<AgentRecord> = (0..1 + r.below(8)).map(|i| random_agent(GlobalAgentId::new(0, i as u64), 3, &mut r)).collect();
        let refs: Vec<Option<&AgentRecord>> = agents.iter().map(Some).collect();
        let mut msg = decode(encode(&BatchEncoder { iteration: 0, slots: &refs }, &reg, &acc).unwrap(), &reg).unwrap();
        let root = msg.root();
        let mut o = FuzzRng::new(order);
        // random in-place mutations, growth and removals
        for _ in 0..o.below(6) {
            let i = o.below(agents.len());
            let node = msg.seq_node(root, schema::field::AGENTS, i).unwrap();
            match o.below(3) {
                0 => schema::set_position(&mut msg, node, Vec3::new(o.unit(), o.unit(), o.unit())),
                1 => {
                    let b = Node::new(schema::RANDOM_WALK, vec![FieldValue::Scalar(Value::F64(1.0))]);
                    msg.seq_push_node(node, schema::field::BEHAVIORS, &Rc::new(b)).unwrap();
                }
                _ => {
                    if msg.seq_len(node, schema::field::BEHAVIORS) > 0 {
                        msg.seq_remove(node, schema::field::BEHAVIORS, 0).unwrap();
                    }
                }
            }
        }
        let mut idx: Vec<usize> = (0..agents.len()).collect();
        for k in (1..idx.len()).rev() {
            idx.swap(k, o.below(k + 1));
        }
        let nodes: Vec<_> = idx.iter().map(|&i| msg.seq_node(root, schema::field::AGENTS, i).unwrap()).collect();
        let mut released = 0;
        for n in nodes {
            released += msg.release_subtree(n).unwrap();
        }
        prop_assert!(!msg.is_reclaimed());
        msg.release(msg.handle(root)).unwrap();
        released += 1;
        prop_assert!(msg.is_reclaimed());
        prop_assert!(released <= msg.block_count());
        let s = acc.snapshot();
        prop_assert_eq!(s.acquired, s.reclaimed);
        prop_assert_eq!(s.double_reclaims, 0);
        prop_assert_eq!(s.live, 0);
    }
}

#[test]
fn view_reads_sir_payload() {
    let reg = agent_registry();
    let acc = BufferAccounting::new();
    let p = AgentRecord::person(Vec3::new(0.5, 0.5, 0.5), 1.0, SirState::Infected)
        .with_id(GlobalAgentId::new(3, 11))
        .with_behavior(Behavior::Infection { beta: 0.1, radius: 2.0 });
    let msg = decode(encode(&*schema::record_to_node(&p), &reg, &acc).unwrap(), &reg).unwrap();
    let v = AgentView::new(&msg, msg.root());
    assert_eq!(v.id(), GlobalAgentId::new(3, 11));
    assert_eq!(v.to_record(), p);
}
