use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use aurasim_core::testkit::FuzzRng;
use aurasim_core::transport::{inproc, tcp, Endpoint, Tag, TransportError};

fn payload(n: usize, seed: u64) -> Vec<u8> {
    let mut r = FuzzRng::new(seed);
    (0..n).map(|_| r.next_u64() as u8).collect()
}

fn run_all<T: Send + 'static>(eps: Vec<Endpoint>, f: impl Fn(Endpoint) -> T + Send + Sync + Clone + 'static) -> Vec<T> {
    let hs: Vec<_> = eps
        .into_iter()
        .map(|ep| {
            let f = f.clone();
            thread::spawn(move || f(ep))
        })
        .collect();
    hs.into_iter().map(|h| h.join().unwrap()).collect()
}

#[test]
fn large_payload_travels_in_three_batches() {
    let mut eps = inproc::mesh(2, 64 * 1024);
    let big = payload(150 * 1024, 1);
    let mut b = eps.pop().unwrap();
    let mut a = eps.pop().unwrap();
    let t = a.isend(1, Tag::Aura, &big).unwrap();
    a.wait(&t).unwrap();
    assert_eq!(a.counters().sent[Tag::Aura as usize].envelopes, 3);
    assert_eq!(b.recv_matched(0, Tag::Aura, true).unwrap().unwrap(), big);
    assert_eq!(b.counters().received[Tag::Aura as usize].envelopes, 3);

    a.isend(1, Tag::Migrate, &[7]).unwrap();
    assert_eq!(b.recv_matched(0, Tag::Migrate, true).unwrap().unwrap(), vec![7]);
    assert_eq!(a.counters().sent[Tag::Migrate as usize].envelopes, 1);
}

#[test]
fn self_send_nonblocking_and_fifo() {
    let mut eps = inproc::mesh(1, 1024);
    let mut a = eps.pop().unwrap();
    assert_eq!(a.recv_matched(0, Tag::Lb, false).unwrap(), None);
    a.isend(0, Tag::Lb, b"first").unwrap();
    a.isend(0, Tag::Lb, b"second").unwrap();
    assert_eq!(a.recv_matched(0, Tag::Lb, false).unwrap().unwrap(), b"first");
    assert_eq!(a.recv_matched(0, Tag::Lb, false).unwrap().unwrap(), b"second");
    assert_eq!(a.recv_matched(0, Tag::Lb, false).unwrap(), None);
    assert!(matches!(a.recv_matched(3, Tag::Lb, false), Err(TransportError::NoSuchPeer(3))));
}

#[test]
fn batching_does_not_change_contents() {
    for bb in [1024, 64 * 1024, 1 << 20] {
        let mut eps = inproc::mesh(2, bb);
        let data = payload(300_000, bb as u64);
        let mut b = eps.pop().unwrap();
        let mut a = eps.pop().unwrap();
        a.isend(1, Tag::Aura, &data).unwrap();
        a.isend(1, Tag::Aura, &[]).unwrap();
        assert_eq!(b.recv_matched(0, Tag::Aura, true).unwrap().unwrap(), data);
        assert_eq!(b.recv_matched(0, Tag::Aura, true).unwrap().unwrap(), Vec::<u8>::new());
        drop(a);
    }
}

#[test]
fn cancel_only_unsubmitted_messages() {
    let mut eps = inproc::mesh(2, 1);
    let b = eps.pop().unwrap();
    let mut a = eps.pop().unwrap();
    let first = a.isend(1, Tag::Aura, b"x").unwrap();
    assert!(a.test(&first));
    assert!(!a.cancel(&first));
    // overfill the bounded queue so the tail stays pending
    let filler = vec![0u8; 5000];
    a.isend(1, Tag::Aura, &filler).unwrap();
    let last = a.isend(1, Tag::Aura, b"dropped").unwrap();
    assert!(!a.test(&last));
    assert!(a.cancel(&last));
    a.isend(1, Tag::Aura, b"kept").unwrap();
    // the sender only drains while it polls
    let h = thread::spawn(move || {
        let mut b = b;
        let m: Vec<Vec<u8>> = (0..3).map(|_| b.recv_matched(0, Tag::Aura, true).unwrap().unwrap()).collect();
        (b, m)
    });
    a.flush_all(Duration::from_secs(10)).unwrap();
    let (mut b, m) = h.join().unwrap();
    assert_eq!(m[0], b"x");
    assert_eq!(m[1].len(), 5000);
    assert_eq!(m[2], b"kept");
    b.post_speculative(0, Tag::Aura);
    assert!(b.is_posted(0, Tag::Aura));
    assert!(b.cancel_speculative(0, Tag::Aura));
    assert!(!b.cancel_speculative(0, Tag::Aura));
}

/// Every rank replays the same seeded plan: `count` messages from each rank
/// to random peers and tags, stamped with a per-(src, dst, tag) sequence.
fn chaos(mut ep: Endpoint, count: usize, seed: u64) -> usize {
    let n = ep.size();
    let me = ep.rank() as usize;
    let tags = [Tag::Aura, Tag::Migrate, Tag::Lb];
    let mut plan = Vec::new();
    for src in 0..n {
        let mut r = FuzzRng::new(seed ^ src as u64);
        let mut seqs = std::collections::HashMap::new();
        for _ in 0..count {
            let dst = r.below(n);
            let tag = tags[r.below(3)];
            let len = r.below(3000);
            let s = seqs.entry((dst, tag)).or_insert(0u64);
            plan.push((src, dst, tag, *s, len));
            *s += 1;
        }
    }
    let mine: Vec<_> = plan.iter().filter(|p| p.0 == me).collect();
    let mut expect: std::collections::BTreeMap<(usize, Tag), u64> = Default::default();
    for p in plan.iter().filter(|p| p.1 == me) {
        *expect.entry((p.0, p.2)).or_default() += 1;
    }
    let mut got: std::collections::BTreeMap<(usize, Tag), u64> = Default::default();
    let mut r = FuzzRng::new(seed ^ 0xabc ^ me as u64);
    let mut sent = 0;
    let total: u64 = expect.values().sum();
    let mut received = 0;
    let keys: Vec<_> = expect.keys().copied().collect();
    while sent < mine.len() || received < total {
        if sent < mine.len() && r.chance(0.5) {
            let (_, dst, tag, seq, len) = *mine[sent];
            let mut m = seq.to_le_bytes().to_vec();
            m.extend(std::iter::repeat_n((seq % 251) as u8, len));
            ep.isend(dst as u32, tag, &m).unwrap();
            sent += 1;
        } else if !keys.is_empty() {
            let k = keys[r.below(keys.len())];
            if let Some(m) = ep.recv_matched(k.0 as u32, k.1, false).unwrap() {
                let seq = u64::from_le_bytes(m[..8].try_into().unwrap());
                let want = got.entry(k).or_default();
                assert_eq!(seq, *want, "order broken from {} on {:?}", k.0, k.1);
                assert!(m[8..].iter().all(|&b| b == (seq % 251) as u8));
                *want += 1;
                received += 1;
            } else {
                thread::sleep(Duration::from_micros(50));
            }
        }
    }
    assert_eq!(got, expect);
    ep.barrier(1).unwrap();
    received as usize
}

#[test]
fn chaos_eight_ranks_exactly_once_in_order() {
    let got = run_all(inproc::mesh(8, 1024), |ep| chaos(ep, 100, 42));
    assert_eq!(got.iter().sum::<usize>(), 800);
}

#[test]
fn allgather_orders_by_rank() {
    let one = run_all(inproc::mesh(1, 64), |mut ep| ep.allgather(0, b"solo").unwrap());
    assert_eq!(one, vec![vec![b"solo".to_vec()]]);

    let four = run_all(inproc::mesh(4, 64), |mut ep| ep.allgather(7, &[ep.rank() as u8]).unwrap());
    for g in four {
        assert_eq!(g, vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    let blobs: Vec<Vec<u8>> = (0..5).map(|r| {
        let n = FuzzRng::new(r).below(1025);
        payload(n, r + 100)
    }).collect();
    let want = blobs.clone();
    let got = run_all(inproc::mesh(5, 100), move |mut ep| {
        let me = ep.rank() as usize;
        let mine = blobs[me].clone();
        ep.allgather(3, &mine).unwrap()
    });
    for g in got {
        assert_eq!(g, want);
    }

    let sums = run_all(inproc::mesh(3, 64), |mut ep| ep.sum_over_all_ranks(9, &[1, ep.rank() as u64]).unwrap());
    assert!(sums.iter().all(|s| s == &vec![3, 3]));
}

#[test]
fn allgather_phase_mismatch_is_reported_everywhere() {
    let got = run_all(inproc::mesh(3, 64), |mut ep| {
        let phase = if ep.rank() == 2 { 11 } else { 10 };
        ep.allgather(phase, b"x")
    });
    for g in got {
        assert!(matches!(g, Err(TransportError::CollectiveMismatch { .. })), "{g:?}");
    }
}

#[test]
fn closed_peer_is_reported() {
    let mut eps = inproc::mesh(2, 64);
    let b = eps.pop().unwrap();
    let mut a = eps.pop().unwrap();
    drop(b);
    assert_eq!(a.recv_matched(1, Tag::Aura, true), Err(TransportError::PeerClosed(1)));
}

#[test]
fn abort_reaches_peers() {
    let mut eps = inproc::mesh(2, 64);
    let mut b = eps.pop().unwrap();
    let mut a = eps.pop().unwrap();
    a.abort();
    assert_eq!(b.recv_matched(0, Tag::Aura, true), Err(TransportError::Aborted(0)));
}

fn free_roster(n: usize) -> Vec<String> {
    let ls: Vec<_> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    ls.iter().map(|l| l.local_addr().unwrap().to_string()).collect()
}

fn tcp_mesh(n: usize, batch: usize) -> Vec<Endpoint> {
    let roster = free_roster(n);
    let hs: Vec<_> = (0..n)
        .map(|r| {
            let roster = roster.clone();
            thread::spawn(move || tcp::connect(&roster, r as u32, batch, Duration::from_secs(20)).unwrap())
        })
        .collect();
    hs.into_iter().map(|h| h.join().unwrap()).collect()
}

#[test]
fn tcp_matches_inproc_semantics() {
    let got = run_all(tcp_mesh(4, 1024), |ep| chaos(ep, 60, 9));
    assert_eq!(got.iter().sum::<usize>(), 240);

    let big = payload(150 * 1024, 5);
    let want = big.clone();
    let res = run_all(tcp_mesh(2, 64 * 1024), move |mut ep| {
        if ep.rank() == 0 {
            ep.isend(1, Tag::Aura, &big).unwrap();
            ep.isend(0, Tag::Aura, b"me").unwrap();
            let own = ep.recv_matched(0, Tag::Aura, true).unwrap().unwrap();
            ep.barrier(2).unwrap();
            (own, ep.counters().sent[Tag::Aura as usize].envelopes)
        } else {
            let m = ep.recv_matched(0, Tag::Aura, true).unwrap().unwrap();
            let g = ep.allgather(2, &[]).unwrap();
            assert_eq!(g.len(), 2);
            (m, 0)
        }
    });
    assert_eq!(res[0], (b"me".to_vec(), 4));
    assert_eq!(res[1].0, want);
}

#[test]
fn tcp_peer_close_is_reported() {
    let mut eps = tcp_mesh(2, 64);
    let b = eps.pop().unwrap();
    let mut a = eps.pop().unwrap();
    drop(b);
    assert_eq!(a.recv_matched(1, Tag::Aura, true), Err(TransportError::PeerClosed(1)));
}
