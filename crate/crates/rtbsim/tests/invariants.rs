use bytes::Bytes;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rtbsim::crypto::{KeyRing, SignerMask};
use rtbsim::harness::acceptance::random_scenario;
use rtbsim::harness::audit::audit;
use rtbsim::harness::workload::{Scenario, Workload};
use rtbsim::model::{ProcessId, ProtocolConfig, SigScheme};
use rtbsim::rtbc::{decide, relay_digest, ConsensusError, IcMsg};
use rtbsim::simnet::Behavior;

fn behavior() -> impl Strategy<Value = Behavior> {
    prop_oneof![
        Just(Behavior::Silent),
        Just(Behavior::Equivocate),
        Just(Behavior::StaleReplay),
        Just(Behavior::MaxDelay),
    ]
}

proptest! {
    #[test]
    fn filter_returns_only_quorum_values(
        f in 1usize..4,
        slots in prop::collection::vec(prop::option::of(0u8..3), 4..13),
    ) {
        let n = slots.len();
        prop_assume!(n > 3 * f);
        let vector: Vec<Option<Bytes>> = slots
            .iter()
            .map(|s| s.map(|v| Bytes::from(vec![v])))
            .collect();
        let count = |v: &Bytes| vector.iter().filter(|s| s.as_ref() == Some(v)).count();
        match decide(&vector, f) {
            Some(v) => prop_assert!(count(&v) > 2 * f),
            None => prop_assert!(vector.iter().flatten().all(|v| count(v) <= 2 * f)),
        }
    }

    #[test]
    fn chains_of_distinct_signers_validate(
        seed: u64,
        inst in 0u64..1000,
        order in Just((0u16..7).collect::<Vec<_>>()).prop_shuffle(),
        len in 1usize..7,
        value in prop::option::of(prop::collection::vec(any::<u8>(), 0..16)),
    ) {
        let keys = KeyRing::new(7, seed);
        let proposer = ProcessId(order[0]);
        let value = value.map(Bytes::from);
        let mut m = IcMsg::propose(&keys, inst, proposer, value.clone());
        let digest = relay_digest(inst, proposer, &value);
        for &p in &order[1..len] {
            m.chain.push(keys.sign_digest(ProcessId(p), digest));
        }
        let relayer = ProcessId(order[len - 1]);
        prop_assert_eq!(m.validate(&keys, relayer), Ok(()));
        prop_assert_eq!(m.signers().len(), len);

        let mut forged = m.clone();
        forged.value = Some(Bytes::from_static(b"forged"));
        prop_assert!(matches!(
            forged.validate(&keys, relayer),
            Err(ConsensusError::BadSignature(_))
        ));
        if len > 1 {
            let mut repeated = m.clone();
            repeated.chain.push(m.chain[0]);
            prop_assert_eq!(
                repeated.validate(&keys, proposer),
                Err(ConsensusError::RepeatedSigner(proposer))
            );
        }
    }

    #[test]
    fn signer_mask_algebra(a: u128, b: u128) {
        let (a, b) = (SignerMask(a), SignerMask(b));
        prop_assert!(a.minus(b).is_subset_of(a));
        prop_assert!(a.is_subset_of(a.union(b)));
        prop_assert!(a.minus(b).iter().all(|p| !b.contains(p)));
        prop_assert_eq!(a.union(b).len(), a.len() + b.minus(a).len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn broadcasts_are_timely_and_safe(
        n in 4usize..=13,
        loss in 0u32..=5,
        behavior in behavior(),
        byz in 0usize..=4,
        seed: u64,
    ) {
        let f = ProtocolConfig::max_faults(n);
        let mut cfg = ProtocolConfig::new(n, f);
        cfg.loss_prob = f64::from(loss) / 10.0;
        cfg.seed = seed;
        let w = Workload::SingleBroadcast;
        let out = Scenario::new(cfg, w.clone())
            .with_adversary(behavior, byz.min(f))
            .run()
            .unwrap();
        let r = audit(&out, &w);
        prop_assert!(r.is_clean(), "{:?}", r.violations);
    }

    #[test]
    fn consensus_batches_are_clean(
        n in prop_oneof![Just(4usize), Just(7)],
        loss in 0u32..=2,
        byz in 0usize..=2,
        mixed: bool,
        seed: u64,
    ) {
        let f = ProtocolConfig::max_faults(n);
        let mut cfg = ProtocolConfig::new(n, f);
        cfg.loss_prob = f64::from(loss) / 10.0;
        cfg.seed = seed;
        let w = Workload::ConsensusBatch { instances: 2, mixed };
        let out = Scenario::new(cfg, w.clone())
            .with_adversary(Behavior::Equivocate, byz.min(f))
            .run()
            .unwrap();
        let r = audit(&out, &w);
        prop_assert!(r.is_clean(), "{:?}", r.violations);
    }

    #[test]
    fn signature_size_only_shifts_bytes(n in 4usize..=16, loss in 0u32..=4, seed: u64) {
        let run = |scheme| {
            let mut cfg = ProtocolConfig::new(n, ProtocolConfig::max_faults(n));
            cfg.loss_prob = f64::from(loss) / 10.0;
            cfg.seed = seed;
            cfg.sig_scheme = scheme;
            Scenario::new(cfg, Workload::SingleBroadcast).run().unwrap()
        };
        let stub = run(SigScheme::Stub);
        let rsa = run(SigScheme::Rsa2048Like);
        prop_assert_eq!(stub.stats.total_signatures(), rsa.stats.total_signatures());
        prop_assert_eq!(stub.stats.total_packets(), rsa.stats.total_packets());
        let per_sig = (SigScheme::Rsa2048Like.signature_size() - SigScheme::Stub.signature_size()) as u64;
        prop_assert_eq!(
            rsa.stats.total_bytes() - stub.stats.total_bytes(),
            per_sig * stub.stats.total_signatures()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn runs_replay_identically(seed: u64) {
        let sc = random_scenario(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = sc.run().unwrap();
        let b = sc.run().unwrap();
        prop_assert_eq!(a.trace_hash, b.trace_hash);
        prop_assert_eq!(a.records.len(), b.records.len());
    }
}
