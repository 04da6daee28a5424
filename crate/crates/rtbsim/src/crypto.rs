//! Simulated signatures, signer sets, and message validation.
//!
//! Authenticity comes from a keyed 64-bit tag over a SHA-256 digest of the
//! canonical payload. Schemes differ only in the wire size they are charged.

use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::Writer;
use crate::model::{BroadcastId, ProcessId};
use crate::wire::{DeliverMsg, EchoMsg, InstanceMsg};

/// Largest process count a signer mask can represent.
pub const MAX_PROCESSES: usize = 128;

/// Domain-separation tag of a signed payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PayloadKind {
    Heartbeat,
    Echo,
    Deliver,
    /// A value in an interactive-consistency relay chain.
    Relay,
}

impl PayloadKind {
    fn tag(self) -> u8 {
        match self {
            PayloadKind::Heartbeat => b'H',
            PayloadKind::Echo => b'E',
            PayloadKind::Deliver => b'D',
            PayloadKind::Relay => b'C',
        }
    }
}

/// Set of process ids, one bit each.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct SignerMask(pub u128);

impl SignerMask {
    pub const EMPTY: SignerMask = SignerMask(0);

    pub fn single(p: ProcessId) -> Self {
        SignerMask(1u128 << p.0)
    }

    pub fn contains(self, p: ProcessId) -> bool {
        self.0 >> p.0 & 1 == 1
    }

    pub fn insert(&mut self, p: ProcessId) -> bool {
        let had = self.contains(p);
        self.0 |= 1u128 << p.0;
        !had
    }

    pub fn union(self, other: SignerMask) -> SignerMask {
        SignerMask(self.0 | other.0)
    }

    pub fn minus(self, other: SignerMask) -> SignerMask {
        SignerMask(self.0 & !other.0)
    }

    pub fn is_subset_of(self, other: SignerMask) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = ProcessId> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                return None;
            }
            let i = bits.trailing_zeros();
            bits &= bits - 1;
            Some(ProcessId(i as u16))
        })
    }
}

impl fmt::Debug for SignerMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(|p| p.0)).finish()
    }
}

impl FromIterator<ProcessId> for SignerMask {
    fn from_iter<I: IntoIterator<Item = ProcessId>>(iter: I) -> Self {
        let mut m = SignerMask::EMPTY;
        for p in iter {
            m.insert(p);
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Signature {
    pub signer: ProcessId,
    pub tag: u64,
}

/// Signatures on one payload, at most one per signer, ordered by signer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SignatureSet {
    mask: SignerMask,
    sigs: Vec<Signature>,
}

impl SignatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_sig(sig: Signature) -> Self {
        SignatureSet {
            mask: SignerMask::single(sig.signer),
            sigs: vec![sig],
        }
    }

    pub fn len(&self) -> usize {
        self.sigs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigs.is_empty()
    }

    pub fn mask(&self) -> SignerMask {
        self.mask
    }

    pub fn contains(&self, signer: ProcessId) -> bool {
        self.mask.contains(signer)
    }

    pub fn get(&self, signer: ProcessId) -> Option<&Signature> {
        if !self.contains(signer) {
            return None;
        }
        self.sigs
            .binary_search_by_key(&signer, |s| s.signer)
            .ok()
            .map(|i| &self.sigs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Signature> {
        self.sigs.iter()
    }

    /// Adds `sig` unless its signer is already present. Returns whether it was added.
    pub fn insert(&mut self, sig: Signature) -> bool {
        if !self.mask.insert(sig.signer) {
            return false;
        }
        let at = self.sigs.partition_point(|s| s.signer < sig.signer);
        self.sigs.insert(at, sig);
        true
    }

    /// Adds every signature of `other` whose signer is new. Returns how many were added.
    pub fn merge(&mut self, other: &SignatureSet) -> usize {
        if other.mask.is_subset_of(self.mask) {
            return 0;
        }
        let before = self.sigs.len();
        for s in other.iter() {
            if !self.mask.contains(s.signer) {
                self.mask.insert(s.signer);
                self.sigs.push(*s);
            }
        }
        self.sigs.sort_unstable_by_key(|s| s.signer);
        self.sigs.len() - before
    }
}

impl FromIterator<Signature> for SignatureSet {
    fn from_iter<I: IntoIterator<Item = Signature>>(iter: I) -> Self {
        let mut set = SignatureSet::new();
        for s in iter {
            set.insert(s);
        }
        set
    }
}

/// 64-bit digest of the canonical encoding of a signed payload.
pub fn payload_digest(kind: PayloadKind, id: BroadcastId, value: &[u8]) -> u64 {
    let mut w = Writer::new();
    w.u8(kind.tag()).u16(id.origin.0).u64(id.seq).bytes(value);
    let out = Sha256::digest(w.finish());
    u64::from_be_bytes(out[..8].try_into().expect("sha256 yields 32 bytes"))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-process signing keys for one run.
#[derive(Clone, Debug)]
pub struct KeyRing {
    keys: Vec<u64>,
}

impl KeyRing {
    pub fn new(n: usize, seed: u64) -> Self {
        let keys = (0..n as u64)
            .map(|i| mix(seed ^ mix(i.wrapping_add(0x5eed))))
            .collect();
        KeyRing { keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    fn tag(&self, signer: ProcessId, digest: u64) -> Option<u64> {
        let key = *self.keys.get(signer.index())?;
        Some(mix(key ^ mix(digest)))
    }

    pub fn sign_digest(&self, signer: ProcessId, digest: u64) -> Signature {
        let tag = self.tag(signer, digest).expect("signer has a key");
        Signature { signer, tag }
    }

    pub fn sign(
        &self,
        signer: ProcessId,
        kind: PayloadKind,
        id: BroadcastId,
        value: &[u8],
    ) -> Signature {
        self.sign_digest(signer, payload_digest(kind, id, value))
    }

    pub fn verify_digest(&self, sig: &Signature, digest: u64) -> bool {
        self.tag(sig.signer, digest) == Some(sig.tag)
    }

    pub fn verify(
        &self,
        sig: &Signature,
        kind: PayloadKind,
        id: BroadcastId,
        value: &[u8],
    ) -> bool {
        self.verify_digest(sig, payload_digest(kind, id, value))
    }

    /// Verifies the signatures of `set` whose signers are in `only`.
    /// Returns the number checked.
    pub fn verify_subset(
        &self,
        set: &SignatureSet,
        digest: u64,
        only: SignerMask,
    ) -> Result<usize, RejectReason> {
        let mut checked = 0;
        for s in set.iter().filter(|s| only.contains(s.signer)) {
            checked += 1;
            if !self.verify_digest(s, digest) {
                return Err(RejectReason::BadSig(s.signer));
            }
        }
        Ok(checked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RejectReason {
    #[error("signature by {0} does not verify")]
    BadSig(ProcessId),
    #[error("signature set lacks the originator's signature")]
    MissingSenderSig,
    #[error("deliver message carries only {got} echo signatures, need {need}")]
    SubQuorumDeliver { got: usize, need: usize },
}

pub fn validate_echo(keys: &KeyRing, msg: &EchoMsg) -> Result<(), RejectReason> {
    if !msg.sigs.contains(msg.id.origin) {
        return Err(RejectReason::MissingSenderSig);
    }
    let d = payload_digest(PayloadKind::Echo, msg.id, &msg.value);
    keys.verify_subset(&msg.sigs, d, msg.sigs.mask())?;
    Ok(())
}

pub fn validate_deliver(keys: &KeyRing, f: usize, msg: &DeliverMsg) -> Result<(), RejectReason> {
    if !msg.echo_sigs.contains(msg.id.origin) {
        return Err(RejectReason::MissingSenderSig);
    }
    let need = crate::model::quorum_size(f);
    if msg.echo_sigs.len() < need {
        return Err(RejectReason::SubQuorumDeliver {
            got: msg.echo_sigs.len(),
            need,
        });
    }
    let de = payload_digest(PayloadKind::Echo, msg.id, &msg.value);
    keys.verify_subset(&msg.echo_sigs, de, msg.echo_sigs.mask())?;
    let dd = payload_digest(PayloadKind::Deliver, msg.id, &msg.value);
    keys.verify_subset(&msg.deliver_sigs, dd, msg.deliver_sigs.mask())?;
    Ok(())
}

/// Full validation of an instance message, with no reliance on local state.
pub fn validate_message(keys: &KeyRing, f: usize, msg: &InstanceMsg) -> Result<(), RejectReason> {
    match msg {
        InstanceMsg::Echo(e) => validate_echo(keys, e),
        InstanceMsg::Deliver(d) => validate_deliver(keys, f, d),
    }
}
