//! Messages exchanged between processes and their accounted wire size.

use std::rc::Rc;

use bytes::Bytes;

use crate::crypto::{SignatureSet, SignerMask};
use crate::model::{BroadcastId, ProcessId, SigScheme};

/// Fixed per-packet overhead (addressing, kind, lengths).
pub const HEADER_BYTES: usize = 32;
const ID_BYTES: usize = 2 + 8;
const LEN_BYTES: usize = 4;

/// One heartbeat `(origin, seq)` with the set of processes known to have signed it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HbEntry {
    pub origin: ProcessId,
    pub seq: u64,
    pub signers: SignerMask,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HbBundle {
    entries: Vec<HbEntry>,
    signatures: usize,
}

impl HbBundle {
    pub fn new(entries: Vec<HbEntry>) -> Self {
        let signatures = entries.iter().map(|e| e.signers.len()).sum();
        HbBundle {
            entries,
            signatures,
        }
    }

    pub fn entries(&self) -> &[HbEntry] {
        &self.entries
    }

    pub fn signature_count(&self) -> usize {
        self.signatures
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EchoMsg {
    pub id: BroadcastId,
    pub value: Bytes,
    pub sigs: Rc<SignatureSet>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeliverMsg {
    pub id: BroadcastId,
    pub value: Bytes,
    /// Quorum of echo signatures proving the value.
    pub echo_sigs: Rc<SignatureSet>,
    pub deliver_sigs: Rc<SignatureSet>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InstanceMsg {
    Echo(EchoMsg),
    Deliver(DeliverMsg),
}

impl InstanceMsg {
    pub fn id(&self) -> BroadcastId {
        match self {
            InstanceMsg::Echo(m) => m.id,
            InstanceMsg::Deliver(m) => m.id,
        }
    }

    pub fn value(&self) -> &Bytes {
        match self {
            InstanceMsg::Echo(m) => &m.value,
            InstanceMsg::Deliver(m) => &m.value,
        }
    }

    pub fn signature_count(&self) -> usize {
        match self {
            InstanceMsg::Echo(m) => m.sigs.len(),
            InstanceMsg::Deliver(m) => m.echo_sigs.len() + m.deliver_sigs.len(),
        }
    }

    fn unsigned_bytes(&self) -> usize {
        let sets = match self {
            InstanceMsg::Echo(_) => 1,
            InstanceMsg::Deliver(_) => 2,
        };
        ID_BYTES + LEN_BYTES + self.value().len() + sets * LEN_BYTES
    }
}

/// What a process puts on a link in one send.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packet {
    pub from: ProcessId,
    pub heartbeats: Option<Rc<HbBundle>>,
    pub instance: Option<InstanceMsg>,
}

impl Packet {
    pub fn signature_count(&self) -> usize {
        self.heartbeats.as_ref().map_or(0, |b| b.signature_count())
            + self.instance.as_ref().map_or(0, |m| m.signature_count())
    }

    /// Bytes this packet occupies on the wire under `scheme`.
    pub fn wire_size(&self, scheme: SigScheme) -> usize {
        let hb = self.heartbeats.as_ref().map_or(0, |b| {
            LEN_BYTES + b.entries().len() * (ID_BYTES + LEN_BYTES)
        });
        let inst = self.instance.as_ref().map_or(0, |m| m.unsigned_bytes());
        HEADER_BYTES + hb + inst + self.signature_count() * scheme.signature_size()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{KeyRing, PayloadKind};

    #[test]
    fn size_scales_with_signature_scheme() {
        let keys = KeyRing::new(4, 0);
        let id = BroadcastId::new(ProcessId(0), 0);
        let sigs: SignatureSet = (0..3)
            .map(|i| keys.sign(ProcessId(i), PayloadKind::Echo, id, b"x"))
            .collect();
        let p = Packet {
            from: ProcessId(0),
            heartbeats: Some(Rc::new(HbBundle::new(vec![HbEntry {
                origin: ProcessId(1),
                seq: 4,
                signers: [0u16, 1].into_iter().map(ProcessId).collect(),
            }]))),
            instance: Some(InstanceMsg::Echo(EchoMsg {
                id,
                value: Bytes::from_static(b"x"),
                sigs: Rc::new(sigs),
            })),
        };
        assert_eq!(p.signature_count(), 5);
        let rsa = p.wire_size(SigScheme::Rsa2048Like);
        let ecdsa = p.wire_size(SigScheme::EcdsaP256Like);
        assert_eq!(rsa - ecdsa, 5 * (256 - 71));
        assert_eq!(p.wire_size(SigScheme::Stub) - 5 * 8, rsa - 5 * 256);
    }
}
