use std::io::{self, Write};

use serde_json::{json, Value};

use crate::model::{ProcessId, Time};
use crate::node::{AppEvent, NodeEvent, PassiveCause};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub at: Time,
    pub node: ProcessId,
    pub event: NodeEvent,
}

fn opt_hex(v: &Option<bytes::Bytes>) -> Value {
    match v {
        Some(b) => Value::String(hex::encode(b)),
        None => Value::Null,
    }
}

impl TraceRecord {
    pub fn to_json(&self) -> Value {
        let mut v = match &self.event {
            NodeEvent::Broadcast { id, value } => json!({
                "kind": "broadcast", "origin": id.origin.0, "seq": id.seq, "value": hex::encode(value),
            }),
            NodeEvent::BroadcastRefused(e) => {
                json!({ "kind": "broadcast_refused", "reason": e.to_string() })
            }
            NodeEvent::Delivered(d) => json!({
                "kind": "deliver", "origin": d.id.origin.0, "seq": d.id.seq,
                "value": hex::encode(&d.value), "proof_sigs": d.proof.len(),
            }),
            NodeEvent::Passive { cause, was_active } => {
                let (cause, detail) = match cause {
                    PassiveCause::Heartbeat { seq, signers } => {
                        ("heartbeat", json!({ "seq": seq, "signers": signers }))
                    }
                    PassiveCause::EchoTimeout(id) => (
                        "echo_timeout",
                        json!({ "origin": id.origin.0, "seq": id.seq }),
                    ),
                    PassiveCause::DeliverTimeout(id) => (
                        "deliver_timeout",
                        json!({ "origin": id.origin.0, "seq": id.seq }),
                    ),
                };
                json!({ "kind": "passive", "cause": cause, "detail": detail, "was_active": was_active })
            }
            NodeEvent::Resumed => json!({ "kind": "resumed" }),
            NodeEvent::Rejected(r) => json!({ "kind": "rejected", "reason": r.to_string() }),
            NodeEvent::App(AppEvent::Proposed { instance, value }) => {
                json!({ "kind": "propose", "instance": instance, "value": opt_hex(value) })
            }
            NodeEvent::App(AppEvent::Decided {
                instance,
                value,
                vector,
            }) => json!({
                "kind": "decide", "instance": instance, "value": opt_hex(value),
                "vector": vector.iter().map(opt_hex).collect::<Vec<_>>(),
            }),
            NodeEvent::App(AppEvent::AtomicBroadcast { seq, payload }) => {
                json!({ "kind": "atomic_broadcast", "seq": seq, "payload": hex::encode(payload) })
            }
            NodeEvent::App(AppEvent::AtomicDelivered {
                position,
                instance,
                leader,
                origin,
                seq,
                payload,
            }) => json!({
                "kind": "atomic_deliver", "position": position, "instance": instance,
                "leader": leader.0, "origin": origin.0,
                "seq": seq, "payload": hex::encode(payload),
            }),
            NodeEvent::App(AppEvent::Violation(what)) => {
                json!({ "kind": "violation", "what": what })
            }
            NodeEvent::App(AppEvent::Warning(what)) => json!({ "kind": "warning", "what": what }),
        };
        let obj = v.as_object_mut().expect("records are objects");
        obj.insert("t_us".into(), json!(self.at));
        obj.insert("node".into(), json!(self.node.0));
        v
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(records: &[TraceRecord], mut w: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, &r.to_json())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
