use std::any::Any;
use std::collections::BTreeMap;

use serde_json::{Map, Value};

use super::{NetworkSim, NodeId, NodeRole};
use crate::kernel::{DataRequest, EntityInfo, Inputs, ModelMeta, Outputs, SimError, SimMeta, Simulator};
use crate::packet::{decode_packets_b64, encode_packets_b64, Packet};
use crate::time::SimTime;

pub const NETWORK_NODE_MODEL: &str = "NetworkNode";
const EID_PREFIX: &str = "SimulatedNetwork";

/// Exposes app gateways of a [`NetworkSim`] as kernel entities with an `rx`
/// input and a `tx` output, both lists of Base64 packets.
pub struct IctSimulator {
    net: NetworkSim,
    entities: BTreeMap<String, NodeId>,
    outbox: BTreeMap<NodeId, Vec<Packet>>,
}

impl IctSimulator {
    pub fn new(net: NetworkSim) -> Self {
        IctSimulator { net, entities: BTreeMap::new(), outbox: BTreeMap::new() }
    }

    pub fn net(&self) -> &NetworkSim {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut NetworkSim {
        &mut self.net
    }

    pub fn eid_for(node: &str) -> String {
        format!("{EID_PREFIX}/{node}")
    }

    fn inject_value(&mut self, node: NodeId, src: &str, v: &Value, t: SimTime) -> Result<(), SimError> {
        let strings = match v {
            Value::Null => return Ok(()),
            Value::Array(items) => items,
            other => return Err(SimError::Protocol(format!("rx from {src} is not a packet list: {other}"))),
        };
        for (i, s) in strings.iter().enumerate() {
            let Some(s) = s.as_str() else {
                return Err(SimError::Protocol(format!("rx from {src}: element {i} is not a string")));
            };
            let injected = match decode_packets_b64(&[s]) {
                Ok(mut p) => self.net.inject(node, p.remove(0), t),
                Err(e) => self.net.reject_malformed(node, format!("rx from {src} element {i}: {e}"), t),
            };
            injected.map_err(|e| SimError::Failed(e.to_string()))?;
        }
        Ok(())
    }
}

impl Simulator for IctSimulator {
    fn init(&mut self, _sid: &str, _params: &Map<String, Value>) -> Result<SimMeta, SimError> {
        let mut meta = SimMeta::default();
        meta.models.insert(NETWORK_NODE_MODEL.into(), ModelMeta::new(&["node"], &["rx"], &["tx"]));
        Ok(meta)
    }

    fn create(&mut self, num: usize, model: &str, params: &Map<String, Value>) -> Result<Vec<EntityInfo>, SimError> {
        if model != NETWORK_NODE_MODEL {
            return Err(SimError::Failed(format!("unknown model {model:?}")));
        }
        if num != 1 {
            return Err(SimError::Failed("NetworkNode entities are created one at a time".into()));
        }
        let name = params
            .get("node")
            .and_then(Value::as_str)
            .ok_or_else(|| SimError::Failed("missing string parameter \"node\"".into()))?;
        let node = self
            .net
            .topology()
            .node_by_name(name)
            .ok_or_else(|| SimError::Failed(format!("unknown node {name:?}")))?;
        if self.net.topology().node(node).role != NodeRole::AppGateway {
            return Err(SimError::Failed(format!("node {name:?} is not an app gateway")));
        }
        let eid = Self::eid_for(name);
        if self.entities.insert(eid.clone(), node).is_some() {
            return Err(SimError::Failed(format!("entity {eid} already exists")));
        }
        Ok(vec![EntityInfo { eid, model: model.into() }])
    }

    fn step(&mut self, t: SimTime, inputs: &Inputs) -> Result<(), SimError> {
        for (eid, attrs) in inputs {
            let node = *self.entities.get(eid).ok_or_else(|| SimError::Failed(format!("unknown entity {eid}")))?;
            if let Some(sources) = attrs.get("rx") {
                for (src, v) in sources {
                    self.inject_value(node, src, v, t)?;
                }
            }
        }
        let delivered = self.net.step(t.next()).map_err(|e| SimError::Failed(e.to_string()))?;
        for (node, packets) in delivered {
            self.outbox.entry(node).or_default().extend(packets);
        }
        Ok(())
    }

    fn get_data(&mut self, request: &DataRequest) -> Result<Outputs, SimError> {
        let mut out = Outputs::new();
        for (eid, attrs) in request {
            let node = *self.entities.get(eid).ok_or_else(|| SimError::Failed(format!("unknown entity {eid}")))?;
            for attr in attrs {
                if attr != "tx" {
                    return Err(SimError::Failed(format!("{eid} has no output {attr:?}")));
                }
                let packets = self.outbox.remove(&node).unwrap_or_default();
                let encoded = encode_packets_b64(&packets);
                out.entry(eid.clone()).or_default().insert(attr.clone(), Value::from(encoded));
            }
        }
        Ok(out)
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
