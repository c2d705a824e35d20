use std::any::Any;
use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

use super::simulator::{DataRequest, EntityInfo, Inputs, Outputs, SimError, SimMeta, Simulator};
use super::wire::{FrameDecoder, MsgKind, WireMessage};
use crate::time::SimTime;

pub const DEFAULT_RPC_TIMEOUT: Duration = Duration::from_secs(10);

/// A simulator living in another process, reached over one TCP connection.
pub struct RemoteSimulator {
    stream: TcpStream,
    decoder: FrameDecoder,
    next_id: u64,
    timeout: Duration,
    in_flight: Option<(u64, &'static str)>,
    buf: Vec<u8>,
}

impl RemoteSimulator {
    pub fn new(stream: TcpStream, timeout: Duration) -> std::io::Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_nonblocking(false)?;
        Ok(RemoteSimulator {
            stream,
            decoder: FrameDecoder::new(),
            next_id: 0,
            timeout,
            in_flight: None,
            buf: vec![0; 64 * 1024],
        })
    }

    /// Wait up to `timeout` for a simulator process to connect.
    pub fn accept(listener: &TcpListener, timeout: Duration) -> Result<Self, SimError> {
        listener.set_nonblocking(true).map_err(|e| SimError::Disconnected(e.to_string()))?;
        let deadline = Instant::now() + timeout;
        loop {
            match listener.accept() {
                Ok((stream, _)) => {
                    return RemoteSimulator::new(stream, DEFAULT_RPC_TIMEOUT)
                        .map_err(|e| SimError::Disconnected(e.to_string()))
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(SimError::Timeout("simulator to connect".into()));
                    }
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(SimError::Disconnected(e.to_string())),
            }
        }
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    fn send(&mut self, method: &'static str, args: Vec<Value>, kwargs: Map<String, Value>) -> Result<(), SimError> {
        if let Some((_, m)) = self.in_flight {
            return Err(SimError::Protocol(format!("{method} sent while {m} is outstanding")));
        }
        self.next_id += 1;
        let frame = WireMessage::request(self.next_id, method, args, kwargs)
            .encode()
            .map_err(|e| SimError::Protocol(e.to_string()))?;
        self.stream.write_all(&frame).map_err(|e| SimError::Disconnected(e.to_string()))?;
        self.in_flight = Some((self.next_id, method));
        Ok(())
    }

    fn recv(&mut self) -> Result<Value, SimError> {
        let Some((id, method)) = self.in_flight else {
            return Err(SimError::Protocol("no request outstanding".into()));
        };
        let deadline = Instant::now() + self.timeout;
        loop {
            if let Some(msg) = self.decoder.next_message().map_err(|e| SimError::Protocol(e.to_string()))? {
                self.in_flight = None;
                if msg.id != id {
                    return Err(SimError::Protocol(format!("reply id {} does not match request id {id}", msg.id)));
                }
                return match msg.kind {
                    MsgKind::Success => Ok(msg.payload),
                    MsgKind::Error => Err(SimError::Remote(msg.payload.as_str().unwrap_or_default().to_string())),
                    MsgKind::Request => Err(SimError::Protocol("unexpected request from simulator".into())),
                };
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(SimError::Timeout(method.to_string()));
            }
            self.stream.set_read_timeout(Some(left)).map_err(|e| SimError::Disconnected(e.to_string()))?;
            match self.stream.read(&mut self.buf) {
                Ok(0) => return Err(SimError::Disconnected(format!("connection closed during {method}"))),
                Ok(n) => self.decoder.feed(&self.buf[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Err(SimError::Timeout(method.to_string()))
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(SimError::Disconnected(e.to_string())),
            }
        }
    }

    pub fn call(&mut self, method: &'static str, args: Vec<Value>, kwargs: Map<String, Value>) -> Result<Value, SimError> {
        self.send(method, args, kwargs)?;
        self.recv()
    }
}

fn parse<T: DeserializeOwned>(what: &str, v: Value) -> Result<T, SimError> {
    serde_json::from_value(v).map_err(|e| SimError::Protocol(format!("bad {what} reply: {e}")))
}

impl Simulator for RemoteSimulator {
    fn init(&mut self, sid: &str, params: &Map<String, Value>) -> Result<SimMeta, SimError> {
        let v = self.call("init", vec![json!(sid)], params.clone())?;
        parse("init", v)
    }

    fn create(&mut self, num: usize, model: &str, params: &Map<String, Value>) -> Result<Vec<EntityInfo>, SimError> {
        let v = self.call("create", vec![json!(num), json!(model)], params.clone())?;
        parse("create", v)
    }

    fn setup_done(&mut self) -> Result<(), SimError> {
        self.call("setup_done", vec![], Map::new()).map(drop)
    }

    fn step(&mut self, t: SimTime, inputs: &Inputs) -> Result<(), SimError> {
        self.start_step(t, inputs)?;
        self.finish_step()
    }

    fn get_data(&mut self, request: &DataRequest) -> Result<Outputs, SimError> {
        self.start_get_data(request)?;
        self.finish_get_data()
    }

    fn stop(&mut self) -> Result<(), SimError> {
        self.timeout = Duration::from_secs(2);
        match self.call("stop", vec![], Map::new()) {
            Ok(_) | Err(SimError::Disconnected(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn start_step(&mut self, t: SimTime, inputs: &Inputs) -> Result<(), SimError> {
        self.send("step", vec![json!(t.as_millis()), json!(inputs)], Map::new())
    }

    fn finish_step(&mut self) -> Result<(), SimError> {
        self.recv().map(drop)
    }

    fn start_get_data(&mut self, request: &DataRequest) -> Result<Option<Outputs>, SimError> {
        self.send("get_data", vec![json!(request)], Map::new())?;
        Ok(None)
    }

    fn finish_get_data(&mut self) -> Result<Outputs, SimError> {
        let v = self.recv()?;
        parse("get_data", v)
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
