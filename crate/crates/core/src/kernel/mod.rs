//! Lockstep co-simulation kernel and its wire protocol.

mod remote;
mod simulator;
pub mod wire;
mod world;

pub use remote::{RemoteSimulator, DEFAULT_RPC_TIMEOUT};
pub use simulator::{DataRequest, EntityInfo, Inputs, ModelMeta, Outputs, SimError, SimMeta, Simulator};
pub use wire::{decode_frame, FrameDecoder, MsgKind, Request, WireError, WireMessage, MAX_FRAME_LEN};
pub use world::{Connection, EntityRef, KernelError, RunAborted, RunReport, SimStats, World};
