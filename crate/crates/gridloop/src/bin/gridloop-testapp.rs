//! Deterministic test app driven over the control channel.
//!
//! Environment: `VIF_DEVICE` (the vif's device socket), `VIF_APP` (this
//! app's packet socket) and `APP_IP` (its simulated address).

use std::io::{stdin, stdout};
use std::net::{Ipv4Addr, SocketAddr};

use anyhow::{Context, Result};
use clap::Parser;
use gridloop::scenario::Role;
use gridloop::testapp::{install_term_handler, serve, AppConfig, AppState, DeviceLink};

#[derive(Debug, Parser)]
struct Args {
    #[arg(long, value_parser = parse_role)]
    role: Role,
    #[arg(long, default_value_t = 1)]
    ident: u16,
    #[arg(long)]
    peer_ip: Option<Ipv4Addr>,
    #[arg(long)]
    ping_every_ms: Option<u64>,
    #[arg(long, default_value_t = 0)]
    prestart_pings: u32,
}

fn parse_role(s: &str) -> Result<Role, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown role {s:?}"))
}

fn env_addr<T: std::str::FromStr>(key: &str) -> Result<Option<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    match std::env::var(key) {
        Ok(v) => Ok(Some(v.parse().with_context(|| format!("bad {key}={v:?}"))?)),
        Err(_) => Ok(None),
    }
}

fn main() -> Result<()> {
    let args = Args::parse();
    install_term_handler(args.role);
    let ip: Option<Ipv4Addr> = env_addr("APP_IP")?;
    let device = match (env_addr::<SocketAddr>("VIF_APP")?, env_addr::<SocketAddr>("VIF_DEVICE")?) {
        (Some(bind), Some(vif)) => Some(DeviceLink::open(bind, vif).context("cannot open packet socket")?),
        _ => None,
    };
    let state = AppState::new(AppConfig {
        role: args.role,
        ident: args.ident,
        ip,
        peer: args.peer_ip,
        ping_every: args.ping_every_ms,
        prestart_pings: args.prestart_pings,
    });
    serve(state, device, stdin().lock(), stdout().lock()).context("control channel")?;
    Ok(())
}
