//! `vif`: runs beside an application and tunnels its raw IP packets to a
//! vif-sim over UDP.

use std::net::SocketAddr;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use gridloop::signals::terminated;
use gridloop_vif::{run_vif, HelloBurst, TransportConfig, VifConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Transport {
    Tun,
    Loopback,
}

#[derive(Debug, Parser)]
#[command(about = "Tunnel an application's packets to a vif-sim")]
struct Args {
    /// vif-sim endpoint.
    #[arg(long)]
    peer: SocketAddr,
    #[arg(long, value_enum, default_value = "loopback")]
    transport: Transport,
    /// Bytes held while no vif-sim is listening.
    #[arg(long, default_value_t = 1 << 20)]
    buffer_limit: usize,
    /// Local tunnel socket.
    #[arg(long, default_value = "0.0.0.0:0")]
    bind: SocketAddr,
    /// Loopback transport: where this vif receives the app's packets.
    #[arg(long)]
    device: Option<SocketAddr>,
    /// Loopback transport: the app's packet socket.
    #[arg(long)]
    app: Option<SocketAddr>,
    #[arg(long, default_value = "tun0")]
    tun_name: String,
    /// Address (CIDR) to configure on the tun device; makes it the default route.
    #[arg(long)]
    tun_addr: Option<String>,
    #[arg(long, default_value_t = 5)]
    hello_count: u32,
    #[arg(long, default_value_t = 100)]
    hello_interval_ms: u64,
    #[arg(long, default_value_t = 1000)]
    hello_retry_ms: u64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let transport = match args.transport {
        Transport::Loopback => {
            let (Some(device), Some(app)) = (args.device, args.app) else {
                bail!("loopback transport needs --device and --app");
            };
            TransportConfig::Loopback { device, app }
        }
        Transport::Tun => TransportConfig::Tun { name: args.tun_name, addr: args.tun_addr },
    };
    let config = VifConfig {
        transport,
        peer: args.peer,
        bind: args.bind,
        buffer_limit: args.buffer_limit,
        hello: HelloBurst {
            count: args.hello_count,
            interval: Duration::from_millis(args.hello_interval_ms),
            retry: Duration::from_millis(args.hello_retry_ms),
        },
    };
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async {
        let shutdown = terminated()?;
        run_vif(config, shutdown).await.context("vif failed")
    })?;
    Ok(())
}
