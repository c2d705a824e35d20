//! `vif-sim`: the kernel-side end of the packet tunnel.

use std::net::SocketAddr;

use anyhow::{Context, Result};
use clap::Parser;
use gridloop::signals::terminated;
use gridloop_vif::{run_vifsim, Mode, VifSimConfig};

#[derive(Debug, Parser)]
#[command(about = "Serve one or many vifs to the co-simulation kernel")]
struct Args {
    /// Kernel endpoint to connect to.
    #[arg(long)]
    kernel: SocketAddr,
    /// UDP endpoint the vifs send to.
    #[arg(long)]
    listen: SocketAddr,
    /// per-container or mux.
    #[arg(long, default_value = "per-container")]
    mode: Mode,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async {
        let shutdown = terminated()?;
        run_vifsim(VifSimConfig::new(args.kernel, args.listen, args.mode), shutdown).await.context("vif-sim failed")
    })?;
    Ok(())
}
