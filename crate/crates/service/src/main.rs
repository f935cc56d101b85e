use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;
use dea_lab_service::{router, AppState, ServiceConfig, DEFAULT_ACCEL};

#[derive(Parser)]
#[command(name = "dea-lab-service", version, about = "Rig control and telemetry service")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long, default_value_t = 2)]
    channels: u32,
    /// Root of run directories.
    #[arg(long, env = "DEA_LAB_DATA_DIR", default_value = "runs")]
    data_dir: PathBuf,
    /// Simulated seconds per wall second; 0 runs unpaced.
    #[arg(long, default_value_t = DEFAULT_ACCEL)]
    accel: f64,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let config = ServiceConfig {
        channels: args.channels,
        data_dir: args.data_dir,
        accel: if args.accel > 0.0 { args.accel } else { f64::INFINITY },
        ..ServiceConfig::default()
    };
    let state = AppState::new(config);
    let listener = tokio::net::TcpListener::bind(args.bind).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
