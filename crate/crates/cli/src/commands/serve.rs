use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use mitodiff_annotate::{Catalog, Store};

use super::Reporter;
use crate::error::{CliError, Result};

#[derive(Clone, Debug)]
pub struct ServeArgs {
    pub listen: String,
    /// Directory of patch PNGs, or a dataset directory with `patches/`.
    pub patches: Option<PathBuf>,
    /// Series manifest written by `transform`.
    pub series: Option<PathBuf>,
    pub state: PathBuf,
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Runs the annotation server until SIGINT or SIGTERM, then flushes the
/// vote log and session snapshot. Prints `listening on ADDR` once bound.
pub fn serve(args: &ServeArgs, log: Reporter) -> Result<()> {
    let mut catalog = Catalog::new();
    if let Some(p) = &args.patches {
        let dir = if p.join("patches").is_dir() { p.join("patches") } else { p.clone() };
        if !dir.is_dir() {
            return Err(CliError::validation(format!("patch directory {} does not exist", dir.display())));
        }
        let n = catalog.load_patch_dir(&dir)?;
        log.say(format!("loaded {n} patches from {}", dir.display()));
    }
    if let Some(s) = &args.series {
        if !s.is_file() {
            return Err(CliError::validation(format!("series manifest {} does not exist", s.display())));
        }
        let n = catalog.load_series_manifest(s)?;
        log.say(format!("loaded {n} series"));
    }
    let store = Arc::new(Store::open(catalog, &args.state)?);

    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(CliError::runtime)?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&args.listen)
            .await
            .map_err(|e| CliError::runtime(format!("cannot listen on {}: {e}", args.listen)))?;
        let addr = listener.local_addr().map_err(CliError::runtime)?;
        println!("listening on {addr}");
        let _ = std::io::stdout().flush();
        mitodiff_annotate::serve(listener, store, shutdown_signal())
            .await
            .map_err(|e| CliError::runtime(format!("server: {e}")))
    })?;
    log.say(format!("stopped; state flushed to {}", args.state.display()));
    Ok(())
}
