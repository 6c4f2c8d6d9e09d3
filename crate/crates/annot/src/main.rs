use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sessionseg_annot::http::router;
use sessionseg_annot::store::SystemClock;
use sessionseg_annot::ServiceConfig;

/// Serve sessions for gap labeling.
#[derive(Parser)]
#[command(name = "sessionseg-annot", version)]
struct Args {
    /// TOML service configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the bind address from the config.
    #[arg(long)]
    bind: Option<String>,
}

#[tokio::main]
async fn main() -> ExitCode {
    let args = Args::parse();
    let mut cfg = match ServiceConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(b) = args.bind {
        cfg.bind = b;
    }
    let state = match cfg.build_state(Box::new(SystemClock)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let listener = match tokio::net::TcpListener::bind(&cfg.bind).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {}: {e}", cfg.bind);
            return ExitCode::from(1);
        }
    };
    eprintln!("listening on http://{}", cfg.bind);
    let app = router(state, cfg.ui_dir.clone());
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    match axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
