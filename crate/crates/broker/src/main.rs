use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use aegon_broker::fetch::HttpFetcher;
use aegon_broker::http::serve;
use aegon_broker::{Broker, BrokerConfig};
use aegon_core::clock::SystemClock;
use aegon_core::keys::{Jwk, Jwks};
use aegon_core::sth::SthCadence;
use clap::Parser;

/// Aegon license broker.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    #[arg(long, env = "AEGON_LISTEN", default_value = "127.0.0.1:8080")]
    listen: String,
    /// Directory for the ledger, tree-head history, keys and registries.
    #[arg(long, env = "AEGON_DATA_DIR", default_value = "aegon-data")]
    data_dir: PathBuf,
    /// Key store path (defaults to <data-dir>/keys.json).
    #[arg(long, env = "AEGON_KEY_STORE")]
    key_store: Option<PathBuf>,
    /// Seconds between signed tree heads.
    #[arg(long, env = "AEGON_STH_INTERVAL", default_value_t = 60)]
    sth_interval: u64,
    /// Appends that force an early tree head.
    #[arg(long, env = "AEGON_STH_MAX_APPENDS", default_value_t = 1000)]
    sth_max_appends: u64,
    #[arg(long, env = "AEGON_SPOT_CHECK_RATE", default_value_t = 0.05)]
    spot_check_rate: f64,
    /// Secret for the daily spot-check salt.
    #[arg(long, env = "AEGON_SPOT_CHECK_SECRET")]
    spot_check_secret: Option<String>,
    /// Publisher domain excluded from spot-checks (repeatable).
    #[arg(long = "dynamic-publisher")]
    dynamic_publishers: Vec<String>,
    /// Seconds of client/server clock difference before provenance events are flagged.
    #[arg(long, env = "AEGON_SKEW_THRESHOLD", default_value_t = 300)]
    skew_threshold: i64,
    /// JWK or JWKS file with pinned attestation roots.
    #[arg(long, env = "AEGON_TRUST_ROOT")]
    trust_root: Option<PathBuf>,
    /// JSON object mapping platform ids to provenance-signing JWKs.
    #[arg(long, env = "AEGON_PLATFORMS")]
    platforms: Option<PathBuf>,
    /// Bearer token required on admin endpoints.
    #[arg(long, env = "AEGON_ADMIN_TOKEN")]
    admin_token: Option<String>,
    /// Rewrite a licensed origin for spot-check fetches, as ORIGIN=BASE_URL.
    #[arg(long = "origin")]
    origins: Vec<String>,
    /// Seconds between background ticks (tree heads, spot-checks).
    #[arg(long, default_value_t = 5)]
    tick: u64,
}

fn load_roots(path: &PathBuf) -> Result<Vec<Jwk>, String> {
    let raw = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Ok(set) = serde_json::from_slice::<Jwks>(&raw) {
        return Ok(set.keys);
    }
    serde_json::from_slice::<Jwk>(&raw).map(|k| vec![k]).map_err(|e| format!("{}: {e}", path.display()))
}

fn config(args: &Args) -> Result<BrokerConfig, String> {
    let mut cfg = BrokerConfig {
        data_dir: Some(args.data_dir.clone()),
        key_store: args.key_store.clone(),
        sth_cadence: SthCadence { interval_ms: args.sth_interval as i64 * 1000, max_appends: args.sth_max_appends },
        spot_check_rate: args.spot_check_rate,
        dynamic_publishers: args.dynamic_publishers.iter().cloned().collect::<HashSet<_>>(),
        skew_threshold: args.skew_threshold,
        admin_token: args.admin_token.clone(),
        ..BrokerConfig::default()
    };
    if !(0.0..=1.0).contains(&cfg.spot_check_rate) {
        return Err("spot-check rate must be within [0, 1]".into());
    }
    if let Some(s) = &args.spot_check_secret {
        cfg.spot_check_secret = s.as_bytes().to_vec();
    }
    if let Some(p) = &args.trust_root {
        cfg.trust_roots = load_roots(p)?;
    }
    if let Some(p) = &args.platforms {
        let raw = std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
        cfg.platforms = serde_json::from_slice::<BTreeMap<String, Jwk>>(&raw).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    Ok(cfg)
}

fn parse_origins(raw: &[String]) -> Result<Vec<(String, String)>, String> {
    raw.iter().map(|o| o.split_once('=').map(|(a, b)| (a.to_string(), b.to_string())).ok_or_else(|| format!("bad --origin {o:?}"))).collect()
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into())).init();
    let args = Args::parse();
    let (cfg, origins) = match config(&args).and_then(|c| Ok((c, parse_origins(&args.origins)?))) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(2);
        }
    };
    let broker = match Broker::open(cfg, Arc::new(SystemClock), Arc::new(HttpFetcher::new(origins))) {
        Ok(b) => Arc::new(b),
        Err(e) => {
            eprintln!("startup failed: {e}");
            return ExitCode::from(2);
        }
    };
    let listener = match tokio::net::TcpListener::bind(&args.listen).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("cannot bind {}: {e}", args.listen);
            return ExitCode::from(2);
        }
    };
    tracing::info!(addr = %args.listen, tree_size = broker.ledger().size(), "broker listening");
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    if let Err(e) = serve(broker, listener, Some(Duration::from_secs(args.tick.max(1))), shutdown).await {
        eprintln!("server error: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
