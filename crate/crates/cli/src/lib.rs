//! Command-line pipeline and HTTP service for creep forecasting.

pub mod args;
pub mod commands;
pub mod service;

use anyhow::{Context, Result};
use creepformer::data::csvio::load_records;

use crate::args::{Cli, Command, ServeArgs};
use crate::service::{AppState, Loaded};

/// Runs one subcommand and returns its stdout report.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = || commands::load_config(cli.config.as_deref());
    match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Fit(a) => commands::fit(a),
        Command::Train(a) => commands::train_cmd(a, &cfg()?),
        Command::Evaluate(a) => commands::evaluate(a, &cfg()?),
        Command::Ablate(a) => commands::ablate(a, &cfg()?),
        Command::Rollout(a) => commands::rollout_cmd(a),
        Command::Explain(a) => commands::explain(a, &cfg()?),
        Command::Flops(a) => commands::flops(a, &cfg()?),
        Command::Serve(a) => serve(a),
    }
}

fn load_for_service(args: &ServeArgs) -> Result<Loaded> {
    let ckpt = commands::load_checkpoint(&args.checkpoint)?;
    let background = match &args.background {
        Some(path) => Some(load_records(path).with_context(|| format!("reading {}", path.display()))?.iter().map(|r| r.features()).collect()),
        None => None,
    };
    Ok(Loaded::new(ckpt, background))
}

fn serve(args: &ServeArgs) -> Result<String> {
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let state = AppState::default();
        let listener = tokio::net::TcpListener::bind(args.bind).await.with_context(|| format!("binding {}", args.bind))?;
        tracing::info!(addr = %args.bind, "listening; model loading");
        let loader_args = ServeArgs {
            checkpoint: args.checkpoint.clone(),
            bind: args.bind,
            background: args.background.clone(),
        };
        let loaded = tokio::task::spawn_blocking(move || load_for_service(&loader_args));
        let server = axum::serve(listener, service::router(state.clone()))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            });
        let install = async {
            let loaded = loaded.await??;
            tracing::info!(params = loaded.checkpoint.model.num_params(), "model loaded");
            state.install(loaded);
            anyhow::Ok(())
        };
        let (served, installed) = tokio::join!(async { server.await }, install);
        installed?;
        served?;
        Ok("server stopped".to_string())
    })
}
