//! Command-line pipeline and annotation service over a patchmap project directory.

pub mod args;
pub mod commands;
pub mod project;
pub mod service;

use std::net::SocketAddr;

use anyhow::{Context, Result};

use args::{Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    let dir = match cli.project {
        Some(d) => d,
        None => std::env::current_dir().context("reading the current directory")?,
    };
    run_in(&dir, cli.command)
}

pub fn run_in(dir: &std::path::Path, command: Command) -> Result<()> {
    match command {
        Command::Tile(a) => commands::tile(dir, &a),
        Command::Train(a) => commands::train(dir, &a),
        Command::Extract(a) => commands::extract(dir, &a),
        Command::Cluster(a) => commands::cluster(dir, &a),
        Command::Sweep(a) => commands::sweep(dir, &a),
        Command::Overlay(a) => commands::overlay(dir, &a),
        Command::Synth(a) => commands::synth(dir, &a),
        Command::Serve(a) => {
            let state = service::AppState::load(dir)?;
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .context("starting the async runtime")?;
            runtime.block_on(service::serve(state, SocketAddr::new(a.host, a.port)))
        }
    }
}
