//! `codevec serve`: load a checkpoint and serve it over HTTP. The socket
//! binds immediately and answers 503 until the checkpoint finishes loading.

use std::path::PathBuf;

use anyhow::{Context, Result};
use codevec_core::checkpoint;

use crate::server::{router, ServeState};

pub struct ServeArgs {
    pub checkpoint: PathBuf,
    pub bind: String,
}

pub fn run(args: &ServeArgs) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting async runtime")?;
    runtime.block_on(async {
        let state = ServeState::loading();
        let listener = tokio::net::TcpListener::bind(&args.bind)
            .await
            .with_context(|| format!("binding {}", args.bind))?;
        println!("listening on http://{}", listener.local_addr()?);

        let loader_state = state.clone();
        let path = args.checkpoint.clone();
        tokio::task::spawn_blocking(move || match checkpoint::load(&path) {
            Ok(ck) => {
                let model_id = ck.model_id.clone();
                loader_state.fill(ck.into());
                println!("model {model_id} ready");
            }
            Err(e) => {
                eprintln!("error: failed to load checkpoint: {e}");
                std::process::exit(1);
            }
        });

        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .context("serving")
    })
}
