use std::process::{Child, Command, Stdio};

use anyhow::{Context, Result};
use fedflow_core::experiment::{run_with_endpoint, ExperimentConfig};
use fedflow_core::transport::TcpEndpoint;
use fedflow_core::workflows::{RunOutput, COORDINATOR};
use tracing::{info, warn};

struct Clients(Vec<(String, Child)>);

impl Drop for Clients {
    fn drop(&mut self) {
        for (_, child) in &mut self.0 {
            if let Ok(None) = child.try_wait() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

/// Coordinator in this process over TCP, one spawned `client` process per client.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let ep = TcpEndpoint::bind(COORDINATOR, "127.0.0.1:0").context("binding coordinator")?;
    let addr = ep.local_addr().to_string();
    let exe = std::env::current_exe().context("locating own executable")?;
    let timeout = (cfg.round_timeout_s * 3.0).to_string();
    let mut clients = Clients(Vec::new());
    for id in cfg.client_ids()? {
        let child = Command::new(&exe)
            .args(["client", "--connect", &addr, "--id", &id, "--timeout", &timeout])
            .stdin(Stdio::null())
            .spawn()
            .with_context(|| format!("spawning client {id}"))?;
        info!(client = %id, pid = child.id(), "client process started");
        clients.0.push((id, child));
    }
    let out = run_with_endpoint(cfg, &ep)?;
    for (id, child) in &mut clients.0 {
        let status = child.wait().with_context(|| format!("waiting for client {id}"))?;
        if !status.success() {
            warn!(client = %id, %status, "client process exited with failure");
        }
    }
    Ok(out)
}
