use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fedinfer_gateway::app::Gateway;
use fedinfer_gateway::bench::{
    bench_token, run_bench, sweep_in_process, warm_up, write_csv_report, write_csv_sweep, write_json, HttpTarget,
    InProcessTarget, Lengths, Mode, Rate, Target, WorkloadSpec,
};
use fedinfer_gateway::clock::ClockMode;
use fedinfer_gateway::config::GatewayConfig;

#[derive(Parser)]
#[command(name = "bench", about = "Load generator for the fedinfer gateway")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    stream: bool,
    #[arg(long, default_value_t = 512)]
    concurrency: usize,
    #[arg(long, default_value_t = 0.05)]
    error_threshold: f64,
    /// Fixed lengths as PROMPT,OUTPUT tokens; log-normal when omitted.
    #[arg(long, value_parser = parse_fixed)]
    fixed: Option<Lengths>,
    /// Stop sending after this many seconds.
    #[arg(long)]
    duration_cap: Option<f64>,
}

impl WorkloadArgs {
    fn spec(&self, rate: Rate, mode: Mode) -> WorkloadSpec {
        let mut spec = WorkloadSpec::new(&self.model, self.n, rate, self.seed);
        spec.mode = mode;
        spec.stream = self.stream;
        spec.concurrency = self.concurrency;
        spec.error_threshold = self.error_threshold;
        spec.duration_cap_secs = self.duration_cap;
        if let Some(l) = self.fixed {
            spec.lengths = l;
        }
        spec
    }
}

fn parse_fixed(s: &str) -> Result<Lengths, String> {
    let (p, o) = s.split_once(',').ok_or("expected PROMPT,OUTPUT")?;
    let n = |v: &str| v.trim().parse::<u32>().map_err(|e| e.to_string());
    Ok(Lengths::Fixed { prompt: n(p)?, output: n(o)? })
}

#[derive(Subcommand)]
enum Command {
    /// One run against a server (--url) or an in-process gateway (--config).
    Run {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long, default_value = "inf")]
        rate: Rate,
        #[arg(long, default_value = "online")]
        mode: Mode,
        #[arg(long, conflicts_with = "config")]
        url: Option<String>,
        #[arg(long, env = "FEDINFER_TOKEN")]
        token: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start this many instances before measuring.
        #[arg(long)]
        warm: Option<u64>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Runs every (instances, rate) point on a fresh in-process gateway.
    Sweep {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20,inf")]
        rates: Vec<Rate>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        instances: Vec<u32>,
        /// Start each point's instances before measuring.
        #[arg(long)]
        warm: bool,
        #[arg(long, default_value = "sweep.json")]
        out: PathBuf,
        #[arg(long, default_value = "sweep.csv")]
        csv: PathBuf,
    },
}

fn runtime_for(config: Option<&GatewayConfig>) -> std::io::Result<tokio::runtime::Runtime> {
    match config.map(|c| c.scenario.clock) {
        Some(ClockMode::Virtual) => {
            tokio::runtime::Builder::new_current_thread().enable_all().start_paused(true).build()
        }
        _ => tokio::runtime::Builder::new_multi_thread().enable_all().build(),
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { workload, rate, mode, url, token, config, warm, out, csv } => {
            let spec = workload.spec(rate, mode);
            let config = config.map(|p| GatewayConfig::load(&p)).transpose()?;
            let rt = runtime_for(config.as_ref())?;
            let report = rt.block_on(async {
                let gw = match config {
                    Some(c) => Some(Gateway::build(c)?),
                    None => None,
                };
                let target: Arc<dyn Target> = match (&gw, url) {
                    (Some(gw), _) => Arc::new(InProcessTarget::new(gw.router(), &bench_token(gw)?)),
                    (None, Some(url)) => {
                        let token = token.context("--token (or FEDINFER_TOKEN) is required with --url")?;
                        Arc::new(HttpTarget::new(&url, &token, spec.concurrency)?)
                    }
                    (None, None) => bail!("give --url or --config"),
                };
                if let Some(k) = warm {
                    warm_up(target.clone(), &spec.model, k, Duration::from_secs(3600)).await?;
                }
                let report = run_bench(target, &spec).await;
                if let Some(gw) = gw {
                    gw.shutdown().await;
                }
                anyhow::Ok(report?)
            })?;
            write_json(&out, &report)?;
            if let Some(csv) = csv {
                write_csv_report(&csv, &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report.summary())?);
            if report.aborted {
                bail!("aborted: {} of {} sent requests failed", report.failed, report.sent);
            }
            Ok(())
        }
        Command::Sweep { workload, config, rates, instances, warm, out, csv } => {
            let config = GatewayConfig::load(&config)?;
            let spec = workload.spec(Rate::Infinite, Mode::Online);
            let rt = runtime_for(Some(&config))?;
            let rows = rt.block_on(sweep_in_process(&config, &spec, &rates, &instances, warm));
            write_json(&out, &rows)?;
            write_csv_sweep(&csv, &rows)?;
            println!("{:>9} {:>6} {:>10} {:>12} {:>14}", "instances", "rate", "req/s", "tok/s", "median e2e s");
            for r in &rows {
                match &r.report {
                    Some(rep) => println!(
                        "{:>9} {:>6} {:>10.3} {:>12.1} {:>14.2}",
                        r.instances,
                        r.rate,
                        rep.request_throughput,
                        rep.output_token_throughput,
                        rep.median_e2e_latency
                    ),
                    None => println!("{:>9} {:>6} error: {}", r.instances, r.rate, r.error.as_deref().unwrap_or("?")),
                }
            }
            Ok(())
        }
    }
}
