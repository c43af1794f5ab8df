use std::io::{self, Write};
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::NaiveDate;
use clap::Args;
use serde::Serialize;

use super::{create_output, load_ports, load_prefix_table, open_input, require_exists, CliError, CliResult, PortsArg};
use crate::aggregation::TrafficSketch;
use crate::attacksim::{encode_netflow_v9, generate, EncoderOptions, Scenario};
use crate::detection::{AttackSession, DrdosAlert};
use crate::flowspec::{RuleChange, RuleStore};
use crate::ingest::pcap::{write_capture, CapturedDatagram};
use crate::ingest::replay::to_replay_line;
use crate::mitigation::{analyze_sessions, load_updates, Baseline, MitigationConfig};
use crate::reporting::{compute_stats, read_jsonl, traffic_matrix};

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create_output(p)?),
        None => Box::new(io::BufWriter::new(io::stdout())),
    })
}

fn out_err(path: Option<&Path>) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| match path {
        Some(p) => CliError::io(p, e),
        None => CliError::Io(format!("stdout: {e}")),
    }
}

fn jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    read_jsonl(open_input(path)?).map_err(|e| CliError::config(path, e))
}

fn write_lines<T: Serialize>(w: &mut dyn Write, items: impl IntoIterator<Item = T>) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut *w, &item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Replay JSONL, or a pcap capture with --netflow.
    #[arg(long)]
    pub out: PathBuf,
    /// Encode flows as NetFlow v9 export datagrams in a pcap capture.
    #[arg(long)]
    pub netflow: bool,
    /// Where to write the prefix table for the scenario's ASes
    /// (defaults to `<out>.prefixes`).
    #[arg(long)]
    pub prefix_out: Option<PathBuf>,
    /// Send the template in every n-th datagram; 0 never sends it.
    #[arg(long, default_value_t = 1)]
    pub template_every: usize,
    #[arg(long, default_value_t = 2055)]
    pub collector_port: u16,
    #[command(flatten)]
    pub ports: PortsArg,
}

pub fn simulate(args: SimulateArgs) -> CliResult<()> {
    require_exists(&args.scenario)?;
    let ports = load_ports(&args.ports)?;
    let text = std::fs::read_to_string(&args.scenario).map_err(|e| CliError::config(&args.scenario, e))?;
    let scenario = Scenario::from_toml(&text).map_err(|e| CliError::config(&args.scenario, e))?;
    let generated = generate(&scenario, &ports).map_err(|e| CliError::config(&args.scenario, e))?;
    for w in &generated.warnings {
        tracing::warn!(attack = w.attack, port = w.port, "{}", w.message);
    }

    let out = &args.out;
    if args.netflow {
        let opts = EncoderOptions {
            template_every: args.template_every,
            ..Default::default()
        };
        let payloads = encode_netflow_v9(&generated.records, opts).map_err(|e| CliError::config(&args.scenario, e))?;
        let exporter = SocketAddrV4::new(Ipv4Addr::new(192, 0, 2, 100), 50_000);
        let collector = SocketAddrV4::new(Ipv4Addr::new(192, 0, 2, 200), args.collector_port);
        let datagrams: Vec<CapturedDatagram> = payloads
            .into_iter()
            .map(|payload| {
                let secs = u32::from_be_bytes([payload[8], payload[9], payload[10], payload[11]]);
                CapturedDatagram {
                    timestamp: Duration::from_secs(u64::from(secs)),
                    exporter,
                    collector,
                    payload,
                }
            })
            .collect();
        let w = write_capture(create_output(out)?, &datagrams).map_err(|e| CliError::io(out, e))?;
        w.into_inner().map_err(|e| CliError::io(out, e.into_error()))?;
    } else {
        let mut w = create_output(out)?;
        for r in &generated.records {
            writeln!(w, "{}", to_replay_line(r)).map_err(|e| CliError::io(out, e))?;
        }
        w.flush().map_err(|e| CliError::io(out, e))?;
    }

    let prefix_out = args.prefix_out.clone().unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".prefixes");
        PathBuf::from(p)
    });
    let mut w = create_output(&prefix_out)?;
    w.write_all(generated.prefix_table().as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&prefix_out, e))?;
    tracing::info!(records = generated.records.len(), out = %out.display(), "scenario generated");
    Ok(())
}

#[derive(Debug, Args)]
pub struct MitigationArgs {
    /// JSONL BGP update log.
    #[arg(long)]
    pub updates: PathBuf,
    /// Session log written by `run`.
    #[arg(long)]
    pub sessions: PathBuf,
    #[arg(long)]
    pub prefix_table: PathBuf,
    /// Baseline origins in prefix-table format, instead of the day of
    /// updates before each attack.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Seconds before the attack start included in the window.
    #[arg(long, default_value_t = 600)]
    pub pre_margin: u64,
    /// Seconds after the attack end included in the window.
    #[arg(long, default_value_t = 3600)]
    pub post_margin: u64,
    /// Findings JSONL; stdout by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn analyze_mitigation(args: MitigationArgs) -> CliResult<()> {
    for p in [Some(&args.updates), Some(&args.sessions), Some(&args.prefix_table), args.baseline.as_ref()]
        .into_iter()
        .flatten()
    {
        require_exists(p)?;
    }
    let table = load_prefix_table(&args.prefix_table)?;
    let baseline = match &args.baseline {
        Some(p) => Some(Baseline::from_table(&load_prefix_table(p)?)),
        None => None,
    };
    let updates = load_updates(open_input(&args.updates)?).map_err(|e| CliError::config(&args.updates, e))?;
    let sessions: Vec<AttackSession> = jsonl(&args.sessions)?;
    let cfg = MitigationConfig {
        pre_margin: args.pre_margin,
        post_margin: args.post_margin,
    };
    let report = analyze_sessions(&updates, &sessions, &table, cfg, baseline.as_ref());
    if !report.unknown_victims.is_empty() {
        tracing::warn!(sessions = ?report.unknown_victims, "victim AS has no prefixes");
    }
    tracing::info!(
        sessions = report.sessions_analyzed,
        findings = report.findings.len(),
        unresolvable = report.unresolvable_prefixes,
        "mitigation analysis complete"
    );
    let out = args.out.as_deref();
    let mut w = output(out)?;
    write_lines(&mut *w, &report.findings)
        .and_then(|_| w.flush())
        .map_err(out_err(out))
}

#[derive(Debug, Args)]
pub struct GenRulesArgs {
    /// Alert log written by `run`.
    #[arg(long)]
    pub alerts: PathBuf,
    #[arg(long)]
    pub prefix_table: PathBuf,
    /// Rules per alert; all contributing source ASes by default.
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Session log; each session's rules are withdrawn at its end.
    #[arg(long)]
    pub sessions: Option<PathBuf>,
    /// Rule change JSONL; stdout by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Human-readable rule document.
    #[arg(long)]
    pub text: Option<PathBuf>,
}

pub fn gen_rules(args: GenRulesArgs) -> CliResult<()> {
    for p in [Some(&args.alerts), Some(&args.prefix_table), args.sessions.as_ref()].into_iter().flatten() {
        require_exists(p)?;
    }
    if args.top_n == Some(0) {
        return Err(CliError::Config("top-n must be at least 1".into()));
    }
    let table = load_prefix_table(&args.prefix_table)?;
    let alerts: Vec<DrdosAlert> = jsonl(&args.alerts)?;
    let sessions: Vec<AttackSession> = match &args.sessions {
        Some(p) => jsonl(p)?,
        None => Vec::new(),
    };

    // alerts before withdrawals at the same timestamp
    enum Step<'a> {
        Alert(&'a DrdosAlert),
        End(&'a AttackSession),
    }
    let mut steps: Vec<(u64, u8, Step)> = alerts.iter().map(|a| (a.interval, 0, Step::Alert(a))).collect();
    steps.extend(sessions.iter().map(|s| (s.effective_end(), 1, Step::End(s))));
    steps.sort_by_key(|(t, order, _)| (*t, *order));

    let mut store = RuleStore::new();
    let mut changes = Vec::new();
    let mut text = String::new();
    let mut warnings = 0usize;
    for (_, _, step) in steps {
        match step {
            Step::Alert(a) => {
                let out = store.rules_from_alert(a, &table, args.top_n);
                for w in &out.warnings {
                    warnings += 1;
                    tracing::warn!(warning = ?w, "rule skipped");
                }
                for r in out.rules.into_iter().filter(|r| out.created.contains(&r.rule_id)) {
                    text.push_str(&r.render_text());
                    changes.push(RuleChange::Created(r));
                }
            }
            Step::End(s) => match store.withdraw_for_session(s.session_id, s.effective_end()) {
                Ok(rules) => {
                    for r in rules {
                        text.push_str(&format!("# withdraw rule {} at {}\n", r.rule_id, r.withdrawn_at.unwrap_or_default()));
                        changes.push(RuleChange::Withdrawn(r));
                    }
                }
                Err(w) => {
                    warnings += 1;
                    tracing::warn!(warning = ?w, "nothing to withdraw");
                }
            },
        }
    }
    tracing::info!(
        rules = store.rules().count(),
        active = store.active().count(),
        warnings,
        "rules generated"
    );

    let out = args.out.as_deref();
    let mut w = output(out)?;
    write_lines(&mut *w, &changes).and_then(|_| w.flush()).map_err(out_err(out))?;
    if let Some(p) = &args.text {
        let mut w = create_output(p)?;
        w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| CliError::io(p, e))?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub sessions: PathBuf,
    /// JSON statistics; stdout by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write one CSV per table into this directory.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
}

pub fn report_stats(args: StatsArgs) -> CliResult<()> {
    require_exists(&args.sessions)?;
    let sessions: Vec<AttackSession> = jsonl(&args.sessions)?;
    let stats = compute_stats(&sessions);
    if let Some(dir) = &args.csv_dir {
        stats.write_csv_dir(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let out = args.out.as_deref();
    let mut w = output(out)?;
    serde_json::to_writer_pretty(&mut w, &stats)
        .map_err(io::Error::from)
        .and_then(|_| w.write_all(b"\n"))
        .and_then(|_| w.flush())
        .map_err(out_err(out))
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    /// Sketch archive written by `run --archive-sketches`.
    #[arg(long)]
    pub sketches: PathBuf,
    /// Session log; its intervals are excluded from the matrix.
    #[arg(long)]
    pub sessions: Option<PathBuf>,
    #[arg(long)]
    pub dst_as: u32,
    #[arg(long)]
    pub port: u16,
    /// First day, YYYY-MM-DD (UTC).
    #[arg(long)]
    pub from: NaiveDate,
    /// Last day, inclusive.
    #[arg(long)]
    pub to: NaiveDate,
    /// Comma-separated source ASes to report; every source seen by default.
    #[arg(long, value_delimiter = ',')]
    pub sources: Option<Vec<u32>>,
    /// CSV output; stdout by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn report_matrix(args: MatrixArgs) -> CliResult<()> {
    for p in [Some(&args.sketches), args.sessions.as_ref()].into_iter().flatten() {
        require_exists(p)?;
    }
    let sketches: Vec<TrafficSketch> = jsonl(&args.sketches)?;
    let sessions: Vec<AttackSession> = match &args.sessions {
        Some(p) => jsonl(p)?,
        None => {
            tracing::warn!("no session log given; attack intervals are not excluded");
            Vec::new()
        }
    };
    let m = traffic_matrix(
        &sketches,
        &sessions,
        args.dst_as,
        args.port,
        args.from,
        args.to,
        args.sources.as_deref(),
    )
    .map_err(|e| CliError::config(&args.sketches, e))?;
    tracing::info!(rows = m.src_as.len(), excluded_bytes = m.excluded_bytes, total_bytes = m.total_bytes, "matrix built");
    let out = args.out.as_deref();
    let w = output(out)?;
    m.write_csv(w).map_err(|e| out_err(out)(e.into()))
}
