use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{SocketAddr, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use clap::{ArgGroup, Args};
use serde::{Deserialize, Serialize};

use super::{create_output, load_ports, load_prefix_table, open_input, require_exists, CliError, CliResult, PortsArg};
use crate::detection::DetectorConfig;
use crate::flowspec::RuleChange;
use crate::ingest::pcap::read_capture;
use crate::ingest::replay::ReplayReader;
use crate::ingest::{parse_netflow_v9, ParseStats, SamplingConfig, TemplateCache};
use crate::pipeline::{Counters, Pipeline, PipelineEvent, PipelineSettings};

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["replay", "pcap", "listen"])))]
pub struct RunArgs {
    /// JSONL flow replay file.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// pcap capture of NetFlow v9 export datagrams.
    #[arg(long)]
    pub pcap: Option<PathBuf>,
    /// Receive NetFlow v9 on this UDP address until interrupted.
    #[arg(long)]
    pub listen: Option<SocketAddr>,
    /// Only use captured datagrams sent to this UDP port.
    #[arg(long, requires = "pcap")]
    pub collector_port: Option<u16>,
    #[arg(long)]
    pub prefix_table: PathBuf,
    /// TOML run configuration (detector parameters and defaults for the flags below).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub sampling_rate: Option<u32>,
    #[command(flatten)]
    pub ports: PortsArg,
    #[arg(long, default_value = "drdos-out")]
    pub out_dir: PathBuf,
    /// Rules per alert (largest source ASes first); all by default.
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Also write every non-empty sketch to sketches.jsonl.
    #[arg(long)]
    pub archive_sketches: bool,
    /// Closed intervals that still accept late flows.
    #[arg(long)]
    pub late_grace: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    detector: DetectorConfig,
    sampling_rate: Option<u32>,
    top_n: Option<usize>,
    late_grace: Option<u64>,
    archive_sketches: Option<bool>,
    ports: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Copy, Serialize)]
struct IngestCounters {
    malformed_lines: u64,
    datagrams: u64,
    bad_datagrams: u64,
    netflow: ParseStats,
}

#[derive(Serialize)]
struct CounterDump {
    pipeline: Counters,
    ingest: IngestCounters,
}

fn settings(args: &RunArgs) -> CliResult<PipelineSettings> {
    let file = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::config(p, e))?;
            toml::from_str::<RunConfig>(&text).map_err(|e| CliError::config(p, e))?
        }
        None => RunConfig::default(),
    };
    let cfg_name = || args.config.clone().unwrap_or_default();
    file.detector.validate().map_err(|e| CliError::config(&cfg_name(), e))?;

    let ports_arg = PortsArg {
        ports: args.ports.ports.clone().or(file.ports),
    };
    if let Some(p) = &ports_arg.ports {
        require_exists(p)?;
    }
    let rate = args.sampling_rate.or(file.sampling_rate).unwrap_or(1);
    let sampling = SamplingConfig::new(rate)
        .ok_or_else(|| CliError::Config(format!("sampling rate must be at least 1, got {rate}")))?;
    let top_n = args.top_n.or(file.top_n);
    if top_n == Some(0) {
        return Err(CliError::Config("top-n must be at least 1".into()));
    }
    Ok(PipelineSettings {
        detector: file.detector,
        ports: load_ports(&ports_arg)?,
        sampling,
        top_n,
        archive_sketches: args.archive_sketches || file.archive_sketches.unwrap_or(false),
        late_grace: args.late_grace.or(file.late_grace).unwrap_or(1),
    })
}

struct Sinks {
    dir: PathBuf,
    alerts: BufWriter<File>,
    anomalies: BufWriter<File>,
    sessions: BufWriter<File>,
    rules: BufWriter<File>,
    rules_text: BufWriter<File>,
    warnings: BufWriter<File>,
    sketches: Option<BufWriter<File>>,
}

impl Sinks {
    fn open(dir: &Path, archive: bool) -> CliResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let f = |name: &str| create_output(&dir.join(name));
        Ok(Self {
            dir: dir.to_path_buf(),
            alerts: f("alerts.jsonl")?,
            anomalies: f("anomalies.jsonl")?,
            sessions: f("sessions.jsonl")?,
            rules: f("rules.jsonl")?,
            rules_text: f("rules.txt")?,
            warnings: f("warnings.jsonl")?,
            sketches: if archive { Some(f("sketches.jsonl")?) } else { None },
        })
    }

    fn line<T: Serialize>(w: &mut BufWriter<File>, value: &T) -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, value)?;
        w.write_all(b"\n")
    }

    fn write(&mut self, events: Vec<PipelineEvent>) -> CliResult<()> {
        let dir = self.dir.clone();
        for e in events {
            let r = match e {
                PipelineEvent::Sketch(s) => match &mut self.sketches {
                    Some(w) => Self::line(w, &s),
                    None => Ok(()),
                },
                PipelineEvent::Alert(a) => Self::line(&mut self.alerts, &a),
                PipelineEvent::Anomaly(a) => Self::line(&mut self.anomalies, &a),
                PipelineEvent::SessionTerminated(s) => {
                    tracing::info!(session_id = s.session_id, dst_as = s.dst_as, port = s.src_port, "session ended");
                    Ok(())
                }
                PipelineEvent::SessionFinalized(s) => Self::line(&mut self.sessions, &s),
                PipelineEvent::RuleCreated(r) => {
                    let text = r.render_text();
                    Self::line(&mut self.rules, &RuleChange::Created(r))
                        .and_then(|_| self.rules_text.write_all(text.as_bytes()))
                }
                PipelineEvent::RuleWithdrawn(r) => {
                    let text = format!("# withdraw rule {} at {}\n", r.rule_id, r.withdrawn_at.unwrap_or_default());
                    Self::line(&mut self.rules, &RuleChange::Withdrawn(r))
                        .and_then(|_| self.rules_text.write_all(text.as_bytes()))
                }
                PipelineEvent::RuleWarning(w) => {
                    tracing::warn!(warning = ?w, "rule skipped");
                    Self::line(&mut self.warnings, &w)
                }
            };
            r.map_err(|e| CliError::io(&dir, e))?;
        }
        Ok(())
    }

    fn finish(mut self, dump: &CounterDump) -> CliResult<()> {
        let dir = self.dir.clone();
        let io = |e| CliError::io(&dir, e);
        for w in [
            &mut self.alerts,
            &mut self.anomalies,
            &mut self.sessions,
            &mut self.rules,
            &mut self.rules_text,
            &mut self.warnings,
        ] {
            w.flush().map_err(io)?;
        }
        if let Some(w) = &mut self.sketches {
            w.flush().map_err(io)?;
        }
        write_counters(&self.dir, dump)
    }
}

fn write_counters(dir: &Path, dump: &CounterDump) -> CliResult<()> {
    let path = dir.join("counters.json");
    let mut w = create_output(&path)?;
    serde_json::to_writer_pretty(&mut w, dump)
        .map_err(std::io::Error::from)
        .and_then(|_| w.write_all(b"\n"))
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&path, e))
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("pipeline: {e}"))
}

pub fn run(args: RunArgs) -> CliResult<()> {
    // fail fast before touching any input
    require_exists(&args.prefix_table)?;
    for p in [&args.replay, &args.pcap, &args.config].into_iter().flatten() {
        require_exists(p)?;
    }
    let settings = settings(&args)?;
    let table = Arc::new(load_prefix_table(&args.prefix_table)?);
    let mut sinks = Sinks::open(&args.out_dir, settings.archive_sketches)?;
    let mut pipeline = Pipeline::new(settings, table);
    let mut ingest = IngestCounters::default();
    let mut netflow = ParseStats::default();

    if let Some(path) = &args.replay {
        for item in ReplayReader::new(open_input(path)?) {
            match item {
                Ok(record) => {
                    let events = pipeline.push_record(record).map_err(runtime)?;
                    sinks.write(events)?;
                }
                Err(crate::ingest::ReplayError::Io(e)) => return Err(CliError::io(path, e)),
                Err(e) => {
                    ingest.malformed_lines += 1;
                    tracing::warn!(path = %path.display(), error = %e, "replay line skipped");
                }
            }
        }
    } else if let Some(path) = &args.pcap {
        let datagrams = read_capture(open_input(path)?, args.collector_port).map_err(|e| CliError::io(path, e))?;
        let mut caches: HashMap<SocketAddr, TemplateCache> = HashMap::new();
        for d in datagrams {
            ingest.datagrams += 1;
            let cache = caches.entry(SocketAddr::V4(d.exporter)).or_default();
            match parse_netflow_v9(&d.payload, cache) {
                Ok(parsed) => {
                    netflow.merge(&parsed.stats);
                    for r in parsed.records {
                        sinks.write(pipeline.push_record(r).map_err(runtime)?)?;
                    }
                }
                Err(e) => {
                    ingest.bad_datagrams += 1;
                    tracing::debug!(error = %e, "datagram dropped");
                }
            }
        }
    } else if let Some(addr) = args.listen {
        listen(addr, &mut pipeline, &mut sinks, &mut ingest, &mut netflow)?;
    }

    sinks.write(pipeline.finish().map_err(runtime)?)?;
    ingest.netflow = netflow;
    let dump = CounterDump {
        pipeline: pipeline.counters(),
        ingest,
    };
    tracing::info!(counters = %serde_json::to_string(&dump).unwrap_or_default(), "run complete");
    sinks.finish(&dump)
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

const MAX_EXPORTERS: usize = 4096;

fn listen(
    addr: SocketAddr,
    pipeline: &mut Pipeline,
    sinks: &mut Sinks,
    ingest: &mut IngestCounters,
    netflow: &mut ParseStats,
) -> CliResult<()> {
    let socket = UdpSocket::bind(addr).map_err(|e| CliError::Io(format!("{addr}: {e}")))?;
    socket
        .set_read_timeout(Some(Duration::from_millis(500)))
        .map_err(|e| CliError::Io(format!("{addr}: {e}")))?;
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = Arc::clone(&stop);
        if let Err(e) = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)) {
            tracing::warn!(error = %e, "signal handler not installed");
        }
    }
    tracing::info!(%addr, "listening");

    let mut caches: HashMap<SocketAddr, TemplateCache> = HashMap::new();
    let mut buf = vec![0u8; 65_535];
    let mut last_dump = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        match socket.recv_from(&mut buf) {
            Ok((n, from)) => {
                ingest.datagrams += 1;
                if !caches.contains_key(&from) && caches.len() >= MAX_EXPORTERS {
                    ingest.bad_datagrams += 1;
                    continue;
                }
                let cache = caches.entry(from).or_default();
                match parse_netflow_v9(&buf[..n], cache) {
                    Ok(parsed) => {
                        netflow.merge(&parsed.stats);
                        for r in parsed.records {
                            sinks.write(pipeline.push_record(r).map_err(runtime)?)?;
                        }
                    }
                    Err(_) => ingest.bad_datagrams += 1,
                }
            }
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(CliError::Io(format!("{addr}: {e}"))),
        }
        sinks.write(pipeline.advance(now_secs()).map_err(runtime)?)?;
        if last_dump.elapsed() >= Duration::from_secs(60) {
            last_dump = Instant::now();
            let mut snapshot = *ingest;
            snapshot.netflow = *netflow;
            let dump = CounterDump {
                pipeline: pipeline.counters(),
                ingest: snapshot,
            };
            write_counters(&sinks.dir, &dump)?;
            tracing::info!(counters = %serde_json::to_string(&dump).unwrap_or_default(), "counters");
        }
    }
    tracing::info!("shutdown requested");
    Ok(())
}
