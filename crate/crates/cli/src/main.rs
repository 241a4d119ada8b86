use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use chrono::Utc;
use clap::{Parser, Subcommand, ValueEnum};
use hydroclean::detect::MuiVerdict;
use hydroclean::ingestion::{group_streams, parse_dataset, resolve_keys, Dataset, JoinTier, Schema};
use hydroclean::integrity::{gap_census, ConflictPolicy};
use hydroclean::metrics::{peak_ranking, recall_profile, weighted_kendall_tau, wkt_profile, WeightVector};
use hydroclean::model::{
    render_ledger, AnomalyEvent, CompositeKey, DataStream, ErrorClass, EventId, HourStamp, MonthGrid, Ranking,
};
use hydroclean::peaks::{peak_window, top_k_contributors, PeakResult};
use hydroclean::pipeline::{
    read_snapshot, sweep_stream, Config, Inputs, JoinSummary, Pipeline, PipelineError, JOIN_FILE, LAST_PHASE,
    RAW_SNAPSHOT,
};
use hydroclean::repair::{Decision, Side, Verdict};
use hydroclean::synth::{generate, GroundTruth, SyntheticPlan};
use serde::{Deserialize, Serialize};

/// Progressive cleaning of hourly smart-meter water consumption data.
#[derive(Parser)]
#[command(name = "hydroclean", version)]
struct Cli {
    /// TOML configuration; HYDROCLEAN_* variables override it.
    #[arg(long, global = true, env = "HYDROCLEAN_CONFIG")]
    config: Option<PathBuf>,
    /// Store directory (overrides the configuration).
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted errors and its ground truth.
    Synth {
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        streams: Option<usize>,
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
    },
    /// Parse AMID, MIND and BILD into a new store.
    Ingest {
        #[arg(long)]
        amid: Option<PathBuf>,
        #[arg(long)]
        mind: Option<PathBuf>,
        #[arg(long)]
        bild: Option<PathBuf>,
        /// Directory holding amid.csv, mind.csv and bild.csv.
        #[arg(long, conflicts_with_all = ["amid", "mind", "bild"])]
        inputs: Option<PathBuf>,
        /// Store directory to create.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Loosest join tier used when keys are resolved.
        #[arg(long)]
        join_tier: Option<JoinTier>,
        /// Replace an existing store.
        #[arg(long)]
        force: bool,
    },
    /// Run one phase, or every pending phase up to a given one.
    Clean {
        #[arg(long, conflicts_with = "through", value_parser = clap::value_parser!(u8).range(0..=5))]
        phase: Option<u8>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=5))]
        through: Option<u8>,
        /// Resolution of conflicting records; only before phase 2 has run.
        #[arg(long)]
        conflict_policy: Option<ConflictPolicy>,
    },
    /// Run the statistical sweep on the current state without changing it.
    ///
    /// Prints one event per line as JSON.
    Detect {
        /// Comma-separated classes: mui, spike, reset, quantized.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<ErrorClass>,
        #[arg(long)]
        key: Option<CompositeKey>,
        /// Counts per class instead of events.
        #[arg(long)]
        summary: bool,
    },
    /// Peak window and top contributors.
    Peaks {
        #[arg(long, visible_alias = "window", default_value_t = 24)]
        window_hours: i64,
        #[arg(long, visible_alias = "top", default_value_t = 100)]
        top_k: usize,
        #[arg(long, value_enum, default_value = "clean")]
        dataset: DatasetArg,
        #[arg(long)]
        no_compensation: bool,
        /// Write the ranking here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write peak-month weights for `metrics wkt`.
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
    /// Compare rankings.
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Review queue operations.
    #[command(subcommand)]
    Review(Review),
    /// Print the phase ledger.
    Report {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    /// The store's current state.
    Clean,
    /// The streams as ingested.
    Dirty,
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Weighted Kendall's tau between two ranking files.
    Wkt {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        cand: PathBuf,
        /// Weight file; uniform weights when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Recall@k for k = 1..k-max as CSV.
    Recall {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        cand: PathBuf,
        #[arg(long, default_value_t = 1000)]
        k_max: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlation between a reference AMID file and the store for windows of 1..max-days days.
    WktProfile {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 90)]
        max_days: i64,
    },
}

/// What `peaks` writes.
#[derive(Serialize, Deserialize)]
struct PeaksFile {
    peak: PeakResult,
    ranking: Ranking,
    category_shares: BTreeMap<String, f64>,
}

#[derive(Subcommand)]
enum Review {
    /// Serve the review API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// List queued events.
    Queue,
    /// Submit one verdict.
    Verdict {
        #[arg(long)]
        event: u64,
        #[arg(long, value_enum)]
        decision: DecisionArg,
        #[arg(long)]
        changepoint: Option<HourStamp>,
        #[arg(long)]
        factor: Option<f64>,
        #[arg(long, value_enum)]
        segment: Option<SideArg>,
        #[arg(long, default_value = "analyst")]
        reviewer: String,
    },
    /// Decide every queued MUI event from a ground-truth file.
    Auto {
        #[arg(long)]
        truth: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DecisionArg {
    Accept,
    AcceptWithEdit,
    Reject,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Before,
    After,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("HYDROCLEAN_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<PipelineError>() {
                Some(p) => p.exit_code(),
                None if e.downcast_ref::<Invalid>().is_some() => 2,
                None => 1,
            };
            ExitCode::from(code as u8)
        }
    }
}

/// Bad user input outside the pipeline proper.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn config(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(s) = &cli.store {
        cfg.store = s.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { plan, seed, streams, out } => {
            let mut p = match plan {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
                    toml::from_str::<SyntheticPlan>(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())))?
                }
                None => SyntheticPlan::default(),
            };
            if let Some(s) = seed {
                p.seed = *s;
            }
            if let Some(n) = streams {
                p.stream_count = *n;
            }
            let corpus = generate(&p);
            corpus.write(out)?;
            println!(
                "wrote {} AMID streams, {} MIND rows, {} BILD rows to {} ({} MUI, {} spikes, {} resets planted)",
                corpus.amid.len(),
                corpus.mind.len(),
                corpus.bild.len(),
                out.display(),
                corpus.truth.mui.len(),
                corpus.truth.spikes.len(),
                corpus.truth.resets.len()
            );
        }
        Command::Ingest { amid, mind, bild, inputs, out, join_tier, force } => {
            let mut cfg = config(&cli)?;
            if let Some(dir) = inputs {
                cfg.inputs = Inputs::in_dir(dir);
            }
            for (slot, v) in [(&mut cfg.inputs.amid, amid), (&mut cfg.inputs.mind, mind), (&mut cfg.inputs.bild, bild)] {
                if let Some(v) = v {
                    *slot = v.clone();
                }
            }
            if let Some(o) = out {
                cfg.store = o.clone();
            }
            if let Some(t) = join_tier {
                cfg.join_tier = *t;
            }
            if *force && cfg.store.exists() {
                std::fs::remove_dir_all(&cfg.store)?;
            }
            let (p, summary) = Pipeline::ingest(cfg)?;
            // preview over the raw keys; phase 1 repeats it after duplicate streams are gone
            let keys: BTreeSet<CompositeKey> = p.streams().iter().map(|s| s.key.clone()).collect();
            let (_, join) = resolve_keys(&keys, &p.reference().mind, &p.reference().bild, p.config().join_tier);
            print_json(&serde_json::json!({ "ingest": summary, "join": join }))?;
        }
        Command::Clean { phase, through, conflict_policy } => {
            let mut p = Pipeline::open(config(&cli)?)?;
            if let Some(policy) = conflict_policy {
                p.set_conflict_policy(*policy)?;
            }
            let reports = match (phase, through) {
                (Some(n), _) => vec![p.run_phase(*n)?],
                (None, Some(n)) => p.run_through(*n)?,
                (None, None) => p.run_through(LAST_PHASE)?,
            };
            let mut out = serde_json::Map::new();
            out.insert("phases".into(), serde_json::to_value(&reports)?);
            if reports.iter().any(|r| r.phase == 1) {
                let join: JoinSummary = p.read_artifact(JOIN_FILE)?;
                out.insert("join".into(), serde_json::to_value(join.report)?);
            }
            if reports.iter().any(|r| r.phase == 2) {
                out.insert("gap_census".into(), serde_json::to_value(census_summary(&p)?)?);
            }
            out.insert("state".into(), p.state_hash().into());
            print_json(&out)?;
        }
        Command::Detect { classes, key, summary } => {
            let p = Pipeline::open(config(&cli)?)?;
            let grid = p.month_grid()?;
            let streams: Vec<&DataStream> = match key {
                Some(k) => vec![p.stream(k).ok_or_else(|| PipelineError::UnknownStream(k.clone()))?],
                None => p.streams().iter().collect(),
            };
            let wanted = |c: ErrorClass| classes.is_empty() || classes.contains(&c);
            let mut counts: BTreeMap<ErrorClass, usize> = BTreeMap::new();
            let stdout = std::io::stdout();
            let mut w = std::io::BufWriter::new(stdout.lock());
            for s in streams {
                let mut scratch = s.clone();
                let o = sweep_stream(&mut scratch, p.billing_for(&s.key), &grid, p.config());
                for e in o.events.into_iter().filter(|e| wanted(e.class)) {
                    *counts.entry(e.class).or_default() += 1;
                    if !summary {
                        let e = AnomalyEvent { originals: Vec::new(), ..e };
                        writeln!(w, "{}", serde_json::to_string(&e)?)?;
                    }
                }
            }
            if *summary {
                writeln!(w, "{}", serde_json::to_string(&counts)?)?;
            }
            w.flush()?;
        }
        Command::Peaks { window_hours, top_k, dataset, no_compensation, out, weights_out } => {
            let p = Pipeline::open(config(&cli)?)?;
            let raw;
            let streams = match dataset {
                DatasetArg::Clean => p.streams(),
                DatasetArg::Dirty => {
                    raw = read_snapshot(p.root(), RAW_SNAPSHOT)?.0;
                    &raw[..]
                }
            };
            let cal = p.calendar()?;
            let comp = (!no_compensation && matches!(dataset, DatasetArg::Clean)).then_some(&cal);
            let peak = peak_window(streams, &cal.range, *window_hours, comp).map_err(|e| Invalid(e.to_string()))?;
            let ranking =
                top_k_contributors(streams, &peak.window, *top_k, comp).map_err(|e| Invalid(e.to_string()))?;
            if let Some(path) = weights_out {
                let weights = WeightVector::peak_month(streams, &MonthGrid::covering(&cal.range), &peak.window);
                std::fs::write(path, serde_json::to_vec_pretty(&weights)?)?;
            }
            let file = PeaksFile { category_shares: ranking.category_shares(), peak, ranking };
            match out {
                Some(path) => std::fs::write(path, serde_json::to_vec_pretty(&file)?)?,
                None => print_json(&file)?,
            }
        }
        Command::Metrics(m) => metrics(&cli, m)?,
        Command::Review(r) => review(&cli, r)?,
        Command::Report { json } => {
            let p = Pipeline::open(config(&cli)?)?;
            if *json {
                print_json(&serde_json::json!({ "reports": p.reports(), "state": p.state_hash() }))?;
            } else {
                print!("{}", render_ledger(p.reports()));
                println!("state {}", p.state_hash());
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CensusSummary {
    streams: usize,
    complete_streams: usize,
    expected_hours_per_stream: u64,
    missing_hours: u64,
    global_outage_days: Vec<chrono::NaiveDate>,
    /// Streams with the most missing hours.
    largest: Vec<(CompositeKey, u64)>,
}

fn census_summary(p: &Pipeline) -> Result<CensusSummary> {
    let cal = p.calendar()?;
    let mut missing: Vec<(CompositeKey, u64)> =
        p.streams().iter().map(|s| (s.key.clone(), gap_census(s, &cal).missing_timestamps.len() as u64)).collect();
    let complete = missing.iter().filter(|m| m.1 == 0).count();
    let total = missing.iter().map(|m| m.1).sum();
    missing.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    missing.retain(|m| m.1 > 0);
    missing.truncate(10);
    Ok(CensusSummary {
        streams: p.streams().len(),
        complete_streams: complete,
        expected_hours_per_stream: cal.expected_count() as u64,
        missing_hours: total,
        global_outage_days: cal.global_outage_days.clone(),
        largest: missing,
    })
}

fn load_streams(path: &Path) -> Result<Vec<DataStream>> {
    match parse_dataset(path, Schema::Amid)? {
        Dataset::Amid(p) => Ok(group_streams(p.records).0),
        _ => unreachable!("amid schema"),
    }
}

/// A ranking file: either the output of `peaks` or a bare ranking.
fn load_ranking(path: &Path) -> Result<Ranking> {
    let bytes = std::fs::read(path).with_context(|| path.display().to_string())?;
    if let Ok(f) = serde_json::from_slice::<PeaksFile>(&bytes) {
        return Ok(f.ranking);
    }
    serde_json::from_slice(&bytes).map_err(|e| Invalid(format!("{}: not a ranking: {e}", path.display())).into())
}

fn metrics(cli: &Cli, m: &MetricsCmd) -> Result<()> {
    match m {
        MetricsCmd::Wkt { reference, cand, weights } => {
            let (r, c) = (load_ranking(reference)?, load_ranking(cand)?);
            let w = match weights {
                Some(path) => serde_json::from_slice(&std::fs::read(path)?)
                    .map_err(|e| Invalid(format!("{}: {e}", path.display())))?,
                None => WeightVector::uniform(r.keys().chain(c.keys())),
            };
            print_json(&weighted_kendall_tau(&r, &c, &w).map_err(|e| Invalid(e.to_string()))?)
        }
        MetricsCmd::Recall { reference, cand, k_max, out } => {
            let (r, c) = (load_ranking(reference)?, load_ranking(cand)?);
            let profile = recall_profile(&r, &c, (*k_max).min(r.len())).map_err(|e| Invalid(e.to_string()))?;
            let mut text = String::from("k,recall\n");
            for (k, v) in profile {
                text.push_str(&format!("{k},{v}\n"));
            }
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        MetricsCmd::WktProfile { reference, max_days } => {
            let p = Pipeline::open(config(cli)?)?;
            let clean = load_streams(reference)?;
            let range = p.calendar()?.range;
            let peak = peak_ranking(&clean, &range, 24, None).map_err(|e| Invalid(e.to_string()))?;
            let weights = WeightVector::peak_month(&clean, &MonthGrid::covering(&range), &peak.window);
            print_json(&wkt_profile(&clean, p.streams(), &weights, &range, 1..=*max_days).map_err(|e| Invalid(e.to_string()))?)
        }
    }
}

fn review(cli: &Cli, r: &Review) -> Result<()> {
    let mut p = Pipeline::open(config(cli)?)?;
    match r {
        Review::Serve { bind } => {
            if p.phase_completed() < Some(4) {
                return Err(PipelineError::ReviewClosed.into());
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(hydroclean_review::serve(p, *bind))?;
        }
        Review::Queue => {
            for q in p.queue() {
                let band = match q.verdict {
                    Some(MuiVerdict::Dirty) => "dirty",
                    Some(MuiVerdict::NeedsReview) => "review",
                    Some(MuiVerdict::Clean) => "clean",
                    None => "unscorable",
                };
                let proposal = q
                    .proposal
                    .map(|pr| format!("{} x{:.6} {:?}", pr.changepoint, pr.factor, pr.segment))
                    .unwrap_or_else(|| "no proposal".into());
                println!("{:>6} {:<40} {band:<10} {proposal}", q.event.id, q.event.key.to_string());
            }
        }
        Review::Verdict { event, decision, changepoint, factor, segment, reviewer } => {
            let id = EventId(*event);
            let key = p.event(id).ok_or(PipelineError::UnknownEvent(id))?.key.clone();
            let v = Verdict {
                key,
                event_id: id,
                decision: match decision {
                    DecisionArg::Accept => Decision::Accept,
                    DecisionArg::AcceptWithEdit => Decision::AcceptWithEdit,
                    DecisionArg::Reject => Decision::Reject,
                },
                edited_changepoint: *changepoint,
                edited_factor: *factor,
                edited_segment: segment.map(|s| match s {
                    SideArg::Before => Side::Before,
                    SideArg::After => Side::After,
                }),
                reviewer: reviewer.clone(),
                decided_at: Utc::now(),
            };
            let e = p.submit_verdict(v)?;
            println!("event {} is now {:?}", e.id, e.status);
        }
        Review::Auto { truth } => {
            let truth = GroundTruth::load(truth).with_context(|| truth.display().to_string())?;
            let decided = p.auto_review(&truth, "auto", Utc::now())?;
            let accepted = decided.iter().filter(|e| e.status == hydroclean::model::EventStatus::Repaired).count();
            println!("{} decided, {} accepted", decided.len(), accepted);
        }
    }
    Ok(())
}
