//! Command-line front end: corpus generation and evaluation runs,
//! ledger verification, and one-shot sanitization of text or image
//! containers.

use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use provgate::harness::{
    audit_gate_totality, bound_violations, emit_report, generate_corpus, run_corpus, Corpus,
    CorpusSpec, ReportFormat, RunConfig,
};
use provgate::image::ImageContainer;
use provgate::ledger::{verify_export_jsonl, Ledger};
use provgate::rulepack::RulePack;
use provgate::text::TextSanitizer;
use provgate::trust::{ProvenanceId, SessionId, SourceClass, SourceKind, SourcePriors};
use provgate::{DefenseMode, Thresholds};

#[derive(Parser)]
#[command(
    name = "provgate",
    about = "Zero-trust sanitization pipeline and provenance ledger for multi-agent workflows",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigArg {
    Full,
    GatesOff,
    SanitizersOff,
    KeywordOnly,
}

impl From<ConfigArg> for DefenseMode {
    fn from(c: ConfigArg) -> Self {
        match c {
            ConfigArg::Full => DefenseMode::Full,
            ConfigArg::GatesOff => DefenseMode::GatesOff,
            ConfigArg::SanitizersOff => DefenseMode::SanitizersOff,
            ConfigArg::KeywordOnly => DefenseMode::KeywordOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Text,
    PlotData,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Text => ReportFormat::Text,
            FormatArg::PlotData => ReportFormat::PlotData,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    User,
    Tool,
    ExternalDocument,
    ImageMetadata,
    ImageOverlayText,
}

impl From<SourceArg> for SourceKind {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::User => SourceKind::User,
            SourceArg::Tool => SourceKind::Tool,
            SourceArg::ExternalDocument => SourceKind::ExternalDocument,
            SourceArg::ImageMetadata => SourceKind::ImageMetadata,
            SourceArg::ImageOverlayText => SourceKind::ImageOverlayText,
        }
    }
}

#[derive(Args)]
struct PackArgs {
    /// Rule pack file (defaults to the shipped pack).
    #[arg(long)]
    rulepack: Option<PathBuf>,
    /// Source-prior configuration file (defaults to the shipped table).
    #[arg(long)]
    priors: Option<PathBuf>,
}

impl PackArgs {
    fn load(&self) -> Result<(Arc<RulePack>, SourcePriors), String> {
        let pack = match &self.rulepack {
            Some(path) => RulePack::load_file(path).map_err(|e| e.to_string())?,
            None => RulePack::default(),
        };
        let priors = match &self.priors {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
                SourcePriors::from_toml(&text).map_err(|e| e.to_string())?
            }
            None => SourcePriors::default(),
        };
        Ok((Arc::new(pack), priors))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the bundled evaluation corpus deterministically.
    GenCorpus {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 35)]
        attacks_per_family: usize,
        #[arg(long, default_value_t = 210)]
        benign: usize,
        /// Output path for the corpus JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a corpus under a defense configuration and emit a report.
    Run {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        config: ConfigArg,
        /// Report output path (stdout when omitted).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "json")]
        format: FormatArg,
        /// Write a JSON-lines ledger export of every session.
        #[arg(long)]
        ledger_out: Option<PathBuf>,
        /// Override the attenuation threshold.
        #[arg(long)]
        theta_low: Option<f64>,
        /// Override the removal threshold.
        #[arg(long)]
        theta_block: Option<f64>,
        /// Exit with code 3 when the configuration's bounds are missed.
        #[arg(long)]
        enforce_bounds: bool,
        /// Run cases one at a time instead of in parallel.
        #[arg(long)]
        sequential: bool,
        #[command(flatten)]
        packs: PackArgs,
    },
    /// Re-verify a session chain from a JSON-lines ledger export.
    VerifyLedger {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        session: String,
        /// Also audit gate totality across the whole export.
        #[arg(long)]
        audit: bool,
    },
    /// Sanitize text from a file or standard input; emits the sanitized
    /// spans as JSON.
    SanitizeText {
        /// Input file (stdin when omitted).
        file: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "user")]
        source: SourceArg,
        #[arg(long, value_enum, default_value = "full")]
        config: ConfigArg,
        /// Write a JSON-lines ledger export of the sanitization.
        #[arg(long)]
        ledger_out: Option<PathBuf>,
        #[command(flatten)]
        packs: PackArgs,
    },
    /// Sanitize an image container; emits a patch report as JSON.
    SanitizeImage {
        /// Input container file.
        file: PathBuf,
        /// Output path for the sanitized container.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "external-document")]
        source: SourceArg,
        #[arg(long, value_enum, default_value = "full")]
        config: ConfigArg,
        #[arg(long)]
        ledger_out: Option<PathBuf>,
        #[command(flatten)]
        packs: PackArgs,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::GenCorpus { seed, attacks_per_family, benign, out } => {
            let corpus = generate_corpus(&CorpusSpec {
                seed,
                attacks_per_family,
                benign_cases: benign,
            });
            let json = serde_json::to_string(&corpus).map_err(|e| e.to_string())?;
            std::fs::write(&out, json).map_err(|e| e.to_string())?;
            eprintln!(
                "wrote {} cases ({} attack / {} benign) to {}",
                corpus.cases.len(),
                corpus.attacks(),
                corpus.benign(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            corpus,
            config,
            report,
            format,
            ledger_out,
            theta_low,
            theta_block,
            enforce_bounds,
            sequential,
            packs,
        } => {
            let text = std::fs::read_to_string(&corpus).map_err(|e| e.to_string())?;
            let corpus: Corpus = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            if corpus.cases.is_empty() {
                return Err("corpus is empty".into());
            }
            let (pack, priors) = packs.load()?;
            let mut thresholds = Thresholds::default();
            if let Some(low) = theta_low {
                thresholds.theta_low = low;
            }
            if let Some(block) = theta_block {
                thresholds.theta_block = block;
            }
            if thresholds.theta_block > thresholds.theta_low {
                return Err("theta-block must not exceed theta-low".into());
            }
            let run_config = RunConfig {
                mode: config.into(),
                thresholds,
                priors,
                pack,
                parallel: !sequential,
            };
            let (run_report, ledger) = run_corpus(&corpus, &run_config);

            let rendered = emit_report(&run_report, format.into());
            match &report {
                Some(path) => std::fs::write(path, rendered).map_err(|e| e.to_string())?,
                None => print!("{rendered}"),
            }
            if let Some(path) = ledger_out {
                let export = ledger.export_all_jsonl().map_err(|e| e.to_string())?;
                std::fs::write(path, export).map_err(|e| e.to_string())?;
            }

            if run_report.metrics.errors > 0 {
                eprintln!("{} case(s) errored", run_report.metrics.errors);
                return Ok(ExitCode::from(2));
            }
            if enforce_bounds {
                let violations = bound_violations(&run_report);
                if !violations.is_empty() {
                    for v in &violations {
                        eprintln!("bound violated: {v}");
                    }
                    return Ok(ExitCode::from(3));
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyLedger { ledger, session, audit } => {
            let text = std::fs::read_to_string(&ledger).map_err(|e| e.to_string())?;
            let ok = verify_export_jsonl(&text, &SessionId::new(session.clone()))
                .map_err(|e| e.to_string())?;
            let audit_ok = if audit {
                let report = audit_gate_totality(&text).map_err(|e| e.to_string())?;
                for v in &report.violations {
                    eprintln!("audit: {v}");
                }
                report.clean()
            } else {
                true
            };
            if ok && audit_ok {
                println!("ok: session {session} verifies");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("FAILED: session {session} does not verify");
                Ok(ExitCode::from(1))
            }
        }
        Command::SanitizeText { file, source, config, ledger_out, packs } => {
            let raw = match file {
                Some(path) => std::fs::read_to_string(&path).map_err(|e| e.to_string())?,
                None => {
                    let mut buf = String::new();
                    std::io::stdin().read_to_string(&mut buf).map_err(|e| e.to_string())?;
                    buf
                }
            };
            let (pack, priors) = packs.load()?;
            let mode: DefenseMode = config.into();
            let sanitizer = TextSanitizer::new(pack, priors, Thresholds::default(), mode);
            let ledger = Ledger::in_memory();
            let session = SessionId::new("cli");
            let source = SourceClass::new(source.into()).map_err(|e| e.to_string())?;
            let sanitized = sanitizer
                .sanitize(&ledger, &session, &ProvenanceId::new("e0"), &source, None, &raw)
                .map_err(|e| e.to_string())?;
            println!(
                "{}",
                serde_json::to_string_pretty(&sanitized).map_err(|e| e.to_string())?
            );
            if let Some(path) = ledger_out {
                let export = ledger.export_jsonl(&session).map_err(|e| e.to_string())?;
                std::fs::write(path, export).map_err(|e| e.to_string())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::SanitizeImage { file, out, source, config, ledger_out, packs } => {
            let bytes = std::fs::read(&file).map_err(|e| e.to_string())?;
            let container = ImageContainer::decode(&bytes).map_err(|e| e.to_string())?;
            let (pack, priors) = packs.load()?;
            let mode: DefenseMode = config.into();
            let sanitizer =
                provgate::image::VisualSanitizer::new(pack, priors, Thresholds::default(), mode);
            let ledger = Ledger::in_memory();
            let session = SessionId::new("cli");
            let source = SourceClass::new(source.into()).map_err(|e| e.to_string())?;
            let sanitized = sanitizer
                .sanitize(&ledger, &session, &ProvenanceId::new("e0"), &source, None, &container)
                .map_err(|e| e.to_string())?;

            #[derive(serde::Serialize)]
            struct PatchLine {
                row: u32,
                col: u32,
                anomaly: f64,
                trust: f64,
                redacted: bool,
            }
            #[derive(serde::Serialize)]
            struct ImageReport {
                grid_rows: u32,
                grid_cols: u32,
                min_trust: Option<f64>,
                redacted_patches: usize,
                patches: Vec<PatchLine>,
                overlay_texts: Vec<String>,
                metadata_texts: Vec<(String, String)>,
            }
            let report = ImageReport {
                grid_rows: sanitized.grid_rows,
                grid_cols: sanitized.grid_cols,
                min_trust: sanitized.min_trust().map(|t| t.value()),
                redacted_patches: sanitized.patches.iter().filter(|p| p.redacted).count(),
                patches: sanitized
                    .patches
                    .iter()
                    .map(|p| PatchLine {
                        row: p.row,
                        col: p.col,
                        anomaly: p.anomaly,
                        trust: p.trust.value(),
                        redacted: p.redacted,
                    })
                    .collect(),
                overlay_texts: sanitized
                    .overlay_texts
                    .iter()
                    .map(|t| t.sanitized_string())
                    .collect(),
                metadata_texts: sanitized
                    .metadata_texts
                    .iter()
                    .map(|(k, t)| (k.clone(), t.sanitized_string()))
                    .collect(),
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?
            );
            if let Some(path) = out {
                std::fs::write(path, sanitized.container.encode()).map_err(|e| e.to_string())?;
            }
            if let Some(path) = ledger_out {
                let export = ledger.export_jsonl(&session).map_err(|e| e.to_string())?;
                std::fs::write(path, export).map_err(|e| e.to_string())?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
