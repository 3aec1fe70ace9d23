use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use certvote::attacks::{read_examples, single_network_sweep, write_examples, AdversarialExample};
use certvote::certify::{certify, CertificateRecord};
use certvote::harness::{
    attack_config, attack_samples, certify_config, evaluate_outcomes, format_grid, load_dataset, load_members,
    network_grid, policy_variants, run_pipeline, save_members, single_network_row, split_dataset,
    superimposition_items, train_ensemble, transfer_series, AttackItem, ExperimentConfig, OutcomeTable,
};
use certvote::{Error, Result};

#[derive(Parser)]
#[command(name = "certvote", version, about = "Temperature-ensemble voting defense experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration, JSON or `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Ensemble size.
    #[arg(long, global = true)]
    members: Option<usize>,
    /// Noise level: query noise for most commands, smoothing noise for `certify`.
    #[arg(long, global = true)]
    sigma: Option<f64>,
    /// Rank-verification significance level.
    #[arg(long = "rv-alpha", global = true)]
    rv_alpha: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the ensemble and save its members.
    Train,
    /// Craft single-network examples against every saved member.
    Attack,
    /// Superimpose the smallest successful deltas per (sample, target).
    Superimpose {
        /// Single-network examples; defaults to `<out>/examples_single.jsonl`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Tabulate outcomes and transfer statistics for saved examples.
    Evaluate {
        /// Example files; defaults to every `examples_*.jsonl` under `<out>`.
        #[arg(long)]
        input: Vec<PathBuf>,
    },
    /// Certify validation inputs with the smoothed ensemble.
    Certify {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Run every stage end to end.
    Pipeline,
    /// Craft one example per member for a validation input and print each
    /// member's label for its own example.
    Grid {
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        target: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Numeric(_) | Error::Domain { .. } | Error::UndefinedMetric => 4,
        _ => 3,
    }
}

fn load_config(common: &Common, certify_sigma: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(m) = common.members {
        cfg.members = m;
    }
    if let Some(s) = common.sigma {
        if certify_sigma {
            cfg.certify.sigma = s;
        } else {
            cfg.policies.noise_sigma = s;
        }
    }
    if let Some(a) = common.rv_alpha {
        cfg.policies.rv_alpha = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn members_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("members")
}

/// Single-network examples or superimposed items, one JSON object per line.
fn read_items(path: &Path) -> Result<(Vec<AttackItem>, Vec<AdversarialExample>)> {
    let file = fs::File::open(path)?;
    if let Ok(examples) = read_examples(BufReader::new(file)) {
        return Ok((examples.iter().map(AttackItem::from).collect(), examples));
    }
    let items = fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect::<Result<Vec<AttackItem>>>()?;
    Ok((items, Vec::new()))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn print_table(t: &OutcomeTable) {
    let mut csv = String::new();
    t.write_csv_rows(&mut csv);
    print!("{csv}");
}

fn run(cli: Cli) -> Result<()> {
    let certify_sigma = matches!(cli.command, Command::Certify { .. });
    let cfg = load_config(&cli.common, certify_sigma)?;
    match cli.command {
        Command::Train => {
            let data = load_dataset(&cfg)?;
            let trained = train_ensemble(&cfg, &data)?;
            save_members(&members_dir(&cfg), &trained.ensemble)?;
            for (l, (net, acc)) in trained.ensemble.members().iter().zip(&trained.validation_accuracy).enumerate() {
                println!("member {l}: T = {}, validation accuracy {:.4}", net.temperature(), acc);
            }
        }
        Command::Attack => {
            let ens = load_members(&members_dir(&cfg))?;
            let (_, validation) = split_dataset(&cfg, &load_dataset(&cfg)?)?;
            let samples = attack_samples(&cfg, &ens, &validation)?;
            let examples = single_network_sweep(&ens, &samples, &attack_config(&cfg))?;
            fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join("examples_single.jsonl");
            write_examples(fs::File::create(&path)?, &examples)?;
            let ok = examples.iter().filter(|e| e.success_on_crafted).count();
            println!("{ok}/{} examples succeed on their crafted network -> {}", examples.len(), path.display());
        }
        Command::Superimpose { input } => {
            let path = input.unwrap_or_else(|| cfg.out_dir.join("examples_single.jsonl"));
            let examples = read_examples(BufReader::new(fs::File::open(&path)?))?;
            fs::create_dir_all(&cfg.out_dir)?;
            for &k in &cfg.superimpose {
                let (items, skipped) = superimposition_items(&examples, k)?;
                let out = cfg.out_dir.join(format!("examples_si{k}.jsonl"));
                write_jsonl(&out, &items)?;
                println!("si{k}: {} composites, {skipped} groups skipped -> {}", items.len(), out.display());
            }
        }
        Command::Evaluate { input } => {
            let ens = load_members(&members_dir(&cfg))?;
            let inputs = if input.is_empty() {
                let mut found: Vec<PathBuf> = fs::read_dir(&cfg.out_dir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.file_name()
                            .and_then(|n| n.to_str())
                            .is_some_and(|n| n.starts_with("examples_") && n.ends_with(".jsonl"))
                    })
                    .collect();
                found.sort();
                found
            } else {
                input
            };
            if inputs.is_empty() {
                return Err(Error::Data(format!("no example files under {}", cfg.out_dir.display())));
            }
            let variants = policy_variants(&cfg);
            let mut csv = String::from(OutcomeTable::CSV_HEADER);
            csv.push('\n');
            println!("{}", OutcomeTable::CSV_HEADER);
            for path in inputs {
                let name = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .map(|s| s.trim_start_matches("examples_").to_string())
                    .unwrap_or_default();
                let (items, examples) = read_items(&path)?;
                let mut table = evaluate_outcomes(&ens, &name, &items, &variants)?;
                if !examples.is_empty() {
                    table.rows.insert(0, single_network_row(&ens, &examples)?);
                    let series = transfer_series(&ens, &items, cfg.bins)?;
                    fs::write(cfg.out_dir.join(format!("bins_{name}.csv")), series.to_csv())?;
                }
                table.write_csv_rows(&mut csv);
                print_table(&table);
            }
            fs::write(cfg.out_dir.join("outcomes.csv"), csv)?;
        }
        Command::Certify { count } => {
            let ens = load_members(&members_dir(&cfg))?;
            let (_, validation) = split_dataset(&cfg, &load_dataset(&cfg)?)?;
            let ccfg = certify_config(&cfg);
            let n = count.unwrap_or(cfg.certify.samples).min(validation.len());
            let mut records = Vec::with_capacity(n);
            for i in 0..n {
                let cert = certify(&ens, &validation.inputs()[i], &ccfg)?;
                println!(
                    "{i}: label {} ({:?}), p_lower {:.4}, R {:.4}",
                    cert.label, cert.status, cert.p_lower, cert.radius
                );
                records.push(CertificateRecord {
                    index: i,
                    true_label: Some(validation.labels()[i]),
                    certificate: cert,
                    config: ccfg,
                });
            }
            fs::create_dir_all(&cfg.out_dir)?;
            write_jsonl(&cfg.out_dir.join("certificates.jsonl"), &records)?;
        }
        Command::Pipeline => {
            let report = run_pipeline(&cfg)?;
            for t in &report.tables {
                print_table(t);
            }
            println!("outputs in {}", report.out_dir.display());
        }
        Command::Grid { sample, target } => {
            let ens = load_members(&members_dir(&cfg))?;
            let (_, validation) = split_dataset(&cfg, &load_dataset(&cfg)?)?;
            let s = validation
                .inputs()
                .get(sample)
                .ok_or(Error::IndexOutOfRange { index: sample, len: validation.len() })?;
            for v in policy_variants(&cfg).into_iter().take(2) {
                let grid = network_grid(&ens, s, target, &attack_config(&cfg), &v.policy)?;
                println!("# {}", v.name);
                print!("{}", format_grid(&grid, 5));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("CERTVOTE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
