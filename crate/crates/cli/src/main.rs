use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use pd_device::harness::{self, ExperimentConfig};
use pd_device::maskcodec::{self, CompressedMask};
use pd_device::refiner::dump::read_dump;
use pd_device::refiner::{
    refine, refined_text, AttentionScorer, HeadAggregation, ImportanceScorer, ScoringConfig,
    SelectionMask, SyntheticScorer, TokenizedPrompt,
};

#[derive(Parser)]
#[command(name = "pd", version, about = "Cloud-device assisted LLM serving toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve (r, L) for every scene, device class and length bucket.
    Plan {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for plan.csv; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select whole sentences of a prompt and write the mask and refined text.
    Refine {
        /// JSON object with "prefix", "content" and "suffix" strings.
        #[arg(long)]
        prompt: PathBuf,
        /// Attention dump; without one, seeded synthetic scores are used.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 32)]
        window: usize,
        #[arg(long, default_value_t = 7)]
        kernel: usize,
        /// Share of top-scoring tokens each head votes for; summed scores if absent.
        #[arg(long)]
        votes: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress or expand a selection mask.
    Mask {
        #[arg(value_enum)]
        action: MaskAction,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment and write traces and a summary.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize trace files written by `simulate`.
    Report {
        /// Directory holding trace_*.csv.
        #[arg(long)]
        traces: PathBuf,
        /// Experiment config, read for the batch size.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskAction {
    /// Text of '0'/'1' characters to a mask container.
    Pack,
    /// Mask container to text of '0'/'1' characters.
    Unpack,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn json_field(v: &serde_json::Value, key: &str) -> Result<String> {
    match v.get(key) {
        Some(serde_json::Value::String(s)) => Ok(s.clone()),
        None => Ok(String::new()),
        Some(other) => bail!("prompt field {key:?} must be a string, got {other}"),
    }
}

fn read_bits(text: &str) -> Result<SelectionMask> {
    let bits = text
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => bail!("mask text may only hold '0' and '1', found {other:?}"),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectionMask::from_bits(bits))
}

fn bits_text(mask: &SelectionMask) -> String {
    let mut s: String = mask.bits().iter().map(|&b| if b { '1' } else { '0' }).collect();
    s.push('\n');
    s
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Plan { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let table = cfg.plan_table()?;
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    table.write_csv(fs::File::create(dir.join("plan.csv"))?)?;
                }
                None => table.write_csv(std::io::stdout().lock())?,
            }
        }
        Command::Refine {
            prompt,
            weights,
            ratio,
            window,
            kernel,
            votes,
            seed,
            out,
        } => {
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&prompt)?)
                .with_context(|| format!("parsing {}", prompt.display()))?;
            let p = TokenizedPrompt::from_text(
                &json_field(&v, "prefix")?,
                &json_field(&v, "content")?,
                &json_field(&v, "suffix")?,
            );
            let scorer: Box<dyn ImportanceScorer> = match weights {
                Some(path) => {
                    let dump = read_dump(fs::File::open(&path)?)
                        .with_context(|| format!("reading {}", path.display()))?;
                    Box::new(AttentionScorer {
                        heads: dump.heads,
                        config: ScoringConfig {
                            window,
                            kernel,
                            aggregation: match votes {
                                Some(ratio) => HeadAggregation::TopKVotes { ratio },
                                None => HeadAggregation::Sum,
                            },
                        },
                    })
                }
                None => Box::new(SyntheticScorer { seed }),
            };
            let mask = refine(&p, scorer.as_ref(), ratio)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("mask.bin"), maskcodec::pack(&mask).as_bytes())?;
            let mut text = refined_text(&p, &mask)?.join(" ");
            text.push('\n');
            fs::write(out.join("refined.txt"), text)?;
            eprintln!("kept {} of {} tokens", mask.popcount(), mask.len());
        }
        Command::Mask { action, input, out } => match action {
            MaskAction::Pack => {
                let mask = read_bits(&fs::read_to_string(&input)?)?;
                fs::write(&out, maskcodec::pack(&mask).as_bytes())?;
            }
            MaskAction::Unpack => {
                let c = CompressedMask::from_bytes(fs::read(&input)?)?;
                fs::write(&out, bits_text(&maskcodec::unpack(&c)?))?;
            }
        },
        Command::Simulate { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let result = harness::run_experiment(&cfg, Some(&out))?;
            print!("{}", result.report.to_text());
        }
        Command::Report {
            traces,
            config,
            out,
        } => {
            let slots = load_config(config.as_deref())?.cloud.slots;
            let rows = harness::read_trace_dir(&traces)?;
            let report = harness::report(&rows, slots)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                report.write_csv(fs::File::create(dir.join("summary.csv"))?)?;
                fs::write(dir.join("summary.txt"), report.to_text())?;
            }
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
