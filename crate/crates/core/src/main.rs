use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use progrank::forge::{gen_corpus, poison_corpus, QueryPool};
use progrank::harness::dump::SignatureDump;
use progrank::harness::io::{csv_bytes, jsonl_bytes, load_csv, load_jsonl, ArtifactSet};
use progrank::harness::{
    assign_splits, mechanism_csv, measure, pools_from_dump, probe_queries, prepare_queries, rank_queries,
    ranking_rows, rankings_from_rows, run_pipeline, signature_dump, sweep, ExperimentConfig, RankingRow,
    ScoredQuery,
};
use progrank::mechanism::{sample_signature, GateSampling, MechanismGrid, MechanismParams};
use progrank::metrics::{read_responses, substring_report};
use progrank::rerank::{Label, Variant};
use progrank::signature::compute_penalties;
use progrank::{Error, ErrorKind, Result, TinyEncoderParams};

#[derive(Parser)]
#[command(name = "progrank", version, about = "Probe-gradient reranking against corpus poisoning")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for artifacts; also the default location of inputs.
    #[arg(long, global = true, default_value = "progrank-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize the encoder and write a clean synthetic corpus.
    GenCorpus,
    /// Craft poisons for every query of a corpus.
    Attack {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Collect probe-gradient signatures for every query/passage pair.
    Probe {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Output dump; `.bin` selects the binary encoding.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Rerank pools built from a signature dump under each variant.
    Rerank {
        #[arg(long)]
        signatures: Option<PathBuf>,
    },
    /// Compute exposure metrics from a rankings file.
    Eval {
        #[arg(long)]
        rankings: Option<PathBuf>,
    },
    /// Full pipeline: generate, attack, probe, rerank, measure.
    Run,
    /// Factor sweep over R, probe layer, perturbation kind and backbone seed.
    Sweep,
    /// Bernoulli-gate mechanism simulation against its closed forms.
    SimulateMechanism {
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Use exactly round((1 - rho) R) active runs.
        #[arg(long)]
        exact_count: bool,
    },
    /// Read a signature dump and write per-pair penalties.
    ImportSignatures { input: PathBuf },
    /// Convert a dump between encodings, or synthesize one from the
    /// mechanism model.
    ExportSignatures {
        #[arg(long, conflicts_with = "synthetic")]
        input: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Number of synthetic pairs to draw from the mechanism model.
        #[arg(long)]
        synthetic: Option<usize>,
    },
    /// Substring ASR/ACC over a response file.
    MetricsGen { responses: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Format => 3,
        ErrorKind::Numerical => 4,
        ErrorKind::Io => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default().resolved(),
    };
    let cfg = match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn or_default(given: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| dir.join(name))
}

fn write_one(dir: &Path, name: &str, bytes: Vec<u8>) -> Result<()> {
    let mut set = ArtifactSet::default();
    set.add(name, bytes);
    set.write_all(dir)?;
    log::info!("wrote {}", dir.join(name).display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let dir = cli.out_dir.as_path();
    match &cli.command {
        Command::GenCorpus => {
            let params = TinyEncoderParams::new(cfg.encoder.clone())?;
            let pools = gen_corpus(&cfg.corpus, cfg.encoder.vocab_size, cfg.encoder.max_len)?;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            params.save(&dir.join("encoder.bin"))?;
            write_one(dir, "corpus.jsonl", jsonl_bytes(&pools)?)?;
        }
        Command::Attack { corpus, encoder } => {
            let mut pools: Vec<QueryPool> = load_jsonl(&or_default(corpus, dir, "corpus.jsonl"))?;
            let params = TinyEncoderParams::load(&or_default(encoder, dir, "encoder.bin"))?;
            let traces = poison_corpus(&mut pools, &cfg.corpus, &cfg.recipe, &params)?;
            let failed = traces.iter().filter(|t| t.attack_failed).count();
            log::info!("crafted {} poisons, {failed} below the success threshold", traces.len());
            let mut set = ArtifactSet::default();
            set.add("corpus.jsonl", jsonl_bytes(&pools)?);
            set.add("attack_traces.jsonl", jsonl_bytes(&traces)?);
            set.write_all(dir)?;
        }
        Command::Probe { corpus, encoder, output } => {
            let pools: Vec<QueryPool> = load_jsonl(&or_default(corpus, dir, "corpus.jsonl"))?;
            let params = TinyEncoderParams::load(&or_default(encoder, dir, "encoder.bin"))?;
            let prepared = prepare_queries(&cfg, &params, &pools)?;
            let sigs = probe_queries(&params, &pools, &prepared, &cfg.probe, &cfg.perturbation, cfg.runs, cfg.seed)?;
            let dump = signature_dump(&prepared, &sigs, "progrank", cfg.runs, &params, &cfg.probe, cfg.perturbation.kind);
            let out = or_default(output, dir, "signatures.bin");
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            dump.save(&out)?;
            log::info!("wrote {} signatures to {}", dump.records.len(), out.display());
        }
        Command::Rerank { signatures } => {
            let dump = SignatureDump::load(&or_default(signatures, dir, "signatures.bin"))?;
            let pools = pools_from_dump(&dump, &cfg.penalty)?;
            let ids: Vec<&str> = pools.iter().map(|p| p.query_id.as_str()).collect();
            let splits = assign_splits(&ids, cfg.split, cfg.seed);
            let queries: Vec<ScoredQuery> = pools
                .iter()
                .zip(splits)
                .map(|(pool, split)| ScoredQuery {
                    split,
                    total_poisons: pool.candidates.iter().filter(|c| c.label == Label::Poison).count(),
                    pool: pool.clone(),
                })
                .collect();
            let rankings = rank_queries(&queries, &cfg.rerank, &cfg.variants)?;
            write_one(dir, "rankings.csv", csv_bytes(&ranking_rows(&rankings))?)?;
        }
        Command::Eval { rankings } => {
            let rows: Vec<RankingRow> = load_csv(&or_default(rankings, dir, "rankings.csv"))?;
            let rankings = rankings_from_rows(&rows, cfg.rerank.k)?;
            let eval = measure(&rankings, &cfg)?;
            let mut set = ArtifactSet::default();
            eval.add_to(&mut set)?;
            set.write_all(dir)?;
            report(&eval.metrics, &cfg);
        }
        Command::Run => {
            let out = run_pipeline(&cfg, Some(dir))?;
            report(&out.evaluation.metrics, &cfg);
            log::info!("artifacts in {}", dir.display());
        }
        Command::Sweep => {
            let rows = sweep(&cfg)?;
            write_one(dir, "sweep.csv", csv_bytes(&rows)?)?;
        }
        Command::SimulateMechanism { runs, seeds, exact_count } => {
            let mut grid = MechanismGrid::default();
            if let Some(r) = runs {
                grid.runs = *r;
            }
            if let Some(s) = seeds {
                grid.seeds = *s;
            }
            if *exact_count {
                grid.sampling = GateSampling::ExactCount;
            }
            write_one(dir, "mechanism.csv", mechanism_csv(&grid, &cfg.penalty)?)?;
        }
        Command::ImportSignatures { input } => {
            let dump = SignatureDump::load(input)?;
            let rows = dump
                .records
                .iter()
                .map(|rec| {
                    let p = compute_penalties(&rec.signature, &cfg.penalty)?;
                    Ok(PairPenaltyRow {
                        query_id: rec.pair().query_id.clone(),
                        passage_id: rec.pair().passage_id.clone(),
                        label: rec.label,
                        base_score: rec.base_score,
                        rep: p.rep,
                        p_rep: p.p_rep,
                        c: p.c_quantile,
                        p_dr_raw: p.p_dr_raw,
                        p_dr: p.p_dr,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_one(dir, "signature_penalties.csv", csv_bytes(&rows)?)?;
        }
        Command::ExportSignatures { input, output, synthetic } => {
            let dump = match (input, synthetic) {
                (Some(path), None) => SignatureDump::load(path)?,
                (None, Some(n)) => synthetic_dump(*n, cfg.seed)?,
                _ => return Err(Error::Config("pass exactly one of --input or --synthetic".into())),
            };
            dump.save(output)?;
            log::info!("wrote {} signatures to {}", dump.records.len(), output.display());
        }
        Command::MetricsGen { responses } => {
            let f = std::fs::File::open(responses).map_err(|e| Error::io(responses, e))?;
            let recs = read_responses(std::io::BufReader::new(f), &responses.display().to_string())?;
            write_one(dir, "asr_acc.csv", csv_bytes(&substring_report(&recs))?)?;
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct PairPenaltyRow {
    query_id: String,
    passage_id: String,
    label: Label,
    base_score: f64,
    rep: f64,
    p_rep: f64,
    c: f64,
    p_dr_raw: f64,
    p_dr: f64,
}

/// Pairs drawn from the mechanism model: even indices stable (a = 0), odd
/// indices gated (|a| = 4 |u|, rho = 0.5), labelled clean and poison.
fn synthetic_dump(n: usize, seed: u64) -> Result<SignatureDump> {
    let dim = 16;
    let u: Vec<f64> = (0..dim).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    let records = (0..n)
        .map(|i| {
            let gated = i % 2 == 1;
            let a: Vec<f64> = (0..dim).map(|j| if gated && j == 1 { 4.0 } else { 0.0 }).collect();
            let mp = MechanismParams {
                u: u.clone(),
                a,
                rho: 0.5,
                noise_sigma: 0.01,
                runs: 20,
                seed: seed.wrapping_add(i as u64),
                sampling: GateSampling::Iid,
            };
            let sig = sample_signature(&mp)?;
            let pair = progrank::PairId::new(format!("q{:03}", i / 10), format!("p{i:05}"));
            let sig = progrank::GradientSignature::from_flat(pair, sig.dim(), sig.as_flat().to_vec(), sig.kind(), sig.probe_layer())?;
            Ok(progrank::harness::dump::DumpRecord {
                base_score: 0.5,
                label: if gated { Label::Poison } else { Label::Clean },
                signature: sig,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        return Ok(SignatureDump::new(20, dim, 0, progrank::PerturbationKind::Mixed, "mechanism"));
    }
    SignatureDump::from_records("mechanism", records)
}

fn report(metrics: &[progrank::harness::MetricRow], cfg: &ExperimentConfig) {
    let k = cfg.k_list[0];
    for m in metrics.iter().filter(|m| m.k == k && m.split == progrank::harness::Split::Eval) {
        let tag = if m.variant == Variant::Full { "*" } else { " " };
        println!(
            "{tag} {:<13} PHR@{k} {:.3} -> {:.3}   PRR@{k} {:.3} -> {:.3}   ({} queries)",
            m.variant.as_str(),
            m.phr_base,
            m.phr_defended,
            m.prr_base,
            m.prr_defended,
            m.queries
        );
    }
}
