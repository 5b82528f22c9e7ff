use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unineuron::correlation::{correlate_files, excess_from_blocks};
use unineuron::manifest::{ModelEntry, DEFAULT_THRESHOLDS};
use unineuron::synth::{planted_suite, random_corpus, InitScale, PlantSpec};
use unineuron::tensor_io::read_activation_meta;
use unineuron::{
    write_report, Error, MatchScope, ModelConfig, PairingMode, Pipeline, Result, RotationBaseline, RunManifest,
};

#[derive(Parser)]
#[command(name = "unineuron", version, about = "Universal-neuron analysis for GPT-2-style models")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Universality thresholds.
    #[arg(long, num_args = 1..)]
    thresholds: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    match_scope: Option<MatchScope>,
    #[arg(long, value_enum)]
    pairing: Option<PairingMode>,
    /// Tokens per streamed correlation chunk.
    #[arg(long)]
    chunk_tokens: Option<u64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of evaluation sequences used for ablation.
    #[arg(long)]
    eval_sequences: Option<usize>,
    /// Size-matched random controls per ablation.
    #[arg(long)]
    control_seeds: Option<u32>,
}

impl RunArgs {
    fn pipeline(&self) -> Result<Pipeline> {
        let mut m = RunManifest::load(&self.manifest)?;
        if let Some(t) = &self.thresholds {
            m.thresholds = t.clone();
        }
        if let Some(s) = self.match_scope {
            m.match_scope = s;
        }
        if let Some(p) = self.pairing {
            m.pairing = p;
        }
        if let Some(c) = self.chunk_tokens {
            m.chunk_tokens = c;
        }
        if let Some(s) = self.seed {
            m.master_seed = s;
        }
        if let Some(n) = self.eval_sequences {
            m.eval_sequences = Some(n);
        }
        if let Some(n) = self.control_seeds {
            m.control_seeds = n;
        }
        Pipeline::new(m)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Record post-GELU MLP activations for every model, checkpoint and layer.
    DumpActivations(RunArgs),
    /// Correlate two activation dumps and optionally emit their excess table.
    Correlate {
        /// Reference-layer dump.
        #[arg(long)]
        x: PathBuf,
        /// Target-layer dump.
        #[arg(long)]
        y: PathBuf,
        #[arg(long, default_value_t = 4096)]
        chunk_tokens: u64,
        /// Master seed for the rotation baseline.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Correlation matrix CSV (`row,col,rho`).
        #[arg(long)]
        out: PathBuf,
        /// Excess table CSV.
        #[arg(long)]
        excess: Option<PathBuf>,
    },
    /// Excess-correlation tables of the reference against each target.
    Excess(RunArgs),
    /// Universal sets for every threshold and checkpoint.
    Universal(RunArgs),
    /// Persistence of universal sets across checkpoints.
    Persist(RunArgs),
    /// Ablate universal and control neuron sets.
    Ablate(RunArgs),
    /// Every stage followed by the report tables.
    Pipeline(RunArgs),
    /// Table and figure CSVs from a pipeline output directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Write a synthetic suite with planted universal neurons and a manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    models: usize,
    #[arg(long, value_delimiter = ',', default_value = "100000,200000,300000")]
    checkpoints: Vec<u64>,
    #[arg(long, default_value_t = 2)]
    layers: u16,
    #[arg(long, default_value_t = 32)]
    d_model: u32,
    #[arg(long, default_value_t = 4)]
    heads: u16,
    #[arg(long, default_value_t = 64)]
    d_mlp: u32,
    #[arg(long, default_value_t = 64)]
    vocab: u32,
    #[arg(long, default_value_t = 64)]
    seq_len: u32,
    /// Corpus size in tokens (correlation and ablation corpora alike).
    #[arg(long, default_value_t = 4096)]
    tokens: usize,
}

fn synth(a: &SynthArgs) -> Result<()> {
    let config = ModelConfig {
        n_layers: a.layers,
        d_model: a.d_model,
        n_heads: a.heads,
        d_mlp: a.d_mlp,
        vocab_size: a.vocab,
        max_seq_len: a.seq_len,
        layernorm_eps: 1e-5,
    };
    config.validate()?;
    if !(2..=26).contains(&a.models) {
        return Err(Error::InvalidArgument("--models must be between 2 and 26".into()));
    }
    let spec = PlantSpec {
        layer: a.layers - 1,
        ..PlantSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let suite = planted_suite(
        &config,
        &InitScale::default(),
        &spec,
        a.models,
        a.checkpoints.len(),
        &mut rng,
    )?;
    let weights_dir = a.out.join("weights");
    std::fs::create_dir_all(&weights_dir).map_err(|e| Error::io(&weights_dir, e))?;
    let ids: Vec<String> = (b'a'..=b'z').take(a.models).map(|c| char::from(c).to_string()).collect();
    let mut entries: Vec<ModelEntry> = ids
        .iter()
        .map(|id| ModelEntry {
            id: id.clone(),
            weights: BTreeMap::new(),
        })
        .collect();
    let mut planted = String::from("checkpoint,layer,neuron\n");
    for (c, &ckpt) in a.checkpoints.iter().enumerate() {
        for (m, entry) in entries.iter_mut().enumerate() {
            let rel = PathBuf::from(format!("weights/{}_{ckpt}.nta", entry.id));
            suite.models[c][m].save(a.out.join(&rel))?;
            entry.weights.insert(ckpt.to_string(), rel);
        }
        for n in &suite.planted[c] {
            planted.push_str(&format!("{ckpt},{},{}\n", n.layer, n.index));
        }
    }
    let n_seqs = a.tokens.div_ceil(a.seq_len as usize);
    random_corpus(a.vocab, a.seq_len, n_seqs, &mut rng).write(a.out.join("corpus.tok"))?;
    random_corpus(a.vocab, a.seq_len, n_seqs, &mut rng).write(a.out.join("eval.tok"))?;
    let planted_path = a.out.join("planted.csv");
    std::fs::write(&planted_path, planted).map_err(|e| Error::io(&planted_path, e))?;
    let manifest = RunManifest {
        master_seed: a.seed,
        corpus: "corpus.tok".into(),
        eval_corpus: Some("eval.tok".into()),
        eval_sequences: None,
        output_dir: "out".into(),
        checkpoints: a.checkpoints.clone(),
        thresholds: DEFAULT_THRESHOLDS.to_vec(),
        match_scope: MatchScope::Layer,
        pairing: PairingMode::PerPair,
        chunk_tokens: 4096,
        control_seeds: 5,
        models: entries,
    };
    manifest.validate()?;
    manifest.save(a.out.join("manifest.toml"))?;
    println!("wrote {}", a.out.join("manifest.toml").display());
    Ok(())
}

fn correlate(x: &Path, y: &Path, chunk_tokens: u64, seed: u64, out: &Path, excess: Option<&Path>) -> Result<()> {
    let xm = read_activation_meta(x)?;
    let ym = read_activation_meta(y)?;
    let rot = RotationBaseline::derive(seed, &ym.model_id, ym.checkpoint, ym.layer, ym.n_neurons as usize);
    let blocks = correlate_files(x, &[(y, &rot)], chunk_tokens)?;
    blocks[0].real.write_csv(out)?;
    println!("wrote {}", out.display());
    if let Some(path) = excess {
        excess_from_blocks(&blocks, xm.layer)?.write_csv(path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn print_notices(p: &Pipeline) -> Result<()> {
    for n in p.notices() {
        eprintln!("notice: {n}");
    }
    p.write_notices()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DumpActivations(a) => {
            let mut p = a.pipeline()?;
            let dumps = p.dump_activations()?;
            for d in &dumps {
                for path in &d.layers {
                    println!("{}", path.display());
                }
            }
            print_notices(&p)
        }
        Command::Correlate {
            x,
            y,
            chunk_tokens,
            seed,
            out,
            excess,
        } => correlate(&x, &y, chunk_tokens, seed, &out, excess.as_deref()),
        Command::Excess(a) => {
            let mut p = a.pipeline()?;
            for ce in p.excess()? {
                for t in &ce.targets {
                    println!("{}", p.excess_paths(ce.checkpoint, &t.target_model).0.display());
                }
            }
            print_notices(&p)
        }
        Command::Universal(a) => {
            let mut p = a.pipeline()?;
            for s in p.universal()? {
                println!(
                    "checkpoint {} threshold {} pairing {}: {} universal",
                    s.checkpoint,
                    s.threshold,
                    s.pairing_label(),
                    s.len()
                );
            }
            print_notices(&p)
        }
        Command::Persist(a) => {
            let mut p = a.pipeline()?;
            for s in p.persistence()? {
                let overall = s.overall.map(|v| v.to_string()).unwrap_or_else(|| "undefined".into());
                println!(
                    "{} -> {} threshold {} pairing {}: {overall}",
                    s.from_checkpoint, s.to_checkpoint, s.threshold, s.pairing
                );
            }
            print_notices(&p)
        }
        Command::Ablate(a) => {
            let mut p = a.pipeline()?;
            let rows = p.ablation()?;
            println!("{} ablation rows", rows.len());
            print_notices(&p)
        }
        Command::Pipeline(a) => {
            let mut p = a.pipeline()?;
            let summary = p.run()?;
            for n in &summary.notices {
                eprintln!("notice: {n}");
            }
            let files = write_report(&summary.output_dir)?;
            println!(
                "{} dumps, {} universal sets, {} persistence rows, {} ablation rows",
                summary.n_dumps, summary.n_universal_sets, summary.n_persistence_rows, summary.n_ablation_rows
            );
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Report { dir } => {
            for f in write_report(&dir)? {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::Synth(a) => synth(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
