//! Command-line front end for the texture code mapping pipeline: code
//! images, code embeddings, batch encoding, synthetic data, network
//! training, and the repeated-split evaluation protocol.

mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use texmap::emd::build_dissimilarity_matrix;
use texmap::embedding::{
    classical_mds, normalize_embedding, read_embedding_csv, read_embedding_sidecar,
    write_embedding_csv, write_embedding_sidecar,
};
use texmap::error::{Error, Result};
use texmap::eval::{run_protocol, write_report_csv, write_report_json, ProtocolConfig};
use texmap::image::load_image;
use texmap::lbp::{compute_code_image, write_code_image_pgm, LbpConfig, LbpVariant};
use texmap::mapped::batch_encode;
use texmap::net::{save_checkpoint, train, write_loss_csv};
use texmap::synth::{synth_dataset, SynthConfig};

use crate::config::FileConfig;

#[derive(Parser)]
#[command(
    name = "texmap",
    version,
    about = "Texture code mapping pipeline: codes, embeddings, fusion networks"
)]
struct Cli {
    /// Override every seed in the loaded config (train and eval).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite outputs that already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the code image of one input image and write it as PGM.
    Lbp {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 8)]
        points: u32,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        /// raw, uniform2, or riu2 (PGM export supports raw at 8 points).
        #[arg(long, default_value = "raw")]
        variant: String,
    },
    /// Build the code dissimilarity matrix and its spatial embedding.
    Embed {
        #[arg(long, default_value_t = 8)]
        points: u32,
        #[arg(long, default_value_t = 3)]
        dim: usize,
        /// Output prefix; writes <prefix>_matrix.csv,
        /// <prefix>_embedding.csv and <prefix>_embedding.json.
        #[arg(short, long)]
        out_prefix: PathBuf,
    },
    /// Encode a folder-per-class dataset into mapped images.
    Encode {
        dataset: PathBuf,
        /// Embedding CSV from `embed` (the .json sidecar must sit next
        /// to it).
        #[arg(long)]
        embedding: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
    },
    /// Generate a synthetic texture dataset (gratings, checkerboards,
    /// filtered noise).
    Synth {
        output: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
    },
    /// Train the fusion network on a full dataset per the config file.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run the repeated-split evaluation protocol per the config file.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
    },
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
}

fn write_provenance(path: &Path, p: &Provenance) -> Result<()> {
    let mut text = serde_json::to_string_pretty(p)
        .map_err(|e| Error::data(format!("provenance encoding: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn prefixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

fn cmd_lbp(input: &Path, output: &Path, points: u32, radius: f64, variant: &str, force: bool) -> Result<()> {
    let cfg = LbpConfig::new(points, radius, LbpVariant::parse(variant)?)?;
    refuse_existing(output, force)?;
    let gray = load_image(input)?.into_gray();
    let codes = compute_code_image(&gray, &cfg)?;
    ensure_parent(output)?;
    let comment = format!(
        "texmap lbp points={points} radius={radius} variant={} input={}",
        cfg.variant.as_str(),
        input.display()
    );
    write_code_image_pgm(&codes, &cfg, output, Some(&comment))?;
    println!(
        "wrote {} ({}x{}, {} valid pixels)",
        output.display(),
        codes.height(),
        codes.width(),
        codes.valid_count()
    );
    Ok(())
}

fn cmd_embed(points: u32, dim: usize, out_prefix: &Path, force: bool) -> Result<()> {
    let matrix_path = prefixed(out_prefix, "_matrix.csv");
    let csv_path = prefixed(out_prefix, "_embedding.csv");
    let sidecar_path = prefixed(out_prefix, "_embedding.json");
    for p in [&matrix_path, &csv_path, &sidecar_path] {
        refuse_existing(p, force)?;
    }
    ensure_parent(&csv_path)?;
    let matrix = build_dissimilarity_matrix(points)?;
    let emb = normalize_embedding(&classical_mds(&matrix, dim)?);
    matrix.write_csv(&matrix_path)?;
    write_embedding_csv(&emb, &csv_path)?;
    write_embedding_sidecar(&emb, points, &sidecar_path)?;
    println!(
        "embedded {} codes into {dim}D, stress {:.6}",
        emb.count(),
        emb.stress
    );
    println!("wrote {}", matrix_path.display());
    println!("wrote {}", csv_path.display());
    println!("wrote {}", sidecar_path.display());
    Ok(())
}

fn cmd_encode(dataset: &Path, embedding: &Path, output: &Path, radius: f64, force: bool) -> Result<()> {
    let sidecar_path = embedding.with_extension("json");
    let sidecar = read_embedding_sidecar(&sidecar_path)?;
    let emb = read_embedding_csv(embedding, Some(&sidecar_path))?;
    let cfg = LbpConfig::new(sidecar.points, radius, LbpVariant::Raw)?;
    let report = batch_encode(dataset, &emb, &cfg, output, force)?;
    println!(
        "encoded {}: {} written, {} skipped, {} failed",
        output.display(),
        report.written,
        report.skipped,
        report.failed
    );
    if report.failed > 0 {
        return Err(Error::data(format!(
            "{} images failed to encode (see log)",
            report.failed
        )));
    }
    Ok(())
}

fn cmd_synth(output: &Path, classes: usize, per_class: usize, side: usize, seed: u64) -> Result<()> {
    let cfg = SynthConfig {
        classes,
        per_class,
        side,
        seed,
    };
    let files = synth_dataset(output, &cfg)?;
    let meta_path = output.join("synth_meta.json");
    let mut text = serde_json::to_string_pretty(&cfg)
        .map_err(|e| Error::data(format!("metadata encoding: {e}")))?;
    text.push('\n');
    std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    println!(
        "generated {} images in {} classes under {}",
        files.len(),
        classes,
        output.display()
    );
    Ok(())
}

fn cmd_train(config_path: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let cfg = FileConfig::load(config_path, seed)?;
    let spec = cfg.net_spec()?;
    let train_cfg = cfg.train_config()?;
    let out_dir = &cfg.paths.out_dir;
    let ckpt_path = out_dir.join("net.ckpt");
    let loss_path = out_dir.join("loss.csv");
    refuse_existing(&ckpt_path, force)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let index = texmap::dataset::index_dataset(&cfg.paths.dataset)?;
    let examples = texmap::eval::load_examples(&index, &spec, cfg.paths.mapped.as_deref())?;
    let result = train(&spec, &examples, &train_cfg)?;
    save_checkpoint(&ckpt_path, &spec, train_cfg.seed, train_cfg.epochs, &result.params)?;
    write_loss_csv(&loss_path, &result.loss_curve)?;
    write_provenance(
        &out_dir.join("train_provenance.json"),
        &Provenance {
            command: "train",
            config_sha256: cfg.config_sha256(),
            seed: train_cfg.seed,
        },
    )?;
    println!(
        "trained {} epochs on {} examples: loss {} -> {}",
        train_cfg.epochs,
        examples.len(),
        result.loss_curve.first().unwrap(),
        result.loss_curve.last().unwrap()
    );
    println!("wrote {}", ckpt_path.display());
    println!("wrote {}", loss_path.display());
    Ok(())
}

fn cmd_eval(config_path: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let cfg = FileConfig::load(config_path, seed)?;
    let classifier = cfg.classifier()?;
    let plan = cfg.split_plan()?;
    let out_dir = &cfg.paths.out_dir;
    let json_path = out_dir.join("report.json");
    let csv_path = out_dir.join("report.csv");
    refuse_existing(&json_path, force)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let protocol = ProtocolConfig {
        rgb_root: cfg.paths.dataset.clone(),
        mapped_root: cfg.paths.mapped.clone(),
        plan,
        classifier,
    };
    let report = run_protocol(&protocol)?;
    write_report_json(&json_path, &report)?;
    write_report_csv(&csv_path, &report)?;
    write_provenance(
        &out_dir.join("eval_provenance.json"),
        &Provenance {
            command: "eval",
            config_sha256: cfg.config_sha256(),
            seed: plan.seed,
        },
    )?;
    println!(
        "{}: accuracy {:.4} +/- {:.4} over {} runs",
        report.classifier, report.mean_accuracy, report.std_accuracy, report.repetitions
    );
    println!("wrote {}", json_path.display());
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::config(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Lbp {
            input,
            output,
            points,
            radius,
            variant,
        } => cmd_lbp(input, output, *points, *radius, variant, cli.force),
        Command::Embed {
            points,
            dim,
            out_prefix,
        } => cmd_embed(*points, *dim, out_prefix, cli.force),
        Command::Encode {
            dataset,
            embedding,
            output,
            radius,
        } => cmd_encode(dataset, embedding, output, *radius, cli.force),
        Command::Synth {
            output,
            classes,
            per_class,
            side,
        } => cmd_synth(output, *classes, *per_class, *side, cli.seed.unwrap_or(0)),
        Command::Train { config } => cmd_train(config, cli.seed, cli.force),
        Command::Eval { config } => cmd_eval(config, cli.seed, cli.force),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
