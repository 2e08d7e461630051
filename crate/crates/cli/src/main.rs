use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use dccrn_vae::config::{ExperimentConfig, PROFILES};
use dccrn_vae::data::{Corpus, SignalKind, Split};
use dccrn_vae::eval::{
    enhance, evaluate_mixtures, latent_diagnostics, pre_finetune_estimate, EnhancementEval, LatentDiagnostics,
};
use dccrn_vae::spectral::{read_wav, write_wav, TimeSignal, WavFormat};
use dccrn_vae::training::{
    finetune_decoder, load_mask_decoder, load_nsvae, load_vae, pretrain_vae, train_nsvae, FinetuneMode, Stage,
    TrainOptions, BEST_DIR,
};

pub const OUT_ENV: &str = "DCCRN_VAE_OUT";
const CONFIG_FILE: &str = "config.json";
const BETA_GRID: [f64; 4] = [1.0, 0.1, 0.01, 0.001];
const ALPHA_GRID: [f64; 2] = [0.0, 1.0];

#[derive(Parser, Debug)]
#[command(name = "dccrn-vae", version, about = "Complex VAE speech enhancement")]
struct Cli {
    /// Base configuration profile.
    #[arg(long, global = true, default_value = "paper", value_parser = PROFILES)]
    profile: String,

    /// JSON file overlaid on the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted override, e.g. `--set training.weights.beta=0.1`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Corpus seed for `synth-data`, training seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root. Defaults to $DCCRN_VAE_OUT, then `runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the speech/noise corpus into <out>/corpus.
    SynthData,
    /// Pretrain the speech (CVAE) or noise (NVAE) VAE.
    Pretrain(PretrainArgs),
    /// Train the noise-suppressing encoder against both pretrained VAEs.
    TrainNsvae,
    /// Fine-tune the mask decoder on top of the NSVAE encoder.
    Finetune(FinetuneArgs),
    /// Enhance one WAV file.
    Enhance(EnhanceArgs),
    /// Score enhancement on held-out mixtures at `eval.snr_db`.
    Evaluate(EvaluateArgs),
    /// KL-to-prior and reconstruction SI-SDR of a pretrained VAE.
    Diagnose(DiagnoseArgs),
    /// Grid over beta and/or alpha with a combined trend table.
    Sweep(SweepArgs),
    /// Print the resolved configuration as JSON.
    ShowConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Speech,
    Noise,
}

impl From<KindArg> for SignalKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Speech => SignalKind::Speech,
            KindArg::Noise => SignalKind::Noise,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Pretrain,
    Nsvae,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Pretrain => Split::Pretrain,
            SplitArg::Nsvae => Split::Nsvae,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Cf,
    Adv,
}

impl From<ModeArg> for FinetuneMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Cf => FinetuneMode::Cf,
            ModeArg::Adv => FinetuneMode::Adv,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Grid {
    Beta,
    Alpha,
    Full,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long, value_enum, default_value = "speech")]
    kind: KindArg,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long, value_enum, default_value = "cf")]
    mode: ModeArg,
}

#[derive(Args, Debug)]
struct EnhanceArgs {
    input: PathBuf,
    output: PathBuf,
    /// Mask decoder checkpoint; defaults to <out>/finetune_cf/best.
    #[arg(long)]
    decoder: Option<PathBuf>,
    /// NSVAE checkpoint; defaults to <out>/train_nsvae/best.
    #[arg(long)]
    nsvae: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Decode the NSVAE mean with the pretrained speech VAE instead of the
    /// fine-tuned mask decoder.
    #[arg(long)]
    pre_finetune: bool,
    /// Which fine-tuned decoder to score.
    #[arg(long, value_enum, default_value = "cf")]
    mode: ModeArg,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long, value_enum, default_value = "speech")]
    kind: KindArg,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// VAE checkpoint; defaults to the stage directory under <out>.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum, default_value = "full")]
    grid: Grid,
    /// Replaces the beta grid (comma separated).
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    /// Replaces the alpha grid (comma separated).
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
}

fn config_key_help() -> String {
    let paper = ExperimentConfig::paper();
    let desk: std::collections::BTreeMap<String, String> = ExperimentConfig::desk().flat_keys().into_iter().collect();
    let mut out = String::from("Config keys (paper default, desk default):\n");
    for (k, v) in paper.flat_keys() {
        let d = desk.get(&k).cloned().unwrap_or_default();
        if d == v {
            let _ = writeln!(out, "  {k} = {v}");
        } else {
            let _ = writeln!(out, "  {k} = {v}  (desk: {d})");
        }
    }
    let _ = write!(
        out,
        "\nExit codes: 0 ok, 1 other failure, 2 configuration, 3 missing checkpoint, 4 divergence.\n\
         Output root: --out, then ${OUT_ENV}, then ./runs."
    );
    out
}

struct Ctx {
    cfg: ExperimentConfig,
    root: PathBuf,
    verbose: bool,
}

impl Ctx {
    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    fn opts(&self, dir: &Path) -> TrainOptions {
        TrainOptions {
            out_dir: Some(dir.to_path_buf()),
            verbose: self.verbose,
        }
    }

    /// Loads the corpus under the output root, synthesizing it on first use.
    fn corpus(&self) -> Result<Corpus> {
        let dir = self.corpus_dir();
        if dir.join(dccrn_vae::data::MANIFEST_FILE).is_file() {
            return Ok(Corpus::load(&dir)?);
        }
        if self.verbose {
            eprintln!("synthesizing corpus into {}", dir.display());
        }
        let corpus = Corpus::synthesize(&self.cfg.corpus, self.cfg.corpus_seed)?;
        corpus.write(&dir)?;
        write_config(&dir, &self.cfg)?;
        Ok(corpus)
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_json_pretty()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::profile(&cli.profile)?;
    if let Some(path) = &cli.config {
        cfg = cfg.merge_file(path)?;
    }
    for o in &cli.overrides {
        cfg = cfg.with_override(o)?;
    }
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::SynthData => cfg.corpus_seed = seed,
            _ => cfg.training.seed = seed,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn pretrain_stage(kind: SignalKind) -> Stage {
    match kind {
        SignalKind::Speech => Stage::PretrainCvae,
        SignalKind::Noise => Stage::PretrainNvae,
    }
}

fn finetune_stage(mode: FinetuneMode) -> Stage {
    match mode {
        FinetuneMode::Cf => Stage::FinetuneCf,
        FinetuneMode::Adv => Stage::FinetuneAdv,
    }
}

fn best(dir: &Path) -> PathBuf {
    dir.join(BEST_DIR)
}

fn run_pretrain(ctx: &Ctx, corpus: &Corpus, kind: SignalKind, dir: &Path) -> Result<LatentDiagnostics> {
    let mut cfg = ctx.cfg.clone();
    cfg.training.stage = pretrain_stage(kind);
    write_config(dir, &cfg)?;
    let out = pretrain_vae(&cfg.setup(), corpus, kind, &ctx.opts(dir))?;
    let diag = latent_diagnostics(&out.model, corpus, kind, Split::Test, &cfg.stft)?;
    fs::write(dir.join("diagnostics.json"), serde_json::to_string_pretty(&diag)?)?;
    Ok(diag)
}

fn run_nsvae(ctx: &Ctx, corpus: &Corpus, cvae_dir: &Path, nvae_dir: &Path, dir: &Path) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    cfg.training.stage = Stage::TrainNsvae;
    let cvae = load_vae(&best(cvae_dir))?;
    let nvae = load_vae(&best(nvae_dir))?;
    write_config(dir, &cfg)?;
    train_nsvae(&cfg.setup(), corpus, &cvae, &nvae, &ctx.opts(dir))?;
    Ok(())
}

fn run_finetune(ctx: &Ctx, corpus: &Corpus, mode: FinetuneMode, nsvae_dir: &Path, cvae_dir: &Path, dir: &Path) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    cfg.training.stage = finetune_stage(mode);
    let nsvae = load_nsvae(&best(nsvae_dir))?;
    let cvae = load_vae(&best(cvae_dir))?;
    write_config(dir, &cfg)?;
    let out = finetune_decoder(&cfg.setup(), corpus, &nsvae, &cvae, mode, &ctx.opts(dir))?;
    if out.discriminator.is_some() {
        fs::write(
            dir.join("steps.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "generator_steps": out.generator_steps,
                "discriminator_steps": out.discriminator_steps,
            }))?,
        )?;
    }
    Ok(())
}

fn run_evaluate(
    ctx: &Ctx,
    corpus: &Corpus,
    split: Split,
    nsvae_dir: &Path,
    decoder_dir: Option<&Path>,
    cvae_dir: &Path,
    dir: &Path,
) -> Result<EnhancementEval> {
    let cfg = &ctx.cfg;
    let nsvae = load_nsvae(&best(nsvae_dir))?;
    let result = match decoder_dir {
        Some(d) => {
            let decoder = load_mask_decoder(&best(d))?;
            evaluate_mixtures(corpus, split, cfg.eval.snr_db, &cfg.stft, cfg.eval.seed, &|y: &TimeSignal| {
                enhance(&nsvae, &decoder, y, &cfg.stft)
            })?
        }
        None => {
            let cvae = load_vae(&best(cvae_dir))?;
            evaluate_mixtures(corpus, split, cfg.eval.snr_db, &cfg.stft, cfg.eval.seed, &|y: &TimeSignal| {
                pre_finetune_estimate(&nsvae, &cvae, y, &cfg.stft)
            })?
        }
    };
    write_config(dir, cfg)?;
    fs::write(dir.join("input.csv"), result.input.to_csv())?;
    fs::write(dir.join("output.csv"), result.output.to_csv())?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "snr_db": cfg.eval.snr_db,
            "input_si_sdr_db": result.input.si_sdr.mean,
            "output_si_sdr_db": result.output.si_sdr.mean,
            "improvement_db": result.improvement_db(),
            "utterances": result.output.si_sdr.n,
        }))?,
    )?;
    Ok(result)
}

fn fmt_db(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

fn sweep(ctx: &Ctx, args: &SweepArgs) -> Result<String> {
    let corpus = ctx.corpus()?;
    let betas = match args.grid {
        Grid::Alpha => vec![ctx.cfg.training.weights.beta],
        _ => args.betas.clone().unwrap_or_else(|| BETA_GRID.to_vec()),
    };
    let alphas = match args.grid {
        Grid::Beta => vec![],
        _ => args.alphas.clone().unwrap_or_else(|| ALPHA_GRID.to_vec()),
    };
    let sweep_root = ctx.root.join("sweep");
    let mut rows = Vec::new();
    let mut table = format!(
        "{:>8} {:>6} {:>12} {:>16} {:>14} {:>14}\n",
        "beta", "alpha", "kll", "recon_si_sdr_db", "si_sdr_db", "improvement_db"
    );
    for &beta in &betas {
        let mut cfg = ctx.cfg.clone();
        cfg.training.weights.beta = beta;
        cfg.validate()?;
        let bctx = Ctx {
            cfg,
            root: ctx.root.clone(),
            verbose: ctx.verbose,
        };
        let bdir = sweep_root.join(format!("beta_{beta}"));
        let cvae_dir = bdir.join(Stage::PretrainCvae.name());
        let diag = run_pretrain(&bctx, &corpus, SignalKind::Speech, &cvae_dir)?;
        if alphas.is_empty() {
            let _ = writeln!(
                table,
                "{:>8} {:>6} {:>12.5} {:>16.3} {:>14} {:>14}",
                beta, "-", diag.kll, diag.recon_si_sdr_db, "-", "-"
            );
            rows.push(serde_json::json!({"beta": beta, "kll": diag.kll, "recon_si_sdr_db": diag.recon_si_sdr_db}));
            continue;
        }
        let nvae_dir = bdir.join(Stage::PretrainNvae.name());
        run_pretrain(&bctx, &corpus, SignalKind::Noise, &nvae_dir)?;
        for &alpha in &alphas {
            let mut cfg = bctx.cfg.clone();
            cfg.training.weights.alpha = alpha;
            cfg.validate()?;
            let actx = Ctx {
                cfg,
                root: ctx.root.clone(),
                verbose: ctx.verbose,
            };
            let adir = bdir.join(format!("alpha_{alpha}"));
            let nsvae_dir = adir.join(Stage::TrainNsvae.name());
            let ft_dir = adir.join(Stage::FinetuneCf.name());
            run_nsvae(&actx, &corpus, &cvae_dir, &nvae_dir, &nsvae_dir)?;
            run_finetune(&actx, &corpus, FinetuneMode::Cf, &nsvae_dir, &cvae_dir, &ft_dir)?;
            let ev = run_evaluate(&actx, &corpus, Split::Test, &nsvae_dir, Some(&ft_dir), &cvae_dir, &adir.join("evaluate"))?;
            let _ = writeln!(
                table,
                "{:>8} {:>6} {:>12.5} {:>16.3} {:>14} {:>14}",
                beta,
                alpha,
                diag.kll,
                diag.recon_si_sdr_db,
                fmt_db(Some(ev.output.si_sdr.mean)),
                fmt_db(Some(ev.improvement_db()))
            );
            rows.push(serde_json::json!({
                "beta": beta,
                "alpha": alpha,
                "kll": diag.kll,
                "recon_si_sdr_db": diag.recon_si_sdr_db,
                "si_sdr_db": ev.output.si_sdr.mean,
                "improvement_db": ev.improvement_db(),
            }));
        }
    }
    write_config(&sweep_root, &ctx.cfg)?;
    fs::write(sweep_root.join("table.txt"), &table)?;
    fs::write(sweep_root.join("table.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(table)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    let root = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let ctx = Ctx {
        cfg,
        root,
        verbose: cli.verbose,
    };
    match &cli.command {
        Command::ShowConfig => println!("{}", ctx.cfg.to_json_pretty()),
        Command::SynthData => {
            let dir = ctx.corpus_dir();
            let corpus = Corpus::synthesize(&ctx.cfg.corpus, ctx.cfg.corpus_seed)?;
            corpus.write(&dir)?;
            write_config(&dir, &ctx.cfg)?;
            println!("corpus: {} utterances in {}", corpus.manifest.entries.len(), dir.display());
        }
        Command::Pretrain(a) => {
            let kind = SignalKind::from(a.kind);
            let corpus = ctx.corpus()?;
            let dir = ctx.stage_dir(pretrain_stage(kind));
            let d = run_pretrain(&ctx, &corpus, kind, &dir)?;
            println!("kll {:.5} recon_si_sdr_db {:.3} ({})", d.kll, d.recon_si_sdr_db, dir.display());
        }
        Command::TrainNsvae => {
            let corpus = ctx.corpus()?;
            let dir = ctx.stage_dir(Stage::TrainNsvae);
            run_nsvae(
                &ctx,
                &corpus,
                &ctx.stage_dir(Stage::PretrainCvae),
                &ctx.stage_dir(Stage::PretrainNvae),
                &dir,
            )?;
            println!("nsvae: {}", dir.display());
        }
        Command::Finetune(a) => {
            let mode = FinetuneMode::from(a.mode);
            let corpus = ctx.corpus()?;
            let dir = ctx.stage_dir(finetune_stage(mode));
            run_finetune(
                &ctx,
                &corpus,
                mode,
                &ctx.stage_dir(Stage::TrainNsvae),
                &ctx.stage_dir(Stage::PretrainCvae),
                &dir,
            )?;
            println!("decoder: {}", dir.display());
        }
        Command::Enhance(a) => {
            let nsvae_dir = a.nsvae.clone().unwrap_or_else(|| best(&ctx.stage_dir(Stage::TrainNsvae)));
            let dec_dir = a.decoder.clone().unwrap_or_else(|| best(&ctx.stage_dir(Stage::FinetuneCf)));
            let nsvae = load_nsvae(&nsvae_dir)?;
            let decoder = load_mask_decoder(&dec_dir)?;
            let noisy = read_wav(&a.input)?;
            let out = enhance(&nsvae, &decoder, &noisy, &ctx.cfg.stft)?;
            if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_wav(&a.output, &out, WavFormat::Float32)?;
            println!("{} -> {} ({} samples)", a.input.display(), a.output.display(), out.len());
        }
        Command::Evaluate(a) => {
            let corpus = ctx.corpus()?;
            let mode = FinetuneMode::from(a.mode);
            let decoder_dir = ctx.stage_dir(finetune_stage(mode));
            let (label, dec) = if a.pre_finetune {
                ("pre_finetune".to_string(), None)
            } else {
                (finetune_stage(mode).name().to_string(), Some(decoder_dir.as_path()))
            };
            let dir = ctx.root.join("evaluate").join(&label);
            let ev = run_evaluate(
                &ctx,
                &corpus,
                Split::from(a.split),
                &ctx.stage_dir(Stage::TrainNsvae),
                dec,
                &ctx.stage_dir(Stage::PretrainCvae),
                &dir,
            )?;
            println!("unprocessed: {}", ev.input.si_sdr.render());
            println!("{label}: {}", ev.output.si_sdr.render());
            println!("improvement_db: {:.3}", ev.improvement_db());
        }
        Command::Diagnose(a) => {
            let kind = SignalKind::from(a.kind);
            let corpus = ctx.corpus()?;
            let ckpt = a.checkpoint.clone().unwrap_or_else(|| best(&ctx.stage_dir(pretrain_stage(kind))));
            let model = load_vae(&ckpt)?;
            let d = latent_diagnostics(&model, &corpus, kind, Split::from(a.split), &ctx.cfg.stft)?;
            println!("{}", serde_json::to_string_pretty(&d)?);
        }
        Command::Sweep(a) => print!("{}", sweep(&ctx, a)?),
    }
    Ok(())
}

/// Exit code and category for a failure.
fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    match err.downcast_ref::<dccrn_vae::Error>() {
        Some(e) => {
            let code = match e.category() {
                "config" => 2,
                "missing-checkpoint" => 3,
                "divergence" => 4,
                _ => 1,
            };
            (code, e.category())
        }
        None => (1, "io"),
    }
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_help(config_key_help());
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, category) = classify(&e);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{category}]: {msg}");
            ExitCode::from(code)
        }
    }
}
