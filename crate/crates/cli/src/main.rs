use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use biaten::aten::{AlphaMode, EnsembleMode};
use biaten::bank::{read_attention, read_bank, read_heads, write_attention, write_bank, write_heads, FeatureBank};
use biaten::grad::GradCheckCase;
use biaten::heads::SourceHeadParams;
use biaten::report::{self, save, AnalysisTables, WeightDump};
use biaten::synth::{pretrain_source_head, synth_generate, PretrainConfig, SynthConfig, SynthData};
use biaten::train::{eval_alpha_mode, evaluate, init_params, source_baselines, train, Evaluation, TrainConfig};
use biaten::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};

const TARGET_BANK: &str = "target.fbnk";
const HEADS_FILE: &str = "heads.shed";
const ADAPTED_HEADS_FILE: &str = "adapted_heads.shed";
const ATTENTION_FILE: &str = "attention.atnp";

#[derive(Parser)]
#[command(name = "biaten", version, about = "Bi-level attention ensembles for source-free adaptation over frozen features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-source benchmark and pretrain one head per source.
    ///
    /// Writes source_<i>.fbnk, target.fbnk, heads.shed, pretrain.csv (domain,accuracy,final_loss)
    /// and baselines.csv (model,accuracy).
    Synth(SynthArgs),
    /// Adapt the source heads to the target bank and train the attention ensemble.
    #[command(after_help = report::SCHEMAS)]
    Train(TrainArgs),
    /// Score a trained ensemble and write per-sample weights and analysis tables.
    #[command(after_help = report::SCHEMAS)]
    Eval(EvalArgs),
    /// Rebuild the analysis tables from beta.csv and alpha.csv dumps.
    #[command(after_help = report::SCHEMAS)]
    InspectWeights(InspectArgs),
    /// Compare analytic gradients with central differences on a seeded tiny configuration.
    Gradcheck(GradcheckArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    domains: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Source samples per class and domain.
    #[arg(long, default_value_t = 150)]
    per_class: usize,
    #[arg(long, default_value_t = 100)]
    target_per_class: usize,
    #[arg(long, default_value_t = 8)]
    dlatent: usize,
    #[arg(long, default_value_t = 32)]
    dbackbone: usize,
    #[arg(long, default_value_t = 1.5)]
    shift: f64,
    /// Distance of each class mean from the origin.
    #[arg(long, default_value_t = 3.0)]
    sep: f64,
    /// Source indices whose labels are replaced by random ones.
    #[arg(long, value_delimiter = ',')]
    useless: Vec<usize>,
    /// Bottleneck width of the pretrained heads.
    #[arg(long, default_value_t = 32)]
    dk: usize,
    #[arg(long, default_value_t = 20)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 32)]
    pretrain_batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pretrain_lr: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    BiAten,
    Aten,
}

impl From<ModeArg> for EnsembleMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::BiAten => EnsembleMode::BiAten,
            ModeArg::Aten => EnsembleMode::Aten,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlphaArg {
    Learned,
    OneHot,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    heads: PathBuf,
    #[arg(long, value_enum, default_value = "bi-aten")]
    mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    d_alter: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 4)]
    heads_count: usize,
    /// Embedding width; 512 for bi-aten and 2048 for aten when omitted.
    #[arg(long)]
    d_emb: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    smoothing: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Log full-bank accuracy every this many iterations; 0 logs it only at refreshes.
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    bank: PathBuf,
    /// Adapted heads written by `train`.
    #[arg(long)]
    heads: PathBuf,
    #[arg(long)]
    attention: PathBuf,
    /// α used for scoring; learned for bi-aten and one-hot for aten when omitted.
    #[arg(long, value_enum)]
    alpha: Option<AlphaArg>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(clap::Args)]
struct InspectArgs {
    /// Directory holding beta.csv and alpha.csv.
    #[arg(long)]
    dir: PathBuf,
    /// Class count; inferred from the largest label or prediction when omitted.
    #[arg(long)]
    classes: Option<usize>,
    /// Defaults to --dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => run_train(&a),
        Command::Eval(a) => eval(&a),
        Command::InspectWeights(a) => inspect(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn synth(a: &SynthArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_domains: a.domains,
        n_classes: a.classes,
        n_per_class: a.per_class,
        n_target_per_class: a.target_per_class,
        d_latent: a.dlatent,
        d_backbone: a.dbackbone,
        shift: a.shift,
        class_sep: a.sep,
        shuffled_domains: a.useless.clone(),
    };
    let pcfg = PretrainConfig {
        d_k: a.dk,
        epochs: a.pretrain_epochs,
        batch_size: a.pretrain_batch,
        lr0: a.pretrain_lr,
        seed: a.seed,
        ..PretrainConfig::default()
    };
    let data: SynthData<f64> = synth_generate(&cfg)?;
    fs::create_dir_all(&a.out_dir)?;
    let mut heads = Vec::with_capacity(a.domains);
    let mut pretrain_rows = vec!["domain,accuracy,final_loss".to_string()];
    for (i, source) in data.sources.iter().enumerate() {
        write_bank(&a.out_dir.join(format!("source_{i}.fbnk")), source)?;
        let (head, rep) = pretrain_source_head(source, &pcfg)?;
        pretrain_rows.push(format!("{},{:.16e},{:.16e}", head.domain_name, rep.accuracy, rep.final_loss));
        println!("pretrained {}: source accuracy {:.4}", head.domain_name, rep.accuracy);
        heads.push(head);
    }
    write_bank(&a.out_dir.join(TARGET_BANK), &data.target)?;
    write_heads(&a.out_dir.join(HEADS_FILE), &heads)?;
    save(&a.out_dir.join("pretrain.csv"), |b| write_lines(b, &pretrain_rows))?;

    // Report baselines from the stored (f32-rounded) artifacts, as `train` will see them.
    let target: FeatureBank<f64> = read_bank(&a.out_dir.join(TARGET_BANK))?;
    let stored: Vec<SourceHeadParams<f64>> = read_heads(&a.out_dir.join(HEADS_FILE))?;
    let base = source_baselines(&target, &stored)?;
    let mut rows = vec!["model,accuracy".to_string()];
    for (h, acc) in stored.iter().zip(&base.single) {
        rows.push(format!("{},{acc:.16e}", h.domain_name));
        println!("target accuracy of {}: {acc:.4}", h.domain_name);
    }
    rows.push(format!("average_ensemble,{:.16e}", base.average_ensemble));
    println!("target accuracy of the averaged ensemble: {:.4}", base.average_ensemble);
    save(&a.out_dir.join("baselines.csv"), |b| write_lines(b, &rows))?;
    Ok(ExitCode::SUCCESS)
}

fn write_lines(buf: &mut Vec<u8>, lines: &[String]) -> Result<()> {
    for l in lines {
        buf.extend_from_slice(l.as_bytes());
        buf.push(b'\n');
    }
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<ExitCode> {
    let mode = EnsembleMode::from(a.mode);
    let config = TrainConfig {
        lambda: a.lambda,
        gamma: a.gamma,
        lr0: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        d_alter: a.d_alter,
        smoothing: a.smoothing,
        momentum: a.momentum,
        seed: a.seed,
        mode,
        d_emb: a.d_emb.unwrap_or(mode.default_embed_dim()),
        n_heads: a.heads_count,
        eval_every: a.eval_every,
    };
    config.validate()?;
    let bank: FeatureBank<f64> = read_bank(&a.bank)?;
    let heads: Vec<SourceHeadParams<f64>> = read_heads(&a.heads)?;
    let params = init_params(&bank, &heads, &config)?;
    let out = train(&bank, &heads, params, &config)?;

    fs::create_dir_all(&a.out_dir)?;
    write_attention(&a.out_dir.join(ATTENTION_FILE), &out.params)?;
    write_heads(&a.out_dir.join(ADAPTED_HEADS_FILE), &out.heads)?;
    save(&a.out_dir.join(report::METRICS_FILE), |b| report::write_metrics(b, &out.metrics, bank.n_domains()))?;
    save(&a.out_dir.join(report::REFRESH_FILE), |b| report::write_refreshes(b, &out.refreshes))?;
    // Score what was stored: SHED holds f32, so `eval` on these files reproduces the dumps.
    let stored: Vec<SourceHeadParams<f64>> = read_heads(&a.out_dir.join(ADAPTED_HEADS_FILE))?;
    let ev = evaluate(&bank, &stored, &out.params, eval_alpha_mode(mode))?;
    write_evaluation(&a.out_dir, &ev, &bank)?;
    print_summary(&ev);
    Ok(ExitCode::SUCCESS)
}

fn write_evaluation(dir: &Path, ev: &Evaluation, bank: &FeatureBank<f64>) -> Result<()> {
    let dump = WeightDump::from_evaluation(ev, bank.labels.as_deref());
    save(&dir.join(report::BETA_DUMP_FILE), |b| dump.write_beta(b))?;
    save(&dir.join(report::ALPHA_DUMP_FILE), |b| dump.write_alpha(b))?;
    AnalysisTables::from_evaluation(ev).write_to_dir(dir)
}

fn print_summary(ev: &Evaluation) {
    match ev.accuracy {
        Some(acc) => println!("accuracy: {acc:.4}"),
        None => println!("accuracy: unavailable (bank has no labels)"),
    }
    let betas: Vec<String> = ev.mean_beta.iter().map(|b| format!("{b:.4}")).collect();
    println!("mean beta per domain: {}", betas.join(" "));
}

fn eval(a: &EvalArgs) -> Result<ExitCode> {
    let bank: FeatureBank<f64> = read_bank(&a.bank)?;
    let heads: Vec<SourceHeadParams<f64>> = read_heads(&a.heads)?;
    let params = read_attention(&a.attention)?;
    let alpha_mode = match a.alpha {
        Some(AlphaArg::Learned) => AlphaMode::Learned,
        Some(AlphaArg::OneHot) => AlphaMode::OneHot,
        None => eval_alpha_mode(params.mode),
    };
    let ev = evaluate(&bank, &heads, &params, alpha_mode)?;
    fs::create_dir_all(&a.out_dir)?;
    write_evaluation(&a.out_dir, &ev, &bank)?;
    print_summary(&ev);
    Ok(ExitCode::SUCCESS)
}

fn inspect(a: &InspectArgs) -> Result<ExitCode> {
    let open = |name: &str| -> Result<BufReader<File>> { Ok(BufReader::new(File::open(a.dir.join(name))?)) };
    let dump = WeightDump::read(open(report::BETA_DUMP_FILE)?, open(report::ALPHA_DUMP_FILE)?)?;
    let groups = dump.labels.as_ref().unwrap_or(&dump.predictions);
    let classes = a.classes.unwrap_or_else(|| groups.iter().max().map_or(0, |&c| c + 1));
    let tables = AnalysisTables::from_dump(&dump, classes)?;
    let out = a.out_dir.as_deref().unwrap_or(&a.dir);
    fs::create_dir_all(out)?;
    tables.write_to_dir(out)?;
    let betas: Vec<String> = tables.mean_beta.iter().map(|b| format!("{b:.4}")).collect();
    println!("{} samples, {} domains; mean beta per domain: {}", dump.n_samples(), dump.n_domains(), betas.join(" "));
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: &GradcheckArgs) -> Result<ExitCode> {
    if !(a.step > 0.0 && a.tolerance > 0.0) {
        return Err(Error::Contract {
            op: "gradcheck",
            msg: "step and tolerance must be positive".into(),
        });
    }
    let runs = [
        ("bi-aten, learned alpha", EnsembleMode::BiAten, AlphaMode::Learned),
        ("bi-aten, one-hot alpha", EnsembleMode::BiAten, AlphaMode::OneHot),
        ("aten", EnsembleMode::Aten, AlphaMode::OneHot),
    ];
    let mut ok = true;
    for (label, mode, alpha) in runs {
        let report = GradCheckCase::tiny(a.seed, mode).run(alpha, a.step)?;
        println!("{label}:");
        for t in &report.tensors {
            let pass = t.max_rel_error < a.tolerance;
            ok &= pass;
            println!(
                "  {:<28} {:>4} entries  max rel error {:.3e}  {}",
                t.name,
                t.entries,
                t.max_rel_error,
                if pass { "ok" } else { "FAIL" }
            );
        }
    }
    if ok {
        println!("all tensors within {:e}", a.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("some tensors exceed {:e}", a.tolerance);
        Ok(ExitCode::from(3))
    }
}
