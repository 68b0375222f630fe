use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use stgan_core::checkpoint;
use stgan_core::data::synth::generate;
use stgan_core::data::{load_manifest, Splits, MANIFEST_FILE};
use stgan_core::eval::ablation::{ablation_run, Variant};
use stgan_core::eval::{evaluate, EvalReport, GeneratorEditor, Judge};
use stgan_core::train::{checkpoint_path, Trainer};
use stgan_core::{verify, Error, Result};

use crate::config::{resolve, RunConfig};
use crate::manifest::RunManifest;
use crate::model::{encode_png, EditModel, EditSpec, RequestError};
use crate::service;

pub const JUDGE_FILE: &str = "judge.ckpt";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const ABLATION_REPORT: &str = "ablation.json";

#[derive(Debug, Parser)]
#[command(name = "stgan", version, about = "Selective transfer attribute editing: data, training, evaluation and serving")]
pub struct Cli {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root for all outputs; relative paths given to subcommands resolve here.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Single worker everywhere, so reruns reproduce outputs bitwise.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset into the data directory.
    SynthData,
    /// Train a model on the data directory.
    Train {
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the iteration budget.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Score a checkpoint: attribute generation accuracy, PSNR and SSIM.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Judge classifier; trained and cached under --out when absent.
        #[arg(long)]
        judge: Option<PathBuf>,
    },
    /// Train and evaluate several variants under one budget.
    Ablate {
        #[arg(long, default_value = "standard,dst,conv,conv_res,gru_output,res,none,raw1,raw2,raw_all")]
        variants: String,
        #[arg(long)]
        judge: Option<PathBuf>,
    },
    /// Edit one image.
    Edit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Comma-separated change per attribute, each in [-1, 1].
        #[arg(long, allow_hyphen_values = true, conflicts_with_all = ["source", "target"])]
        diff: Option<String>,
        /// Comma-separated binary source labels.
        #[arg(long, requires = "target")]
        source: Option<String>,
        /// Comma-separated binary target labels.
        #[arg(long, requires = "source")]
        target: Option<String>,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        intensity: f32,
    },
    /// Serve a checkpoint over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Address to bind; overrides the configuration.
        #[arg(long)]
        bind: Option<String>,
    },
    /// Finite-difference verification of every differentiable building block.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Edit { .. } => "edit",
            Command::Serve { .. } => "serve",
            Command::GradCheck { .. } => "grad-check",
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    manifest: RunManifest,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.out, p)
    }

    fn data(&self) -> Result<Splits> {
        let dir = self.cfg.data_dir(&self.out);
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Error::Config(format!(
                "no dataset at {}; run synth-data first or set data_dir",
                dir.display()
            )));
        }
        load_manifest(&dir, self.cfg.train.model.image_size)
    }

    /// Loads `explicit`, else the cached judge under --out, else trains one.
    fn judge(&mut self, explicit: Option<&Path>, splits: &Splits) -> Result<Judge> {
        let cached = self.out.join(JUDGE_FILE);
        let path = explicit.map(|p| self.path(p)).unwrap_or(cached.clone());
        let judge = if path.exists() {
            let j = Judge::load(&path)?;
            if j.meta.attribute_names != splits.test.attribute_names || j.meta.image_size != splits.test.image_size {
                return Err(Error::Config(format!("judge at {} was trained on different data", path.display())));
            }
            j
        } else if explicit.is_some() {
            return Err(Error::Config(format!("no judge at {}", path.display())));
        } else {
            log::info!("training judge classifier");
            let j = Judge::train(&splits.train, &splits.test, &self.cfg.judge)?;
            let id = j.save(&path)?;
            self.manifest.output(&path, Some(id));
            j
        };
        log::info!("judge accuracy {:.2}%", 100.0 * judge.meta.accuracy);
        Ok(judge)
    }
}

fn parse_vector(field: &str, s: &str) -> Result<Vec<f32>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f32>()
                .map_err(|_| Error::Config(format!("{field}: {x:?} is not a number")))
        })
        .collect()
}

fn request_error(e: RequestError) -> Error {
    match e {
        RequestError::Invalid { field, message } => Error::Config(format!("{field}: {message}")),
        RequestError::TooLarge(m) => Error::Config(m),
        RequestError::Model(e) => e,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    checkpoint::write_atomic(path, &bytes)
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_seed(cli.seed);
    let manifest = RunManifest::start(cli.command.name(), cli.config.as_deref(), cfg.to_toml(), cli.seed, &cli.out, cli.deterministic);
    let mut ctx = Ctx {
        cfg,
        out: cli.out.clone(),
        manifest,
    };
    match cli.command {
        Command::SynthData => synth_data(ctx),
        Command::Train { resume, iterations } => train(ctx, resume, iterations),
        Command::Eval { checkpoint, judge } => {
            let report = eval(&mut ctx, &checkpoint, judge.as_deref())?;
            print!("{}", report.table());
            ctx.manifest.finish(&ctx.out.join("eval"))?;
            Ok(())
        }
        Command::Ablate { variants, judge } => ablate(ctx, &variants, judge.as_deref()),
        Command::Edit {
            checkpoint,
            input,
            output,
            diff,
            source,
            target,
            intensity,
        } => {
            let spec = match (diff, source, target) {
                (Some(d), None, None) => EditSpec::Diff(parse_vector("diff", &d)?),
                (None, Some(s), Some(t)) => EditSpec::Pair {
                    source: parse_vector("source", &s)?,
                    target: parse_vector("target", &t)?,
                },
                _ => return Err(Error::Config("supply --diff or both --source and --target".into())),
            };
            edit(ctx, &checkpoint, &input, &output, &spec, intensity)
        }
        Command::Serve { checkpoint, bind } => serve(ctx, &checkpoint, bind, cli.deterministic),
        Command::GradCheck { cases } => grad_check(ctx, cases),
    }
}

fn synth_data(mut ctx: Ctx) -> Result<()> {
    let dir = ctx.cfg.data_dir(&ctx.out);
    let set = generate(&ctx.cfg.synth)?;
    set.write(&dir)?;
    ctx.manifest.output(&dir.join(MANIFEST_FILE), None);
    println!(
        "wrote {} train and {} test images at {}px to {}",
        set.splits.train.len(),
        set.splits.test.len(),
        set.spec.image_size,
        dir.display()
    );
    ctx.manifest.finish(&dir)?;
    Ok(())
}

fn train(mut ctx: Ctx, resume: Option<PathBuf>, iterations: Option<u64>) -> Result<()> {
    let splits = ctx.data()?;
    let dir = ctx.out.join("train");
    let mut trainer = match resume {
        Some(p) => {
            let p = ctx.path(&p);
            let c = checkpoint::read(&p)?;
            ctx.manifest.input(&p, Some(c.id.clone()));
            checkpoint::trainer_from(&c)?
        }
        None => Trainer::new(ctx.cfg.train.clone())?,
    };
    if iterations.is_some() {
        trainer.config.iterations = iterations;
    }
    let total = trainer.config.total_iterations(splits.train.len());
    let every = (total / 20).max(1);
    trainer.run(&splits.train, Some(&dir), |r| {
        if (r.iteration + 1) % every == 0 || r.iteration + 1 == total {
            log::info!(
                "iteration {}/{} epoch {} d {:.4} g {:.4} rec {:.4}",
                r.iteration + 1,
                total,
                r.epoch,
                r.d.total,
                r.g.total,
                r.g.rec
            );
        }
    })?;
    let final_path = checkpoint_path(&dir, None);
    let id = checkpoint::read(&final_path)?.id;
    ctx.manifest.output(&final_path, Some(id.clone()));
    ctx.manifest.output(&dir.join(stgan_core::train::METRICS_FILE), None);
    println!("trained {} iterations; checkpoint {} ({id})", trainer.iteration, final_path.display());
    ctx.manifest.finish(&dir)?;
    Ok(())
}

fn eval(ctx: &mut Ctx, ckpt: &Path, judge: Option<&Path>) -> Result<EvalReport> {
    let splits = ctx.data()?;
    let judge = ctx.judge(judge, &splits)?;
    let path = ctx.path(ckpt);
    let c = checkpoint::read(&path)?;
    ctx.manifest.input(&path, Some(c.id.clone()));
    let trainer = checkpoint::trainer_from(&c)?;
    let report = evaluate("checkpoint", &GeneratorEditor(&trainer.gen), &judge, &splits.test, ctx.cfg.judge.floor, Some(c.id))?;
    let out = ctx.out.join("eval").join(EVAL_REPORT);
    std::fs::create_dir_all(out.parent().unwrap()).map_err(|e| Error::io(&out, e))?;
    write_json(&out, &report)?;
    ctx.manifest.output(&out, None);
    Ok(report)
}

fn ablate(mut ctx: Ctx, variants: &str, judge: Option<&Path>) -> Result<()> {
    let variants = Variant::parse_list(variants)?;
    if variants.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    let splits = ctx.data()?;
    let judge = ctx.judge(judge, &splits)?;
    let dir = ctx.out.join("ablate");
    let table = ablation_run(&ctx.cfg.train, &variants, &splits, &judge, ctx.cfg.judge.floor, Some(&dir));
    for row in &table.rows {
        let ckpt = checkpoint_path(&dir.join(row.variant.name()), None);
        if ckpt.exists() {
            let id = row.report.as_ref().and_then(|r| r.checkpoint_id.clone());
            ctx.manifest.output(&ckpt, id);
        }
    }
    let report = dir.join(ABLATION_REPORT);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&report, &table)?;
    ctx.manifest.output(&report, None);
    print!("{}", table.to_text());
    ctx.manifest.finish(&dir)?;
    if let Some(failed) = table.rows.iter().find(|r| r.report.is_none()) {
        return Err(Error::Evaluation(format!(
            "variant {} failed: {}",
            failed.variant.name(),
            failed.error.as_deref().unwrap_or("unknown")
        )));
    }
    Ok(())
}

fn edit(mut ctx: Ctx, ckpt: &Path, input: &Path, output: &Path, spec: &EditSpec, intensity: f32) -> Result<()> {
    let ckpt = ctx.path(ckpt);
    let model = EditModel::load(&ckpt)?;
    ctx.manifest.input(&ckpt, Some(model.checkpoint_id.clone()));
    let input = ctx.path(input);
    let img = image::open(&input)
        .map_err(|e| Error::Image(format!("{}: {e}", input.display())))?
        .to_rgb8();
    let s = model.image_size();
    let img = if img.dimensions() == (s as u32, s as u32) {
        img
    } else {
        log::warn!("resizing {}x{} input to {s}x{s}", img.width(), img.height());
        stgan_core::data::manifest::crop_and_resize(&img, s)
    };
    let out = model.edit(&img, spec, intensity).map_err(request_error)?;
    let output = ctx.path(output);
    if let Some(parent) = output.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    checkpoint::write_atomic(&output, &encode_png(&out.image)?)?;
    ctx.manifest.output(&output, None);
    for (name, p) in model.attribute_names.iter().zip(&out.probabilities) {
        println!("{name:<20} {p:.3}");
    }
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let manifest_dir = output.parent().unwrap_or(Path::new(".")).join(format!("{stem}.run"));
    ctx.manifest.finish(&manifest_dir)?;
    Ok(())
}

fn serve(ctx: Ctx, ckpt: &Path, bind: Option<String>, deterministic: bool) -> Result<()> {
    let ckpt = ctx.path(ckpt);
    let model = Arc::new(EditModel::load(&ckpt)?);
    let mut cfg = ctx.cfg.serve.clone();
    if let Some(b) = bind {
        cfg.bind = b;
    }
    let rt = if deterministic {
        tokio::runtime::Builder::new_current_thread().enable_all().build()
    } else {
        tokio::runtime::Builder::new_multi_thread().enable_all().build()
    }
    .map_err(|e| Error::io(&ckpt, e))?;
    let id = model.checkpoint_id.clone();
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    rt.block_on(service::serve(model, &cfg, |addr| eprintln!("serving checkpoint {id} on http://{addr}"), shutdown))
        .map_err(|e| Error::io(PathBuf::from(&cfg.bind), e))
}

fn grad_check(ctx: Ctx, cases: usize) -> Result<()> {
    let seed = ctx.cfg.train.seed;
    let report = verify::run(cases, seed)?;
    print!("{}", report.to_text());
    let dir = ctx.out.join("grad_check");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join("report.json"), &report)?;
    let mut manifest = ctx.manifest;
    manifest.output(&dir.join("report.json"), None);
    manifest.finish(&dir)?;
    if !report.passed() {
        return Err(Error::Evaluation("gradient verification failed".into()));
    }
    Ok(())
}
