use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use omni_core::ablation::{self, Variant, CSV_HEADER};
use omni_core::autoencoder::{finetune_ae, mean_l1, train_ae, AeTrainConfig, Autoencoder, AutoencoderConfig};
use omni_core::condition::{AudioClip, Modality};
use omni_core::config::KvConfig;
use omni_core::diffusion::{BetaSchedule, DiffusionSchedule, SigmaMode};
use omni_core::eval::evaluate_dirs;
use omni_core::infer::{GenerationRequest, Generator, UnmaskMode};
use omni_core::model::ModelConfig;
use omni_core::params::{Checkpoint, ParamStore};
use omni_core::synth::{load_corpus, synthesize_corpus, write_corpus, SyntheticSpec};
use omni_core::train::{finetune_multimodal, pretrain_t2m, Task, TrainRunConfig};
use omni_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Masked autoregressive motion generation at desk scale.
#[derive(Parser, Debug)]
#[command(name = "omni", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArg {
    /// key=value configuration file; OMNI_* variables override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic motion corpus.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Train (or with --init, fine-tune) the motion autoencoder.
    TrainAe {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Pretrain the text-to-motion model.
    TrainT2m {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Adapt a pretrained model to speech or music with the head frozen.
    Finetune {
        #[arg(long)]
        modality: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Generate one motion file.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long)]
        audio: Option<PathBuf>,
        /// Audio modality when --audio is given.
        #[arg(long, default_value = "speech")]
        modality: String,
        #[arg(long)]
        cfg: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the longest training sequence.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value = "sequential")]
        unmask: String,
        #[arg(long, default_value = "posterior")]
        sigma: String,
        #[arg(long)]
        conditional_only: bool,
        /// Use live weights instead of EMA weights.
        #[arg(long)]
        live: bool,
        #[arg(long)]
        out: PathBuf,
        /// Run record path; defaults to the output path with a .json suffix.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Compare a generated corpus against a real one.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        r#gen: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run component-ladder variants on the toy corpus.
    Ablate {
        /// One variant or `all`.
        #[arg(long, default_value = "all")]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV file to append rows to.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Print the noise schedule table.
    ScheduleDump {
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value = "cosine")]
        schedule: String,
    },
}

/// Loads the config file with defaults underneath and environment
/// overrides on top. Keys outside `defaults` are rejected.
fn load_config(arg: &ConfigArg, defaults: KvConfig) -> Result<KvConfig> {
    let known: Vec<String> = defaults.keys().map(str::to_string).collect();
    let known: Vec<&str> = known.iter().map(String::as_str).collect();
    let mut kv = KvConfig::default();
    if let Some(p) = &arg.config {
        require_file(p)?;
        let file = KvConfig::load(p)?;
        file.check_known(&known)?;
        kv.merge(&file);
    }
    kv.apply_env(&known);
    Ok(kv)
}

fn require_file(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{}: no such file", p.display()))))
    }
}

fn load_checkpoint(p: &Path) -> Result<Checkpoint> {
    require_file(p)?;
    Checkpoint::load(p)
}

fn with_defaults(defaults: &KvConfig, kv: &KvConfig) -> KvConfig {
    let mut out = defaults.clone();
    out.merge(kv);
    out
}

fn ae_defaults() -> KvConfig {
    let mut kv = AutoencoderConfig::default().to_kv().with_prefix("ae");
    kv.merge(&AeTrainConfig::default().to_kv().with_prefix("ae_train"));
    kv
}

fn model_defaults() -> KvConfig {
    let mut kv = ModelConfig::small(16).to_kv();
    kv.merge(&TrainRunConfig::default().to_kv().with_prefix("train"));
    kv
}

fn train_section(kv: &KvConfig, defaults: &KvConfig) -> Result<TrainRunConfig> {
    TrainRunConfig::from_kv(&with_defaults(defaults, kv).section("train"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { out, seed, cfg } => {
            let kv = load_config(&cfg, SyntheticSpec::default().to_kv())?;
            let mut spec = SyntheticSpec::from_kv(&kv)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let items = synthesize_corpus(&spec)?;
            let files = write_corpus(&out, &items)?;
            println!("wrote {} sequences to {}", files.len(), out.display());
        }
        Command::TrainAe { data, out, init, metrics, cfg } => {
            let defaults = ae_defaults();
            let user = load_config(&cfg, defaults.clone())?;
            let kv = with_defaults(&defaults, &user);
            require_file(&data)?;
            let corpus: Vec<_> = load_corpus(&data)?.into_iter().map(|it| it.motion).collect();
            let train = AeTrainConfig::from_kv(&kv.section("ae_train"))?;
            let (ae, store, report) = match init {
                Some(p) => {
                    let (ae, mut store) = Autoencoder::from_checkpoint(&load_checkpoint(&p)?)?;
                    let r = finetune_ae(&ae, &mut store, &corpus, &train, false)?;
                    (ae, store, r)
                }
                None => {
                    let mut ae_cfg = AutoencoderConfig::from_kv(&kv.section("ae"))?;
                    if user.get("ae.input_dim").is_none() {
                        ae_cfg.input_dim = corpus.first().map_or(ae_cfg.input_dim, |m| m.dim());
                    }
                    let mut store = ParamStore::new();
                    let ae = Autoencoder::new(&mut store, ae_cfg, &mut ChaCha8Rng::seed_from_u64(train.seed))?;
                    let r = train_ae(&ae, &mut store, &corpus, &train)?;
                    (ae, store, r)
                }
            };
            let l1 = mean_l1(&ae, &store, &corpus)?;
            let ck = ae.checkpoint(&store);
            ck.save(&out)?;
            if let Some(m) = metrics {
                let mut s = String::from("step,loss,lr\n");
                for (i, (l, lr)) in report.losses.iter().zip(&report.lrs).enumerate() {
                    s.push_str(&format!("{},{l:.9e},{lr:.9e}\n", i + 1));
                }
                write_text(&m, &s)?;
            }
            println!("autoencoder l1={l1:.6e} hash={}", ck.hash());
        }
        Command::TrainT2m { data, ae, out, metrics, cfg } => {
            let defaults = model_defaults();
            let kv = with_defaults(&defaults, &load_config(&cfg, defaults.clone())?);
            let ae_ck = load_checkpoint(&ae)?;
            let (ae_model, ae_store) = Autoencoder::from_checkpoint(&ae_ck)?;
            let mut mkv = kv.clone();
            mkv.set("model.latent", ae_model.cfg.latent);
            let mc = ModelConfig::from_kv(&mkv)?;
            let run = train_section(&kv, &defaults)?;
            require_file(&data)?;
            let corpus = load_corpus(&data)?;
            let (tm, report) = pretrain_t2m(&mc, &run, &ae_model, &ae_store, &ae_ck.hash(), &corpus)?;
            tm.checkpoint().save(&out)?;
            if let Some(m) = metrics {
                report.write_metrics(&m)?;
            }
            println!(
                "t2m loss_initial={:.6e} loss_final={:.6e} steps={}",
                report.eval_initial,
                report.eval_final,
                report.losses.len()
            );
        }
        Command::Finetune { modality, data, ae, model, out, metrics, cfg } => {
            let task = Task::parse(&modality)?;
            if !task.modality().is_audio() {
                return Err(Error::Config(format!("--modality must be speech or music, got {modality}")));
            }
            let mut defaults = model_defaults();
            defaults.merge(&TrainRunConfig { task, ..Default::default() }.to_kv().with_prefix("train"));
            let kv = with_defaults(&defaults, &load_config(&cfg, defaults.clone())?);
            let mut run = TrainRunConfig::from_kv(&kv.section("train"))?;
            run.task = task;
            let ae_ck = load_checkpoint(&ae)?;
            let (ae_model, ae_store) = Autoencoder::from_checkpoint(&ae_ck)?;
            let pre = load_checkpoint(&model)?;
            require_file(&data)?;
            let corpus = load_corpus(&data)?;
            let (tm, report) = finetune_multimodal(&run, &pre, &ae_model, &ae_store, &ae_ck.hash(), &corpus)?;
            tm.checkpoint().save(&out)?;
            if let Some(m) = metrics {
                report.write_metrics(&m)?;
            }
            println!(
                "{} loss_initial={:.6e} loss_final={:.6e} steps={}",
                task.as_str(),
                report.eval_initial,
                report.eval_final,
                report.losses.len()
            );
        }
        Command::Generate {
            model,
            ae,
            prompt,
            audio,
            modality,
            cfg,
            seed,
            frames,
            iterations,
            unmask,
            sigma,
            conditional_only,
            live,
            out,
            record,
        } => {
            let gen = Generator::load(&load_checkpoint(&model)?, &load_checkpoint(&ae)?, !live)?;
            let (audio, modality) = match audio {
                Some(p) => {
                    require_file(&p)?;
                    let m = Modality::parse(&modality)?;
                    if !m.is_audio() {
                        return Err(Error::Config("--audio needs an audio modality".into()));
                    }
                    (Some(AudioClip::load(&p)?), m)
                }
                None => (None, Modality::Text),
            };
            let req = GenerationRequest {
                prompt,
                audio,
                modality,
                frames: frames.unwrap_or(gen.default_frames),
                cfg_scale: cfg,
                seed,
                iterations,
                unmask: UnmaskMode::parse(&unmask)?,
                sigma: SigmaMode::parse(&sigma)?,
                conditional_only,
            };
            let o = gen.generate(&req)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            o.motion.save(&out)?;
            let record = record.unwrap_or_else(|| out.with_extension("json"));
            o.record.save(&record)?;
            println!("wrote {} frames to {}", o.motion.len(), out.display());
        }
        Command::Eval { real, r#gen, seed } => {
            require_file(&real)?;
            require_file(&r#gen)?;
            let r = evaluate_dirs(&real, &r#gen, seed)?;
            println!("fid={:.9e} diversity={:.9e}", r.fid, r.diversity);
        }
        Command::Ablate { variant, seed, out, cfg } => {
            let variants = if variant == "all" { Variant::ALL.to_vec() } else { vec![Variant::parse(&variant)?] };
            let kv = load_config(&cfg, ablation::toy_defaults())?;
            let setup = ablation::toy_setup(&kv, seed)?;
            let mut file = match &out {
                Some(p) => {
                    let fresh = !p.exists() || std::fs::metadata(p)?.len() == 0;
                    let mut f = OpenOptions::new().create(true).append(true).open(p)?;
                    if fresh {
                        writeln!(f, "{CSV_HEADER}")?;
                    }
                    Some(f)
                }
                None => None,
            };
            println!("{CSV_HEADER}");
            for v in variants {
                let row = ablation::run_variant(&setup, v)?.to_csv();
                println!("{row}");
                if let Some(f) = file.as_mut() {
                    writeln!(f, "{row}")?;
                }
            }
        }
        Command::ScheduleDump { steps, schedule } => {
            print!("{}", DiffusionSchedule::new(BetaSchedule::parse(&schedule)?, steps)?.dump());
        }
    }
    Ok(())
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => "missing-file",
        _ => e.kind(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_kind(&e));
            ExitCode::from(1)
        }
    }
}
