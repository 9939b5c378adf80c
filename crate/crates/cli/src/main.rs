//! `infocom`: train models, run exchange cycles, sweep and ablate, and work
//! with the wire format. Tabular results go to stdout as CSV unless `--out`
//! names a file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use infocom::codec::{decode_message, encode_message, entropy_bound, format_bytes, reported_volume};
use infocom::detect::{ap_summary, AP_IOU_THRESHOLDS};
use infocom::harness::{
    ablate, fixture, init_model, load_models, save_models, sweep, to_csv, train, volume_table, SweepParam,
    TrainConfig,
};
use infocom::model::{Ablation, CollabMode, Model};
use infocom::sim::{backbone_tensor, build_message, run_cycle, LinkModel, RATE_0_4_MBPS};
use infocom::smg::retained_count;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "infocom", version, about = "Information-purified collaborative perception toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per mode and report AP per mode and IoU threshold.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write the trained weights here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Emit the per-epoch loss curve instead of the scores.
        #[arg(long)]
        curve: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run exchange cycles over the evaluation scenes through a link model.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Weights from `train --checkpoint`; trained on the spot when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Link rate in bytes per second.
        #[arg(long, default_value_t = RATE_0_4_MBPS)]
        rate: f64,
        /// Deadline in seconds.
        #[arg(long, default_value_t = 1.0)]
        deadline: f64,
        /// Per-link drop probability.
        #[arg(long, default_value_t = 0.0)]
        loss: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Retrain InfoCom across values of one hyperparameter.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// alpha, b, or beta.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train the six ablation variants on identical seeds and scenes.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Per-link communication volume at the benchmark feature sizes.
    Volume {
        #[command(flatten)]
        out: OutArg,
    },
    /// Serialize one agent's message for a fixture scene.
    Encode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Index into the evaluation scenes.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, default_value_t = 0)]
        agent: usize,
        /// Frame destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse a frame and print its fields.
    Decode {
        /// Frame to read.
        input: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Entropy ceiling and reported size of a sparse quantized mask.
    Bound {
        #[arg(long, short = 'H', default_value_t = 200)]
        height: usize,
        #[arg(long, short = 'W', default_value_t = 704)]
        width: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, short = 'b', default_value_t = 4)]
        bits: u8,
        /// Latent size for the reported volume.
        #[arg(long, short = 'd', default_value_t = 256)]
        latent_dim: usize,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Args)]
struct OutArg {
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A `key = value` file plus flag overrides.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` file applied before any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, short = 'b')]
    bits: Option<u8>,
    #[arg(long, short = 'd')]
    latent_dim: Option<usize>,
    #[arg(long, short = 'c')]
    channels: Option<usize>,
    #[arg(long, short = 'H')]
    height: Option<usize>,
    #[arg(long, short = 'W')]
    width: Option<usize>,
    #[arg(long, short = 'n')]
    agents: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    /// Comma-separated: none, late, standard, infocom.
    #[arg(long)]
    modes: Option<String>,
    /// One of the ablation variants (full, simple_encoder, ...).
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    eval_scenes: Option<usize>,
    #[arg(long)]
    freeze_backbone: bool,
    /// Let the message path train the sender's backbone too.
    #[arg(long)]
    sender_backprop: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            for (k, v) in infocom::harness::parse_key_values(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        let flags: [(&str, Option<String>); 15] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("beta", self.beta.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("bits", self.bits.map(|v| v.to_string())),
            ("latent_dim", self.latent_dim.map(|v| v.to_string())),
            ("channels", self.channels.map(|v| v.to_string())),
            ("height", self.height.map(|v| v.to_string())),
            ("width", self.width.map(|v| v.to_string())),
            ("agents", self.agents.map(|v| v.to_string())),
            ("stages", self.stages.map(|v| v.to_string())),
            ("modes", self.modes.clone()),
            ("train_scenes", self.train_scenes.map(|v| v.to_string())),
            ("eval_scenes", self.eval_scenes.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if let Some(v) = &self.variant {
            cfg.ablation = Ablation::variant(v)?;
        }
        if self.freeze_backbone {
            cfg.freeze_backbone = true;
        }
        if self.sender_backprop {
            cfg.sender_backprop = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit(out: &OutArg, text: &str) -> Result<()> {
    match &out.out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

fn models_for(cfg: &TrainConfig, checkpoint: Option<&Path>) -> Result<Vec<Model>> {
    match checkpoint {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(load_models(&bytes, cfg)?)
        }
        None => Ok(train(cfg)?.models),
    }
}

fn pick(models: &[Model], mode: CollabMode) -> Result<&Model> {
    models
        .iter()
        .find(|m| m.mode == mode.trained_as())
        .with_context(|| format!("no {} model available for mode {mode}", mode.trained_as()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, checkpoint, curve, out } => {
            let cfg = cfg.resolve()?;
            let result = train(&cfg)?;
            if let Some(path) = checkpoint {
                fs::write(&path, save_models(&result.models)?).with_context(|| format!("writing {}", path.display()))?;
            }
            let r = &result.record;
            let text = if curve {
                let rows: Vec<Vec<String>> = r
                    .losses
                    .iter()
                    .map(|l| vec![l.mode.to_string(), l.epoch.to_string(), l.detect.to_string(), l.kl.to_string(), l.total.to_string()])
                    .collect();
                csv(&["mode", "epoch", "detect", "kl", "total"], &rows)
            } else {
                let mut rows = Vec::new();
                for sc in &r.scores {
                    for (thr, ap) in AP_IOU_THRESHOLDS.iter().zip(sc.ap) {
                        rows.push(vec![
                            sc.mode.to_string(),
                            thr.to_string(),
                            format!("{ap:.6}"),
                            format!("{:.6}", sc.mean_ap),
                            cfg.eval_scenes.to_string(),
                            cfg.seed.to_string(),
                        ]);
                    }
                }
                csv(&["mode", "iou_thr", "ap", "mean_ap", "scenes", "seed"], &rows)
            };
            eprintln!("trained in {:.1} s", r.wall_clock_seconds);
            emit(&out, &text)
        }
        Command::Simulate { cfg, checkpoint, rate, deadline, loss, out } => {
            let cfg = cfg.resolve()?;
            let models = models_for(&cfg, checkpoint.as_deref())?;
            let link = LinkModel::constant(rate, deadline, loss)?;
            let (_, scenes) = fixture(&cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut rows = Vec::new();
            for &mode in &cfg.modes {
                let model = pick(&models, mode)?;
                for (i, s) in scenes.iter().enumerate() {
                    let c = run_cycle(mode, &s.scene, model, &link, i as u32, &mut rng)?;
                    let gts = vec![s.labels.clone(); c.detections.len()];
                    let (_, mean_ap) = ap_summary(&c.detections, &gts)?;
                    rows.push(vec![
                        mode.to_string(),
                        i.to_string(),
                        format!("{mean_ap:.6}"),
                        c.reported_bytes.to_string(),
                        c.wire_bytes.to_string(),
                        format!("{:.6}", c.transmit_seconds),
                        format!("{:.6}", c.compute_seconds),
                        c.completed_within_deadline.to_string(),
                        c.dropped_links.to_string(),
                    ]);
                }
            }
            let header = [
                "mode",
                "scene",
                "mean_ap",
                "reported_bytes",
                "wire_bytes",
                "transmit_s",
                "compute_s",
                "within_deadline",
                "dropped_links",
            ];
            emit(&out, &csv(&header, &rows))
        }
        Command::Sweep { cfg, param, values, out } => {
            let rows = sweep(param, &values, &cfg.resolve()?)?;
            emit(&out, &to_csv(&rows))
        }
        Command::Ablate { cfg, out } => emit(&out, &to_csv(&ablate(&cfg.resolve()?)?)),
        Command::Volume { out } => emit(&out, &to_csv(&volume_table()?)),
        Command::Encode { cfg, checkpoint, scene, agent, out } => {
            let cfg = cfg.resolve()?;
            let model = match checkpoint {
                Some(_) => pick(&models_for(&cfg, checkpoint.as_deref())?, CollabMode::InfoCom)?.clone(),
                None => init_model(&cfg, CollabMode::InfoCom)?,
            };
            let (_, scenes) = fixture(&cfg)?;
            let Some(s) = scenes.get(scene) else {
                bail!("scene {scene} outside the {} evaluation scenes", scenes.len());
            };
            let Some(obs) = s.observations.get(agent) else {
                bail!("agent {agent} outside the {} agents", s.observations.len());
            };
            let z = backbone_tensor(&model, obs)?;
            let unit = build_message(&model, &z, agent as u32, scene as u32)?;
            let bytes = encode_message(&unit)?;
            fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("{} bytes to {}", bytes.len(), out.display());
            Ok(())
        }
        Command::Decode { input, out } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let u = decode_message(&bytes)?;
            let m = &u.mask;
            let fields = [
                ("agent_id", u.agent_id.to_string()),
                ("frame_id", u.frame_id.to_string()),
                ("channels", u.channels.to_string()),
                ("latent_dim", u.latent.len().to_string()),
                ("height", m.height.to_string()),
                ("width", m.width.to_string()),
                ("bits", m.bits.get().to_string()),
                ("k", m.k().to_string()),
                ("wire_bytes", bytes.len().to_string()),
                ("latent", join(&u.latent)),
                ("indices", join(&m.indices)),
                ("codes", join(&m.codes)),
            ];
            let rows: Vec<Vec<String>> = fields.into_iter().map(|(k, v)| vec![k.to_owned(), v]).collect();
            emit(&out, &csv(&["field", "value"], &rows))
        }
        Command::Bound { height, width, alpha, bits, latent_dim, out } => {
            let k = retained_count(alpha, height * width);
            let bound = entropy_bound(height, width, k, bits)?;
            let reported = reported_volume(latent_dim, height, width, alpha, bits)?;
            let row = vec![
                height.to_string(),
                width.to_string(),
                alpha.to_string(),
                bits.to_string(),
                k.to_string(),
                format!("{bound:.6}"),
                format!("{:.6}", bound / 8.0),
                reported.to_string(),
                format_bytes(reported),
            ];
            let header = ["h", "w", "alpha", "b", "k", "mask_bound_bits", "mask_bound_bytes", "reported_bytes", "volume"];
            emit(&out, &csv(&header, &[row]))
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
