//! The `emip` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{ablation_table, build_model, count_params, default_grid, run_row, AblationRow};
use crate::checkpoint::Checkpoint;
use crate::config::{FrameSize, RunConfig};
use crate::dataset::{generate, read_dataset, select, to_tensors, write_dataset, ClipTensors, DatagenConfig, Split};
use crate::error::{EmipError, Result};
use crate::eval::{
    dump_flow, dump_overlays, flow_epe_by_region, predict_longterm, predict_short_term, predict_static,
    read_prediction_dir, score, write_prediction_dir, EvalReport,
};
use crate::longterm::{LongTerm, LONGTERM_GROUPS};
use crate::model::SHORT_TERM_GROUPS;
use crate::train::{flow_epe, pretrain_flow, train_longterm, train_static, train_video, warm_start_longterm, StageLog};

#[derive(Debug, Parser)]
#[command(name = "emip", version, about = "Video camouflaged object detection with explicit motion prompts")]
pub struct Cli {
    /// TOML run configuration; defaults to the desk recipe.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic camouflaged-motion dataset.
    Datagen(DatagenArgs),
    /// Pre-train the flow network on ground-truth flow.
    PretrainFlow(StageArgs),
    /// Pre-train backbone and decoder on single frames.
    PretrainStatic(StageArgs),
    /// Fine-tune the short-term model on frame pairs.
    Train(TrainArgs),
    /// Train the long-term head over a frozen short-term model.
    TrainLongterm(LongtermArgs),
    /// Score a checkpoint or a directory of predictions.
    Eval(EvalArgs),
    /// Run the ablation grid.
    Ablate(AblateArgs),
    /// Count total and trainable parameters.
    CountParams(CountArgs),
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub clips: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value = "64x64")]
    pub size: FrameSize,
    /// Camouflage strength in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train, val and test fractions.
    #[arg(long, default_value = "0.7,0.1,0.2", value_delimiter = ',', num_args = 3)]
    pub split_frac: Vec<f64>,
    /// Largest per-frame sprite displacement in pixels.
    #[arg(long)]
    pub max_step: Option<i32>,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the stage's step budget.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Writes the per-step loss CSV here.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint from `pretrain-flow`.
    #[arg(long)]
    pub flow: PathBuf,
    /// Checkpoint from `pretrain-static`.
    #[arg(long = "static")]
    pub stills: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LongtermArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Short-term checkpoint from `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory (ground truth).
    #[arg(long, alias = "gt")]
    pub data: PathBuf,
    /// Model checkpoint to run.
    #[arg(long, conflicts_with = "pred")]
    pub ckpt: Option<PathBuf>,
    /// Directory of `<clip>/<frame>.png` probability maps to score instead of a model.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Split to score.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Use the long-term head of the checkpoint.
    #[arg(long)]
    pub longterm: bool,
    /// Metric JSON output.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Writes predicted probability maps in the `--pred` layout.
    #[arg(long)]
    pub save_pred: Option<PathBuf>,
    #[arg(long)]
    pub dump_overlays: Option<PathBuf>,
    #[arg(long)]
    pub dump_flow: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long = "static")]
    pub stills: PathBuf,
    /// Comma-separated row names; all default rows when omitted.
    #[arg(long, value_delimiter = ',')]
    pub rows: Vec<String>,
    /// Runs each row with this many consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub replicates: usize,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Checkpoint whose model configuration is counted; the
    /// configured model is counted when omitted.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// `all`, `video` (flow frozen as configured) or `longterm`.
    #[arg(long, default_value = "longterm")]
    pub stage: String,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(EmipError::Config(format!("unknown split `{other}`"))),
    }
}

fn load_split(root: &Path, split: Split, require_flow: bool, cfg: &RunConfig) -> Result<(Vec<crate::dataset::ClipRecord>, Vec<ClipTensors>)> {
    let records = select(&read_dataset(root, require_flow)?, split);
    if let Some(r) = records.iter().find(|r| (r.clip.height(), r.clip.width()) != (cfg.height, cfg.width)) {
        return Err(EmipError::data(
            root.join(&r.id),
            format!("clip is {}x{}, configuration expects {}x{}", r.clip.height(), r.clip.width(), cfg.height, cfg.width),
        ));
    }
    let tensors = to_tensors(&records)?;
    Ok((records, tensors))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| EmipError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| EmipError::io(path, e))
}

fn finish_stage(log: &StageLog, loss_csv: Option<&PathBuf>, stage: &str) -> Result<()> {
    if let Some(p) = loss_csv {
        write_text(p, &log.csv())?;
    }
    if let (Some(first), Some(last)) = (log.losses.first(), log.losses.last()) {
        println!(
            "{stage}: {} steps in {:.1}s, loss {:.4} -> {:.4}",
            log.losses.len(),
            log.seconds,
            first.l_total,
            last.l_total
        );
    }
    Ok(())
}

fn same_model(cfg: &RunConfig, ck: &Checkpoint, path: &Path) -> Result<()> {
    let c = ck.config();
    if c.model != cfg.model || (c.height, c.width) != (cfg.height, cfg.width) {
        return Err(EmipError::Checkpoint(format!(
            "{} was written for a different model configuration",
            path.display()
        )));
    }
    Ok(())
}

fn groups(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::Datagen(a) => {
            let d = DatagenConfig {
                clips: a.clips,
                frames: a.frames,
                height: a.size.height,
                width: a.size.width,
                alpha: a.alpha,
                seed: a.seed,
                split_frac: [a.split_frac[0], a.split_frac[1], a.split_frac[2]],
                max_step: a.max_step.unwrap_or(DatagenConfig::default().max_step),
                ..DatagenConfig::default()
            };
            let records = generate(&d)?;
            let m = write_dataset(&records, &a.out, Some(&d))?;
            println!("datagen: {} clips written to {}", m.clips.len(), a.out.display());
        }
        Command::PretrainFlow(a) => {
            if let Some(s) = a.steps {
                cfg.flow.steps = s;
            }
            let (_, train) = load_split(&a.data, Split::Train, true, &cfg)?;
            let (_, val) = load_split(&a.data, Split::Val, true, &cfg)?;
            let model = build_model(&cfg, &cfg.ablation)?;
            let (log, opt) = pretrain_flow(&model, &train, &cfg.flow, cfg.seed)?;
            finish_stage(&log, a.loss_csv.as_ref(), "pretrain-flow")?;
            if !val.is_empty() {
                println!("pretrain-flow: validation EPE {:.4}", flow_epe(&model, &val)?);
            }
            model.store.set_frozen("flownet", true);
            Checkpoint::capture(&model.store, &groups(&["flownet"]), "flow", &cfg, Some(&opt))?.write(&a.out)?;
        }
        Command::PretrainStatic(a) => {
            if let Some(s) = a.steps {
                cfg.static_stage.steps = s;
            }
            let (_, train) = load_split(&a.data, Split::Train, false, &cfg)?;
            let (_, val) = load_split(&a.data, Split::Val, false, &cfg)?;
            let model = build_model(&cfg, &cfg.ablation)?;
            let (log, opt) = train_static(&model, &train, &cfg.static_stage, cfg.seed)?;
            finish_stage(&log, a.loss_csv.as_ref(), "pretrain-static")?;
            if !val.is_empty() {
                let preds = val.iter().map(|c| predict_static(&model, c)).collect::<Result<Vec<_>>>()?;
                println!("pretrain-static: validation IoU {:.4}", score(&preds, &val, cfg.height, cfg.width)?.mean.iou);
            }
            Checkpoint::capture(&model.store, &groups(&["backbone", "decoder"]), "static", &cfg, Some(&opt))?.write(&a.out)?;
        }
        Command::Train(a) => {
            if let Some(s) = a.steps {
                cfg.video.steps = s;
            }
            let flow = Checkpoint::read(&a.flow)?;
            let stills = Checkpoint::read(&a.stills)?;
            same_model(&cfg, &flow, &a.flow)?;
            same_model(&cfg, &stills, &a.stills)?;
            let (_, train) = load_split(&a.data, Split::Train, false, &cfg)?;
            let model = build_model(&cfg, &cfg.ablation)?;
            flow.restore(&model.store, Some(&groups(&["flownet"])))?;
            stills.restore(&model.store, Some(&groups(&["backbone", "decoder"])))?;
            let before = model.store.hash_group("flownet")?;
            let (log, opt) = train_video(&model, &train, &cfg.video, cfg.seed)?;
            finish_stage(&log, a.loss_csv.as_ref(), "train")?;
            println!("train: optimized groups {}", opt.groups().join(","));
            if cfg.ablation.freeze_flow {
                let after = model.store.hash_group("flownet")?;
                if after != before {
                    return Err(EmipError::Integrity {
                        group: "flownet".into(),
                        expected: before,
                        found: after,
                    });
                }
                println!("train: flownet hash unchanged {after}");
            }
            Checkpoint::capture(&model.store, &model.groups(), "video", &cfg, Some(&opt))?.write(&a.out)?;
        }
        Command::TrainLongterm(a) => {
            if let Some(s) = a.steps {
                cfg.longterm.steps = s;
            }
            let ck = Checkpoint::read(&a.ckpt)?;
            cfg.model = ck.config().model.clone();
            cfg.ablation = ck.config().ablation.clone();
            let (_, train) = load_split(&a.data, Split::Train, false, &cfg)?;
            let model = build_model(&cfg, &cfg.ablation)?;
            ck.restore(&model.store, Some(&model.groups()))?;
            let lt = LongTerm::new(&model.store, &cfg.model)?;
            warm_start_longterm(&model.store)?;
            let (log, opt) = train_longterm(&model, &lt, &train, &cfg.longterm, cfg.seed)?;
            finish_stage(&log, a.loss_csv.as_ref(), "train-longterm")?;
            let (total, trainable, fraction) = count_params(&model.store);
            println!("train-longterm: {trainable} of {total} parameters trained ({fraction:.4})");
            let all: Vec<String> = model.store.groups();
            Checkpoint::capture(&model.store, &all, "longterm", &cfg, Some(&opt))?.write(&a.out)?;
        }
        Command::Eval(a) => eval(&mut cfg, a)?,
        Command::Ablate(a) => {
            let flow = Checkpoint::read(&a.flow)?;
            let stills = Checkpoint::read(&a.stills)?;
            same_model(&cfg, &flow, &a.flow)?;
            same_model(&cfg, &stills, &a.stills)?;
            let (_, train) = load_split(&a.data, Split::Train, false, &cfg)?;
            let (_, test) = load_split(&a.data, Split::Test, false, &cfg)?;
            let grid: Vec<_> = default_grid()
                .into_iter()
                .filter(|(name, _)| a.rows.is_empty() || a.rows.contains(name))
                .collect();
            if let Some(unknown) = a.rows.iter().find(|r| !grid.iter().any(|(n, _)| n == *r)) {
                return Err(EmipError::Config(format!("unknown ablation row `{unknown}`")));
            }
            let mut rows: Vec<AblationRow> = Vec::new();
            for rep in 0..a.replicates.max(1) {
                let mut run_cfg = cfg.clone();
                run_cfg.seed = cfg.seed.wrapping_add(rep as u64);
                for (name, ab) in &grid {
                    let label = if a.replicates > 1 { format!("{name}#{rep}") } else { name.clone() };
                    let (row, _) = run_row(&run_cfg, &label, ab, &flow, &stills, &train, &test)?;
                    rows.push(row);
                }
            }
            print!("{}", ablation_table(&rows));
            if let Some(p) = &a.report {
                write_text(p, &serde_json::to_string_pretty(&rows).expect("rows serialize"))?;
            }
        }
        Command::CountParams(a) => {
            if let Some(p) = &a.ckpt {
                let ck = Checkpoint::read(p)?;
                cfg.model = ck.config().model.clone();
                cfg.ablation = ck.config().ablation.clone();
            }
            let model = build_model(&cfg, &cfg.ablation)?;
            LongTerm::new(&model.store, &cfg.model)?;
            let frozen: Vec<&str> = match a.stage.as_str() {
                "all" => vec![],
                "video" if cfg.ablation.freeze_flow => vec!["flownet"],
                "video" => vec![],
                "longterm" => SHORT_TERM_GROUPS.to_vec(),
                other => return Err(EmipError::Config(format!("unknown stage `{other}`"))),
            };
            if a.stage != "longterm" {
                for g in LONGTERM_GROUPS {
                    model.store.set_frozen(g, true);
                }
            }
            for g in frozen {
                model.store.set_frozen(g, true);
            }
            let (mut total, _, _) = count_params(&model.store);
            if a.stage != "longterm" {
                total -= LONGTERM_GROUPS.iter().map(|g| model.store.count_group(g)).sum::<usize>();
            }
            let trainable = model.store.count_trainable();
            for g in model.store.groups() {
                let frozen = if model.store.is_frozen(&g) { "frozen" } else { "trainable" };
                println!("{g:<20} {:>10} {frozen}", model.store.count_group(&g));
            }
            println!("total {total} trainable {trainable} fraction {:.4}", trainable as f64 / total.max(1) as f64);
        }
    }
    Ok(())
}

fn eval(cfg: &mut RunConfig, a: EvalArgs) -> Result<()> {
    let split = parse_split(&a.split)?;
    let report = if let Some(pred_dir) = &a.pred {
        let (_, clips) = load_split(&a.data, split, false, cfg)?;
        let preds = read_prediction_dir(pred_dir, &clips, cfg.height, cfg.width)?;
        EvalReport {
            model: pred_dir.display().to_string(),
            metrics: score(&preds, &clips, cfg.height, cfg.width)?,
            epe_inside: None,
            epe_outside: None,
        }
    } else {
        let path = a
            .ckpt
            .as_ref()
            .ok_or_else(|| EmipError::Config("eval needs --ckpt or --pred".into()))?;
        let ck = Checkpoint::read(path)?;
        cfg.model = ck.config().model.clone();
        cfg.ablation = ck.config().ablation.clone();
        cfg.height = ck.config().height;
        cfg.width = ck.config().width;
        let (records, clips) = load_split(&a.data, split, false, cfg)?;
        let model = build_model(cfg, &cfg.ablation)?;
        ck.restore(&model.store, Some(&model.groups()))?;
        let lt = if a.longterm {
            let lt = LongTerm::new(&model.store, &cfg.model)?;
            ck.restore(&model.store, Some(&groups(&LONGTERM_GROUPS)))?;
            Some(lt)
        } else {
            None
        };
        let preds = clips
            .iter()
            .map(|c| match &lt {
                Some(lt) => predict_longterm(&model, lt, c),
                None => predict_short_term(&model, c),
            })
            .collect::<Result<Vec<_>>>()?;
        for ((r, c), p) in records.iter().zip(&clips).zip(&preds) {
            if let Some(dir) = &a.save_pred {
                write_prediction_dir(dir, &r.id, p, cfg.height, cfg.width)?;
            }
            if let Some(dir) = &a.dump_overlays {
                dump_overlays(dir, r, p)?;
            }
            if let Some(dir) = &a.dump_flow {
                if cfg.ablation.needs_flow() {
                    dump_flow(dir, &model, c)?;
                }
            }
        }
        let (epe_inside, epe_outside) = if cfg.ablation.needs_flow() {
            let (i, o) = flow_epe_by_region(&model, &clips)?;
            (Some(i), Some(o))
        } else {
            (None, None)
        };
        EvalReport {
            model: format!("{}{}", path.display(), if a.longterm { " (long-term)" } else { "" }),
            metrics: score(&preds, &clips, cfg.height, cfg.width)?,
            epe_inside,
            epe_outside,
        }
    };
    print!("{}", report.metrics.table());
    if let (Some(i), Some(o)) = (report.epe_inside, report.epe_outside) {
        println!("flow EPE inside mask {i:.4}, outside {o:.4}");
    }
    if let Some(p) = &a.report {
        write_text(p, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(())
}
