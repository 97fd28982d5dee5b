//! Command-line front end.
//!
//! A data directory holds `semantic.txt`, `train.bin`, `val.bin` and
//! `test.bin`. Every command that writes files puts them under `--out` and
//! records its resolved settings in `manifest.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use dvsa::alignment::class_prototypes;
use dvsa::data_io::{
    generate_synthetic, load_features, save_features, synthesize_candidates, NoiseProtocol, NoiseSpec,
    PartialDataset, SyntheticSpec,
};
use dvsa::diff_core::Tensor;
use dvsa::inference_metrics::{best_by_h, default_gamma_grid, format_table, GzslReport, METRICS_CSV_HEADER};
use dvsa::semantic_space::SemanticSpace;
use dvsa::trainer::{
    eval_split, grad_check_joint, history_csv, Checkpoint, MicroDims, TrainConfig, Trainer, ABLATION_ROWS,
};
use dvsa::{Error, Result};

pub const SEMANTIC_FILE: &str = "semantic.txt";
pub const TRAIN_FILE: &str = "train.bin";
pub const VAL_FILE: &str = "val.bin";
pub const TEST_FILE: &str = "test.bin";

#[derive(Parser, Debug)]
#[command(name = "dvsa", version, about = "Zero-shot learning with ambiguous labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with ambiguous training labels.
    GenData(GenDataArgs),
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Evaluate a checkpoint over a grid of calibration factors.
    SweepGamma(SweepArgs),
    /// Train the seven component combinations of the ablation table.
    Ablate(AblateArgs),
    /// Finite-difference check of the joint loss on a random micro-batch.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-label inclusion probability of false candidates.
    #[arg(long, conflicts_with = "noise_r")]
    pub noise_q: Option<f64>,
    /// Exact number of false candidates per instance.
    #[arg(long)]
    pub noise_r: Option<usize>,
    /// Seed of the candidate noise; defaults to `--seed`.
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub attributes: usize,
    #[arg(long, default_value_t = 64)]
    pub visual_dim: usize,
    #[arg(long, default_value_t = 9)]
    pub regions: usize,
    #[arg(long, default_value_t = 16)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 30)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 10)]
    pub val_per_class: usize,
    #[arg(long, default_value_t = 20)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0.25)]
    pub margin: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise_std: f64,
    #[arg(long)]
    pub num_unseen: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    /// Continue from `<out>/checkpoint.bin`.
    #[arg(long)]
    pub resume: bool,
    /// Stop once this many epochs have been completed.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Write the final soft labels to `<out>/softlabels.csv`.
    #[arg(long)]
    pub dump_soft_labels: bool,
    /// Write VTA and ATV attention maps of the first N training instances to `<out>/attn/`.
    #[arg(long, value_name = "N")]
    pub dump_attention: Option<usize>,
    /// Pick `γ` by best validation H instead of the configured value.
    #[arg(long)]
    pub calibrate: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the checkpoint's `γ`.
    #[arg(long, conflicts_with = "calibrate")]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub calibrate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated `γ` values; defaults to 0, 0.1, ..., 1.0.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitName,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub calibrate: bool,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::SweepGamma(a) => sweep_gamma(&a),
        Command::Ablate(a) => ablate(&a),
        Command::GradCheck(a) => grad_check(&a),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn manifest(command: &str, entries: &[(&str, String)], body: &str) -> String {
    let mut out = format!("# dvsa {command}\n");
    for (k, v) in entries {
        let _ = writeln!(out, "# {k} = {v}");
    }
    out.push_str(body);
    out
}

struct DataDir {
    semantic: SemanticSpace,
    val: PartialDataset,
    test: PartialDataset,
}

fn load_eval_data(dir: &Path) -> Result<DataDir> {
    Ok(DataDir {
        semantic: SemanticSpace::load(&dir.join(SEMANTIC_FILE))?,
        val: load_features(&dir.join(VAL_FILE))?,
        test: load_features(&dir.join(TEST_FILE))?,
    })
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        classes: a.classes,
        attributes: a.attributes,
        visual_dim: a.visual_dim,
        regions: a.regions,
        embed_dim: a.embed_dim,
        n_per_class: a.n_per_class,
        val_per_class: a.val_per_class,
        test_per_class: a.test_per_class,
        margin: a.margin,
        noise_std: a.noise_std,
        num_unseen: a.num_unseen,
        seed: a.seed,
    };
    let mut d = generate_synthetic(&spec)?;
    let noise_seed = a.noise_seed.unwrap_or(a.seed);
    let protocol = match (a.noise_q, a.noise_r) {
        (Some(q), _) => Some(NoiseProtocol::QBernoulli(q)),
        (None, Some(r)) => Some(NoiseProtocol::RCount(r)),
        (None, None) => None,
    };
    if let Some(protocol) = protocol {
        let noise = NoiseSpec {
            protocol,
            seed: noise_seed,
        };
        d.train.candidates = synthesize_candidates(&d.train.true_labels, a.classes, &d.split.seen, &noise)?;
    }
    create_out(&a.out)?;
    d.semantic.save(&a.out.join(SEMANTIC_FILE))?;
    save_features(&d.train, &a.out.join(TRAIN_FILE))?;
    save_features(&d.val, &a.out.join(VAL_FILE))?;
    save_features(&d.test, &a.out.join(TEST_FILE))?;
    let noise = match protocol {
        Some(NoiseProtocol::QBernoulli(q)) => format!("q {q}"),
        Some(NoiseProtocol::RCount(r)) => format!("r {r}"),
        None => "none".into(),
    };
    let body = format!(
        "{spec:#?}\nnoise = {noise}\nnoise_seed = {noise_seed}\nmean_candidates = {}\n",
        d.train.mean_candidates()
    );
    write(&a.out.join("manifest.txt"), &manifest("gen-data", &[], &body))?;
    println!(
        "wrote {} train / {} val / {} test instances to {} (mean |L| = {:.3})",
        d.train.len(),
        d.val.len(),
        d.test.len(),
        a.out.display(),
        d.train.mean_candidates()
    );
    Ok(())
}

/// `γ` from `fixed`, or the best validation-H grid point when `calibrate`.
fn choose_gamma(
    calibrate: bool,
    fixed: f64,
    ckpt: &Checkpoint,
    semantic: &SemanticSpace,
    val: &PartialDataset,
) -> Result<f64> {
    if !calibrate {
        return Ok(fixed);
    }
    let split = ckpt.split(semantic.num_classes())?;
    let protos = class_prototypes(&semantic.class_attributes, &ckpt.state.align)?;
    let reports = eval_split(val, &split)?.sweep(&protos, &default_gamma_grid(), ckpt.config.inference_score)?;
    let best = best_by_h(&reports).expect("non-empty grid");
    log::info!("calibrated gamma {} (validation H {:.2})", best.gamma, best.h);
    Ok(best.gamma)
}

fn test_report(ckpt: &Checkpoint, data: &DataDir, calibrate: bool, gamma: Option<f64>) -> Result<GzslReport> {
    let g = choose_gamma(calibrate, gamma.unwrap_or(ckpt.config.gamma), ckpt, &data.semantic, &data.val)?;
    dvsa::trainer::evaluate(ckpt, &data.semantic, &data.test, g)
}

fn metrics_csv(report: &GzslReport, seed: u64) -> String {
    format!("{METRICS_CSV_HEADER}\n{}\n", report.csv_row(seed))
}

fn matrix_csv(t: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

fn soft_labels_csv(t: &Trainer) -> String {
    let l = &t.state.labels.l_tilde;
    let mut out = String::from("instance,true_label,argmax");
    for c in &t.split.seen {
        let _ = write!(out, ",c{c}");
    }
    out.push('\n');
    for (i, pred) in t.state.labels.argmax().into_iter().enumerate() {
        let _ = write!(out, "{i},{},{pred}", t.data.true_labels[i]);
        for v in l.row(i) {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

fn dump_attention(t: &Trainer, count: usize, dir: &Path) -> Result<()> {
    create_out(dir)?;
    for i in 0..count.min(t.data.len()) {
        let (vta, atv) = t.attention_maps(i)?;
        write(&dir.join(format!("vta_{i}.csv")), &matrix_csv(&vta))?;
        write(&dir.join(format!("atv_{i}.csv")), &matrix_csv(&atv))?;
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let ckpt_path = a.out.join("checkpoint.bin");
    enum Start {
        Resume(Box<Checkpoint>),
        Fresh(TrainConfig),
    }
    let start = if a.resume {
        Start::Resume(Box::new(Checkpoint::load(&ckpt_path)?))
    } else {
        let mut cfg = match &a.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Start::Fresh(cfg)
    };
    let semantic = SemanticSpace::load(&a.data.join(SEMANTIC_FILE))?;
    let train_set = load_features(&a.data.join(TRAIN_FILE))?;
    create_out(&a.out)?;
    let mut trainer = match start {
        Start::Resume(ckpt) => Trainer::resume(*ckpt, &semantic, &train_set)?,
        Start::Fresh(cfg) => Trainer::new(&cfg, &semantic, &train_set)?,
    };
    let entries = [("data", a.data.display().to_string())];
    write(
        &a.out.join("manifest.txt"),
        &manifest("train", &entries, &trainer.cfg.to_text()),
    )?;

    let target = a.stop_after.map_or(trainer.cfg.epochs, |s| s.min(trainer.cfg.epochs));
    while (trainer.state.epoch() as usize) < target {
        let m = trainer.train_epoch()?;
        log::info!(
            "epoch {:>3}  loss {:>10.4}  vis {:>9.4}  sem {:>9.4}  ami {:>8.4}  disamb {:.3}",
            m.epoch,
            m.loss,
            m.l_vis,
            m.l_sem,
            m.l_ami,
            m.disamb_acc
        );
        trainer.checkpoint().save(&ckpt_path)?;
        write(&a.out.join("history.csv"), &history_csv(&trainer.state.history))?;
    }
    if trainer.state.history.is_empty() {
        write(&a.out.join("history.csv"), &history_csv(&[]))?;
        trainer.checkpoint().save(&ckpt_path)?;
    }
    if a.dump_soft_labels {
        write(&a.out.join("softlabels.csv"), &soft_labels_csv(&trainer))?;
    }
    if let Some(n) = a.dump_attention {
        dump_attention(&trainer, n, &a.out.join("attn"))?;
    }
    let done = trainer.state.epoch() as usize;
    println!(
        "trained {done}/{} epochs, disambiguation accuracy {:.4}",
        trainer.cfg.epochs,
        trainer.disambiguation_accuracy()
    );
    if done < trainer.cfg.epochs {
        return Ok(());
    }
    let data = DataDir {
        semantic: semantic.clone(),
        val: load_features(&a.data.join(VAL_FILE))?,
        test: load_features(&a.data.join(TEST_FILE))?,
    };
    let ckpt = trainer.checkpoint();
    let report = test_report(&ckpt, &data, a.calibrate, None)?;
    write(&a.out.join("metrics.csv"), &metrics_csv(&report, ckpt.config.seed))?;
    print!("{}", format_table(std::slice::from_ref(&report)));
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_eval_data(&a.data)?;
    let report = test_report(&ckpt, &data, a.calibrate, a.gamma)?;
    create_out(&a.out)?;
    let entries = [
        ("checkpoint", a.checkpoint.display().to_string()),
        ("data", a.data.display().to_string()),
        ("gamma", report.gamma.to_string()),
        ("calibrate", a.calibrate.to_string()),
    ];
    write(
        &a.out.join("manifest.txt"),
        &manifest("eval", &entries, &ckpt.config.to_text()),
    )?;
    write(&a.out.join("metrics.csv"), &metrics_csv(&report, ckpt.config.seed))?;
    print!("{}", format_table(std::slice::from_ref(&report)));
    Ok(())
}

fn sweep_gamma(a: &SweepArgs) -> Result<()> {
    let grid = a.grid.clone().unwrap_or_else(default_gamma_grid);
    if grid.is_empty() || grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::Config("--grid needs at least one finite value".into()));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_eval_data(&a.data)?;
    let set = match a.split {
        SplitName::Val => &data.val,
        SplitName::Test => &data.test,
    };
    let split = ckpt.split(data.semantic.num_classes())?;
    let protos = class_prototypes(&data.semantic.class_attributes, &ckpt.state.align)?;
    let reports = eval_split(set, &split)?.sweep(&protos, &grid, ckpt.config.inference_score)?;
    let best = best_by_h(&reports).expect("non-empty grid");

    create_out(&a.out)?;
    let grid_text: Vec<String> = grid.iter().map(|g| g.to_string()).collect();
    let entries = [
        ("checkpoint", a.checkpoint.display().to_string()),
        ("data", a.data.display().to_string()),
        ("split", format!("{:?}", a.split).to_lowercase()),
        ("grid", grid_text.join(",")),
    ];
    write(
        &a.out.join("manifest.txt"),
        &manifest("sweep-gamma", &entries, &ckpt.config.to_text()),
    )?;
    let mut csv = String::from("gamma,T1,U,S,H,seen_predictions\n");
    for r in &reports {
        let _ = writeln!(csv, "{},{},{},{},{},{}", r.gamma, r.t1, r.u, r.s, r.h, r.seen_predictions);
    }
    write(&a.out.join("sweep.csv"), &csv)?;
    print!("{}", format_table(&reports));
    println!("best gamma {} (H {:.2})", best.gamma, best.h);
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let mut base = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        base.seed = s;
    }
    let semantic = SemanticSpace::load(&a.data.join(SEMANTIC_FILE))?;
    let train_set = load_features(&a.data.join(TRAIN_FILE))?;
    let data = DataDir {
        semantic: semantic.clone(),
        val: load_features(&a.data.join(VAL_FILE))?,
        test: load_features(&a.data.join(TEST_FILE))?,
    };
    create_out(&a.out)?;
    let entries = [
        ("data", a.data.display().to_string()),
        ("calibrate", a.calibrate.to_string()),
    ];
    write(
        &a.out.join("manifest.txt"),
        &manifest("ablate", &entries, &base.to_text()),
    )?;

    let mut csv = String::from("row,name,vta,label_update,sem_loss,omega,mi,T1,U,S,H,gamma\n");
    println!(
        "{:<3} {:<20} {:>7} {:>7} {:>7} {:>7} {:>6}",
        "row", "name", "T1", "U", "S", "H", "gamma"
    );
    for (i, (name, comps)) in ABLATION_ROWS.iter().enumerate() {
        let cfg = base.clone().with_components(*comps);
        let mut t = Trainer::new(&cfg, &semantic, &train_set)?;
        t.run(|_, _| Ok(()))?;
        let report = test_report(&t.checkpoint(), &data, a.calibrate, None)?;
        let flags: Vec<String> = comps.iter().map(|&b| u8::from(b).to_string()).collect();
        let _ = writeln!(
            csv,
            "{},{name},{},{},{},{},{},{}",
            i + 1,
            flags.join(","),
            report.t1,
            report.u,
            report.s,
            report.h,
            report.gamma
        );
        println!(
            "{:<3} {:<20} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>6.2}",
            i + 1,
            name,
            report.t1,
            report.u,
            report.s,
            report.h,
            report.gamma
        );
    }
    write(&a.out.join("ablation.csv"), &csv)
}

fn grad_check(a: &GradCheckArgs) -> Result<()> {
    let report = grad_check_joint(MicroDims::default(), &TrainConfig::default(), a.seed, a.eps, a.tol)?;
    for (name, err) in &report.per_param {
        println!("{name:<18} max rel error {err:.3e}");
    }
    println!("{} entries checked, max rel error {:.3e}", report.checked, report.max_rel_error);
    if report.passed() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "{} entries above {} in {}",
            report.offenders.len(),
            a.tol,
            report.offending_params().join(", ")
        )))
    }
}
