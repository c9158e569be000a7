use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gmmlab_core::attention::{AttentionWeights, GmmParams, MaskParams};
use gmmlab_core::data::Sample;
use gmmlab_core::fitting::{extroversion_score, fit_multistart, FitOptions};
use gmmlab_core::gradcheck::{self, CheckOptions, GroupError, DEFAULT_TOLERANCE};
use gmmlab_core::io::{
    normalize_to_gray, read_mask_csv, write_atomic, write_kernels_csv, write_mask_csv, write_pgm, write_trace_csv,
    PgmMode,
};
use gmmlab_core::mask::{init_kernels, unfold_mask, weight_matrix, GaussianKernel, KernelInit};
use gmmlab_core::model::{
    evaluate, load_checkpoint, load_dataset, metrics_to_jsonl, save_checkpoint, train_from, DatasetKind, EpochMetrics,
    MaskMode, ModelConfig, RunConfig, TinyViT, TrainState,
};
use gmmlab_core::numerics::{Matrix, Rng};
use gmmlab_core::Error;

use crate::{DatasetArg, MaskArg, PgmModeArg, RunArgs, SweepArgs, TrainArgs};

pub const DATA_DIR_ENV: &str = "GMMLAB_DATA_DIR";
const CIFAR_SUBDIR: &str = "cifar-10-batches-bin";
const GRADCHECK_MAX: usize = 16;

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Index(_) => Failure::usage(e.to_string()),
            _ => Failure::data(e.to_string()),
        }
    }
}

/// Errors that come from reading input files count as data errors even when
/// the library reports them as bad arguments.
fn as_data(e: Error) -> Failure {
    Failure::data(e.to_string())
}

type CmdResult = Result<(), Failure>;

/// Parses `"alpha:sigma,alpha:sigma"`. Blank input means no kernels.
pub fn parse_kernels(text: &str) -> Result<Vec<GaussianKernel>, Failure> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|pair| {
            let (a, s) = pair
                .split_once(':')
                .ok_or_else(|| Failure::usage(format!("kernel {pair:?} is not alpha:sigma")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Failure::usage(format!("bad number {v:?} in kernel {pair:?}")))
            };
            Ok(GaussianKernel::new(num(a)?, num(s)?))
        })
        .collect()
}

pub fn mask_gen(
    grid: usize,
    kernels: Option<&str>,
    random: Option<usize>,
    seed: u64,
    eps: f64,
    out: &Path,
    as_weight_matrix: bool,
) -> CmdResult {
    if grid == 0 {
        return Err(Failure::usage("--grid must be positive"));
    }
    if !(eps > 0.0) {
        return Err(Failure::usage("--eps must be > 0"));
    }
    let ks = match (kernels, random) {
        (Some(text), _) => parse_kernels(text)?,
        (None, Some(k)) => init_kernels(&mut Rng::new(seed), k, KernelInit::default()),
        (None, None) => return Err(Failure::usage("give --kernels or --random")),
    };
    let m = if as_weight_matrix {
        weight_matrix(&ks, grid, eps)?
    } else {
        unfold_mask(&ks, grid, eps)?
    };
    write_mask_csv(out, &m)?;
    println!(
        "wrote {}x{} {} from {} kernel(s) to {}",
        m.rows(),
        m.cols(),
        if as_weight_matrix { "weight matrix" } else { "mask" },
        ks.len(),
        out.display()
    );
    Ok(())
}

pub fn render(input: &Path, out: &Path, mode: PgmModeArg) -> CmdResult {
    let m = read_mask_csv(input).map_err(as_data)?;
    let img = normalize_to_gray(&m).map_err(as_data)?;
    let mode = match mode {
        PgmModeArg::P2 => PgmMode::P2,
        PgmModeArg::P5 => PgmMode::P5,
    };
    write_pgm(out, &img, mode)?;
    println!("wrote {}x{} image to {}", img.width, img.height, out.display());
    Ok(())
}

pub struct GradcheckArgs {
    pub seed: u64,
    pub grid: usize,
    pub dim: usize,
    pub heads: usize,
    pub kernels: usize,
    pub mask: MaskArg,
    pub full_model: bool,
    pub corrupt: f64,
}

fn mask_mode(m: MaskArg) -> MaskMode {
    match m {
        MaskArg::Gmm => MaskMode::Gmm,
        MaskArg::Elm => MaskMode::Elm,
        MaskArg::None => MaskMode::None,
    }
}

/// Kernels with moderate widths so that central differences stay accurate.
fn check_kernels(rng: &mut Rng, k: usize) -> Vec<GaussianKernel> {
    (0..k)
        .map(|_| GaussianKernel::new(rng.uniform_range(-2.0, 2.0), rng.uniform_range(0.5, 3.0)))
        .collect()
}

pub fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let n = a.grid * a.grid;
    if a.grid == 0 || n > GRADCHECK_MAX {
        return Err(Failure::usage(format!(
            "gradcheck needs 1 <= N <= {GRADCHECK_MAX} patches, got grid {} (N = {n})",
            a.grid
        )));
    }
    if a.dim == 0 || a.dim > GRADCHECK_MAX {
        return Err(Failure::usage(format!("gradcheck needs 1 <= dim <= {GRADCHECK_MAX}")));
    }
    if a.heads == 0 || a.dim % a.heads != 0 {
        return Err(Failure::usage(format!("dim {} is not divisible by {} heads", a.dim, a.heads)));
    }
    if !a.corrupt.is_finite() {
        return Err(Failure::usage("--corrupt-grad must be finite"));
    }
    let opts = CheckOptions {
        seed: a.seed,
        corrupt: a.corrupt,
        ..CheckOptions::default()
    };
    let mut rng = Rng::new(a.seed);
    let groups = if a.full_model {
        let cfg = ModelConfig {
            image_side: 2 * a.grid,
            channels: 1,
            patch: 2,
            dim: a.dim,
            depth: 2,
            heads: a.heads,
            mlp_ratio: 4,
            classes: 3,
            mask: mask_mode(a.mask),
            kernels: a.kernels,
            ..ModelConfig::default()
        };
        let mut model = TinyViT::new(&cfg, &mut rng)?;
        if let Some(MaskParams::Gmm(g)) = model.blocks.first().map(|b| &b.attn.mask) {
            let slots = g.slots;
            for b in &mut model.blocks {
                let ks: Vec<Vec<GaussianKernel>> = (0..slots).map(|_| check_kernels(&mut rng, a.kernels)).collect();
                b.attn.mask = MaskParams::Gmm(GmmParams::from_kernels(a.grid, cfg.epsilon, &ks)?);
            }
        }
        gradcheck::jitter(model.tensors_mut(), 0.05, &mut rng);
        let side = cfg.image_side;
        let batch: Vec<Sample> = (0..3)
            .map(|i| Sample {
                channels: 1,
                side,
                image: (0..side * side).map(|_| rng.uniform()).collect(),
                label: i % cfg.classes,
            })
            .collect();
        gradcheck::check_model_grads(&model, &batch, &opts)?
    } else {
        let mask = match a.mask {
            MaskArg::None => MaskParams::None,
            MaskArg::Elm => MaskParams::Elm(Matrix::from_fn(n, n, |_, _| rng.uniform_range(0.5, 1.5))),
            MaskArg::Gmm => {
                let ks: Vec<Vec<GaussianKernel>> = (0..a.heads).map(|_| check_kernels(&mut rng, a.kernels)).collect();
                MaskParams::Gmm(GmmParams::from_kernels(a.grid, gmmlab_core::mask::DEFAULT_EPSILON, &ks)?)
            }
        };
        let mut w = AttentionWeights::random(a.dim, a.heads, 1.0 / (a.dim as f64).sqrt(), mask, &mut rng)?;
        gradcheck::jitter(w.tensors_mut(), 0.05, &mut rng);
        let x = Matrix::from_fn(n, a.dim, |_, _| rng.normal(0.0, 1.0));
        let r = Matrix::from_fn(n, a.dim, |_, _| rng.normal(0.0, 1.0));
        gradcheck::check_attention_grads(&w, &x, &r, &opts)?
    };
    report_groups(&groups)
}

fn report_groups(groups: &[GroupError]) -> CmdResult {
    for g in groups {
        println!("{:<28} {:>5} checked  max rel error {:.3e}", g.name, g.checked, g.max_rel_error);
    }
    let worst = gradcheck::max_error(groups);
    if worst <= DEFAULT_TOLERANCE {
        println!("PASS max rel error {worst:.3e} <= {DEFAULT_TOLERANCE:e}");
        Ok(())
    } else {
        println!("FAIL max rel error {worst:.3e} > {DEFAULT_TOLERANCE:e}");
        Err(Failure {
            code: 3,
            message: format!("gradient check failed: max relative error {worst:.3e}"),
        })
    }
}

pub struct FitArgs {
    pub target: PathBuf,
    pub kernels: usize,
    pub steps: usize,
    pub lr: f64,
    pub restarts: usize,
    pub seed: u64,
    pub eps: f64,
    pub out: PathBuf,
    pub trace: Option<PathBuf>,
}

pub fn fit(a: &FitArgs) -> CmdResult {
    if a.kernels == 0 {
        return Err(Failure::usage("--kernels must be at least 1"));
    }
    if !(a.lr > 0.0) || !(a.eps > 0.0) {
        return Err(Failure::usage("--lr and --eps must be > 0"));
    }
    let target = read_mask_csv(&a.target).map_err(as_data)?;
    if !target.is_square() || gmmlab_core::mask::grid_side_for(target.rows()).is_err() {
        return Err(Failure::data(format!(
            "target {:?} is not a square mask over a square patch grid",
            target.shape()
        )));
    }
    let opts = FitOptions {
        steps: a.steps,
        lr: a.lr,
        restarts: a.restarts,
        seed: a.seed,
        epsilon: a.eps,
        ..FitOptions::default()
    };
    let res = fit_multistart(&target, a.kernels, &opts)?;
    write_kernels_csv(&a.out, &res.kernels)?;
    if let Some(t) = &a.trace {
        write_trace_csv(t, &res.losses)?;
    }
    let fitted = unfold_mask(&res.kernels, gmmlab_core::mask::grid_side_for(target.rows())?, a.eps)?;
    println!("rmse {:.6e}", res.rmse);
    println!("extroversion target {:.6}", extroversion_score(&target)?);
    println!("extroversion fitted {:.6}", extroversion_score(&fitted)?);
    for k in &res.kernels {
        println!("kernel alpha {:.6} sigma {:.6}", k.alpha, k.sigma);
    }
    Ok(())
}

/// Resolves the run configuration: defaults, then the config file, then
/// flags, then `--set` overrides.
fn resolve_config(run: &RunArgs, mask: Option<MaskArg>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &run.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::data(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(d) = run.dataset {
        cfg.dataset = match d {
            DatasetArg::Synth => DatasetKind::Synth,
            DatasetArg::Cifar10 => DatasetKind::Cifar10,
        };
        // CIFAR-10 is RGB with ten classes; keep the model consistent unless
        // the user also overrides these through --set.
        if cfg.dataset == DatasetKind::Cifar10 {
            cfg.model.channels = 3;
            cfg.model.classes = 10;
            cfg.model.image_side = 32;
        }
    }
    if let Some(m) = mask {
        cfg.model.mask = mask_mode(m);
    }
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(d) = &run.data_dir {
        cfg.data_dir = d.display().to_string();
    }
    for kv in &run.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set {kv:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// CIFAR-10 directory: the configured root or `$GMMLAB_DATA_DIR`, descending
/// into `cifar-10-batches-bin` when present.
fn cifar_dir(cfg: &RunConfig) -> Result<Option<PathBuf>, Failure> {
    if cfg.dataset != DatasetKind::Cifar10 {
        return Ok(None);
    }
    let root = if !cfg.data_dir.is_empty() {
        PathBuf::from(&cfg.data_dir)
    } else if let Some(env) = std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()) {
        PathBuf::from(env)
    } else {
        return Err(Failure::data(format!(
            "no CIFAR-10 location: pass --data-dir or set {DATA_DIR_ENV}"
        )));
    };
    let nested = root.join(CIFAR_SUBDIR);
    Ok(Some(if nested.is_dir() { nested } else { root }))
}

fn load_data(cfg: &RunConfig) -> Result<gmmlab_core::model::Dataset, Failure> {
    let dir = cifar_dir(cfg)?;
    load_dataset(cfg, dir.as_deref()).map_err(|e| match e {
        Error::InvalidArgument(_) => Failure::usage(e.to_string()),
        e => Failure::data(e.to_string()),
    })
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn print_epoch(m: &EpochMetrics) {
    println!(
        "epoch {:>3}  lr {:.3e}  train_loss {:.4}  train_acc {:.4}  test_acc {:.4}",
        m.epoch, m.lr, m.train_loss, m.train_acc, m.test_acc
    );
}

/// Metrics lines of an earlier run, kept up to `epochs`.
fn previous_metrics(path: &Path, epochs: usize) -> Result<Vec<EpochMetrics>, Failure> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Failure::data(format!("cannot read {}: {e}", path.display()))),
    };
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let m: EpochMetrics = serde_json::from_str(line)
            .map_err(|e| Failure::data(format!("{}: bad metrics line: {e}", path.display())))?;
        if m.epoch <= epochs {
            out.push(m);
        }
    }
    Ok(out)
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let (cfg, mut state) = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let mut cfg = ck.config.clone();
            if let Some(d) = &a.run.data_dir {
                cfg.data_dir = d.display().to_string();
            }
            let state = TrainState::from_checkpoint(&ck).map_err(as_data)?;
            (cfg, state)
        }
        None => {
            let cfg = resolve_config(&a.run, a.mask)?;
            let state = TrainState::init(&cfg)?;
            (cfg, state)
        }
    };
    let data = load_data(&cfg)?;
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| Failure::data(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let metrics_path = a.out_dir.join("metrics.jsonl");
    let ckpt_path = a.out_dir.join("checkpoint.bin");

    let params = serde_json::json!({
        "total_params": state.model.param_count(),
        "mask_params": state.model.mask_param_count(),
        "mask": cfg.model.mask.as_str(),
        "kernels": cfg.model.kernels,
        "share_heads": cfg.model.share_heads,
        "depth": cfg.model.depth,
        "heads": cfg.model.heads,
        "patches": cfg.model.patches(),
    });
    write_text(&a.out_dir.join("params.json"), &(params.to_string() + "\n"))?;
    write_text(&a.out_dir.join("config.txt"), &cfg.to_text())?;
    println!(
        "{} params ({} mask), mask {}, {} train / {} test samples",
        state.model.param_count(),
        state.model.mask_param_count(),
        cfg.model.mask.as_str(),
        data.train.len(),
        data.test.len()
    );

    let mut history = if a.resume.is_some() {
        previous_metrics(&metrics_path, state.epoch)?
    } else {
        Vec::new()
    };
    write_text(&metrics_path, &metrics_to_jsonl(&history))?;
    save_checkpoint(&state.to_checkpoint(&cfg), &ckpt_path)?;
    train_from(&cfg, &data, &mut state, |m, st| {
        print_epoch(m);
        history.push(*m);
        write_atomic(&metrics_path, metrics_to_jsonl(&history).as_bytes())?;
        save_checkpoint(&st.to_checkpoint(&cfg), &ckpt_path)
    })?;
    Ok(())
}

/// Sorted, de-duplicated kernel counts.
pub fn parse_k_list(text: &str) -> Result<Vec<usize>, Failure> {
    let mut ks = text
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Failure::usage(format!("bad kernel count {s:?} in --k-list")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if ks.is_empty() {
        return Err(Failure::usage("--k-list is empty"));
    }
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

pub fn sweep_kernels(a: &SweepArgs) -> CmdResult {
    let ks = parse_k_list(&a.k_list)?;
    if a.seeds == 0 {
        return Err(Failure::usage("--seeds must be at least 1"));
    }
    let base = resolve_config(&a.run, Some(MaskArg::Gmm))?;
    let data = load_data(&base)?;
    let mut csv = String::from("mask,k,seed,final_test_acc\n");
    println!("mask,k,seed,final_test_acc");
    for &k in &ks {
        for s in 0..a.seeds {
            let seed = base.seed.wrapping_add(s);
            let modes: &[MaskMode] = if k == 0 {
                &[MaskMode::None, MaskMode::Gmm]
            } else {
                &[MaskMode::Gmm]
            };
            for &mode in modes {
                let mut cfg = base.clone();
                cfg.model.mask = mode;
                cfg.model.kernels = k;
                cfg.seed = seed;
                let mut state = TrainState::init(&cfg)?;
                let history = train_from(&cfg, &data, &mut state, |_, _| Ok(()))?;
                let acc = match history.last() {
                    Some(m) => m.test_acc,
                    None => evaluate(&state.model, &data.test, cfg.batch_size)?,
                };
                let row = format!("{},{k},{seed},{acc}", mode.as_str());
                println!("{row}");
                let _ = writeln!(csv, "{row}");
            }
        }
    }
    write_text(&a.out, &csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_list_parsing() {
        let ks = parse_kernels(" 1:2, -0.5:3.5 ").unwrap();
        assert_eq!(ks, vec![GaussianKernel::new(1.0, 2.0), GaussianKernel::new(-0.5, 3.5)]);
        assert!(parse_kernels("").unwrap().is_empty());
        for bad in ["1", "1:x", "1:2,", "nan:1", ":"] {
            assert_eq!(parse_kernels(bad).unwrap_err().code, 1, "{bad}");
        }
    }

    #[test]
    fn k_list_sorted_and_deduplicated() {
        assert_eq!(parse_k_list("3,1,3,0").unwrap(), vec![0, 1, 3]);
        assert!(parse_k_list("1,a").is_err());
        assert!(parse_k_list(" , ").is_err());
    }

    #[test]
    fn error_codes() {
        assert_eq!(Failure::from(Error::InvalidArgument("x".into())).code, 1);
        assert_eq!(Failure::from(Error::Format("x".into())).code, 2);
        assert_eq!(Failure::from(Error::Checkpoint("x".into())).code, 2);
    }
}
