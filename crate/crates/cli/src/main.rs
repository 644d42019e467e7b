use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ot_adapt::baseline::Baseline;
use ot_adapt::evaluate::{metric_audit, write_audit_csv};
use ot_adapt::experiment::{par_map, run_seed, summarize, ExperimentConfig, SeedData, SeedOutcome};
use ot_adapt::model::ModelParams;
use ot_adapt::ot_core::{self, CostMatrix, Marginal, SinkhornConfig};
use ot_adapt::synth::{read_datasets, write_datasets, Dataset, Domain, Split};
use ot_adapt::trainer::{adapt, dataset_eer, embed, RunReport};

#[derive(Parser)]
#[command(name = "ot-adapt", version, about = "Transport-based domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several. Overrides the config's seed list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory. Overrides the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the transport alignment term with a baseline loss.
    #[arg(long, value_parser = parse_baseline)]
    baseline: Option<Baseline>,
    /// Validate the config and exit without computing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic datasets and trial lists.
    Generate(Common),
    /// Train source models and write checkpoints.
    Pretrain(Common),
    /// Adapt a checkpoint to the target domain.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Pretrain, adapt and evaluate every seed and grid cell.
    Run(Common),
    /// Pseudo-label accuracy table for a checkpoint on a labeled target set.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV; the target adaptation split is audited. Generated from
        /// the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Entropic weight for the ROT/PROT rows; repeat for several.
        #[arg(long = "lambda")]
        lambdas: Vec<f64>,
    },
    /// Solve a transport problem between uniform marginals for a cost file.
    OtSolve {
        /// Whitespace-delimited cost matrix, one row per line.
        #[arg(long)]
        cost: PathBuf,
        /// Entropic weight; 0 asks for the exact unregularized plan.
        #[arg(long, default_value_t = ot_core::DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, default_value_t = ot_core::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = ot_core::DEFAULT_MAX_ITER)]
        max_iter: usize,
    },
}

fn parse_baseline(s: &str) -> std::result::Result<Baseline, String> {
    s.parse().map_err(|e: ot_adapt::Error| e.to_string())
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if !common.seeds.is_empty() {
        cfg.seeds = common.seeds.clone();
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(b) = common.baseline {
        cfg.adapt.baseline = b;
        for cell in &mut cfg.sweep {
            cell.baseline = b;
        }
    }
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().context("no output directory: pass --out or set out_dir")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let echo = serde_json::to_string_pretty(&portable(cfg))?;
    write_file(&dir.join("config.json"), echo.as_bytes())?;
    Ok(dir)
}

/// The config without its output location, so echoes do not depend on where they land.
fn portable(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        out_dir: None,
        ..cfg.clone()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<io::BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(io::BufWriter::new(f))
}

fn seed_dir(root: &Path, seed: u64) -> Result<PathBuf> {
    let dir = root.join(format!("seed-{seed}"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    let mut w = create(&dir.join("report.csv"))?;
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    params.save(path).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let params = ModelParams::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    params.validate().context("checkpoint failed validation")?;
    Ok(params)
}

fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    let root = out_dir(cfg)?;
    for &seed in &cfg.seeds {
        let data = SeedData::new(cfg, seed)?;
        let dir = seed_dir(&root, seed)?;
        let mut w = create(&dir.join("data.csv"))?;
        write_datasets(&data.domains.all(), &mut w)?;
        w.flush()?;
        let mut w = create(&dir.join("source_trials.csv"))?;
        data.source_trials.write_csv(&mut w)?;
        w.flush()?;
        let mut w = create(&dir.join("target_trials.csv"))?;
        data.target_trials.write_csv(&mut w)?;
        w.flush()?;
        println!("seed {seed}: wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let root = out_dir(cfg)?;
    let results = par_map(&cfg.seeds, |&seed| {
        let data = SeedData::new(cfg, seed)?;
        let params = ot_adapt::experiment::pretrain_seed(cfg, &data)?;
        let eer = dataset_eer(&params, &data.domains.source_test, &data.source_trials)?;
        Ok((seed, params, eer))
    })?;
    for (seed, params, eer) in results {
        let dir = seed_dir(&root, seed)?;
        save_checkpoint(&params, &dir.join("pretrained.json"))?;
        println!("seed {seed}: source EER {eer:.4}");
    }
    Ok(())
}

fn cmd_adapt(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let root = out_dir(cfg)?;
    let results = par_map(&cfg.seeds, |&seed| {
        let data = SeedData::new(cfg, seed)?;
        let eval = data.eval_sets();
        let d = &data.domains;
        adapt(&cfg.adapt, params.clone(), &d.source_train, &d.target_adapt, seed, Some(&eval))
            .map(|(p, r)| (seed, p, r))
    })?;
    for (seed, adapted, report) in results {
        let dir = seed_dir(&root, seed)?;
        write_report(&dir, &report)?;
        save_checkpoint(&adapted, &dir.join("adapted.json"))?;
        let first = report.epochs.first().context("empty report")?;
        let last = report.last().context("empty report")?;
        println!(
            "seed {seed}: target EER {:.4} -> {:.4}, source EER {:.4} -> {:.4}",
            first.target_eer, last.target_eer, first.source_eer, last.source_eer
        );
    }
    Ok(())
}

fn cell_name(cfg: &ExperimentConfig, i: usize) -> String {
    let c = cfg.cells()[i];
    format!("cell-{i}-eta{}-beta{}-{}", c.eta, c.beta, c.baseline)
}

fn write_seed(cfg: &ExperimentConfig, root: &Path, o: &SeedOutcome) -> Result<()> {
    let dir = seed_dir(root, o.seed)?;
    save_checkpoint(&o.pretrained, &dir.join("pretrained.json"))?;
    let mut w = create(&dir.join("audit_target_epoch0.csv"))?;
    write_audit_csv(&o.target_audit, &mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("audit_source_epoch0.csv"))?;
    write_audit_csv(&o.source_audit, &mut w)?;
    w.flush()?;
    for (i, run) in o.runs.iter().enumerate() {
        let cdir = dir.join(cell_name(cfg, i));
        fs::create_dir_all(&cdir).with_context(|| format!("creating {}", cdir.display()))?;
        write_report(&cdir, &run.report)?;
        save_checkpoint(&run.params, &cdir.join("adapted.json"))?;
    }
    Ok(())
}

fn cmd_run(cfg: &ExperimentConfig) -> Result<()> {
    let root = out_dir(cfg)?;
    let outcomes = par_map(&cfg.seeds, |&seed| run_seed(cfg, seed))?;
    for o in &outcomes {
        write_seed(cfg, &root, o)?;
    }
    let summary = summarize(&portable(cfg), &outcomes);
    write_file(&root.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    for c in &summary.cells {
        println!(
            "eta {} beta {} {}: target EER {:.4} -> {:.4} (±{:.4}), source EER {:.4} -> {:.4}",
            c.cell.eta,
            c.cell.beta,
            c.cell.baseline,
            c.target_eer_before.mean,
            c.target_eer_after.mean,
            c.target_eer_after.std,
            c.source_eer_before.mean,
            c.source_eer_after.mean
        );
    }
    Ok(())
}

fn audit_set(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(path) => {
            let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            read_datasets(io::BufReader::new(file))?
                .into_iter()
                .find(|d| d.domain == Domain::Target && d.split == Split::Adapt)
                .with_context(|| format!("{} has no target adapt split", path.display()))
        }
        None => Ok(SeedData::new(cfg, cfg.seeds[0])?.domains.target_adapt),
    }
}

fn cmd_audit(cfg: &ExperimentConfig, checkpoint: &Path, data: Option<&Path>, lambdas: &[f64]) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let set = audit_set(cfg, data)?;
    let lambdas = if lambdas.is_empty() { cfg.audit_lambdas.clone() } else { lambdas.to_vec() };
    if lambdas.iter().any(|&l| !(l > 0.0)) {
        bail!("--lambda must be positive");
    }
    let fw = embed(&params, &set).context("checkpoint does not fit the audit set")?;
    let rows = metric_audit(&fw, &set.labels, &params.prototype_set(), &lambdas, cfg.adapt.batch_size, cfg.seeds[0])
        .context("audit failed")?;
    match &cfg.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let mut w = create(&dir.join("audit.csv"))?;
            write_audit_csv(&rows, &mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write_audit_csv(&rows, &mut lock)?;
        }
    }
    Ok(())
}

fn read_matrix(path: &Path) -> Result<CostMatrix> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().with_context(|| format!("line {}: bad number {t:?}", lineno + 1)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    CostMatrix::from_rows(&refs).with_context(|| format!("invalid cost matrix in {}", path.display()))
}

fn cmd_ot_solve(cost: &Path, lambda: f64, tol: f64, max_iter: usize) -> Result<()> {
    let c = read_matrix(cost)?;
    let (n, m) = c.dim();
    let plan = if lambda == 0.0 {
        ot_core::exact_uniform_plan(&c)?
    } else {
        let cfg = SinkhornConfig { lambda, tol, max_iter };
        cfg.solve(&c, &Marginal::uniform(n)?, &Marginal::uniform(m)?)?
    };
    let value = ot_core::transport_cost(&plan, &c)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(
        out,
        "# cost {value:.17e} iterations {} violation {:.3e} solver {:?}",
        plan.iterations_used, plan.marginal_violation, plan.solver
    )?;
    for row in plan.coupling.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::OtSolve {
            cost,
            lambda,
            tol,
            max_iter,
        } => cmd_ot_solve(&cost, lambda, tol, max_iter),
        Command::Generate(common) => with_config(&common, cmd_generate),
        Command::Pretrain(common) => with_config(&common, cmd_pretrain),
        Command::Run(common) => with_config(&common, cmd_run),
        Command::Adapt { common, checkpoint } => with_config(&common, |cfg| cmd_adapt(cfg, &checkpoint)),
        Command::Audit {
            common,
            checkpoint,
            data,
            lambdas,
        } => with_config(&common, |cfg| cmd_audit(cfg, &checkpoint, data.as_deref(), &lambdas)),
    }
}

fn with_config(common: &Common, f: impl FnOnce(&ExperimentConfig) -> Result<()>) -> Result<()> {
    let cfg = load_config(common)?;
    if common.dry_run {
        println!("config ok: {} seed(s), {} cell(s)", cfg.seeds.len(), cfg.cells().len());
        return Ok(());
    }
    f(&cfg)
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
