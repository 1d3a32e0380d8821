use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use queen_core::attacks::{evaluate_piracy, run_attack, AttackKind};
use queen_core::certification::plan;
use queen_core::data::{generate_dataset, Dataset};
use queen_core::mapper::Separation;
use queen_core::pipeline::{
    ablation_sweep, quartile_experiment, run_experiment, train_components, Defender,
    ExperimentConfig, PersistedState, Quartile, SweepParam,
};

#[derive(Parser)]
#[command(
    name = "queen",
    version,
    about = "Query-sensitivity defense against model extraction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Master seed (QUEEN_SEED still takes precedence).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        Ok(cfg.apply_env()?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    T,
    R,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test/aux splits.
    GenData {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train protectee, mapper and shadows; write a fresh serving state.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Print class profiles and registry status of a state file.
    Analyze {
        #[arg(long)]
        state: PathBuf,
        /// Training split (from gen-data) to report 2D class separation.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Answer queries (one comma- or space-separated vector per line).
    Serve {
        #[arg(long)]
        state: PathBuf,
        /// Query file; stdin when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Write the updated state here after serving.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Run one extraction attack and export its query log.
    Attack {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, default_value = "direct")]
        kind: AttackKind,
        /// Attack the bare protectee instead of the defended oracle.
        #[arg(long)]
        undefended: bool,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Full experiment: train, attack, write report.json and report.txt.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Planner table: honest-query bound and minimum radius.
    Plan {
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
        t: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        mean_radius: f64,
    },
    /// Sweep t or r over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_enum)]
        param: Param,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Accuracy of classifiers trained on one distance quartile per class.
    Quartile {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "central,second,third,peripheral"
        )]
        quartiles: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { cfg, out } => gen_data(&cfg.load()?, &out),
        Command::Train { cfg, out } => train(&cfg.load()?, &out),
        Command::Analyze { state, data } => analyze(&state, data.as_deref()),
        Command::Serve { state, input, save } => serve(&state, input.as_deref(), save.as_deref()),
        Command::Attack {
            cfg,
            kind,
            undefended,
            out,
        } => attack(&cfg.load()?, kind, undefended, &out),
        Command::Evaluate { cfg, out } => evaluate(&cfg.load()?, out.as_deref()),
        Command::Plan {
            eps,
            delta,
            t,
            mean_radius,
        } => plan_table(eps, delta, &t, mean_radius),
        Command::Ablate {
            cfg,
            param,
            values,
            seeds,
            out,
        } => ablate(&cfg.load()?, param, &values, seeds, out.as_deref()),
        Command::Quartile {
            cfg,
            quartiles,
            seeds,
            per_class,
        } => quartile(&cfg.load()?, &quartiles, seeds, per_class),
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let splits = generate_dataset(&cfg.dataset_spec())?;
    for (name, d) in [
        ("train", &splits.train),
        ("test", &splits.test),
        ("aux", &splits.aux),
    ] {
        d.save(&out.join(format!("{name}.bin")))?;
        println!(
            "{name}: {} rows, dim {}, {} classes",
            d.len(),
            d.dim(),
            d.n_classes()
        );
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let trained = train_components(cfg)?;
    let defender = Defender::from_config(&trained, cfg)?;
    defender
        .to_state(&cfg.hash())
        .save(&out.join("state.bin"))?;
    fs::write(out.join("config.toml"), cfg.to_toml_string()?)?;
    let acc = trained
        .protectee
        .accuracy(trained.splits.test.iter().map(|(x, y)| (x.to_vec(), y)))?;
    println!("protectee test accuracy {acc:.4}");
    println!(
        "mean class radius {:.4}, query radius {:.6}",
        trained.mean_radius(),
        defender.registry.query_radius
    );
    println!("state written to {}", out.join("state.bin").display());
    Ok(())
}

fn analyze(state: &Path, data: Option<&Path>) -> Result<()> {
    let st = PersistedState::load(state)?;
    let d = &st.defender;
    println!("config {}", st.config_hash);
    println!(
        "threshold {}, query radius {:.6}, served {}",
        d.threshold, d.registry.query_radius, d.served
    );
    println!("class  center                 radius   cqs       recorded");
    for p in &d.profiles {
        println!(
            "{:>5}  ({:>9.4}, {:>9.4})  {:>7.4}  {:>8.5}  {:>8}",
            p.class,
            p.center2d[0],
            p.center2d[1],
            p.radius,
            d.registry.cqs(p.class)?,
            d.registry.points(p.class)?.len()
        );
    }
    let c = d.registry.total_counters();
    println!(
        "seen {} recorded {} reversed {} honest {} perturbed {}",
        c.seen, c.recorded, c.reversed, c.honest, c.perturbed
    );
    if let Some(path) = data {
        let train = Dataset::load(path)?;
        let features = train
            .iter()
            .map(|(x, _)| d.protectee.features(x))
            .collect::<queen_core::Result<Vec<_>>>()?;
        let mapped = d.mapper.map_batch(&features, train.labels())?;
        let sep = Separation::compute(&mapped, train.n_classes());
        println!(
            "separation: mean intra {:.4}, mean center distance {:.4}, min center distance {:.4}",
            sep.mean_intra(),
            sep.mean_center_distance(),
            sep.min_center_distance
        );
    }
    Ok(())
}

fn parse_query(line: &str, dim: usize) -> Result<Vec<f64>> {
    let x = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .with_context(|| format!("bad number {s:?}"))
        })
        .collect::<Result<Vec<_>>>()?;
    if x.len() != dim {
        bail!("expected {dim} values, got {}", x.len());
    }
    Ok(x)
}

fn serve(state: &Path, input: Option<&Path>, save: Option<&Path>) -> Result<()> {
    let st = PersistedState::load(state)?;
    let mut d = st.defender;
    let reader: Box<dyn BufRead> = match input {
        Some(p) => Box::new(io::BufReader::new(fs::File::open(p)?)),
        None => Box::new(io::stdin().lock()),
    };
    let mut out = BufWriter::new(io::stdout().lock());
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let x = parse_query(&line, d.protectee.input_dim())
            .with_context(|| format!("line {}", n + 1))?;
        let a = d.serve_one(&x)?;
        let row = serde_json::json!({
            "label": a.probs.argmax(),
            "condition": a.condition,
            "probs": a.probs.as_slice(),
        });
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    if let Some(p) = save {
        d.to_state(&st.config_hash).save(p)?;
    }
    Ok(())
}

fn attack(cfg: &ExperimentConfig, kind: AttackKind, undefended: bool, out: &Path) -> Result<()> {
    let trained = train_components(cfg)?;
    let acfg = cfg.attack_config(kind);
    let outcome = if undefended {
        let mut oracle = trained.protectee.clone();
        run_attack(&mut oracle, &trained.splits.aux, &acfg)?
    } else {
        let mut oracle = Defender::from_config(&trained, cfg)?;
        run_attack(&mut oracle, &trained.splits.aux, &acfg)?
    };
    outcome.log.save(out)?;
    let score = evaluate_piracy(&outcome.piracy, &trained.protectee, &trained.splits.test)?;
    let [_, a, b, c, d] = outcome.log.condition_counts();
    println!(
        "{} ({}): {} queries, piracy accuracy {:.4}, agreement {:.4}",
        kind.name(),
        if undefended { "undefended" } else { "defended" },
        outcome.log.len(),
        score.accuracy,
        score.agreement
    );
    if !undefended {
        println!("conditions A {a} B {b} C {c} D {d}");
    }
    println!("query log written to {}", out.display());
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let run = run_experiment(cfg)?;
    let text = run.report.to_text();
    print!("{text}");
    let attacks: Vec<String> = run
        .timings
        .attack_secs
        .iter()
        .map(|(k, s)| format!("{} {s:.1}s", k.name()))
        .collect();
    println!(
        "timings: train {:.1}s, evaluate {:.1}s, {}",
        run.timings.train_secs,
        run.timings.evaluate_secs,
        attacks.join(", ")
    );
    if let Some(dir) = out.or(cfg.output_dir.as_deref()) {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), run.report.to_json()?)?;
        fs::write(dir.join("report.txt"), text)?;
    }
    Ok(())
}

fn plan_table(eps: f64, delta: f64, ts: &[f64], mean_radius: f64) -> Result<()> {
    println!("eps {eps}  delta {delta}  mean radius {mean_radius}");
    println!(
        "{:>8}  {:>12}  {:>12}  {:>12}",
        "t", "max honest", "r_min", "implied"
    );
    for &t in ts {
        let row = plan(eps, delta, t, mean_radius)?;
        println!(
            "{:>8.4}  {:>12.3}  {:>12.7}  {:>12.3}",
            row.t, row.max_honest, row.r_min, row.implied_honest
        );
    }
    Ok(())
}

fn ablate(
    cfg: &ExperimentConfig,
    param: Param,
    values: &[f64],
    seeds: u64,
    out: Option<&Path>,
) -> Result<()> {
    let param = match param {
        Param::T => SweepParam::T,
        Param::R => SweepParam::R,
    };
    let seeds: Vec<u64> = (0..seeds).map(|s| cfg.seed + s).collect();
    let points = ablation_sweep(cfg, param, values, &seeds)?;
    println!(
        "{:>8}  {:>9}  {:>9}  {:>9}  {:>9}",
        "value", "recorded", "reversed", "attack", "defense"
    );
    for p in &points {
        println!(
            "{:>8.4}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}",
            p.value,
            p.means.recorded,
            p.means.reversed,
            p.means.attack_accuracy,
            p.means.defense_accuracy
        );
    }
    if let Some(path) = out {
        fs::write(path, serde_json::to_string_pretty(&points)?)?;
    }
    Ok(())
}

fn quartile(cfg: &ExperimentConfig, names: &[String], seeds: u64, per_class: usize) -> Result<()> {
    let quartiles = names
        .iter()
        .map(|n| n.parse::<Quartile>().map(|q| (n.as_str(), q)))
        .collect::<queen_core::Result<Vec<_>>>()?;
    let mut sums = vec![0.0; quartiles.len()];
    for s in 0..seeds {
        let c = cfg.with_seed(cfg.seed + s);
        let trained = train_components(&c)?;
        for (sum, (_, q)) in sums.iter_mut().zip(&quartiles) {
            *sum += quartile_experiment(&c, &trained, *q, per_class, c.seed)?;
        }
    }
    for ((name, _), sum) in quartiles.iter().zip(sums) {
        println!("{name:>10}  {:.4}", sum / seeds as f64);
    }
    Ok(())
}
