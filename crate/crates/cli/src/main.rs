use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use energyroi::checkpoint;
use energyroi::config::RunConfig;
use energyroi::diagnostics;
use energyroi::gradcheck;
use energyroi::imageio::{draw_box, resize, write_pgm, write_ppm};
use energyroi::model::Model;
use energyroi::oracle;
use energyroi::synthetic::{generate, DataSpec, Dataset};
use energyroi::training::{train, EPOCH_CSV_HEADER};
use energyroi::Tensor;

/// Name of the run record written into every output directory.
const RUN_FILE: &str = "run.json";

#[derive(Parser)]
#[command(name = "energyroi", version, about = "Two-branch multi-label recognition on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write region proposals, box overlays and class maps.
    Propose(ProposeArgs),
    /// Summarize a checkpoint or dataset.
    Inspect(InspectArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Compare region ranking against brute-force enumeration.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; applied after --config, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for (i, s) in self.set.iter().enumerate() {
            if !s.contains('=') {
                bail!("--set {s:?}: expected KEY=VALUE");
            }
            cfg.apply_text(s).map_err(|e| anyhow::anyhow!("--set #{}: {e}", i + 1))?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 128)]
    side: usize,
    #[arg(long, default_value_t = 3)]
    max_objects: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only the first N images.
    #[arg(long)]
    limit: Option<usize>,
    /// Also dump the last cross-attention map of each image as CSV
    /// (one row per global position, one column per proposal).
    #[arg(long)]
    dump_attention: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Regions compared per map.
    #[arg(long, default_value_t = 2)]
    k_e: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    seed: Option<u64>,
    config: Option<String>,
    artifacts: Vec<String>,
    wall_clock_seconds: f64,
}

fn write_manifest(dir: &Path, command: &str, seed: Option<u64>, config: Option<&RunConfig>, artifacts: Vec<String>, started: Instant) -> Result<()> {
    let m = RunManifest {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        seed,
        config: config.map(RunConfig::to_text),
        artifacts,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let started = Instant::now();
    let spec = DataSpec {
        n_examples: a.n,
        num_classes: a.classes,
        side: a.side,
        max_objects: a.max_objects,
        seed: a.seed,
    };
    let data = generate(&spec)?;
    data.save(&a.out)?;
    write_manifest(&a.out, "generate", Some(a.seed), None, vec!["manifest.json".into(), "images/".into()], started)?;
    println!("wrote {} examples to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let mut cfg = a.cfg.load()?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let data = load_dataset(&a.dataset)?;
    let model = Model::new(cfg.model_config(data.num_classes))?;
    fs::create_dir_all(&a.out)?;
    let mut csv = String::from(EPOCH_CSV_HEADER);
    csv.push('\n');
    let (net, _) = train(&model, &data, &cfg.train, |e| {
        println!("{}", e.csv_row());
        csv.push_str(&e.csv_row());
        csv.push('\n');
    })?;
    fs::write(a.out.join("metrics.csv"), csv)?;
    checkpoint::save(&net, &a.out.join("checkpoint"))?;
    write_manifest(
        &a.out,
        "train",
        Some(cfg.train.seed),
        Some(&cfg),
        vec!["metrics.csv".into(), "checkpoint/".into()],
        started,
    )?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = a.cfg.load()?;
    let net = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = load_dataset(&a.dataset)?;
    let r = diagnostics::evaluate(&net, &data, cfg.threshold)?;
    fs::create_dir_all(&a.out)?;
    let mut csv = String::from("protocol,mAP,CP,CR,CF1,OP,OR,OF1\n");
    for (name, p) in [("ALL", r.all), ("TOP3", r.top3)] {
        writeln!(
            csv,
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.map, p.cp, p.cr, p.cf1, p.op, p.or, p.of1
        )?;
    }
    fs::write(a.out.join("eval.csv"), &csv)?;
    let mut per_class = String::from("class,ap\n");
    for (k, ap) in r.per_class_ap.iter().enumerate() {
        writeln!(per_class, "{k},{}", fmt_opt(*ap))?;
    }
    fs::write(a.out.join("per_class_ap.csv"), per_class)?;
    write_manifest(&a.out, "eval", None, Some(&cfg), vec!["eval.csv".into(), "per_class_ap.csv".into()], started)?;
    print!("{csv}");
    Ok(())
}

/// Outline colors by energy rank.
const RANK_COLORS: [[f64; 3]; 2] = [[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]];

fn attention_csv(att: &Tensor) -> String {
    let cols = att.shape().last().copied().unwrap_or(0);
    let mut out = String::new();
    for row in att.data().chunks(cols.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn cmd_propose(a: &ProposeArgs) -> Result<()> {
    let started = Instant::now();
    let net = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = load_dataset(&a.dataset)?;
    let n = a.limit.unwrap_or(data.len()).min(data.len());
    for sub in ["overlays", "maps"] {
        fs::create_dir_all(a.out.join(sub))?;
    }
    if a.dump_attention {
        fs::create_dir_all(a.out.join("attention"))?;
    }
    let mut csv = String::from("image_id,class,variant,energy_rank,x0,y0,x1,y1,energy,px0,py0,px1,py1\n");
    for (id, ex) in data.examples.iter().take(n).enumerate() {
        let inf = net.infer(&ex.image)?;
        let [_, h, w] = *ex.image.shape() else { unreachable!() };
        let (sy, sx) = (h as f64 / net.side as f64, w as f64 / net.side as f64);
        // the overlay is drawn at the network's input resolution
        let mut overlay = resize(&ex.image, net.side, net.side)?;
        for p in &inf.proposals {
            let b = p.bbox;
            let px = p.pixel_box(inf.cam.stride);
            let img_box = [
                (px[0] as f64 * sx).round() as usize,
                (px[1] as f64 * sy).round() as usize,
                (px[2] as f64 * sx).round() as usize,
                (px[3] as f64 * sy).round() as usize,
            ];
            writeln!(
                csv,
                "{id},{},{},{},{},{},{},{},{},{},{},{},{}",
                p.category, p.variant, p.energy_rank, b.x0, b.y0, b.x1, b.y1, p.energy, img_box[0], img_box[1], img_box[2], img_box[3]
            )?;
            if p.variant == 0 {
                draw_box(&mut overlay, px, RANK_COLORS[p.energy_rank.min(1)])?;
            }
        }
        let mut f = BufWriter::new(fs::File::create(a.out.join(format!("overlays/{id:06}.ppm")))?);
        write_ppm(&overlay, &mut f)?;
        for k in 0..inf.cam.num_classes() {
            let mut f = BufWriter::new(fs::File::create(a.out.join(format!("maps/{id:06}_c{k:02}.pgm")))?);
            write_pgm(&inf.cam.class_map(k), &mut f)?;
        }
        if let (true, Some(att)) = (a.dump_attention, &inf.cross_attention) {
            fs::write(a.out.join(format!("attention/{id:06}.csv")), attention_csv(att))?;
        }
    }
    fs::write(a.out.join("proposals.csv"), csv)?;
    let mut artifacts = vec!["proposals.csv".into(), "overlays/".into(), "maps/".into()];
    if a.dump_attention {
        artifacts.push("attention/".into());
    }
    write_manifest(&a.out, "propose", None, None, artifacts, started)?;
    println!("wrote proposals for {n} images to {}", a.out.display());
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    if a.checkpoint.is_none() && a.dataset.is_none() {
        bail!("inspect needs --checkpoint or --dataset");
    }
    if let Some(dir) = &a.checkpoint {
        let net = checkpoint::load(dir).with_context(|| format!("loading {}", dir.display()))?;
        let c = &net.model.config;
        println!("checkpoint {}", dir.display());
        println!("  classes {}  widths {:?}  side {}", c.num_classes, c.widths, net.side);
        println!(
            "  global attention {}  cross depth {}  fusion {:?}  F_w stride {}  F_r stride {}",
            c.global_attention,
            c.cross_depth,
            c.fusion,
            c.weak_level.stride(),
            c.roi_level.stride()
        );
        println!(
            "  k_s {}  k_e {}  k_r {}  zeta {:?}  proposals/image {}",
            c.selection.k_s,
            c.selection.k_e,
            c.selection.k_r,
            c.selection.zeta,
            c.selection.k_o()
        );
        println!("  switches {:?}", net.switches);
        println!("  {} tensors, {} scalars", net.params.len(), net.params.scalar_count());
        let weak = net.bn.get("weak.bn")?;
        println!("  class-map BN running mean {:?}", weak.running_mean);
    }
    if let Some(dir) = &a.dataset {
        let data = load_dataset(dir)?;
        let n = data.len().max(1) as f64;
        println!("dataset {}: {} examples, {} classes", dir.display(), data.len(), data.num_classes);
        if let Some(ex) = data.examples.first() {
            println!("  image shape {:?}", ex.image.shape());
        }
        let objects: usize = data.examples.iter().map(|e| e.boxes.len()).sum();
        println!("  {:.3} objects per image", objects as f64 / n);
        for k in 0..data.num_classes {
            let c = data.examples.iter().filter(|e| e.labels[k]).count();
            println!("  class {k}: present in {c} ({:.1}%)", 100.0 * c as f64 / n);
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let started = Instant::now();
    let reports = gradcheck::run_all(a.seed)?;
    let mut csv = String::from("suite,coordinates,skipped,max_rel_error,passed\n");
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<24} max rel {:.3e}  ({} coords, {} skipped)", r.name, r.max_rel_error, r.coordinates, r.skipped);
        writeln!(csv, "{},{},{},{:e},{}", r.name, r.coordinates, r.skipped, r.max_rel_error, r.passed())?;
    }
    let ok = reports.iter().all(|r| r.passed());
    println!("{} suites, {}", reports.len(), if ok { "all passed" } else { "FAILURES" });
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("gradcheck.csv"), csv)?;
        write_manifest(out, "gradcheck", Some(a.seed), None, vec!["gradcheck.csv".into()], started)?;
    }
    Ok(ok)
}

fn cmd_oracle(a: &OracleArgs) -> Result<bool> {
    let started = Instant::now();
    let r = oracle::run(a.trials, a.seed, a.k_e)?;
    println!("trials {}  seed {}  k_e {}", r.trials, r.seed, r.k_e);
    println!("mismatches vs brute force: {}", r.mismatches);
    println!("maps where area and energy picks differ: {}", r.area_disagreements);
    println!("constructed disagreement resolved by energy: {}", r.constructed_case_ok);
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("oracle.json"), serde_json::to_string_pretty(&r)? + "\n")?;
        write_manifest(out, "oracle", Some(a.seed), None, vec!["oracle.json".into()], started)?;
    }
    Ok(r.mismatches == 0 && r.constructed_case_ok)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Propose(a) => cmd_propose(a).map(|_| true),
        Command::Inspect(a) => cmd_inspect(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Oracle(a) => cmd_oracle(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
