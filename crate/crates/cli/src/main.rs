use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use odir::pipeline::{with_jobs, Options, Pipeline, PipelineConfig, SaliencyKind, Stage, StageReport};
use odir::retrieval::Source;
use odir::synth::{synth_dataset, SynthConfig};

#[derive(Parser, Debug)]
#[command(name = "odir", version, about = "Unsupervised object discovery and instance retrieval over activation maps")]
struct Cli {
    /// Flat `section.key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads per stage (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Directory holding every stage's artifacts and run.log.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Dataset manifest (image, box and judgement rows).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Feature saliency maps for every database image.
    Fs(FsArgs),
    /// Region detection on feature or object saliency.
    Detect(DetectArgs),
    /// Region table and whitening model.
    Pool(PoolArgs),
    /// Mutual k-NN region graph and centrality.
    Graph(GraphArgs),
    /// Object saliency maps.
    Os(OsArgs),
    /// Global descriptors.
    Aggregate(SourceArgs),
    /// Rank the database for every query.
    Search(SearchArgs),
    /// Per-query AP and mAP of every ranking.
    Eval(PlotArgs),
    /// Per-image saliency precision and its histogram.
    SalPrecision(SalArgs),
    /// Every stage in order.
    All(AllArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct FsArgs {
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Write PGM renderings of the raw maps here.
    #[arg(long)]
    heatmap_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Fs,
    Os,
}

impl From<Kind> for SaliencyKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Fs => SaliencyKind::Fs,
            Kind::Os => SaliencyKind::Os,
        }
    }
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// Which saliency maps to detect on.
    #[arg(long, value_enum, default_value = "fs")]
    input: Kind,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Debug)]
struct PoolArgs {
    /// Whitened dimension (0 keeps every channel).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    shrinkage: Option<f64>,
}

#[derive(Args, Debug)]
struct GraphArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args, Debug)]
struct OsArgs {
    #[arg(long)]
    theta_img: Option<f64>,
    #[arg(long)]
    theta_nbr: Option<f64>,
    #[arg(long)]
    k_os: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    heatmap_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SourceArg {
    Mac,
    Uniform,
    Fs,
    Os,
    OsTri,
}

impl From<SourceArg> for Source {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Mac => Source::Mac,
            SourceArg::Uniform => Source::Uniform,
            SourceArg::Fs => Source::FsEgm,
            SourceArg::Os => Source::OsEgm,
            SourceArg::OsTri => Source::OsEgmTri,
        }
    }
}

fn sources(args: &[SourceArg]) -> Vec<Source> {
    if args.is_empty() {
        Source::ALL.to_vec()
    } else {
        args.iter().map(|&s| s.into()).collect()
    }
}

#[derive(Args, Debug)]
struct SourceArgs {
    /// Descriptor sources; every source when omitted.
    #[arg(long, value_enum)]
    source: Vec<SourceArg>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long, value_enum)]
    source: Vec<SourceArg>,
    /// Also rank by diffusion over the image graph.
    #[arg(long)]
    diffusion: bool,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Write PPM bar charts here.
    #[arg(long)]
    plot_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SalArgs {
    /// Saliency maps to score; both when omitted.
    #[arg(long, value_enum)]
    source: Vec<Kind>,
    #[arg(long)]
    plot_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AllArgs {
    /// Add diffusion rankings next to the cosine ones.
    #[arg(long)]
    diffusion: bool,
    /// Write PGM renderings of FS and OS maps here.
    #[arg(long)]
    heatmap_dir: Option<PathBuf>,
    /// Write PPM bar charts here.
    #[arg(long)]
    plot_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Database images (200, or 5 with --golden).
    #[arg(long)]
    images: Option<usize>,
    /// Distinct objects (10, or 2 with --golden).
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Use the small fixture geometry (8x10 cells, 16 channels).
    #[arg(long)]
    golden: bool,
}

fn set<T: ToString>(cfg: &mut PipelineConfig, key: &str, v: Option<T>) -> Result<()> {
    if let Some(v) = v {
        cfg.set(key, &v.to_string())?;
    }
    Ok(())
}

/// Applies stage flags to the config and returns the stages to run.
fn plan(cfg: &mut PipelineConfig, opts: &mut Options, cmd: Command) -> Result<Vec<Stage>> {
    Ok(match cmd {
        Command::Fs(a) => {
            set(cfg, "fs.tau", a.tau)?;
            set(cfg, "fs.rho", a.rho)?;
            set(cfg, "fs.epsilon", a.epsilon)?;
            opts.heatmap_dir = a.heatmap_dir;
            vec![Stage::Fs]
        }
        Command::Detect(a) => {
            let kind: SaliencyKind = a.input.into();
            set(cfg, &format!("{}.sigma", kind.as_str()), a.sigma)?;
            set(cfg, "egm.kappa", a.kappa)?;
            set(cfg, "egm.lambda", a.lambda)?;
            vec![Stage::Detect(kind)]
        }
        Command::Pool(a) => {
            set(cfg, "whitening.dim", a.dim)?;
            set(cfg, "whitening.shrinkage", a.shrinkage)?;
            vec![Stage::Pool]
        }
        Command::Graph(a) => {
            set(cfg, "graph.k", a.k)?;
            set(cfg, "graph.beta", a.beta)?;
            set(cfg, "graph.alpha", a.alpha)?;
            set(cfg, "graph.tol", a.tol)?;
            vec![Stage::Graph]
        }
        Command::Os(a) => {
            set(cfg, "os.theta_img", a.theta_img)?;
            set(cfg, "os.theta_nbr", a.theta_nbr)?;
            set(cfg, "os.k_os", a.k_os)?;
            set(cfg, "os.patch", a.patch)?;
            set(cfg, "os.tau", a.tau)?;
            set(cfg, "os.rho", a.rho)?;
            opts.heatmap_dir = a.heatmap_dir;
            vec![Stage::Os]
        }
        Command::Aggregate(a) => vec![Stage::Aggregate(sources(&a.source))],
        Command::Search(a) => vec![Stage::Search {
            sources: sources(&a.source),
            diffusion: a.diffusion || cfg.eval.diffusion,
        }],
        Command::Eval(a) => {
            opts.plot_dir = a.plot_dir;
            vec![Stage::Eval]
        }
        Command::SalPrecision(a) => {
            opts.plot_dir = a.plot_dir;
            let kinds = if a.source.is_empty() {
                vec![SaliencyKind::Fs, SaliencyKind::Os]
            } else {
                a.source.iter().map(|&k| k.into()).collect()
            };
            vec![Stage::SalPrecision(kinds)]
        }
        Command::All(a) => {
            opts.heatmap_dir = a.heatmap_dir;
            opts.plot_dir = a.plot_dir;
            Stage::all(a.diffusion || cfg.eval.diffusion)
        }
        Command::Synth(_) => unreachable!("handled before planning"),
    })
}

fn print_report(r: &StageReport) {
    if !r.text.is_empty() {
        print!("{}", r.text);
    }
    eprintln!("{}\t{:.3}s\t{} outputs", r.stage, r.seconds, r.outputs.len());
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = cli.work_dir {
        cfg.work_dir = w;
    }
    if let Some(m) = cli.manifest {
        cfg.manifest = m;
    }
    let Some(command) = cli.command else {
        if cli.dump_config {
            print!("{}", cfg.to_text());
            return Ok(());
        }
        anyhow::bail!("no command given; see --help");
    };
    if let Command::Synth(a) = &command {
        let mut sc = if a.golden { SynthConfig::golden() } else { SynthConfig::default() };
        sc.seed = a.seed;
        sc.n_images = a.images.unwrap_or(sc.n_images);
        sc.n_objects = a.objects.unwrap_or(sc.n_objects);
        let path = synth_dataset(&sc, &a.out)?;
        println!("{}", path.display());
        return Ok(());
    }
    let mut opts = Options::default();
    let stages = plan(&mut cfg, &mut opts, command)?;
    cfg.validate()?;
    if cli.dump_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let pipeline = Pipeline::new(cfg, opts)?;
    with_jobs(cli.jobs, || -> Result<()> {
        for s in &stages {
            print_report(&pipeline.run(s)?);
        }
        Ok(())
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
