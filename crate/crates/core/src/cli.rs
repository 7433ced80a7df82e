//! Command-line front end. Data goes to stdout or `--out`, diagnostics to
//! stderr. Exit codes: 0 success, 1 numeric failure, 2 usage or input
//! failure.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{phase_consistency_error, PoolMode, RegionLayout};
use crate::dump::ingest_tensor_dump;
use crate::error::{Error, Result};
use crate::kernel::decompose;
use crate::posmap::{
    build_piecewise_map, crpa_remap, ntk_rescale, yarn_rescale, NtkParams, PiecewiseMap,
    Resolution, Scheme, Segment, StrideRatio, UnifyMode, YarnParams,
};
use crate::probe::{
    delta_grid, export_curves, kappa_curve, rds_score, Axis, PairSample, DEFAULT_SAMPLE_COUNT,
    RDS_THRESHOLD,
};
use crate::rope::{make_frequencies, AxisPosition, DEFAULT_BASE};
use crate::sim::{write_reports, LayoutSource, ModelConfig, SimConfig, Simulator, SyntheticModel};

#[derive(Debug, Parser)]
#[command(
    name = "crpa",
    version,
    about = "Rotary embedding analysis and mixed-resolution attention experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the frequency table, optionally rescaled by NTK or YaRN.
    Freqs(FreqsArgs),
    /// Decompose one query/key pair into its phase kernel (JSON).
    Kernel(KernelArgs),
    /// Mean normalized score curve over relative offsets.
    Probe(ProbeArgs),
    /// Rotary dominance score of projection weights.
    Rds(RdsArgs),
    /// Unified index sequences and per-pair phase errors on the 11-token layout.
    AliasingDemo(OutArgs),
    /// Run the toy pipeline under one scheme.
    Simulate(SimulateArgs),
    /// Run the toy pipeline under several schemes.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FreqsArgs {
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = DEFAULT_BASE)]
    pub base: f64,
    /// NTK extension factor.
    #[arg(long)]
    pub ntk_s: Option<f64>,
    /// YaRN extension factor.
    #[arg(long)]
    pub yarn_s: Option<f64>,
    /// YaRN training context length.
    #[arg(long, default_value_t = 4096.0)]
    pub yarn_length: f64,
    #[arg(long, default_value_t = crate::posmap::YARN_DEFAULT_ALPHA)]
    pub yarn_alpha: f64,
    #[arg(long, default_value_t = crate::posmap::YARN_DEFAULT_BETA)]
    pub yarn_beta: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct KernelArgs {
    /// Comma-separated query vector.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub q: Vec<f64>,
    /// Comma-separated key vector.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub k: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_BASE)]
    pub base: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Sample from the synthetic head bank.
    #[arg(long, conflicts_with_all = ["pairs", "q"])]
    pub synthetic: bool,
    /// Rank-3 `[n, 2, d]` dump of query/key pairs.
    #[arg(long, conflicts_with = "q")]
    pub pairs: Option<PathBuf>,
    /// Sidecar of `--pairs`; defaults to `<pairs>.json`.
    #[arg(long, requires = "pairs")]
    pub sidecar: Option<PathBuf>,
    /// Rank-2 `[n, d]` query dump, paired row by row with `--k`.
    #[arg(long, requires = "k")]
    pub q: Option<PathBuf>,
    #[arg(long, requires = "q")]
    pub k: Option<PathBuf>,
    /// Largest |delta| probed.
    #[arg(long, default_value_t = 32)]
    pub range: i64,
    #[arg(long, default_value = "h")]
    pub axis: Axis,
    /// Denoising timestep recorded with the curve.
    #[arg(long)]
    pub timestep: Option<i64>,
    /// Rotary base of dumped vectors.
    #[arg(long, default_value_t = DEFAULT_BASE)]
    pub base: f64,
    #[arg(long, default_value_t = ModelConfig::default().sharpness)]
    pub sharpness: f64,
    #[arg(long, default_value_t = ModelConfig::default().heads)]
    pub heads: usize,
    /// Head dimension of the synthetic bank.
    #[arg(long, default_value_t = 2 * ModelConfig::default().dim_per_axis)]
    pub dim: usize,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_COUNT)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Projection {
    Q,
    K,
}

#[derive(Debug, Args)]
pub struct RdsArgs {
    /// Weight dump: `[d, m]`, `[2, d, m]` or `[heads, 2, d, m]`.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long = "use", value_enum, default_value = "q")]
    pub projection: Projection,
    #[arg(long, default_value_t = RDS_THRESHOLD)]
    pub threshold: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// JSON config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// HR cell fraction of the synthetic centre box.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Layout JSON replacing the synthetic centre box.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    #[arg(long)]
    pub coarse_steps: Option<usize>,
    #[arg(long)]
    pub mixed_steps: Option<usize>,
    #[arg(long)]
    pub fine_steps: Option<usize>,
    #[arg(long)]
    pub boundary_exchange: bool,
    #[arg(long)]
    pub n_pad: Option<usize>,
    #[arg(long)]
    pub pool: Option<PoolMode>,
    /// Fill the seconds column (makes output non-reproducible).
    #[arg(long)]
    pub timings: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "crpa")]
    pub scheme: Scheme,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated schemes; all when absent.
    #[arg(long, value_delimiter = ',')]
    pub schemes: Vec<Scheme>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

/// Comment line naming the tool version and the full argument list.
pub fn provenance_line(args: &[String]) -> String {
    format!(
        "crpa {} args: {}",
        env!("CARGO_PKG_VERSION"),
        args.join(" ")
    )
}

fn open_out(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn finish(mut w: Box<dyn Write>, out: &Option<PathBuf>) -> Result<()> {
    w.flush()
        .map_err(|e| Error::io(out.as_deref().unwrap_or(Path::new("<stdout>")), e))
}

fn csv_writer(comment: &str, out: &Option<PathBuf>) -> Result<csv::Writer<Box<dyn Write>>> {
    let mut w = open_out(out)?;
    writeln!(w, "# {comment}").map_err(|e| Error::io("<output>", e))?;
    Ok(csv::Writer::from_writer(w))
}

fn flush_csv(w: csv::Writer<Box<dyn Write>>, out: &Option<PathBuf>) -> Result<()> {
    let inner = w
        .into_inner()
        .map_err(|e| Error::io("<output>", e.into_error()))?;
    finish(inner, out)
}

/// Runs a parsed command; `args` is echoed into output headers.
pub fn run(cli: Cli, args: &[String]) -> Result<()> {
    let comment = provenance_line(args);
    match cli.command {
        Command::Freqs(a) => cmd_freqs(&a, &comment),
        Command::Kernel(a) => cmd_kernel(&a),
        Command::Probe(a) => cmd_probe(&a, &comment),
        Command::Rds(a) => cmd_rds(&a, &comment),
        Command::AliasingDemo(a) => cmd_aliasing_demo(&a, &comment),
        Command::Simulate(a) => cmd_pipeline(&[a.scheme], &a.pipeline, &comment),
        Command::Compare(a) => {
            let schemes = if a.schemes.is_empty() {
                Scheme::ALL.to_vec()
            } else {
                a.schemes.clone()
            };
            cmd_pipeline(&schemes, &a.pipeline, &comment)
        }
    }
}

/// Parses `args` (including the program name), runs and maps errors to
/// exit codes.
pub fn main_with_args(args: Vec<String>) -> ExitCode {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, &args[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}

fn cmd_freqs(a: &FreqsArgs, comment: &str) -> Result<()> {
    let fs = make_frequencies(a.dim, a.base)?;
    let ntk = a
        .ntk_s
        .map(|s| -> Result<_> {
            let p = NtkParams::new(s, a.dim)?;
            Ok((p.lambda(), ntk_rescale(&fs, &p)?))
        })
        .transpose()?;
    let yarn = a
        .yarn_s
        .map(|s| -> Result<_> {
            let p = YarnParams::new(a.yarn_length, s, a.yarn_alpha, a.yarn_beta, 1.0)?;
            Ok((p, yarn_rescale(&fs, &p)?))
        })
        .transpose()?;

    let mut header = vec!["i", "omega"];
    if ntk.is_some() {
        header.extend(["lambda", "omega_ntk"]);
    }
    if yarn.is_some() {
        header.extend(["gamma", "omega_yarn"]);
    }
    let mut w = csv_writer(comment, &a.out.out)?;
    w.write_record(&header)?;
    for (i, &omega) in fs.freqs().iter().enumerate() {
        let mut row = vec![i.to_string(), omega.to_string()];
        if let Some((lambda, f)) = &ntk {
            row.extend([lambda.to_string(), f.freqs()[i].to_string()]);
        }
        if let Some((p, f)) = &yarn {
            row.extend([
                p.gamma(p.cycles(omega)).to_string(),
                f.freqs()[i].to_string(),
            ]);
        }
        w.write_record(&row)?;
    }
    flush_csv(w, &a.out.out)
}

fn cmd_kernel(a: &KernelArgs) -> Result<()> {
    let fs = make_frequencies(a.q.len(), a.base)?;
    let kernel = decompose(&a.q, &a.k, &fs)?;
    let mut w = open_out(&a.out.out)?;
    writeln!(w, "{}", kernel.to_json()?).map_err(|e| Error::io("<output>", e))?;
    finish(w, &a.out.out)
}

fn load_pairs(a: &ProbeArgs) -> Result<Vec<PairSample>> {
    if let Some(p) = &a.pairs {
        return ingest_tensor_dump(p, a.sidecar.as_deref())?.into_pairs();
    }
    match (&a.q, &a.k) {
        (Some(q), Some(k)) => {
            let qs = ingest_tensor_dump(q, None)?.into_vectors()?;
            let ks = ingest_tensor_dump(k, None)?.into_vectors()?;
            if qs.len() != ks.len() {
                return Err(Error::UnsupportedDump(format!(
                    "{} queries but {} keys",
                    qs.len(),
                    ks.len()
                )));
            }
            Ok(qs
                .into_iter()
                .zip(ks)
                .map(|(q, k)| PairSample::new(q, k))
                .collect())
        }
        _ => Err(Error::InvalidConfig(
            "probe needs --synthetic, --pairs or --q/--k".into(),
        )),
    }
}

fn cmd_probe(a: &ProbeArgs, comment: &str) -> Result<()> {
    let (samples, fs) = if a.synthetic {
        if a.dim % 4 != 0 {
            return Err(Error::InvalidParameter(format!(
                "synthetic --dim must be divisible by 4, got {}",
                a.dim
            )));
        }
        let model = SyntheticModel::from_config(
            &ModelConfig {
                heads: a.heads,
                dim_per_axis: a.dim / 2,
                sharpness: a.sharpness,
                seed: a.seed,
                ..ModelConfig::default()
            },
            SimConfig::default().channels,
        )?;
        let axis = match a.axis {
            Axis::H => 0,
            Axis::W => 1,
            Axis::T => {
                return Err(Error::InvalidParameter(
                    "the synthetic bank has no temporal axis".into(),
                ))
            }
        };
        (
            model.probe_samples(axis, a.samples, a.seed)?,
            model.axis_schedule(axis)?,
        )
    } else {
        let samples = load_pairs(a)?;
        let d = samples.first().map(|s| s.q.len()).unwrap_or(0);
        (samples, make_frequencies(d, a.base)?)
    };
    let mut curve = kappa_curve(&samples, &fs, &delta_grid(a.range), a.axis)?;
    curve.timestep = a.timestep;
    let w = open_out(&a.out.out)?;
    export_curves(&[curve], Some(comment), w)
}

fn cmd_rds(a: &RdsArgs, comment: &str) -> Result<()> {
    let which = match a.projection {
        Projection::Q => 0,
        Projection::K => 1,
    };
    let heads = ingest_tensor_dump(&a.weights, a.sidecar.as_deref())?.into_weights(which)?;
    let mut w = csv_writer(comment, &a.out.out)?;
    w.write_record(["head", "rds", "dominant"])?;
    for (h, m) in heads.iter().enumerate() {
        let s = rds_score(m, a.threshold)?;
        w.write_record([
            h.to_string(),
            s.rds.to_string(),
            s.is_rope_dominant.to_string(),
        ])?;
    }
    flush_csv(w, &a.out.out)
}

/// Three LR cells, two HR cells, four LR cells at ratio 2.
pub fn toy_segments() -> [Segment; 3] {
    [Segment::low(3), Segment::high(2), Segment::low(4)]
}

/// `[a,b,...]` with HR entries of a fractional map printed to one decimal.
pub fn format_sequence(map: &PiecewiseMap, mode: UnifyMode) -> String {
    let items: Vec<String> = map
        .tokens()
        .iter()
        .map(|t| match (mode, t.resolution) {
            (UnifyMode::Fractional, Resolution::High) => format!("{:.1}", t.mapped),
            _ => format!("{}", t.mapped),
        })
        .collect();
    format!("[{}]", items.join(","))
}

/// Per-pair errors `|delta_scheme - delta_physical / S_q|` on the toy layout
/// for fractional PI, integerized PI and CRPA, over pairs from different
/// regions.
pub fn aliasing_table() -> Result<Vec<(usize, usize, f64, f64, f64)>> {
    let segs = toy_segments();
    let frac = build_piecewise_map(&segs, 2, UnifyMode::Fractional)?.tokens();
    let int = build_piecewise_map(&segs, 2, UnifyMode::Integerized)?.tokens();
    let mut rows = Vec::new();
    for i in 0..frac.len() {
        for j in 0..frac.len() {
            if frac[i].region == frac[j].region {
                continue;
            }
            let sq = frac[i].stride;
            let d_phys = (frac[j].physical - frac[i].physical) / sq;
            let e_frac = ((frac[j].mapped - frac[i].mapped) - d_phys).abs();
            let e_int = ((int[j].mapped - int[i].mapped) - d_phys).abs();
            let sr = StrideRatio::new(sq, frac[j].stride)?;
            let kq = crpa_remap(AxisPosition::new(frac[j].native)?, &sr).value();
            let e_crpa = ((kq - frac[i].physical / sq) - d_phys).abs();
            rows.push((i, j, e_frac, e_int, e_crpa));
        }
    }
    Ok(rows)
}

fn cmd_aliasing_demo(a: &OutArgs, comment: &str) -> Result<()> {
    let segs = toy_segments();
    let mut w = open_out(&a.out)?;
    let io_err = |e| Error::io("<output>", e);
    writeln!(w, "# {comment}").map_err(io_err)?;
    for mode in [UnifyMode::Fractional, UnifyMode::Integerized] {
        let map = build_piecewise_map(&segs, 2, mode)?;
        let name = match mode {
            UnifyMode::Fractional => "fractional",
            UnifyMode::Integerized => "integerized",
        };
        writeln!(w, "# {name} {}", format_sequence(&map, mode)).map_err(io_err)?;
    }
    let layout =
        RegionLayout::from_hr_mask(vec![9], vec![2], (0..9).map(|c| c == 3 || c == 4).collect())?;
    for s in [Scheme::PiLr, Scheme::PiHr, Scheme::Crpa] {
        let e = phase_consistency_error(&layout, s, &Default::default(), PoolMode::Mean);
        writeln!(w, "# max_error {s} {e}").map_err(io_err)?;
    }
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([
        "query",
        "key",
        "err_fractional",
        "err_integerized",
        "err_crpa",
    ])?;
    for (i, j, f, n, c) in aliasing_table()? {
        csv.write_record([
            i.to_string(),
            j.to_string(),
            f.to_string(),
            n.to_string(),
            c.to_string(),
        ])?;
    }
    flush_csv(csv, &a.out)
}

fn pipeline_config(p: &PipelineArgs) -> Result<SimConfig> {
    let mut cfg = match &p.config {
        Some(path) => SimConfig::from_json_file(path)?,
        None => SimConfig::default(),
    };
    if let Some(s) = p.seed {
        cfg.noise_seed = s;
    }
    if let Some(r) = p.ratio {
        cfg.schedule.hr_token_ratio = r;
    }
    if let Some(l) = &p.layout {
        cfg.layout = Some(l.clone());
    }
    let s = &mut cfg.schedule;
    let given = [p.coarse_steps, p.mixed_steps, p.fine_steps];
    if given.iter().any(Option::is_some) {
        s.coarse_steps = p.coarse_steps.unwrap_or(s.coarse_steps);
        s.mixed_steps = p.mixed_steps.unwrap_or(s.mixed_steps);
        s.fine_steps = p.fine_steps.unwrap_or(s.fine_steps);
        if s.sigmas.is_none() {
            s.total_steps = s.coarse_steps + s.mixed_steps + s.fine_steps;
        }
    }
    if p.boundary_exchange {
        cfg.boundary_exchange = true;
    }
    if let Some(n) = p.n_pad {
        cfg.n_pad = n;
    }
    if let Some(pool) = p.pool {
        cfg.pool = pool;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_pipeline(schemes: &[Scheme], p: &PipelineArgs, comment: &str) -> Result<()> {
    let cfg = pipeline_config(p)?;
    let source = match &cfg.layout {
        Some(path) => LayoutSource::File(path.clone()),
        None => LayoutSource::Synthetic,
    };
    let sim = Simulator::new(cfg)?;
    let reports = sim.compare_schemes(schemes, &source)?;
    for r in &reports {
        eprintln!(
            "{}: rms_global {:.6} rms_hr {:.6} phase_err {:.4} ({:.2}s)",
            r.scheme,
            r.rms_global,
            r.rms_hr,
            r.phase_err,
            r.seconds()
        );
    }
    let w = open_out(&p.out.out)?;
    write_reports(&reports, Some(comment), p.timings, w)
}
