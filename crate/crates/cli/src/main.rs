use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use voxflow::catalog::{load_catalog, Level};
use voxflow::model::ModelRegistry;
use voxflow::netshape::ArchConfig;
use voxflow::pipeline::{run_to_directory, PipelineSpec};
use voxflow::Error;

/// Exit codes: 0 success, 1 domain finding, 2 usage or input error,
/// 3 model not attached.
#[derive(Parser)]
#[command(name = "voxflow", version, about = "Inspect catalogs and run volumetric pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check records for missing, unreadable or misaligned modalities.
    Inspect {
        catalog: PathBuf,
        /// Comma-separated modality ids; defaults to every modality.
        #[arg(long, value_delimiter = ',')]
        modalities: Vec<String>,
        /// Per-modality record limits, a count or "all" each.
        #[arg(long, value_delimiter = ',')]
        ns: Vec<String>,
    },
    /// Print the voxel mean and standard deviation of one modality.
    Stats {
        catalog: PathBuf,
        #[arg(long)]
        modality: String,
        /// Only use the first N records.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Evaluate one output set for one record and write every sample.
    Run {
        pipeline: PathBuf,
        catalog: PathBuf,
        /// dataset/case/record
        #[arg(long)]
        identifier: String,
        #[arg(long)]
        set: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the pipeline file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the traced nodes of every output set.
    Summary {
        pipeline: PathBuf,
        /// Only this set.
        #[arg(long)]
        set: Option<String>,
    },
    /// Receptive field, admissible sizes and output size of an architecture.
    Netshape {
        /// Architecture file; the built-in default when omitted.
        arch: Option<PathBuf>,
        /// One size for all axes or three comma-separated sizes.
        #[arg(long, value_delimiter = ',')]
        input_size: Vec<usize>,
        /// Largest input size listed as admissible.
        #[arg(long, default_value_t = 256)]
        max_size: usize,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::MissingModel { .. } => 3,
            Error::Format(_) | Error::Argument(_) | Error::Lookup(_) | Error::Io { .. } => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = String::new();
    let result = match cli.command {
        Command::Inspect { catalog, modalities, ns } => inspect(&catalog, &modalities, &ns, &mut out),
        Command::Stats { catalog, modality, n } => stats(&catalog, &modality, n, &mut out),
        Command::Run {
            pipeline,
            catalog,
            identifier,
            set,
            out: dir,
            seed,
        } => run(&pipeline, &catalog, &identifier, &set, &dir, seed, &mut out),
        Command::Summary { pipeline, set } => summary(&pipeline, set.as_deref(), &mut out),
        Command::Netshape {
            arch,
            input_size,
            max_size,
        } => netshape(arch.as_deref(), &input_size, max_size, &mut out),
    };
    print!("{out}");
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn inspect(catalog: &Path, modalities: &[String], ns: &[String], out: &mut String) -> Result<u8, Failure> {
    let mirc = load_catalog(catalog)?;
    let ids: Vec<String> = if modalities.is_empty() {
        mirc.ids_at_level(Level::Modality)
    } else {
        modalities.to_vec()
    };
    let limits: Vec<Option<usize>> = if ns.is_empty() {
        vec![None; ids.len()]
    } else {
        ns.iter()
            .map(|v| match v.as_str() {
                "all" => Ok(None),
                v => v.parse().map(Some).map_err(|_| usage(format!("bad record limit {v:?}"))),
            })
            .collect::<Result<_, _>>()?
    };
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let report = mirc.inspect(&refs, &limits)?;
    let _ = writeln!(out, "{report}");
    Ok(u8::from(!report.is_consistent()))
}

fn stats(catalog: &Path, modality: &str, n: Option<usize>, out: &mut String) -> Result<u8, Failure> {
    let mirc = load_catalog(catalog)?;
    let (mean, std) = mirc.mean_and_std(modality, n)?;
    let _ = writeln!(out, "{mean} {std}");
    Ok(0)
}

fn run(
    pipeline: &Path,
    catalog: &Path,
    identifier: &str,
    set: &str,
    dir: &Path,
    seed: Option<u64>,
    out: &mut String,
) -> Result<u8, Failure> {
    let steps = run_to_directory(pipeline, catalog, identifier, set, dir, seed)?;
    let _ = writeln!(out, "{steps} steps");
    Ok(0)
}

fn summary(pipeline: &Path, set: Option<&str>, out: &mut String) -> Result<u8, Failure> {
    let spec = PipelineSpec::load(pipeline)?;
    let base = pipeline.parent().unwrap_or_else(|| Path::new("."));
    let bundle = spec.build(base, &ModelRegistry::with_builtins())?.bundle()?;
    let keys: Vec<String> = match set {
        Some(s) => vec![s.to_owned()],
        None => bundle.keys().map(str::to_owned).collect(),
    };
    for key in keys {
        let creator = bundle.creator(&key)?;
        let _ = writeln!(out, "[{key}]");
        let _ = write!(out, "{}", creator.summary());
    }
    Ok(0)
}

fn netshape(arch: Option<&Path>, input_size: &[usize], max_size: usize, out: &mut String) -> Result<u8, Failure> {
    let cfg = match arch {
        Some(p) => ArchConfig::load(p)?,
        None => ArchConfig::no_new_net(),
    };
    let triple = |v: [usize; 3]| format!("{} {} {}", v[0], v[1], v[2]);
    let _ = writeln!(out, "receptive field: {}", triple(cfg.receptive_field()));
    let axes: Vec<Vec<(usize, usize)>> = (0..3).map(|a| cfg.admissible_sizes(a, 1..=max_size)).collect();
    let list = |sizes: &[(usize, usize)]| {
        sizes.iter().map(|(i, o)| format!("{i}->{o}")).collect::<Vec<_>>().join(" ")
    };
    if axes[0] == axes[1] && axes[1] == axes[2] {
        let _ = writeln!(out, "admissible sizes (all axes): {}", list(&axes[0]));
    } else {
        for (a, sizes) in axes.iter().enumerate() {
            let _ = writeln!(out, "admissible sizes (axis {a}): {}", list(sizes));
        }
    }
    let input = match *input_size {
        [] => None,
        [n] => Some([n; 3]),
        [a, b, c] => Some([a, b, c]),
        _ => return Err(usage("--input-size takes one or three sizes")),
    };
    match (input, cfg.output_size) {
        (Some(i), _) => {
            let o = cfg.output_size(i)?;
            let _ = writeln!(out, "input size: {}", triple(i));
            let _ = writeln!(out, "output size: {}", triple(o));
        }
        (None, Some(o)) => {
            let i = cfg.input_size_for(o)?;
            let _ = writeln!(out, "input size: {}", triple(i));
            let _ = writeln!(out, "output size: {}", triple(o));
        }
        (None, None) => {}
    }
    Ok(0)
}
