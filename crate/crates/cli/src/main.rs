use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use codi::eval::{pose_report, KeypointFile, PoseGroup, SetScore};
use codi::json::to_canonical_string;
use codi::ot::{solve_ot, transport_features};
use codi::refine::{refine_attention_with, Normalization};
use codi::rundir::{build_report, load_inputs, save_inputs, write_run};
use codi::{
    cost_matrix, embedding_consistency, importance_weights, otsu_threshold, average_attention,
    read_tensor, run_pipeline, select_top_alpha, synth, tau_sweep, write_tensor, AttentionBundle,
    AttentionStack, ConsistencyKind, CostMatrix, DistanceFrame, EmbeddingSet, Error,
    PipelineConfig, PoseOptions, ProbabilityVector, RotationConstraint, Stage, Tensor,
    TokenMatrix, TransportMode,
};
use serde_json::{json, Value};

const EXIT_USAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_VALIDATION: u8 = 3;

#[derive(Parser)]
#[command(name = "codi", version)]
#[command(about = "Subject-consistent generation engine: masks, optimal transport, filtered attention and pose evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Subject mask and token weights from a (layers, tokens, subject_tokens) attention stack
    Mask {
        #[arg(long)]
        attn: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
    },
    /// Optimal transport between subject tokens
    #[command(subcommand)]
    Ot(OtCommand),
    /// Filtered attention of one target over itself and the selected reference tokens
    Refine {
        /// Directory holding Qn.cft, Kn.cft, Vn.cft, Kid.cft and Vid.cft
        #[arg(long)]
        bundle_dir: PathBuf,
        /// Per-reference-token saliency (rank 1)
        #[arg(long)]
        saliency: PathBuf,
        #[arg(long, default_value_t = codi::refine::DEFAULT_ALPHA)]
        alpha: f64,
        /// Normalize over the selected reference columns only
        #[arg(long)]
        reference_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full two-stage run over a toy denoiser
    Run {
        /// key=value config; defaults apply to missing keys
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluation metrics
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Seeded fixtures
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// File, or directory for `inputs`
        #[arg(long)]
        out: PathBuf,
    },
    /// JSON summary of a run directory
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum OtCommand {
    /// Solve for the plan between masses `a` and `b` under `cost`
    Solve {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        cost: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Barycentric)]
        mode: Mode,
        /// Reference subject features to move along the plan
        #[arg(long, requires = "out_features")]
        source: Option<PathBuf>,
        #[arg(long, requires = "source")]
        out_features: Option<PathBuf>,
    },
    /// Cosine-distance costs between two sets of token features
    Cost {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Procrustes pose diversity
    Pose(PoseArgs),
    /// Average pairwise cosine similarity or distance of embeddings
    Consistency {
        /// (N, e) for one set or (K, N, e) for K sets
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Similarity)]
        kind: Kind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PoseArgs {
    #[arg(long)]
    keypoints: PathBuf,
    #[arg(long, default_value_t = codi::eval::DEFAULT_TAU)]
    tau: f64,
    /// Compare against raw target joints instead of the normalized frame
    #[arg(long)]
    literal_frame: bool,
    /// Forbid reflections in the alignment
    #[arg(long)]
    proper_rotation: bool,
    /// Report one score per threshold instead of the per-set table
    #[arg(long, value_delimiter = ',')]
    tau_sweep: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Literal,
    Barycentric,
}

impl From<Mode> for TransportMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Literal => TransportMode::Literal,
            Mode::Barycentric => TransportMode::Barycentric,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Similarity,
    Distance,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Features,
    Attention,
    Keypoints,
    /// A complete inputs directory for `codi run`
    Inputs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_input_format() || matches!(e, Error::Write { .. }) {
        EXIT_INPUT
    } else {
        EXIT_VALIDATION
    }
}

fn dispatch(command: Command) -> codi::Result<()> {
    match command {
        Command::Mask {
            attn,
            out_mask,
            out_weights,
        } => cmd_mask(&attn, &out_mask, &out_weights),
        Command::Ot(OtCommand::Solve {
            a,
            b,
            cost,
            out,
            mode,
            source,
            out_features,
        }) => cmd_ot_solve(&a, &b, &cost, &out, mode.into(), source.zip(out_features)),
        Command::Ot(OtCommand::Cost { source, target, out }) => cmd_ot_cost(&source, &target, &out),
        Command::Refine {
            bundle_dir,
            saliency,
            alpha,
            reference_only,
            out,
        } => cmd_refine(&bundle_dir, &saliency, alpha, reference_only, &out),
        Command::Run {
            config,
            inputs,
            out,
        } => cmd_run(config.as_deref(), &inputs, &out),
        Command::Eval(EvalCommand::Pose(args)) => cmd_eval_pose(&args),
        Command::Eval(EvalCommand::Consistency {
            embeddings,
            kind,
            out,
        }) => cmd_eval_consistency(&embeddings, kind, out.as_deref()),
        Command::Synth { kind, seed, out } => cmd_synth(kind, seed, &out),
        Command::Report { run_dir, out } => cmd_report(&run_dir, out.as_deref()),
    }
}

fn emit(value: &Value, out: Option<&Path>) -> codi::Result<()> {
    let text = to_canonical_string(value).map_err(|e| Error::Validation(e.to_string()))?;
    match out {
        Some(path) => fs::write(path, &text).map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_masses(path: &Path) -> codi::Result<ProbabilityVector<f64>> {
    ProbabilityVector::unchecked_sum(read_tensor(path)?.to_vector()?)
}

fn cmd_mask(attn: &Path, out_mask: &Path, out_weights: &Path) -> codi::Result<()> {
    let stack: AttentionStack<f64> = AttentionStack::from_tensor(&read_tensor(attn)?)?;
    let saliency = average_attention(&stack);
    let otsu = otsu_threshold(&saliency)?;
    let weights = importance_weights(&saliency, &otsu.mask)?;
    write_tensor(&otsu.mask.to_tensor(), out_mask)?;
    write_tensor(&Tensor::from_slice(weights.weights())?, out_weights)?;
    let mut report = json!({
        "threshold": otsu.threshold,
        "mask_count": otsu.mask.count(),
        "tokens": otsu.mask.len(),
        "bin": otsu.bin,
    });
    if otsu.degenerate {
        report["warning"] = json!("saliency has no two-class split; mask covers every token");
    }
    emit(&report, None)
}

fn cmd_ot_solve(
    a: &Path,
    b: &Path,
    cost: &Path,
    out: &Path,
    mode: TransportMode,
    features: Option<(PathBuf, PathBuf)>,
) -> codi::Result<()> {
    let a = read_masses(a)?;
    let b = read_masses(b)?;
    let cost = CostMatrix::new(read_tensor(cost)?.to_matrix()?)?;
    let plan = solve_ot(&a, &b, &cost)?;
    write_tensor(&Tensor::from_matrix(plan.matrix()), out)?;
    if let Some((source, out_features)) = features {
        let reference: TokenMatrix<f64> = read_tensor(&source)?.to_tokens()?;
        let moved = transport_features(&plan, &reference, mode)?;
        write_tensor(&Tensor::from_matrix(&moved), out_features)?;
    }
    let (row, col) = plan.marginal_residuals(a.weights(), b.weights());
    emit(
        &json!({
            "objective": plan.objective(),
            "pivots": plan.pivots(),
            "row_residual": row,
            "col_residual": col,
            "support": plan.basis().len(),
        }),
        None,
    )
}

fn cmd_ot_cost(source: &Path, target: &Path, out: &Path) -> codi::Result<()> {
    let s: TokenMatrix<f64> = read_tensor(source)?.to_tokens()?;
    let t: TokenMatrix<f64> = read_tensor(target)?.to_tokens()?;
    let c = cost_matrix(&s, &t)?;
    write_tensor(&Tensor::from_matrix(c.matrix()), out)?;
    emit(&json!({ "rows": c.rows(), "cols": c.cols() }), None)
}

fn cmd_refine(
    bundle_dir: &Path,
    saliency: &Path,
    alpha: f64,
    reference_only: bool,
    out: &Path,
) -> codi::Result<()> {
    let bundle: AttentionBundle<f64> = AttentionBundle::load(bundle_dir)?;
    let scores: Vec<f64> = read_tensor(saliency)?.to_vector()?;
    if scores.len() != bundle.reference_keys() {
        return Err(Error::Shape(format!(
            "saliency has {} entries, bundle has {} reference tokens",
            scores.len(),
            bundle.reference_keys()
        )));
    }
    let selection = select_top_alpha(&scores, alpha)?;
    let normalization = if reference_only {
        Normalization::SelectedReference
    } else {
        Normalization::Retained
    };
    let z = refine_attention_with(&bundle, &selection, normalization)?;
    write_tensor(&Tensor::from_matrix(&z), out)?;
    emit(
        &json!({
            "selected": selection.indices(),
            "rows": z.rows(),
            "cols": z.cols(),
        }),
        None,
    )
}

fn cmd_run(config: Option<&Path>, inputs: &Path, out: &Path) -> codi::Result<()> {
    let cfg = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| Error::Read {
                path: path.to_path_buf(),
                source,
            })?;
            PipelineConfig::parse(&text)?
        }
        None => PipelineConfig::default(),
    };
    let inputs = load_inputs(inputs)?;
    let run = run_pipeline(&cfg, &inputs)?;
    write_run(&run, out)?;
    let count = |s: Stage| run.stages.iter().filter(|&&x| x == s).count();
    emit(
        &json!({
            "steps": run.stages.len(),
            "identity_transport_steps": count(Stage::IdentityTransport),
            "identity_refinement_steps": count(Stage::IdentityRefinement),
            "targets": run.target_trajectories.len(),
            "selected": run.selection.indices(),
            "objectives": run.plans.iter().map(|p| p.objective()).collect::<Vec<_>>(),
        }),
        None,
    )
}

fn load_groups(path: &Path) -> codi::Result<Vec<PoseGroup<f64>>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    KeypointFile::parse(&text)?.groups()
}

fn cmd_eval_pose(args: &PoseArgs) -> codi::Result<()> {
    let groups = load_groups(&args.keypoints)?;
    let opts = PoseOptions {
        rotation: if args.proper_rotation {
            RotationConstraint::Proper
        } else {
            RotationConstraint::AllowReflection
        },
        frame: if args.literal_frame {
            DistanceFrame::Literal
        } else {
            DistanceFrame::Normalized
        },
    };
    let report = match &args.tau_sweep {
        Some(taus) => json!({ "sweep": tau_sweep(&groups, taus, opts)? }),
        None => serde_json::to_value(pose_report(&groups, args.tau, opts)?).expect("report serializes"),
    };
    emit(&report, args.out.as_deref())
}

fn cmd_eval_consistency(path: &Path, kind: Kind, out: Option<&Path>) -> codi::Result<()> {
    let t = read_tensor(path)?;
    let sets: Vec<TokenMatrix<f64>> = match t.shape() {
        [_, _] => vec![t.to_matrix()?],
        &[k, n, e] => t
            .data()
            .chunks(n * e)
            .take(k)
            .map(|chunk| TokenMatrix::new(n, e, chunk.iter().map(|&v| v as f64).collect()))
            .collect::<codi::Result<_>>()?,
        other => {
            return Err(Error::Shape(format!(
                "embeddings must be (N, e) or (K, N, e), got {other:?}"
            )))
        }
    };
    let kind = match kind {
        Kind::Similarity => ConsistencyKind::Similarity,
        Kind::Distance => ConsistencyKind::Distance,
    };
    let mut per_set = Vec::with_capacity(sets.len());
    let mut scores = Vec::with_capacity(sets.len());
    for (k, vectors) in sets.into_iter().enumerate() {
        let avg = embedding_consistency(&EmbeddingSet::new(vectors)?, kind)?;
        scores.push(avg.score);
        per_set.push(SetScore {
            id: k.to_string(),
            score: Some(avg.score),
            skipped_pairs: avg.skipped,
        });
    }
    let overall = codi::dataset_average(&scores)?;
    emit(&json!({ "per_set": per_set, "overall": overall }), out)
}

fn write_text(path: &Path, text: &str) -> codi::Result<()> {
    fs::write(path, text).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_synth(kind: SynthKind, seed: u64, out: &Path) -> codi::Result<()> {
    match kind {
        SynthKind::Features => write_tensor(&synth::features_tensor(seed), out),
        SynthKind::Attention => write_tensor(&synth::attention(seed).to_tensor(), out),
        SynthKind::Keypoints => {
            let file = synth::keypoint_file(seed, 3, 5);
            let text = to_canonical_string(&file).map_err(|e| Error::Validation(e.to_string()))?;
            write_text(out, &text)
        }
        SynthKind::Inputs => save_inputs(&synth::pipeline_inputs(seed, 2), out),
    }
}

fn cmd_report(run_dir: &Path, out: Option<&Path>) -> codi::Result<()> {
    let report = serde_json::to_value(build_report(run_dir)?).expect("report serializes");
    emit(&report, out)
}
