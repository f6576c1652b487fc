//! `tagalign` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde_json::json;

use tagalign::data::{
    fmt_f64, load_graph, load_labels, load_matrix, load_raw_matrix, load_ragged, write_matrix, Report,
};
use tagalign::losses::{finite_difference_check, loss_report, proposition_audit, Bundle, LossConfig};
use tagalign::metrics::{metric_report, MetricInputs, PairSampling};
use tagalign::similarity::{
    augment_with_prompt, global_cosine, merge, pairwise_rsm_similarity, PromptRule, SimilarityMatrix,
};
use tagalign::synth::{generate, SynthConfig, SyntheticTag};
use tagalign::trainer::{align, TrainConfig};
use tagalign::transport::{solve, FactorMethod, OtConfig};
use tagalign::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tagalign", version, about = "Soft alignment of structural and textual graph embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Label and text heterophily statistics of a graph.
    Metrics(MetricsArgs),
    /// Similarity matrix between structural and textual views.
    Sim(SimArgs),
    /// Entropic optimal transport plan for a similarity matrix.
    Ot(OtArgs),
    /// Alignment losses on an embedding bundle.
    Loss(LossArgs),
    /// Compare the alignment losses against InfoNCE on one similarity matrix.
    Audit(AuditArgs),
    /// Generate a synthetic text-attributed graph bundle.
    Synth(SynthArgs),
    /// Align a synthetic bundle by gradient descent.
    Train(TrainArgs),
    /// Finite-difference check of the loss gradients on a bundle.
    Gradcheck(GradcheckArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Nystrom,
    ExactWhenFullRank,
}

impl From<Method> for FactorMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Nystrom => FactorMethod::Nystrom,
            Method::ExactWhenFullRank => FactorMethod::ExactWhenFullRank,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct OtFlags {
    /// Entropic regularization.
    #[arg(long, default_value_t = tagalign::transport::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Maximum Sinkhorn iterations.
    #[arg(long, default_value_t = tagalign::transport::DEFAULT_MAX_ITERS)]
    iters: usize,
    /// Marginal L1 tolerance.
    #[arg(long, default_value_t = tagalign::transport::DEFAULT_TOL)]
    tol: f64,
    /// Kernel factorization rank; the dense solver runs when omitted.
    #[arg(long)]
    rank: Option<usize>,
    /// Factorization method for the low-rank path.
    #[arg(long, value_enum, default_value_t = Method::ExactWhenFullRank)]
    method: Method,
}

impl OtFlags {
    fn config(&self, seed: u64) -> OtConfig {
        OtConfig {
            epsilon: self.epsilon,
            max_iters: self.iters,
            tol: self.tol,
            rank: self.rank,
            method: self.method.into(),
            seed,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct LossFlags {
    /// Temperature.
    #[arg(long, default_value_t = tagalign::losses::DEFAULT_TAU)]
    tau: f64,
    /// Weight of the two alignment losses in the total.
    #[arg(long, default_value_t = tagalign::losses::DEFAULT_LAMBDA)]
    lambda: f64,
    /// Weight of the RSM similarity in the merge.
    #[arg(long, default_value_t = tagalign::similarity::DEFAULT_ALPHA)]
    alpha: f64,
    /// RSM smoothing.
    #[arg(long, default_value_t = tagalign::similarity::DEFAULT_BETA)]
    beta: f64,
    /// Retained negatives per row [default: min(N, 256)].
    #[arg(long)]
    neg_count: Option<usize>,
    /// Prompt value as a percentile of the similarity entries.
    #[arg(long, default_value_t = tagalign::similarity::DEFAULT_PROMPT_PERCENTILE)]
    prompt_percentile: f64,
    /// Explicit prompt value; overrides --prompt-percentile.
    #[arg(long)]
    prompt_value: Option<f64>,
    #[command(flatten)]
    ot: OtFlags,
}

impl LossFlags {
    fn config(&self, seed: u64) -> LossConfig {
        LossConfig {
            tau: self.tau,
            neg_count: self.neg_count,
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
            prompt: prompt_rule(self.prompt_value, self.prompt_percentile),
            ot: self.ot.config(seed),
        }
    }
}

fn prompt_rule(value: Option<f64>, percentile: f64) -> PromptRule {
    match value {
        Some(v) => PromptRule::Explicit(v),
        None => PromptRule::Percentile(percentile),
    }
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Edge list, one tab-separated pair per line.
    #[arg(long)]
    edges: PathBuf,
    /// Node labels, one per line.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Per-node token embeddings (JSON lines).
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Per-node sentence embeddings (CSV).
    #[arg(long)]
    sentences: Option<PathBuf>,
    /// Node count; inferred from the largest id when omitted.
    #[arg(long)]
    num_nodes: Option<usize>,
    /// Cosine threshold for unconnected text similarity.
    #[arg(long, default_value_t = tagalign::metrics::DEFAULT_UTS_THRESHOLD)]
    uts_threshold: f64,
    /// Graphs up to this many nodes enumerate all non-edges.
    #[arg(long, default_value_t = tagalign::metrics::DEFAULT_PAIR_EXACT_THRESHOLD)]
    pair_exact_threshold: usize,
    /// Non-edges sampled above the exact threshold.
    #[arg(long, default_value_t = tagalign::metrics::DEFAULT_PAIR_SAMPLE_SIZE)]
    pair_sample_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SimKind {
    Rsm,
    Cosine,
    Merged,
}

#[derive(Args, Debug)]
struct SimArgs {
    /// Neighborhood embedding sets (JSON lines).
    #[arg(long)]
    neigh: PathBuf,
    /// Token embedding sets (JSON lines).
    #[arg(long)]
    tokens: PathBuf,
    /// Structural embeddings (CSV).
    #[arg(long = "struct")]
    structural: PathBuf,
    /// Textual embeddings (CSV).
    #[arg(long)]
    text: PathBuf,
    #[arg(long, value_enum, default_value_t = SimKind::Merged)]
    kind: SimKind,
    #[arg(long, default_value_t = tagalign::similarity::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = tagalign::similarity::DEFAULT_BETA)]
    beta: f64,
    /// Append the prompt row and column.
    #[arg(long)]
    augment: bool,
    #[arg(long, default_value_t = tagalign::similarity::DEFAULT_PROMPT_PERCENTILE)]
    prompt_percentile: f64,
    #[arg(long)]
    prompt_value: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output matrix; parameters go to the same path with a .json extension.
    #[arg(long, default_value = "matrix.csv")]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PlanFormat {
    Dense,
    Sparse,
}

#[derive(Args, Debug)]
struct OtArgs {
    /// Similarity matrix (CSV).
    #[arg(long)]
    matrix: PathBuf,
    #[command(flatten)]
    ot: OtFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dense matrix or "i,j,mass" triplets.
    #[arg(long, value_enum, default_value_t = PlanFormat::Dense)]
    format: PlanFormat,
    /// Smallest mass written in sparse format.
    #[arg(long, default_value_t = 1e-9)]
    mass_floor: f64,
    #[arg(long, default_value = "plan.csv")]
    out: PathBuf,
    #[arg(long, default_value = "report.json")]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct LossArgs {
    /// Bundle directory with struct.csv, text.csv, neigh.jsonl and tokens.jsonl.
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    loss: LossFlags,
    /// Node classification loss added to the total.
    #[arg(long)]
    l_nc: Option<f64>,
    /// Include per-row retained negative sets in the report.
    #[arg(long)]
    dump_negatives: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Similarity matrix (CSV).
    #[arg(long)]
    matrix: PathBuf,
    #[command(flatten)]
    loss: LossFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    nodes: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Same-class edge probability.
    #[arg(long, default_value_t = 0.2)]
    intra: f64,
    /// Cross-class edge probability.
    #[arg(long, default_value_t = 0.05)]
    inter: f64,
    /// Fraction of each token set drawn from other classes.
    #[arg(long, default_value_t = 0.3)]
    partial_mix: f64,
    /// Fraction of nodes with pure-noise text.
    #[arg(long, default_value_t = 0.1)]
    noise_frac: f64,
    /// Fraction of same-class edges deleted and recorded.
    #[arg(long, default_value_t = 0.3)]
    drop_frac: f64,
    /// Token noise scale.
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Synthetic bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value_t = tagalign::trainer::DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = tagalign::trainer::DEFAULT_LR)]
    lr: f64,
    /// Steps between transport plan refreshes.
    #[arg(long, default_value_t = tagalign::trainer::DEFAULT_REFRESH_EVERY)]
    refresh_every: usize,
    /// Steps between probe refits.
    #[arg(long, default_value_t = tagalign::trainer::DEFAULT_PROBE_EVERY)]
    probe_every: usize,
    #[command(flatten)]
    loss: LossFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for trace.json, struct.csv and text.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[command(flatten)]
    loss: LossFlags,
    /// Central difference step.
    #[arg(long, default_value_t = 1e-6)]
    h: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(report: &Report, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => report.write(p),
        None => {
            println!("{}", report.to_json()?);
            Ok(())
        }
    }
}

fn run_metrics(a: &MetricsArgs) -> Result<()> {
    let mut g = load_graph(&a.edges, a.num_nodes)?;
    if let Some(p) = &a.labels {
        let labels = load_labels(p, g.num_nodes())?;
        g = g.with_labels(labels)?;
    }
    let tokens = a.tokens.as_ref().map(load_ragged).transpose()?;
    let sentences = a
        .sentences
        .as_ref()
        .map(|p| load_matrix(p, Some(g.num_nodes())))
        .transpose()?;
    let inputs = MetricInputs {
        graph: &g,
        tokens: tokens.as_ref(),
        sentences: sentences.as_ref(),
        uts_threshold: a.uts_threshold,
        sampling: PairSampling {
            exact_threshold: a.pair_exact_threshold,
            sample_size: a.pair_sample_size,
            seed: a.seed,
        },
    };
    let m = metric_report(&inputs);

    let mut report = Report::new(a.seed);
    report
        .param("edges", &a.edges)
        .param("labels", &a.labels)
        .param("tokens", &a.tokens)
        .param("sentences", &a.sentences)
        .param("num_nodes", g.num_nodes())
        .param("uts_threshold", a.uts_threshold)
        .param("pair_exact_threshold", a.pair_exact_threshold)
        .param("pair_sample_size", a.pair_sample_size);
    let percent: serde_json::Map<String, serde_json::Value> = m
        .values()
        .iter()
        .filter_map(|(k, v)| v.map(|v| (k.to_string(), json!(100.0 * v))))
        .collect();
    report.result("metrics", &m).result("percent", percent);
    for (name, v) in m.values() {
        match v {
            Some(v) => eprintln!("{name:>6}  {v:.6}  {:>8.2}%", 100.0 * v),
            None => eprintln!("{name:>6}  absent ({})", m.absent.get(name).map_or("", String::as_str)),
        }
    }
    emit(&report, a.out.as_deref())
}

fn run_sim(a: &SimArgs) -> Result<()> {
    let s_struct = load_matrix(&a.structural, None)?;
    let s_text = load_matrix(&a.text, Some(s_struct.rows()))?;
    let cos = || global_cosine(&s_struct, &s_text);
    let rsm = || -> Result<SimilarityMatrix> {
        pairwise_rsm_similarity(&load_ragged(&a.neigh)?, &load_ragged(&a.tokens)?, a.beta)
    };
    let s = match a.kind {
        SimKind::Cosine => cos()?,
        SimKind::Rsm => rsm()?,
        SimKind::Merged => merge(&rsm()?, &cos()?, a.alpha)?,
    };
    let mut report = Report::new(a.seed);
    report
        .param("kind", format!("{:?}", a.kind).to_lowercase())
        .param("alpha", a.alpha)
        .param("beta", a.beta)
        .param("augment", a.augment);
    let values = if a.augment {
        let rule = prompt_rule(a.prompt_value, a.prompt_percentile);
        report.param("prompt", &rule);
        let aug = augment_with_prompt(&s, &rule)?;
        report.result("prompt_value", aug.prompt());
        aug.into_values()
    } else {
        s.values().clone()
    };
    write_matrix(&a.out, values.view())?;
    report.result("rows", values.nrows()).result("matrix", &a.out);
    report.write(a.out.with_extension("json"))
}

fn run_ot(a: &OtArgs) -> Result<()> {
    let sbar = load_raw_matrix(&a.matrix)?;
    let cfg = a.ot.config(a.seed);
    let sol = solve(&sbar, &cfg)?;
    let plan = sol.dense_plan();
    match a.format {
        PlanFormat::Dense => write_matrix(&a.out, plan.view())?,
        PlanFormat::Sparse => write_triplets(&a.out, &plan, a.mass_floor)?,
    }
    let mut report = Report::new(a.seed);
    report
        .param("matrix", &a.matrix)
        .param("ot", &cfg)
        .param("format", format!("{:?}", a.format).to_lowercase())
        .param("mass_floor", a.mass_floor)
        .result("iterations_run", sol.iterations_run)
        .result("row_error", sol.row_error)
        .result("col_error", sol.col_error)
        .result("converged", sol.converged)
        .result("objective", sol.objective(sbar.view()))
        .result("plan", &a.out);
    report.write(&a.report)
}

fn write_triplets(path: &Path, plan: &Array2<f64>, floor: f64) -> Result<()> {
    let mut out = String::from("i,j,mass\n");
    for ((i, j), &m) in plan.indexed_iter() {
        if m >= floor {
            out.push_str(&format!("{i},{j},{}\n", fmt_f64(m)));
        }
    }
    std::fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run_loss(a: &LossArgs) -> Result<()> {
    let b = Bundle::load(&a.bundle)?;
    let cfg = a.loss.config(a.seed);
    let (mut lr, _) = loss_report(&b, &cfg, a.l_nc)?;
    let negatives = std::mem::take(&mut lr.retained_negatives);
    let mut report = Report::new(a.seed);
    report
        .param("bundle", &a.bundle)
        .param("loss", &cfg)
        .param("neg_count", cfg.neg_count_for(b.n()))
        .param("dump_negatives", a.dump_negatives)
        .result("losses", &lr);
    if a.dump_negatives {
        report.result("retained_negatives", &negatives);
    }
    emit(&report, a.out.as_deref())
}

fn run_audit(a: &AuditArgs) -> Result<()> {
    let s = load_raw_matrix(&a.matrix)?;
    let cfg = a.loss.config(a.seed);
    let audit = proposition_audit(s.view(), &cfg)?;
    let mut report = Report::new(a.seed);
    report.param("matrix", &a.matrix).param("loss", &cfg).result("audit", &audit);
    emit(&report, a.out.as_deref())
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_nodes: a.nodes,
        num_classes: a.classes,
        dim: a.dim,
        intra_edge_prob: a.intra,
        inter_edge_prob: a.inter,
        partial_mix: a.partial_mix,
        complete_noise_frac: a.noise_frac,
        latent_drop_frac: a.drop_frac,
        noise_sigma: a.sigma,
        seed: a.seed,
    };
    let tag = generate(&cfg)?;
    tag.write(&a.out)?;
    let mut report = Report::new(a.seed);
    report
        .param("synth", &cfg)
        .result("num_edges", tag.graph.num_edges())
        .result("deleted_edges", tag.planted.deleted_edges.len())
        .result("noise_nodes", tag.planted.noise_nodes.len());
    emit(&report, None)
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let tag = SyntheticTag::load(&a.bundle)?;
    let cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        loss: a.loss.config(a.seed),
        split: tagalign::trainer::DEFAULT_SPLIT,
        refresh_every: a.refresh_every,
        probe_every: a.probe_every,
        seed: a.seed,
    };
    let trace = align(&tag, &cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    write_matrix(a.out.join("struct.csv"), trace.final_h_struct.view())?;
    write_matrix(a.out.join("text.csv"), trace.final_h_text.view())?;
    let mut report = Report::new(a.seed);
    report.param("bundle", &a.bundle).param("train", &cfg).result("trace", &trace);
    if let (Some(first), Some(last)) = (trace.losses.first(), trace.losses.last()) {
        eprintln!("l_total {:.6} -> {:.6}", first.l_total, last.l_total);
    }
    report.write(a.out.join("trace.json"))
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let b = Bundle::load(&a.bundle)?;
    let cfg = a.loss.config(a.seed);
    let fd = finite_difference_check(&b, &cfg, a.h, a.seed)?;
    let mut report = Report::new(a.seed);
    report.param("bundle", &a.bundle).param("loss", &cfg).param("h", a.h).result("gradcheck", &fd);
    emit(&report, a.out.as_deref())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Metrics(a) => run_metrics(a),
        Command::Sim(a) => run_sim(a),
        Command::Ot(a) => run_ot(a),
        Command::Loss(a) => run_loss(a),
        Command::Audit(a) => run_audit(a),
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("ERROR 1: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("ERROR {code}: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code as u8)
        }
    }
}
