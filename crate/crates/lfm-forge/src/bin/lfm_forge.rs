use std::fs;
use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lfm_forge::align::{ln_align_loss, preset, PreferenceTriple};
use lfm_forge::archsearch::{
    curriculum_order, default_reference, filter_budgets, hypervolume, pareto_front, rank_by_hvi,
    BudgetSpec, CandidatePoint, CurriculumMatrix,
};
use lfm_forge::backbone::{build_model, sample_token, Model, ModelConfig};
use lfm_forge::bench::run_bench;
use lfm_forge::distill::{dtk_loss, read_tkd1};
use lfm_forge::error::{Error, Result};
use lfm_forge::merge::{run_merge, MergeSpec};
use lfm_forge::retrieval::{
    distill_mse_loss, encode, maxsim_score, minmax_normalize, Role, ScoredCandidates,
    TokenEmbeddings,
};
use lfm_forge::tensor::{fd_gradient, max_rel_err, RngSeed, Tensor};
use lfm_forge::Checkpoint;

#[derive(Parser)]
#[command(name = "lfm-forge", about = "Hybrid conv/attention model toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure prefill and decode throughput at fixed prefix lengths.
    Bench(BenchArgs),
    /// Autoregressive generation from a prompt.
    Generate(GenerateArgs),
    /// Merge checkpoints per a merge spec file.
    Merge(MergeArgs),
    /// Evaluate a training loss on a data file.
    Loss(LossArgs),
    /// Budget filtering, Pareto fronts, and hypervolume ranking.
    Pareto(ParetoArgs),
    /// Order evaluation items easiest-first from binary outcomes.
    Curriculum(CurriculumArgs),
    /// Token-level retrieval encoding and MaxSim scoring.
    Retrieve(RetrieveArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// Model config JSON path.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to load; omitted = fresh seeded initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Prefix lengths to measure.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = vec![1024usize, 4096])]
    context_lengths: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    n_decode: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated token ids; with --text, raw bytes are the ids.
    #[arg(long)]
    prompt: String,
    /// Treat the prompt as text and tokenize byte-by-byte.
    #[arg(long)]
    text: bool,
    #[arg(long, default_value_t = 32)]
    n_tokens: usize,
    /// 0 = greedy.
    #[arg(long, default_value_t = 0.0)]
    temperature: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct MergeArgs {
    /// Merge spec JSON path.
    #[arg(long)]
    spec: PathBuf,
    /// Base checkpoint (required by all methods except soup).
    #[arg(long)]
    base: Option<PathBuf>,
    /// Fine-tuned input checkpoints.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum LossKind {
    Dtk,
    Align,
    Retrieval,
}

#[derive(Args)]
struct LossArgs {
    #[arg(value_enum)]
    kind: LossKind,
    /// dtk: TKD1 record file; align: preference JSONL; retrieval: scores JSON.
    #[arg(long)]
    data: PathBuf,
    /// dtk: LFT1 file holding a "student_logits" tensor of shape [L, vocab].
    #[arg(long)]
    student: Option<PathBuf>,
    /// Alignment preset: dpo_ln | apo_zero_ln | joint.
    #[arg(long, default_value = "dpo_ln")]
    preset: String,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Validate analytic gradients against central finite differences.
    #[arg(long)]
    check_grad: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ParetoArgs {
    #[command(subcommand)]
    action: ParetoAction,
}

#[derive(Subcommand)]
enum ParetoAction {
    /// Drop candidates that violate any budget.
    Filter {
        /// Candidate JSONL.
        #[arg(long)]
        data: PathBuf,
        /// Budget JSON.
        #[arg(long)]
        budget: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Non-dominated subset with its hypervolume.
    Front {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Rank pool candidates by hypervolume improvement over a front.
    Hvi {
        #[arg(long)]
        front: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct CurriculumArgs {
    /// JSON {"outcomes": [[0,1,...], ...]}.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(subcommand)]
    action: RetrieveAction,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum RoleArg {
    Query,
    Document,
}

#[derive(Subcommand)]
enum RetrieveAction {
    /// Encode token ids into unit-norm token embeddings.
    Encode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// LFT1 file holding a "projection" tensor [d_model, proj_dim].
        #[arg(long)]
        projection: PathBuf,
        /// Comma-separated token ids.
        #[arg(long)]
        tokens: String,
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Tensor name in the output store (documents: doc/<id>).
        #[arg(long)]
        name: String,
        /// Output LFT1 store; appended to if it exists.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// MaxSim-score a query against every doc/<id> tensor in a store.
    Score {
        /// LFT1 store holding the query tensor.
        #[arg(long)]
        query_store: PathBuf,
        /// Query tensor name.
        #[arg(long, default_value = "query")]
        query: String,
        /// LFT1 store of document embeddings.
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("LFM_FORGE_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Bench(args) => cmd_bench(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Merge(args) => cmd_merge(args),
        Command::Loss(args) => cmd_loss(args),
        Command::Pareto(args) => cmd_pareto(args),
        Command::Curriculum(args) => cmd_curriculum(args),
        Command::Retrieve(args) => cmd_retrieve(args),
    }
}

fn load_model(config: &PathBuf, checkpoint: &Option<PathBuf>, seed: u64) -> Result<Model> {
    let cfg = ModelConfig::from_json(&fs::read_to_string(config)?)?;
    match checkpoint {
        Some(path) => {
            let params = Checkpoint::load(path)?;
            Model::new(cfg, params)
        }
        None => {
            eprintln!("no checkpoint given; initializing from seed {}", seed);
            build_model(cfg, RngSeed(seed))
        }
    }
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let model = load_model(&args.config, &args.checkpoint, args.seed)?;
    let name = args
        .config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let report = run_bench(
        &model,
        &name,
        &args.context_lengths,
        args.n_decode,
        args.repeats,
        RngSeed(args.seed),
    )?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).unwrap());
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

fn parse_ids(spec: &str) -> Result<Vec<u32>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<u32>()
                .map_err(|_| Error::Parse(format!("bad token id {:?}", s)))
        })
        .collect()
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let model = load_model(&args.config, &args.checkpoint, args.seed)?;
    let prompt: Vec<u32> = if args.text {
        args.prompt.bytes().map(u32::from).collect()
    } else {
        parse_ids(&args.prompt)?
    };
    let (logits, mut state) = model.prefill(&prompt)?;
    let vocab = model.config().vocab_size;
    let mut rng = RngSeed(args.seed).rng();
    let mut out = Vec::with_capacity(args.n_tokens);
    let mut last = logits.data()[(prompt.len() - 1) * vocab..].to_vec();
    for _ in 0..args.n_tokens {
        let tok = sample_token(&last, args.temperature, &mut rng);
        out.push(tok);
        if out.len() == args.n_tokens {
            break;
        }
        last = model.decode_step(tok, &mut state)?.data().to_vec();
    }
    if args.json {
        println!("{}", serde_json::json!({ "schema_version": 1, "tokens": out }));
    } else {
        let ids: Vec<String> = out.iter().map(|t| t.to_string()).collect();
        println!("{}", ids.join(","));
    }
    Ok(())
}

fn cmd_merge(args: MergeArgs) -> Result<()> {
    let spec: MergeSpec = serde_json::from_str(&fs::read_to_string(&args.spec)?)
        .map_err(|e| Error::Parse(format!("merge spec: {}", e)))?;
    let base = args.base.as_ref().map(Checkpoint::load).transpose()?;
    let models: Vec<Checkpoint> = args
        .inputs
        .iter()
        .map(Checkpoint::load)
        .collect::<Result<_>>()?;
    let merged = run_merge(&spec, base.as_ref(), &models)?;
    merged.save(&args.output)?;
    eprintln!(
        "merged {} checkpoints ({:?}, seed {}) -> {} tensors",
        models.len(),
        spec.method,
        spec.seed,
        merged.len()
    );
    Ok(())
}

fn cmd_loss(args: LossArgs) -> Result<()> {
    match args.kind {
        LossKind::Dtk => loss_dtk(&args),
        LossKind::Align => loss_align(&args),
        LossKind::Retrieval => loss_retrieval(&args),
    }
}

fn loss_dtk(args: &LossArgs) -> Result<()> {
    let records = read_tkd1(fs::File::open(&args.data)?)?;
    let student_path = args
        .student
        .as_ref()
        .ok_or_else(|| Error::Input("dtk loss needs --student".into()))?;
    let store = Checkpoint::load(student_path)?;
    let logits = store.require("student_logits")?;
    let [l, vocab] = match *logits.shape() {
        [l, v] => [l, v],
        _ => return Err(Error::Dimension("student_logits must be [L, vocab]".into())),
    };
    if l != records.len() {
        return Err(Error::Input(format!(
            "{} records but {} logit rows",
            records.len(),
            l
        )));
    }
    let mut total = 0.0f64;
    let mut binary = 0.0f64;
    let mut conditional = 0.0f64;
    let mut worst_grad_err = 0.0f64;
    for (i, rec) in records.iter().enumerate() {
        let row = Tensor::from_vec(logits.data()[i * vocab..(i + 1) * vocab].to_vec());
        let (bd, grad) = dtk_loss(&row, rec, args.tau)?;
        total += bd.total;
        binary += bd.binary_term;
        conditional += bd.conditional_term;
        if args.check_grad {
            let rec = rec.clone();
            let tau = args.tau;
            let fd = fd_gradient(
                move |x: &Tensor| dtk_loss(x, &rec, tau).unwrap().0.total,
                &row,
                1e-2,
            )?;
            worst_grad_err = worst_grad_err.max(max_rel_err(grad.data(), fd.data()));
        }
    }
    let n = records.len() as f64;
    if args.json {
        println!(
            "{}",
            serde_json::json!({
                "schema_version": 1,
                "loss": total / n,
                "binary_term": binary / n,
                "conditional_term": conditional / n,
                "max_grad_rel_err": if args.check_grad { Some(worst_grad_err) } else { None },
            })
        );
    } else {
        println!("loss {:.6} (binary {:.6}, conditional {:.6})", total / n, binary / n, conditional / n);
        if args.check_grad {
            println!("max gradient relative error {:.3e}", worst_grad_err);
        }
    }
    Ok(())
}

fn read_triples(path: &PathBuf) -> Result<Vec<PreferenceTriple>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut triples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        #[derive(serde::Deserialize)]
        struct Rec {
            #[allow(dead_code)]
            #[serde(default)]
            prompt_len: usize,
            len_chosen: usize,
            len_rejected: usize,
            logp_policy_chosen: f64,
            logp_policy_rejected: f64,
            logp_ref_chosen: f64,
            logp_ref_rejected: f64,
        }
        let rec: Rec = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("line {}: {}", lineno + 1, e)))?;
        triples.push(PreferenceTriple {
            logp_policy_chosen: rec.logp_policy_chosen,
            logp_policy_rejected: rec.logp_policy_rejected,
            logp_ref_chosen: rec.logp_ref_chosen,
            logp_ref_rejected: rec.logp_ref_rejected,
            len_chosen: rec.len_chosen,
            len_rejected: rec.len_rejected,
        });
    }
    Ok(triples)
}

fn loss_align(args: &LossArgs) -> Result<()> {
    let triples = read_triples(&args.data)?;
    let config = preset(&args.preset)?;
    let (loss, grads) = ln_align_loss(&triples, &config)?;
    let mut worst = 0.0f64;
    if args.check_grad {
        // pack the four policy/reference log-probs of every triple into one
        // tensor and difference the whole batch at once
        let mut x = Vec::with_capacity(triples.len() * 4);
        for t in &triples {
            x.extend([
                t.logp_policy_chosen as f32,
                t.logp_policy_rejected as f32,
                t.logp_ref_chosen as f32,
                t.logp_ref_rejected as f32,
            ]);
        }
        let base = triples.clone();
        let cfg = config;
        let fd = fd_gradient(
            move |x: &Tensor| {
                let batch: Vec<PreferenceTriple> = base
                    .iter()
                    .enumerate()
                    .map(|(i, t)| PreferenceTriple {
                        logp_policy_chosen: x.data()[i * 4] as f64,
                        logp_policy_rejected: x.data()[i * 4 + 1] as f64,
                        logp_ref_chosen: x.data()[i * 4 + 2] as f64,
                        logp_ref_rejected: x.data()[i * 4 + 3] as f64,
                        ..*t
                    })
                    .collect();
                ln_align_loss(&batch, &cfg).unwrap().0
            },
            &Tensor::from_vec(x),
            1e-3,
        )?;
        let analytic: Vec<f32> = grads
            .iter()
            .flat_map(|g| {
                [
                    g.d_logp_policy_chosen as f32,
                    g.d_logp_policy_rejected as f32,
                    g.d_logp_ref_chosen as f32,
                    g.d_logp_ref_rejected as f32,
                ]
            })
            .collect();
        worst = max_rel_err(&analytic, fd.data());
    }
    if args.json {
        println!(
            "{}",
            serde_json::json!({
                "schema_version": 1,
                "preset": args.preset,
                "loss": loss,
                "max_grad_rel_err": if args.check_grad { Some(worst) } else { None },
            })
        );
    } else {
        println!("loss {:.6} ({})", loss, args.preset);
        if args.check_grad {
            println!("max gradient relative error {:.3e}", worst);
        }
    }
    Ok(())
}

fn loss_retrieval(args: &LossArgs) -> Result<()> {
    #[derive(serde::Deserialize)]
    struct Scores {
        teacher_scores: Vec<f64>,
        student_scores: Vec<f64>,
    }
    let scores: Scores = serde_json::from_str(&fs::read_to_string(&args.data)?)
        .map_err(|e| Error::Parse(format!("scores file: {}", e)))?;
    let cands = ScoredCandidates {
        teacher_scores: minmax_normalize(&scores.teacher_scores)?,
        student_scores: scores.student_scores,
    };
    let (loss, grad) = distill_mse_loss(&cands)?;
    let mut worst = 0.0f64;
    if args.check_grad {
        let teacher = cands.teacher_scores.clone();
        let fd = fd_gradient(
            move |x: &Tensor| {
                let c = ScoredCandidates {
                    teacher_scores: teacher.clone(),
                    student_scores: x.data().iter().map(|v| *v as f64).collect(),
                };
                distill_mse_loss(&c).unwrap().0
            },
            &Tensor::from_vec(cands.student_scores.iter().map(|v| *v as f32).collect()),
            1e-3,
        )?;
        let analytic: Vec<f32> = grad.iter().map(|g| *g as f32).collect();
        worst = max_rel_err(&analytic, fd.data());
    }
    if args.json {
        println!(
            "{}",
            serde_json::json!({
                "schema_version": 1,
                "loss": loss,
                "max_grad_rel_err": if args.check_grad { Some(worst) } else { None },
            })
        );
    } else {
        println!("loss {:.6}", loss);
        if args.check_grad {
            println!("max gradient relative error {:.3e}", worst);
        }
    }
    Ok(())
}

fn read_candidates(path: &PathBuf) -> Result<Vec<CandidatePoint>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: CandidatePoint = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("line {}: {}", lineno + 1, e)))?;
        c.validate()?;
        out.push(c);
    }
    Ok(out)
}

fn print_candidates(cands: &[CandidatePoint], json: bool) {
    if json {
        for c in cands {
            println!("{}", serde_json::to_string(c).unwrap());
        }
    } else {
        for c in cands {
            println!(
                "{}\tquality {:.4}\tp50 {:.2} ms\tmem {:.0}",
                c.id, c.quality, c.decode_ms_p50, c.peak_mem_bytes
            );
        }
    }
}

fn cmd_pareto(args: ParetoArgs) -> Result<()> {
    match args.action {
        ParetoAction::Filter { data, budget, json } => {
            let cands = read_candidates(&data)?;
            let budget: BudgetSpec = serde_json::from_str(&fs::read_to_string(&budget)?)
                .map_err(|e| Error::Parse(format!("budget file: {}", e)))?;
            let kept = filter_budgets(&cands, &budget);
            eprintln!("kept {} of {} candidates", kept.len(), cands.len());
            print_candidates(&kept, json);
        }
        ParetoAction::Front { data, json } => {
            let cands = read_candidates(&data)?;
            let front = pareto_front(&cands);
            let reference = default_reference(&cands)?;
            let hv = hypervolume(&front, reference)?;
            eprintln!("front size {} of {}, hypervolume {:.6e}", front.len(), cands.len(), hv);
            print_candidates(&front, json);
        }
        ParetoAction::Hvi { front, pool, json } => {
            let front = read_candidates(&front)?;
            let pool = read_candidates(&pool)?;
            let mut all = front.clone();
            all.extend(pool.iter().cloned());
            let reference = default_reference(&all)?;
            let front = pareto_front(&front);
            let ranked = rank_by_hvi(&front, &pool, reference)?;
            for (c, hvi) in &ranked {
                if json {
                    println!(
                        "{}",
                        serde_json::json!({ "id": c.id, "hvi": hvi })
                    );
                } else {
                    println!("{}\thvi {:.6e}", c.id, hvi);
                }
            }
        }
    }
    Ok(())
}

fn cmd_curriculum(args: CurriculumArgs) -> Result<()> {
    let matrix: CurriculumMatrix = serde_json::from_str(&fs::read_to_string(&args.data)?)
        .map_err(|e| Error::Parse(format!("outcome matrix: {}", e)))?;
    let (p, order) = curriculum_order(&matrix)?;
    if args.json {
        println!(
            "{}",
            serde_json::json!({ "schema_version": 1, "success_rates": p, "order": order })
        );
    } else {
        for &i in &order {
            println!("{}\tp={:.4}", i, p[i]);
        }
    }
    Ok(())
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<()> {
    match args.action {
        RetrieveAction::Encode {
            config,
            checkpoint,
            projection,
            tokens,
            role,
            name,
            output,
            seed,
        } => {
            let model = load_model(&config, &checkpoint, seed)?;
            let proj_store = Checkpoint::load(&projection)?;
            let proj = proj_store.require("projection")?;
            let ids = parse_ids(&tokens)?;
            let role = match role {
                RoleArg::Query => Role::Query,
                RoleArg::Document => Role::Document,
            };
            let emb = encode(&model, proj, &ids, role)?;
            if emb.truncated {
                eprintln!("input truncated to {} tokens", emb.n_tokens());
            }
            let mut store = if output.exists() {
                Checkpoint::load(&output)?
            } else {
                Checkpoint::new()
            };
            store.insert(&name, emb.vectors.clone());
            store.save(&output)?;
            eprintln!("wrote {} ({} tokens) to {}", name, emb.n_tokens(), output.display());
        }
        RetrieveAction::Score {
            query_store,
            query,
            docs,
            json,
        } => {
            let qs = Checkpoint::load(&query_store)?;
            let q = TokenEmbeddings::new(qs.require(&query)?.clone(), Role::Query)?;
            let store = Checkpoint::load(&docs)?;
            let mut scored: Vec<(String, f64)> = Vec::new();
            for (name, t) in store.iter() {
                let Some(id) = name.strip_prefix("doc/") else {
                    continue;
                };
                let d = TokenEmbeddings::new(t.clone(), Role::Document)?;
                scored.push((id.to_string(), maxsim_score(&q, &d)?));
            }
            if scored.is_empty() {
                return Err(Error::Input("no doc/<id> tensors in the store".into()));
            }
            scored.sort_by(|(ia, a), (ib, b)| b.partial_cmp(a).unwrap().then(ia.cmp(ib)));
            for (id, score) in &scored {
                if json {
                    println!("{}", serde_json::json!({ "id": id, "score": score }));
                } else {
                    println!("{}\t{:.6}", id, score);
                }
            }
        }
    }
    Ok(())
}
