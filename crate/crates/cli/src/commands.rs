//! Command implementations. Each one resolves its settings from flags and
//! the optional config file, runs the library pipeline, and writes data to
//! stdout or `--out` with progress on stderr.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context};
use serde::Serialize;

use cof_core::cof::{self, CofScorer, HistoryWindow};
use cof_core::eval::{
    self, baseline_item_knn, baseline_popularity, baseline_user_knn, EvalReport, EvalSetup,
    EvalUser, GridOutcome, GridSpec, Scorer,
};
use cof_core::hlta::{self, HierarchyConfig};
use cof_core::ingest::{self, binarize, EventLog, InputFormat};
use cof_core::ltm::LatentTreeModel;

use crate::config::{pick, require, RunConfig};
use crate::{
    BoundArgs, EvaluateArgs, FormatArgs, HierarchyArgs, InspectArgs, Method, RecommendArgs,
    SplitArgs, TrainArgs,
};

fn input_format(args: &FormatArgs, config: &RunConfig) -> anyhow::Result<InputFormat> {
    let delimiter = pick(
        args.delimiter.clone(),
        config.delimiter.clone(),
        "\t".to_string(),
    );
    let columns = pick(
        args.columns.clone(),
        config.columns.clone(),
        "user,item,timestamp".to_string(),
    );
    Ok(InputFormat::new(&delimiter, &columns)?)
}

fn load_log(path: &Path, format: &InputFormat) -> anyhow::Result<EventLog> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    ingest::parse_events(BufReader::new(file), format)
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_log(log: &EventLog, format: &InputFormat, path: &Path) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    ingest::write_events(log, format, &mut w)?;
    w.flush()?;
    Ok(())
}

fn out_writer(path: Option<&PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        None => Box::new(std::io::stdout().lock()),
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
    })
}

fn hierarchy_config(
    args: &HierarchyArgs,
    config: &RunConfig,
    seed: u64,
) -> HierarchyConfig {
    let defaults = HierarchyConfig::default();
    HierarchyConfig {
        max_cluster_size: pick(
            args.max_cluster_size,
            config.max_cluster_size,
            defaults.max_cluster_size,
        ),
        top_level_max: pick(args.top_level_max, config.top_level_max, defaults.top_level_max),
        em_restarts: pick(args.em_restarts, config.em_restarts, defaults.em_restarts),
        em_tol: pick(args.em_tol, config.em_tol, defaults.em_tol),
        em_max_iters: pick(args.em_max_iters, config.em_max_iters, defaults.em_max_iters),
        seed,
    }
}

fn parse_window(text: &str) -> anyhow::Result<HistoryWindow> {
    HistoryWindow::from_str(text).map_err(|e| anyhow::anyhow!(e))
}

fn merge_logs(a: &EventLog, b: &EventLog) -> EventLog {
    let mut events = a.events().to_vec();
    events.extend(b.events().iter().cloned());
    EventLog::from_events(events)
}

pub fn split(args: SplitArgs, config: &RunConfig) -> anyhow::Result<()> {
    let format = input_format(&args.format, config)?;
    let input = require(args.input, config.input.clone(), "input")?;
    let out_dir = require(args.out_dir, config.out_dir.clone(), "out-dir")?;
    let fractions = match pick(
        args.fractions,
        config.fractions.map(|f| f.to_vec()),
        vec![0.7, 0.15, 0.15],
    )
    .as_slice()
    {
        &[t, v, s] => (t, v, s),
        other => bail!("--fractions needs exactly 3 values, got {}", other.len()),
    };

    let mut log = load_log(&input, &format)?;
    eprintln!("parsed {} events, {} users, {} items", log.len(), log.users().len(), log.items().len());

    let min_user = pick(args.min_user_events, config.min_user_events, 0);
    let min_item = pick(args.min_item_events, config.min_item_events, 0);
    if min_user > 0 || min_item > 0 {
        log = ingest::core_filter(&log, min_user, min_item);
        eprintln!(
            "core filter (>= {min_user} user events, >= {min_item} item events): {} events, {} users, {} items",
            log.len(),
            log.users().len(),
            log.items().len()
        );
    }

    let (train, valid, test) = ingest::split_by_time(&log, fractions)?;
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    for (name, part) in [("train.tsv", &train), ("valid.tsv", &valid), ("test.tsv", &test)] {
        write_log(part, &format, &out_dir.join(name))?;
        eprintln!(
            "{name}: {} events, {} users, {} items, sparsity {:.3}%",
            part.len(),
            part.users().len(),
            part.items().len(),
            100.0 * binarize(part).sparsity()
        );
    }
    Ok(())
}

pub fn train(args: TrainArgs, config: &RunConfig, seed: u64) -> anyhow::Result<()> {
    let format = input_format(&args.format, config)?;
    let input = require(args.input, config.input.clone(), "input")?;
    let model_path = require(args.model, config.model.clone(), "model")?;
    let cfg = hierarchy_config(&args.hierarchy, config, seed);

    let log = load_log(&input, &format)?;
    let matrix = binarize(&log);
    eprintln!(
        "training on {} users x {} items ({} interactions, sparsity {:.3}%)",
        matrix.rows(),
        matrix.cols(),
        matrix.nnz(),
        100.0 * matrix.sparsity()
    );
    let started = Instant::now();
    let model = hlta::build_hierarchy(&matrix, log.items(), &cfg)?;
    let per_level: Vec<String> = (1..=model.max_level())
        .map(|l| format!("level {l}: {}", model.latents_at(l).map(|v| v.len()).unwrap_or(0)))
        .collect();
    eprintln!(
        "hierarchy with {} variables ({}) in {:?}",
        model.var_count(),
        per_level.join(", "),
        started.elapsed()
    );

    std::fs::write(&model_path, model.to_json())
        .with_context(|| format!("writing {}", model_path.display()))?;
    eprintln!("model written to {}", model_path.display());

    let report_path = args.report.or_else(|| config.report.clone());
    if let Some(path) = report_path {
        let rows = hlta::hierarchy_report(&model)?;
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        for r in rows {
            writeln!(
                w,
                "{}\t{}\t{}\t{:.6}\t{:.6}",
                r.latent, r.level, r.child, r.p1_given_s1, r.p1_given_s0
            )?;
        }
        w.flush()?;
        eprintln!("hierarchy report written to {}", path.display());
    }
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<LatentTreeModel> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(LatentTreeModel::from_json(&text)?)
}

pub fn inspect(args: InspectArgs, config: &RunConfig) -> anyhow::Result<()> {
    let model_path = require(args.model, config.model.clone(), "model")?;
    let model = load_model(&model_path)?;
    let idx = match model.var_by_id(&args.latent) {
        Some(idx) => idx,
        None => {
            let mut available: Vec<&str> = model
                .vars()
                .iter()
                .filter(|v| !v.is_leaf())
                .map(|v| v.id.as_str())
                .collect();
            available.sort();
            bail!(
                "unknown latent {:?}; available: {}",
                args.latent,
                available.join(", ")
            );
        }
    };
    if model.var(idx).is_leaf() {
        bail!("{:?} is an observed leaf, not a taste group", args.latent);
    }
    let rows = hlta::hierarchy_report(&model)?;
    let mine: Vec<_> = rows.into_iter().filter(|r| r.latent == args.latent).collect();
    let marginal = mine.first().map(|r| r.marginal_p1).unwrap_or(0.0);
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "{} (level {})  P(s1) = {:.3}  P(s0) = {:.3}",
        args.latent,
        model.var(idx).level,
        marginal,
        1.0 - marginal
    )?;
    writeln!(out, "{:<24} {:>12} {:>12}", "child", "P(=1 | s1)", "P(=1 | s0)")?;
    for r in mine {
        writeln!(out, "{:<24} {:>12.3} {:>12.3}", r.child, r.p1_given_s1, r.p1_given_s0)?;
    }
    Ok(())
}

pub fn recommend(args: RecommendArgs, config: &RunConfig) -> anyhow::Result<()> {
    let format = input_format(&args.format, config)?;
    let model_path = require(args.model, config.model.clone(), "model")?;
    let train_path = require(args.train, config.input.clone(), "train")?;
    let level = pick(args.level, config.level, 1);
    let window = parse_window(&pick(args.history, config.history.clone(), "full".into()))?;
    let top = pick(args.top, None, 10);
    if !args.all && args.user.is_none() {
        bail!("pass --user <id> or --all");
    }

    let model = load_model(&model_path)?;
    let train = load_log(&train_path, &format)?;
    let scorer = CofScorer::new(&model, &train, level, window)?;
    let items = model.items();
    let train_items = train.items_by_user();
    // Training item indices in the log map 1:1 onto model leaf columns only
    // when vocabularies agree, so translate explicitly.
    let to_cols = |log_items: &[u32]| -> anyhow::Result<Vec<u32>> {
        log_items
            .iter()
            .map(|&i| {
                model
                    .item_column(&train.items()[i as usize])
                    .ok_or_else(|| anyhow::anyhow!("item {:?} not in model", train.items()[i as usize]))
            })
            .collect()
    };

    let users: Vec<String> = if args.all {
        train.users().to_vec()
    } else {
        vec![args.user.unwrap()]
    };

    let mut out = out_writer(args.out.as_ref())?;
    for user in users {
        let (scores, consumed) = match train.user_idx(&user) {
            Some(u) => {
                let cols = to_cols(&train_items[u as usize])?;
                let eval_user = EvalUser {
                    user: user.clone(),
                    train_items: cols.clone(),
                    relevant: Vec::new(),
                };
                (scorer.score(&eval_user), cols)
            }
            None => {
                eprintln!("user {user:?} not in training data; using prior memberships");
                let vector = cof::user_vector(&model, level, &[])?;
                (cof::score_all(&vector, scorer.profiles())?, Vec::new())
            }
        };
        for (rank, entry) in cof::recommend(&scores, &consumed, top)?.iter().enumerate() {
            writeln!(
                out,
                "{user}\t{}\t{}\t{:.6}",
                items[entry.item as usize],
                rank + 1,
                entry.score
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluateDoc {
    #[serde(flatten)]
    report: EvalReport,
    level: Option<u32>,
    history: Option<String>,
    k: Option<usize>,
    retrained: bool,
    eval_split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<GridOutcome>,
}

pub fn evaluate(args: EvaluateArgs, config: &RunConfig, seed: u64) -> anyhow::Result<()> {
    let format = input_format(&args.format, config)?;
    let train_path = require(args.train, config.input.clone(), "train")?;
    let train = load_log(&train_path, &format)?;
    let valid = args
        .valid
        .as_ref()
        .map(|p| load_log(p, &format))
        .transpose()?;
    let test = args
        .test
        .as_ref()
        .map(|p| load_log(p, &format))
        .transpose()?;
    if test.is_none() && valid.is_none() {
        bail!("pass --valid and/or --test to have something to evaluate on");
    }
    let tops = pick(args.top, config.top.clone(), vec![5, 10, 20]);
    let level_flag = pick(args.level, config.level, 1);
    let window_flag = parse_window(&pick(args.history, config.history.clone(), "full".into()))?;
    let k = pick(args.k, config.k, 100);
    let hier = hierarchy_config(&args.hierarchy, config, seed);
    let eval_on_test = test.is_some();
    let retrain = args.retrain && eval_on_test;
    if args.retrain && valid.is_none() {
        bail!("--retrain needs --valid");
    }

    // cof: model for grid search / no-retrain evaluation.
    let phase_model = if args.method == Method::Cof {
        Some(match &args.model {
            Some(p) => load_model(p)?,
            None => {
                eprintln!("building hierarchy on the train split...");
                hlta::build_hierarchy(&binarize(&train), train.items(), &hier)?
            }
        })
    } else {
        None
    };

    // Grid search over (level, H) on validation.
    let mut grid_outcome = None;
    let (mut level, mut window) = (level_flag, window_flag);
    if args.grid_h.is_some() || args.grid_l.is_some() {
        if args.method != Method::Cof {
            bail!("--grid-H/--grid-l only apply to --method cof");
        }
        let valid = valid
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("grid search needs --valid"))?;
        let model = phase_model.as_ref().unwrap();
        let windows = match &args.grid_h {
            Some(texts) => texts
                .iter()
                .map(|t| parse_window(t))
                .collect::<anyhow::Result<Vec<_>>>()?,
            None => vec![window_flag],
        };
        let levels = match &args.grid_l {
            Some(ls) => ls.clone(),
            None => vec![level_flag],
        };
        let outcome = eval::grid_search(model, &train, valid, &GridSpec { levels, windows })?;
        eprintln!(
            "grid search picked level {} with H = {} (Recall@10 on validation)",
            outcome.best_level, outcome.best_window
        );
        for p in &outcome.points {
            eprintln!("  l={} H={:>4}: recall@10 = {:.4}", p.level, p.window, p.recall10);
        }
        level = outcome.best_level;
        window = outcome.best_window;
        if let Some(prefix) = &args.emit_curves {
            emit_curves(prefix, &outcome)?;
        }
        grid_outcome = Some(outcome);
    }

    // The data the final recommender is built from.
    let d_log = if retrain {
        merge_logs(&train, valid.as_ref().unwrap())
    } else {
        train.clone()
    };
    let eval_split = if eval_on_test { "test" } else { "valid" };
    let held_out = test.as_ref().or(valid.as_ref()).unwrap();
    let setup: EvalSetup = eval::eval_setup(&d_log, held_out);
    eprintln!(
        "evaluating on {eval_split}: {} users evaluable, {} skipped",
        setup.users.len(),
        setup.skipped_users
    );

    let matrix = binarize(&d_log);
    let report = match args.method {
        Method::Cof => {
            let model = if retrain {
                eprintln!("retraining hierarchy on train+validation...");
                hlta::build_hierarchy(&matrix, d_log.items(), &hier)?
            } else {
                phase_model.unwrap()
            };
            let scorer = CofScorer::new(&model, &d_log, level, window)?;
            eval::evaluate(&scorer, &setup, &tops)?
        }
        Method::Pop => eval::evaluate(&baseline_popularity(&matrix), &setup, &tops)?,
        Method::Uknn => {
            let scorer = baseline_user_knn(&matrix, d_log.users(), k);
            eval::evaluate(&scorer, &setup, &tops)?
        }
        Method::Iknn => eval::evaluate(&baseline_item_knn(&matrix, k), &setup, &tops)?,
    };

    print_table(&report);
    let doc = EvaluateDoc {
        level: (args.method == Method::Cof).then_some(level),
        history: (args.method == Method::Cof).then(|| window.to_string()),
        k: matches!(args.method, Method::Uknn | Method::Iknn).then_some(k),
        retrained: retrain,
        eval_split: eval_split.to_string(),
        grid: grid_outcome,
        report,
    };
    let mut out = out_writer(args.out.as_ref())?;
    writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
    out.flush()?;
    Ok(())
}

fn print_table(report: &EvalReport) {
    let mut header = format!("{:<20}", "method");
    let mut row = format!("{:<20}", report.method);
    for (r, v) in &report.recall_at {
        header.push_str(&format!(" {:>10}", format!("Recall@{r}")));
        row.push_str(&format!(" {:>10.5}", v));
    }
    header.push_str(&format!(" {:>8}", "NDCG"));
    row.push_str(&format!(" {:>8.5}", report.ndcg));
    for (r, v) in &report.diversity_at {
        header.push_str(&format!(" {:>7}", format!("Div@{r}")));
        row.push_str(&format!(" {:>7}", v));
    }
    header.push_str(&format!(" {:>7} {:>7}", "users", "skipped"));
    row.push_str(&format!(" {:>7} {:>7}", report.evaluated_users, report.skipped_users));
    eprintln!("{header}");
    eprintln!("{row}");
}

fn emit_curves(prefix: &Path, outcome: &GridOutcome) -> anyhow::Result<()> {
    let path_h = PathBuf::from(format!("{}_H.tsv", prefix.display()));
    let mut w = BufWriter::new(File::create(&path_h)?);
    for p in &outcome.points {
        if p.level == outcome.best_level {
            writeln!(w, "{}\t{:.6}", p.window, p.recall10)?;
        }
    }
    w.flush()?;
    let path_l = PathBuf::from(format!("{}_l.tsv", prefix.display()));
    let mut w = BufWriter::new(File::create(&path_l)?);
    for p in &outcome.points {
        if p.window == outcome.best_window {
            writeln!(w, "{}\t{:.6}", p.level, p.recall10)?;
        }
    }
    w.flush()?;
    eprintln!(
        "validation curves written to {} and {}",
        path_h.display(),
        path_l.display()
    );
    Ok(())
}

pub fn bound(args: BoundArgs, seed: u64) -> anyhow::Result<()> {
    let query = cof::CoverageQuery {
        items: args.items,
        picks: args.picks,
        coverage: args.coverage,
        confidence: args.confidence,
    };
    let m = cof::coverage_bound(&query)?;
    println!("{m}");
    if let Some(trials) = args.simulate {
        let group = args.group_size.unwrap_or(m);
        let sim = cof::coverage_simulate(
            args.items,
            args.picks,
            group,
            args.coverage,
            trials,
            seed,
        )?;
        println!(
            "empirical P(X >= {:.0}) = {:.4}  ({} trials, group size {})",
            args.coverage * args.items as f64,
            sim.success_rate,
            trials,
            group
        );
        println!(
            "mean distinct = {:.2} (sd {:.2}), analytic expectation = {:.2}",
            sim.mean_distinct, sim.std_distinct, sim.expected_distinct
        );
    }
    Ok(())
}
