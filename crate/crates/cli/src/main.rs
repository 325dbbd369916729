mod args;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::Parser;
use nalp::data::{binary_pct_for_ratio, derive_binary_subset, load_dataset, write_dataset, ArityCounts, Fact, Pair};
use nalp::eval::{analyze_case, evaluate, EvalOptions, TieMode};
use nalp::math::BnMode;
use nalp::model::{checkpoint, count_params_flops, Dims, Label, Model, Target};
use nalp::training::train_with;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use args::{
    AnalyzeCmd, Cli, Command, Echo, EvaluateCmd, FlopsCmd, GradCheckCmd, SubsetCmd, Task, Ties, TrainCmd,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Context chain down to the first library error, whose message already
/// carries its own source.
fn describe(e: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in e.chain() {
        parts.push(cause.to_string());
        if cause.is::<nalp::Error>() {
            break;
        }
    }
    parts.join(": ")
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use nalp::Error as E;
    match e.chain().find_map(|c| c.downcast_ref::<nalp::Error>()) {
        Some(E::Config(_) | E::InvalidInput(_)) => EXIT_USAGE,
        Some(E::Numerical(_)) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.workers)
            .build_global()
            .context("configuring worker pool")?;
    }
    match cli.command {
        Command::Train(cmd) => run_train(&cmd),
        Command::Evaluate(cmd) => run_evaluate(&cmd),
        Command::Analyze(cmd) => run_analyze(&cmd),
        Command::Subset(cmd) => run_subset(&cmd),
        Command::GradCheck(cmd) => run_grad_check(&cmd),
        Command::Flops(cmd) => run_flops(&cmd),
    }
}

fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(dir: &Path, echo: &Echo) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(dir, "config.txt", echo.render())
}

fn usage(msg: String) -> anyhow::Error {
    nalp::Error::Config(msg).into()
}

fn run_train(cmd: &TrainCmd) -> Result<()> {
    let cfg = cmd.config();
    cfg.validate()?;
    let mut echo = Echo::default();
    cmd.echo(&mut echo);

    let (vocab, splits) = load_dataset(&cmd.data.dataset, cmd.data.format)?;
    cfg.dims(&vocab).validate(&cfg.model)?;
    prepare_out(&cmd.out, &echo)?;
    log::info!(
        "|R|={} |V|={} train={} valid={} test={}",
        vocab.n_roles(),
        vocab.n_values(),
        splits.train.len(),
        splits.valid.len(),
        splits.test.len()
    );

    let outcome = train_with(&splits, &vocab, &cfg, |e| match &e.probe {
        Some(p) => log::info!(
            "epoch {} loss {:.6} probe MRR {:.4} Hits@1 {:.4} Hits@10 {:.4}",
            e.epoch,
            e.mean_loss,
            p.mrr,
            p.hits1,
            p.hits10
        ),
        None => log::info!("epoch {} loss {:.6}", e.epoch, e.mean_loss),
    })?;
    checkpoint::save(&cmd.out.join("model.ckpt"), &outcome.model, &vocab)?;
    write_file(&cmd.out, "train.log", outcome.log.to_tsv())?;

    match &outcome.best_probe {
        Some(p) => println!("best epoch {}: probe MRR {:.4}", outcome.best_epoch, p.mrr),
        None => println!("trained {} epochs (no probe)", outcome.best_epoch),
    }
    println!("checkpoint written to {}", cmd.out.join("model.ckpt").display());
    Ok(())
}

fn load_checked(checkpoint_path: &Path, data: &args::DataArgs) -> Result<(Model, nalp::data::Vocabulary, nalp::data::DatasetSplits)> {
    let (model, stored) = checkpoint::load(checkpoint_path)?;
    let (vocab, splits) = load_dataset(&data.dataset, data.format)?;
    checkpoint::check_vocabulary(&stored, &vocab)?;
    Ok((model, vocab, splits))
}

fn run_evaluate(cmd: &EvaluateCmd) -> Result<()> {
    let mut echo = Echo::default();
    cmd.echo(&mut echo);
    let (model, _, splits) = load_checked(&cmd.checkpoint, &cmd.data)?;
    let tasks: &[Target] = match cmd.task {
        Task::Role => &[Target::Role],
        Task::Value => &[Target::Value],
        Task::Both => &[Target::Role, Target::Value],
    };
    let opts = EvalOptions {
        filtered: !cmd.raw,
        tie: match cmd.ties {
            Ties::Optimistic => TieMode::Optimistic,
            Ties::Pessimistic => TieMode::Pessimistic,
        },
    };
    let report = evaluate(splits.split(cmd.split), &model, &splits, tasks, opts)?;
    prepare_out(&cmd.out, &echo)?;
    write_file(&cmd.out, "report.tsv", report.to_tsv())?;
    let table = report.to_table();
    write_file(&cmd.out, "report.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn run_analyze(cmd: &AnalyzeCmd) -> Result<()> {
    let mut echo = Echo::default();
    cmd.echo(&mut echo);
    let (model, vocab, splits) = load_checked(&cmd.checkpoint, &cmd.data)?;
    let facts = splits.split(cmd.split);
    let fact = facts.get(cmd.fact).ok_or_else(|| {
        usage(format!(
            "fact index {} out of range for {} split of {} facts",
            cmd.fact,
            cmd.split.name(),
            facts.len()
        ))
    })?;
    let entries = analyze_case(fact, cmd.position, &model, &vocab, cmd.top)?;

    let mut out = String::from("token\td\tscore\n");
    for e in &entries {
        writeln!(out, "{}\t{}\t{:.6}", e.token, e.distinguishability, e.score)?;
    }
    prepare_out(&cmd.out, &echo)?;
    write_file(&cmd.out, "analysis.tsv", &out)?;

    let shown: Vec<String> = vocab
        .decode(fact)
        .iter()
        .map(|(r, v)| format!("{r}:{v}"))
        .collect();
    println!("fact: {}", shown.join(" "));
    println!("replaced position {} ({})", cmd.position, vocab.value_name(fact.pairs()[cmd.position].value));
    print!("{out}");
    Ok(())
}

fn run_subset(cmd: &SubsetCmd) -> Result<()> {
    let (vocab, splits) = load_dataset(&cmd.data.dataset, cmd.data.format)?;
    let keep_pct = match (cmd.keep_pct, cmd.ratio) {
        (Some(p), _) => p,
        (None, Some((b, n))) => binary_pct_for_ratio(ArityCounts::of(&splits.train), b, n),
        (None, None) => bail!(usage("one of --keep-pct or --ratio is required".into())),
    };
    let subset = derive_binary_subset(&splits, keep_pct, cmd.seed)?;
    let mut echo = Echo::default();
    cmd.echo(&mut echo, keep_pct);
    prepare_out(&cmd.out, &echo)?;
    write_dataset(&cmd.out, cmd.data.format, &vocab, &subset)?;
    for split in nalp::data::Split::ALL {
        let before = ArityCounts::of(splits.split(split));
        let after = ArityCounts::of(subset.split(split));
        println!(
            "{}: binary {} -> {}, n-ary {}",
            split.name(),
            before.binary,
            after.binary,
            after.nary
        );
    }
    Ok(())
}

fn random_fact(rng: &mut impl Rng, n_roles: usize, n_values: usize, arity: usize) -> Result<Fact> {
    Ok(Fact::new(
        (0..arity)
            .map(|_| Pair::new(rng.random_range(0..n_roles), rng.random_range(0..n_values)))
            .collect(),
    )?)
}

fn run_grad_check(cmd: &GradCheckCmd) -> Result<()> {
    if !(cmd.step > 0.0 && cmd.tol > 0.0) {
        bail!(usage("--step and --tol must be positive".into()));
    }
    let dims = Dims {
        n_roles: cmd.roles,
        n_values: cmd.values,
        k: cmd.k,
        n_filters: cmd.n_filters,
        n_gfcn: cmd.n_gfcn,
        k_type: cmd.k_type,
        n_tfcn: cmd.n_tfcn,
    };
    let mut model = Model::zeros(dims, cmd.config())?;

    // Uniform weights and shifted running statistics keep most ReLUs and
    // pair selections away from the kinks, unlike a fresh initialization.
    let mut rng = ChaCha8Rng::seed_from_u64(cmd.seed);
    for (_, t) in model.tensors_mut() {
        for v in t.value.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let bn = &mut model.nalp.bn;
    for c in 0..bn.channels() {
        bn.running_mean[c] = rng.random_range(-0.5..0.5);
        bn.running_var[c] = rng.random_range(0.5..2.0);
    }
    let mut batch = Vec::new();
    for (arity, label) in [(2, Label::Positive), (4, Label::Positive), (2, Label::Negative), (4, Label::Negative)] {
        batch.push((random_fact(&mut rng, cmd.roles, cmd.values, arity)?, label));
    }

    let mut out = String::from("bn_mode\ttensor\tentries\tflagged\tmax_rel_error\n");
    let mut worst = 0.0f64;
    let mut flagged = 0;
    for bn_mode in [BnMode::Train, BnMode::Eval] {
        let report = model.gradient_check(&batch, bn_mode, cmd.step, cmd.tol)?;
        for t in &report.tensors {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.3e}",
                format!("{bn_mode:?}").to_lowercase(),
                t.name,
                t.entries,
                t.flagged,
                t.max_rel_error
            )?;
        }
        worst = worst.max(report.max_rel_error());
        flagged += report.flagged();
    }
    if let Some(dir) = &cmd.out {
        let mut echo = Echo::default();
        cmd.echo(&mut echo);
        prepare_out(dir, &echo)?;
        write_file(dir, "gradcheck.tsv", &out)?;
    }
    print!("{out}");
    println!("max relative error: {worst:.3e}");
    if flagged > 0 {
        bail!(nalp::Error::Numerical(format!(
            "{flagged} gradient entries exceed relative error {:e}",
            cmd.tol
        )));
    }
    Ok(())
}

fn run_flops(cmd: &FlopsCmd) -> Result<()> {
    let (n_roles, n_values) = match (&cmd.dataset, cmd.roles, cmd.values) {
        (Some(dir), _, _) => {
            let (vocab, _) = load_dataset(dir, cmd.format)?;
            (vocab.n_roles(), vocab.n_values())
        }
        (None, Some(r), Some(v)) => (r, v),
        _ => bail!(usage("give either --dataset or both --roles and --values".into())),
    };
    if cmd.arity < 2 {
        bail!(usage(format!("--arity must be at least 2, got {}", cmd.arity)));
    }
    let m = &cmd.model;
    let dims = Dims {
        n_roles,
        n_values,
        k: m.k,
        n_filters: m.n_filters,
        n_gfcn: m.n_gfcn,
        k_type: m.k_type,
        n_tfcn: m.n_tfcn,
    };
    let cfg = m.config();
    dims.validate(&cfg)?;
    let r = count_params_flops(&cfg, &dims, cmd.arity);

    let mut out = String::new();
    writeln!(out, "roles\t{n_roles}")?;
    writeln!(out, "values\t{n_values}")?;
    writeln!(out, "params_nalp\t{}", r.nalp_params)?;
    writeln!(out, "params_type\t{}", r.type_params)?;
    writeln!(out, "params_total\t{}", r.params)?;
    writeln!(out, "arity\t{}", r.reference_arity)?;
    writeln!(out, "forward_macs\t{}", r.forward_macs)?;
    writeln!(out, "forward_macs_factored\t{}", r.forward_macs_factored)?;
    if let Some(dir) = &cmd.out {
        let mut echo = Echo::default();
        echo.set("command", "flops");
        if let Some(d) = &cmd.dataset {
            echo.set("dataset", d.display()).set("format", cmd.format);
        }
        m.echo(&mut echo);
        echo.set("roles", n_roles).set("values", n_values).set("arity", cmd.arity);
        prepare_out(dir, &echo)?;
        write_file(dir, "flops.tsv", &out)?;
    }
    print!("{out}");
    Ok(())
}
