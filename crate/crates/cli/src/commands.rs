//! The data-producing subcommands: synth, train, eval and sweep.

use std::fs;
use std::path::Path;

use subpop_core::adapter::{write_checkpoint, AdapterMLP, OptimizerKind};
use subpop_core::dro::{train_dro, train_two_phase, DroConfig};
use subpop_core::embed_store::{write_embeddings, write_prompt_set, EmbeddingMatrix};
use subpop_core::ldro::{eta_sweep, size_sweep, train_ldro, train_stacked, SweepRow};
use subpop_core::synth::{generate, SynthConfig};
use subpop_core::{Classifier, LdroConfig, LdroRun, Monitor, TrainOptions, TrainReport};

use crate::args::{EvalArgs, HyperArgs, Method, OptimizerName, SweepArgs, SynthArgs, TrainArgs};
use crate::data::{self, split_paths, Loaded};
use crate::error::{CliError, Result};
use crate::manifest::{self, stamp, MANIFEST_FILE};

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn write_manifest(
    dir: &Path,
    command: &str,
    pairs: &[(&str, String)],
    hash: &str,
    dataset: Option<&str>,
) -> Result<()> {
    let mut comments = vec![("config_hash", hash.to_string())];
    if let Some(d) = dataset {
        comments.push(("dataset", d.to_string()));
    }
    write_file(&dir.join(MANIFEST_FILE), manifest::render(command, pairs, &comments))
}

pub fn synth(args: &SynthArgs, pairs: &[(&str, String)], hash: &str) -> Result<()> {
    let cfg = SynthConfig {
        dim: args.dim,
        n: args.n,
        p_spur: args.p_spur,
        a_cls: args.a_cls,
        a_grp: args.a_grp,
        sigma: args.sigma,
        beta: args.beta,
        seed: args.seed,
    };
    let data = generate(&cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    for (name, split) in data.splits() {
        let (e, m) = split_paths(&args.out, name);
        split.save(e, m)?;
    }
    write_prompt_set(&data.prompts, args.out.join("prompts"))?;
    let directions = EmbeddingMatrix::from_rows_f64(cfg.dim, &[data.v_class.clone(), data.v_group.clone()])?;
    write_embeddings(&directions, args.out.join("directions.ldeb"))?;
    write_manifest(&args.out, "synth", pairs, hash, None)?;
    let [tr, va, te] = cfg.split_sizes();
    eprintln!("wrote {tr}/{va}/{te} train/val/test points to {}", args.out.display());
    Ok(())
}

fn train_options(h: &HyperArgs, seed: u64) -> TrainOptions {
    TrainOptions {
        epochs: h.epochs,
        batch_size: h.batch,
        lr: h.lr,
        optimizer: match h.optimizer {
            OptimizerName::Adam => OptimizerKind::adam(),
            OptimizerName::Sgd => OptimizerKind::SgdMomentum { momentum: h.momentum },
        },
        seed,
        depth: h.depth,
        hidden: h.hidden,
        blend: h.blend,
        normalize_inputs: h.normalize,
        eval_every: h.eval_every,
        keep_checkpoints: true,
    }
}

fn ldro_run(h: &HyperArgs, seed: u64) -> LdroRun {
    LdroRun {
        cfg: LdroConfig {
            eta: h.eta,
            logit_scale: h.logit_scale,
            debias_group_weights: None,
            debias_scale: h.debias_scale.0,
        },
        options: train_options(h, seed),
        debias_selection: h.debias_groups.clone(),
    }
}

fn dro_config(h: &HyperArgs, method: subpop_core::DroMethod) -> DroConfig {
    DroConfig {
        method,
        alpha: h.alpha,
        rho: h.rho,
        phase1_epochs: h.t1,
        upweight: h.lambda_up,
        logit_scale: h.logit_scale,
        dual_scope: h.dual_scope,
    }
}

/// One trained repeat: the selected chain, per-epoch chains and metrics.
struct Trained {
    chain: Vec<AdapterMLP>,
    ring: Vec<Vec<AdapterMLP>>,
    report: TrainReport,
    identified: Option<Vec<usize>>,
}

fn train_one(data: &Loaded, h: &HyperArgs, seed: u64) -> Result<Trained> {
    let train = data.split("train")?;
    let splits = data.monitored();
    let monitor = Monitor::new(&splits);
    let single = |o: subpop_core::TrainOutcome, identified| Trained {
        chain: vec![o.selected_adapter().clone()],
        ring: o.checkpoints.iter().map(|a| vec![a.clone()]).collect(),
        report: o.report,
        identified,
    };
    Ok(match h.method {
        Method::Ldro => single(train_ldro(train, &data.prompts, &ldro_run(h, seed), monitor)?, None),
        Method::Dro(m) if m.is_two_phase() => {
            let t = train_two_phase(train, &data.prompts, &dro_config(h, m), &train_options(h, seed), monitor)?;
            single(t.outcome, Some(t.identified))
        }
        Method::Dro(m) => single(
            train_dro(train, &data.prompts, &dro_config(h, m), &train_options(h, seed), monitor)?,
            None,
        ),
        Method::Stacked(m) => {
            let dro_opts = TrainOptions {
                depth: h.stack_depth,
                ..train_options(h, seed)
            };
            let st = train_stacked(train, &data.prompts, &ldro_run(h, seed), &dro_config(h, m), &dro_opts, monitor)?;
            Trained {
                chain: st.chain(),
                ring: st
                    .second
                    .checkpoints
                    .iter()
                    .map(|a| vec![st.first.clone(), a.clone()])
                    .collect(),
                report: st.second.report,
                identified: None,
            }
        }
    })
}

pub fn train(args: &TrainArgs, pairs: &[(&str, String)], hash: &str) -> Result<()> {
    let h = &args.hyper;
    if h.repeats == 0 {
        return Err(CliError::Config("repeats must be at least 1".into()));
    }
    let data = data::load(&args.data)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    write_manifest(&args.out, "train", pairs, hash, Some(&data.fingerprint))?;
    for r in 0..h.repeats {
        let seed = h.seed + r as u64;
        let t = train_one(&data, h, seed)?;
        let dir = args.out.join(format!("rep{r}"));
        write_file(&dir.join("metrics.tsv"), stamp(hash) + &t.report.metric_log())?;
        write_checkpoint(&t.chain, dir.join("adapter.ckpt"))?;
        if args.ckpt_ring {
            let ring = dir.join("ckpt");
            fs::create_dir_all(&ring).map_err(|e| CliError::io(&ring, e))?;
            for (k, chain) in t.ring.iter().enumerate() {
                write_checkpoint(chain, ring.join(format!("epoch_{k:03}.ckpt")))?;
            }
        }
        let clf = Classifier::new(&data.prompts.classification().embeddings, t.chain, h.normalize)?;
        for (name, split) in data.monitored() {
            let report = clf.evaluate(split)?;
            write_file(&dir.join(format!("report_{name}.txt")), stamp(hash) + &report.to_kv())?;
        }
        if let Some(ids) = t.identified {
            let body: String = ids.iter().map(|i| format!("{i}\n")).collect();
            write_file(&dir.join("identified.txt"), stamp(hash) + &body)?;
        }
        let selected = t.report.selected_epoch.map_or("final".to_string(), |e| e.to_string());
        eprintln!("{}: repeat {r} (seed {seed}) done, selected epoch {selected}", h.method);
    }
    Ok(())
}

/// Sidecar manifest of an `eval --out FILE` report: `FILE.manifest`.
pub fn eval_manifest_path(out: &Path) -> std::path::PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest");
    name.into()
}

pub fn eval(args: &EvalArgs, pairs: &[(&str, String)], hash: &str) -> Result<()> {
    let data = data::load(&args.data)?;
    let split = data.split(&args.split)?;
    let chain = match &args.ckpt {
        Some(p) => subpop_core::adapter::read_checkpoint(p)?,
        None => Vec::new(),
    };
    let clf = Classifier::new(&data.prompts.classification().embeddings, chain, args.normalize)?;
    let report = clf.evaluate(split)?;
    for g in report.empty_groups() {
        eprintln!("warning: group {g} has no instances and is excluded from the worst case");
    }
    let text = stamp(hash) + &report.to_kv();
    match &args.out {
        Some(p) => {
            write_file(p, text)?;
            let comments = [("config_hash", hash.to_string()), ("dataset", data.fingerprint.clone())];
            write_file(&eval_manifest_path(p), manifest::render("eval", pairs, &comments))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sweep_table(header: &str, rows: &[SweepRow], integral: bool) -> String {
    let mut out = format!("{header}\tavg_acc\tworst_acc\tmean_cosine\n");
    for r in rows {
        let value = if integral {
            format!("{}", r.value as usize)
        } else {
            format!("{}", r.value)
        };
        out.push_str(&format!(
            "{value}\t{:.6}\t{:.6}\t{:.6}\n",
            r.average_acc, r.worst_group_acc, r.mean_cosine
        ));
    }
    out
}

pub fn sweep(args: &SweepArgs, pairs: &[(&str, String)], hash: &str) -> Result<()> {
    let h = &args.hyper;
    if h.method != Method::Ldro {
        return Err(CliError::Config(format!("sweeps train ldro, not {}", h.method)));
    }
    let data = data::load(&args.data)?;
    let train = data.split("train")?;
    let eval = data.split(&args.eval_split)?;
    let splits = data.monitored();
    let monitor = Monitor::new(&splits);
    let run = ldro_run(h, h.seed);
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    write_manifest(&args.out, "sweep", pairs, hash, Some(&data.fingerprint))?;
    if let Some(etas) = &args.etas {
        let rows = eta_sweep(train, &data.prompts, &run, etas, monitor, eval)?;
        write_file(&args.out.join("sweep_eta.tsv"), stamp(hash) + &sweep_table("eta", &rows, false))?;
    }
    if let Some(sizes) = &args.sizes {
        let rows = size_sweep(train, &data.prompts, &run, sizes, monitor, eval)?;
        write_file(&args.out.join("sweep_size.tsv"), stamp(hash) + &sweep_table("size", &rows, true))?;
    }
    Ok(())
}
