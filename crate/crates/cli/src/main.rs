//! Command-line front end for the mask-guided attention classifier.
//!
//! Exit codes: 0 success, 1 usage or configuration problems, 2 data
//! problems (missing or malformed files), 3 numerical failures.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use mga_core::config::RunConfig;
use mga_core::dataset;
use mga_core::error::Error;
use mga_core::gradcheck;
use mga_core::mga;
use mga_core::model::{Model, Variant};
use mga_core::netpbm;
use mga_core::parallel::ExecMode;
use mga_core::synth;
use mga_core::trainer::{self, AblationOptions};

const USAGE: &str = "\
usage: mga <command> [flags]

commands:
  gen-data        render a synthetic vein dataset to --out
  train           train a model on --data, write records and checkpoint to --out
  eval            score a checkpoint on a dataset, print accuracy
  ablate          train baseline/attention/mga over paired seeds, print medians
  gradcheck       compare analytic gradients against finite differences
  dump-attention  write attention maps and mask targets as PGM files

common flags:
  --config FILE     key = value settings, applied over defaults
  --out DIR         output directory (default: out)
  --data DIR        dataset directory
  --seed N          master seed
  --variant V       baseline | attention | mga
  --tau X           attention supervision weight (mga only)
  --lambda X        blend weight for the original features
  --epochs N  --lr X  --batch N  --split A:B  --no-augment

command-specific flags:
  gen-data:        --classes N --per-class N --image-size N
                   --angle-base X --angle-delta X --noise-std X
  eval:            --checkpoint DIR
  ablate:          --seeds A,B,C (default 1,2,3)
  gradcheck:       --op NAME (default: whole suite)
  dump-attention:  --checkpoint DIR --limit N

exit codes: 0 ok, 1 usage/config, 2 data, 3 numerical";

/// Anything that stops a command, split by how it should exit.
enum Failure {
    Usage(String),
    App(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::App(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{USAGE}");
            ExitCode::from(1)
        }
        Err(Failure::App(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(args: &[String]) -> Result<(), Failure> {
    let Some(command) = args.first() else {
        return Err(usage("no command given"));
    };
    if command == "--help" || command == "help" {
        println!("{USAGE}");
        return Ok(());
    }
    let rest = &args[1..];
    match command.as_str() {
        "gen-data" => cmd_gen_data(rest),
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "ablate" => cmd_ablate(rest),
        "gradcheck" => cmd_gradcheck(rest),
        "dump-attention" => cmd_dump_attention(rest),
        other => Err(usage(format!("unknown command `{other}`"))),
    }
}

/// Parses `--flag value` pairs. `switches` lists flags that take no value.
fn parse_flags(
    args: &[String],
    allowed: &[&str],
    switches: &[&str],
) -> Result<HashMap<String, String>, Failure> {
    let mut flags = HashMap::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(name) = arg.strip_prefix("--") else {
            return Err(usage(format!("unexpected argument `{arg}`")));
        };
        if switches.contains(&name) {
            flags.insert(name.to_string(), String::from("true"));
            i += 1;
            continue;
        }
        if !allowed.contains(&name) {
            return Err(usage(format!("unknown flag --{name} for this command")));
        }
        let Some(value) = args.get(i + 1) else {
            return Err(usage(format!("flag --{name} needs a value")));
        };
        flags.insert(name.to_string(), value.clone());
        i += 2;
    }
    Ok(flags)
}

/// (flag name, config key) pairs shared by the commands that take a
/// configuration.
const FLAG_KEYS: &[(&str, &str)] = &[
    ("classes", "classes"),
    ("per-class", "per_class"),
    ("image-size", "image_size"),
    ("angle-base", "branch_angle_base"),
    ("angle-delta", "angle_delta"),
    ("noise-std", "noise_std"),
    ("variant", "variant"),
    ("tau", "tau"),
    ("lambda", "lambda"),
    ("epochs", "epochs"),
    ("lr", "lr"),
    ("batch", "batch_size"),
    ("split", "split"),
    ("seed", "seed"),
    ("data", "data"),
    ("out", "out"),
];

/// Defaults, then the `--config` file, then individual flags.
fn build_config(flags: &HashMap<String, String>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = flags.get("config") {
        cfg.apply_file(Path::new(path))?;
    }
    for (flag, key) in FLAG_KEYS {
        if let Some(value) = flags.get(*flag) {
            cfg.set(key, value)
                .map_err(|e| usage(e.to_string()))?;
        }
    }
    if flags.contains_key("no-augment") {
        cfg.augment = false;
    }
    Ok(cfg)
}

fn cmd_gen_data(args: &[String]) -> Result<(), Failure> {
    let flags = parse_flags(
        args,
        &[
            "config",
            "out",
            "seed",
            "classes",
            "per-class",
            "image-size",
            "angle-base",
            "angle-delta",
            "noise-std",
        ],
        &[],
    )?;
    let cfg = build_config(&flags)?;
    let spec = cfg.synth_spec();
    let samples = synth::generate(&spec)?;
    let out = PathBuf::from(&cfg.out);
    dataset::save_dataset(&out, &samples)?;
    println!(
        "wrote {} samples ({} classes x {} at {}x{}, masks included) to {}",
        samples.len(),
        spec.classes,
        spec.samples_per_class,
        spec.image_size,
        spec.image_size,
        out.display()
    );
    Ok(())
}

fn cmd_train(args: &[String]) -> Result<(), Failure> {
    let flags = parse_flags(
        args,
        &[
            "config", "data", "out", "seed", "variant", "tau", "lambda", "epochs", "lr", "batch",
            "split",
        ],
        &["no-augment"],
    )?;
    let cfg = build_config(&flags)?;
    if cfg.data.is_empty() {
        return Err(usage("train needs --data pointing at a dataset directory"));
    }
    // An explicit attention weight is a contradiction for variants that
    // never produce an attention loss; better to stop than to ignore it.
    if let Some(tau) = flags.get("tau") {
        let value: f64 = tau
            .parse()
            .map_err(|_| usage(format!("cannot parse `{tau}` as a value for `tau`")))?;
        if value != 0.0 && cfg.variant != Variant::Mga {
            return Err(usage(format!(
                "--tau {value} has no effect on the {} variant; only mga trains with mask supervision",
                cfg.variant
            )));
        }
    }

    let samples = dataset::load_dataset(Path::new(&cfg.data))?;
    let (train_set, test_set) =
        dataset::split_dataset(samples, cfg.train_ratio, cfg.test_ratio, cfg.seed)?;
    let mut model = Model::new(&cfg.model_config(), cfg.seed)?;
    let opts = cfg.train_options()?;

    let out = PathBuf::from(&cfg.out);
    fs::create_dir_all(&out).map_err(Error::from)?;
    fs::write(out.join("config.txt"), cfg.to_file_string()).map_err(Error::from)?;

    println!(
        "training variant {} on {} train / {} test samples",
        cfg.variant,
        train_set.len(),
        test_set.len()
    );
    let epochs = cfg.epochs;
    let records = trainer::train_with(&mut model, &train_set, &test_set, &opts, |r| {
        println!(
            "epoch {:>3}/{} lr {:.5} ce {:.4} att {:.4} train_acc {:.2} test_acc {:.2}",
            r.epoch, epochs, r.lr, r.loss_ce, r.loss_att, r.train_acc, r.test_acc
        );
    })?;

    trainer::write_records_csv(&out.join("records.csv"), &records)?;
    model.save_checkpoint(&out.join("checkpoint"))?;
    let last = records.last().expect("at least one epoch");
    println!("final test accuracy {:.2}", last.test_acc);
    println!("wrote records.csv, config.txt and checkpoint/ to {}", out.display());
    Ok(())
}

fn cmd_eval(args: &[String]) -> Result<(), Failure> {
    let flags = parse_flags(args, &["data", "checkpoint"], &[])?;
    let data = flags
        .get("data")
        .ok_or_else(|| usage("eval needs --data"))?;
    let checkpoint = flags
        .get("checkpoint")
        .ok_or_else(|| usage("eval needs --checkpoint"))?;
    let model = Model::load_checkpoint(Path::new(checkpoint))?;
    let samples = dataset::load_dataset(Path::new(data))?;
    let accuracy = trainer::evaluate(&model, &samples, ExecMode::default())?;
    println!("accuracy {accuracy:.2}");
    Ok(())
}

fn cmd_ablate(args: &[String]) -> Result<(), Failure> {
    let flags = parse_flags(
        args,
        &[
            "config", "out", "seeds", "tau", "lambda", "epochs", "lr", "batch", "split",
            "classes", "per-class", "image-size", "angle-base", "angle-delta", "noise-std",
        ],
        &["no-augment"],
    )?;
    let cfg = build_config(&flags)?;
    let seeds: Vec<u64> = match flags.get("seeds") {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| usage(format!("cannot parse seed `{}`", s.trim())))
            })
            .collect::<Result<_, _>>()?,
        None => vec![1, 2, 3],
    };

    let opts = AblationOptions {
        data: cfg.synth_spec(),
        model: cfg.model_config(),
        train: cfg.train_options()?,
        split: (cfg.train_ratio, cfg.test_ratio),
        seeds,
    };
    let report = trainer::ablate_with(&opts, |seed, variant, acc| {
        println!("seed {seed} {variant}: test_acc {acc:.2}");
    })?;

    println!();
    println!("{:<10} {:>9} {:>9} {:>9}", "seed", "baseline", "attention", "mga");
    let mut csv = String::from("seed,baseline_acc,attention_acc,mga_acc\n");
    for row in &report.rows {
        println!(
            "{:<10} {:>9.2} {:>9.2} {:>9.2}",
            row.seed, row.accs[0], row.accs[1], row.accs[2]
        );
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.seed, row.accs[0], row.accs[1], row.accs[2]
        ));
    }
    let m = &report.medians;
    println!("{:<10} {:>9.2} {:>9.2} {:>9.2}", "median", m[0], m[1], m[2]);
    csv.push_str(&format!("median,{},{},{}\n", m[0], m[1], m[2]));

    let out = PathBuf::from(&cfg.out);
    fs::create_dir_all(&out).map_err(Error::from)?;
    fs::write(out.join("ablation.csv"), csv).map_err(Error::from)?;
    println!("wrote ablation.csv to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(args: &[String]) -> Result<(), Failure> {
    let flags = parse_flags(args, &["seed", "op"], &[])?;
    let seed: u64 = match flags.get("seed") {
        Some(s) => s
            .parse()
            .map_err(|_| usage(format!("cannot parse `{s}` as a seed")))?,
        None => 7,
    };
    let reports = gradcheck::run_suite(seed, flags.get("op").map(String::as_str))?;
    let mut failed = false;
    for report in &reports {
        let verdict = if report.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<22} max_rel_err {:>10.3e}  {verdict}",
            report.name, report.max_rel_err
        );
        failed |= !report.passed();
    }
    if failed {
        return Err(Failure::App(Error::numeric(format!(
            "gradient check exceeded the {:.0e} tolerance",
            gradcheck::SUITE_TOLERANCE
        ))));
    }
    println!(
        "all {} checks within {:.0e}",
        reports.len(),
        gradcheck::SUITE_TOLERANCE
    );
    Ok(())
}

fn cmd_dump_attention(args: &[String]) -> Result<(), Failure> {
    let flags = parse_flags(args, &["data", "checkpoint", "out", "limit"], &[])?;
    let data = flags
        .get("data")
        .ok_or_else(|| usage("dump-attention needs --data"))?;
    let checkpoint = flags
        .get("checkpoint")
        .ok_or_else(|| usage("dump-attention needs --checkpoint"))?;
    let out = PathBuf::from(
        flags
            .get("out")
            .ok_or_else(|| usage("dump-attention needs --out"))?,
    );

    let model = Model::load_checkpoint(Path::new(checkpoint))?;
    if model.variant() == Variant::Baseline {
        return Err(Failure::App(Error::data(
            "checkpoint holds a baseline model, which computes no attention maps".to_string(),
        )));
    }
    let samples = dataset::load_dataset(Path::new(data))?;
    let limit = match flags.get("limit") {
        Some(s) => s
            .parse()
            .map_err(|_| usage(format!("cannot parse `{s}` as a limit")))?,
        None => samples.len(),
    };
    let chosen = &samples[..limit.min(samples.len())];

    fs::create_dir_all(&out).map_err(Error::from)?;
    for (i, sample) in chosen.iter().enumerate() {
        let mask = sample.mask.as_ref().ok_or_else(|| {
            Error::data(format!("sample {i} has no mask to compare attention against"))
        })?;
        let attention = model.attention_map(&sample.image)?;
        let (fh, fw) = (attention.shape()[0], attention.shape()[1]);
        let target = mga::resize_mask(mask, fh, fw)?;
        let to_bytes = |t: &mga_core::Tensor| -> Vec<u8> {
            t.data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect()
        };
        netpbm::write_pgm(
            &out.join(format!("sample_{i:03}_am.pgm")),
            fw,
            fh,
            &to_bytes(&attention),
        )?;
        netpbm::write_pgm(
            &out.join(format!("sample_{i:03}_mask.pgm")),
            fw,
            fh,
            &to_bytes(&target),
        )?;
    }
    let fraction = trainer::localization_fraction(&model, chosen, ExecMode::default())?;
    println!(
        "wrote {} attention/mask pairs at feature resolution to {}",
        chosen.len(),
        out.display()
    );
    println!("localization fraction {fraction:.2}");
    Ok(())
}
