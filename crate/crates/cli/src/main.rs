//! Command-line harness for the non-local attention block library.
//!
//! Subcommands: equiv-check, grad-check, cost, bench, dump-attn, variance,
//! train-toy. Exit status: 0 = all checks passed, 1 = a check failed,
//! 2 = usage or I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scaled_nl_core::analysis::{variance_stability, variance_stability_unscaled};
use scaled_nl_core::bench::bench_forwards;
use scaled_nl_core::cost::{cost_scaled_nl, cost_softmax_nl, csv_header};
use scaled_nl_core::io::{map_to_pgm, matrix_to_csv, read_fmap, write_fmap};
use scaled_nl_core::toy::{divergence_study, generate_task, train_log_csv, train_toy, TrainConfig};
use scaled_nl_core::{
    analysis, autodiff, init_embeddings, max_rel_diff, scaled_nl_forward, AblationScope,
    AttentionConfig, BlockVariant, ComputeMode, FeatureMap, InitScheme, Rng,
};

#[derive(Parser, Debug)]
#[command(name = "scaled-nl", version, about = "Non-local attention block toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Verify that the scaled block's two groupings agree over a size grid.
    EquivCheck(EquivCheckArgs),
    /// Compare analytic gradients against finite differences over the
    /// variant/head/residual grid.
    GradCheck(GradCheckArgs),
    /// Analytic flop and peak-activation costs.
    Cost(CostArgs),
    /// Median wall-clock per forward.
    Bench(BenchArgs),
    /// Export an attention map.
    DumpAttn(RunConfig),
    /// Monte Carlo check of the output-scale variance stabilization.
    Variance(VarianceArgs),
    /// Train a small classifier on the planted long-range task.
    TrainToy(TrainToyArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum VariantArg {
    #[value(name = "softmax_nl")]
    SoftmaxNl,
    #[value(name = "scaled_nl")]
    ScaledNl,
}

impl From<VariantArg> for BlockVariant {
    fn from(v: VariantArg) -> BlockVariant {
        match v {
            VariantArg::SoftmaxNl => BlockVariant::Softmax,
            VariantArg::ScaledNl => BlockVariant::Scaled,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ScopeArg {
    #[value(name = "full")]
    Full,
    #[value(name = "magnitude_only")]
    MagnitudeOnly,
    #[value(name = "direction_only")]
    DirectionOnly,
}

impl From<ScopeArg> for AblationScope {
    fn from(v: ScopeArg) -> AblationScope {
        match v {
            ScopeArg::Full => AblationScope::Full,
            ScopeArg::MagnitudeOnly => AblationScope::MagnitudeOnly,
            ScopeArg::DirectionOnly => AblationScope::DirectionOnly,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum InitArg {
    #[value(name = "he")]
    He,
    #[value(name = "gaussian_0p01")]
    Gaussian0p01,
    #[value(name = "zeros")]
    Zeros,
}

impl From<InitArg> for InitScheme {
    fn from(v: InitArg) -> InitScheme {
        match v {
            InitArg::He => InitScheme::He,
            InitArg::Gaussian0p01 => InitScheme::Gaussian0p01,
            InitArg::Zeros => InitScheme::Zeros,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum FormatArg {
    #[value(name = "csv")]
    Csv,
    #[value(name = "pgm")]
    Pgm,
    #[value(name = "fmap")]
    Fmap,
}

/// Full run configuration of the dump-attn subcommand; round-trips through
/// its flag form losslessly.
#[derive(Args, Debug, Clone, PartialEq)]
struct RunConfig {
    #[arg(long, default_value_t = 4)]
    height: usize,
    #[arg(long, default_value_t = 4)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Embedding width; defaults to channels / heads.
    #[arg(long)]
    embed_channels: Option<usize>,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, value_enum, default_value = "softmax_nl")]
    variant: VariantArg,
    #[arg(long, value_enum, default_value = "full")]
    scope: ScopeArg,
    #[arg(long, value_enum, default_value = "he")]
    init: InitArg,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    residual: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, value_enum, default_value = "pgm")]
    format: FormatArg,
    /// Read the input feature map from an FMAP file instead of sampling it.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunConfig {
    /// Flag form that parses back to an identical config.
    #[cfg_attr(not(test), allow(dead_code))]
    fn to_args(&self) -> Vec<String> {
        let mut args = vec![
            "--height".into(),
            self.height.to_string(),
            "--width".into(),
            self.width.to_string(),
            "--channels".into(),
            self.channels.to_string(),
            "--heads".into(),
            self.heads.to_string(),
            "--variant".into(),
            match self.variant {
                VariantArg::SoftmaxNl => "softmax_nl".into(),
                VariantArg::ScaledNl => "scaled_nl".into(),
            },
            "--scope".into(),
            match self.scope {
                ScopeArg::Full => "full".into(),
                ScopeArg::MagnitudeOnly => "magnitude_only".into(),
                ScopeArg::DirectionOnly => "direction_only".into(),
            },
            "--init".into(),
            match self.init {
                InitArg::He => "he".into(),
                InitArg::Gaussian0p01 => "gaussian_0p01".into(),
                InitArg::Zeros => "zeros".into(),
            },
            "--residual".into(),
            self.residual.to_string(),
            "--seed".into(),
            self.seed.to_string(),
            "--trials".into(),
            self.trials.to_string(),
            "--format".into(),
            match self.format {
                FormatArg::Csv => "csv".into(),
                FormatArg::Pgm => "pgm".into(),
                FormatArg::Fmap => "fmap".into(),
            },
        ];
        if let Some(e) = self.embed_channels {
            args.extend(["--embed-channels".into(), e.to_string()]);
        }
        if let Some(p) = &self.input {
            args.extend(["--input".into(), p.display().to_string()]);
        }
        if let Some(p) = &self.out {
            args.extend(["--out".into(), p.display().to_string()]);
        }
        args
    }

    fn attention_config(&self) -> AttentionConfig {
        let embed = self
            .embed_channels
            .unwrap_or_else(|| (self.channels / self.heads).max(1));
        let mut cfg = AttentionConfig::new(self.variant.into(), self.channels, embed)
            .with_scope(self.scope.into())
            .with_init(self.init.into())
            .with_residual(self.residual);
        cfg.heads = self.heads;
        cfg
    }
}

#[derive(Args, Debug)]
struct EquivCheckArgs {
    /// Seeds per grid cell.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Largest allowed relative difference between the two groupings.
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    /// Perturb one grouping's output; the check must then fail.
    #[arg(long, default_value_t = false)]
    inject_error: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 3)]
    height: usize,
    #[arg(long, default_value_t = 3)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Head counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    heads: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,4")]
    heads: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VarianceArgs {
    /// Pixel count HW of the simulated map.
    #[arg(long, default_value_t = 64)]
    pixels: usize,
    #[arg(long, default_value_t = 16)]
    embed_channels: usize,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, value_enum, default_value = "scaled_nl")]
    variant: VariantArg,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop the output scale of the scaled variant for this run.
    #[arg(long, default_value_t = false)]
    no_scale: bool,
    /// Run the divergence study over this many seeds instead of training.
    #[arg(long)]
    study_seeds: Option<u64>,
    /// Steps per study run.
    #[arg(long, default_value_t = 600)]
    study_steps: usize,
    /// Write the first generated sample to this FMAP file.
    #[arg(long)]
    dump_sample: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(out: &Option<PathBuf>, content: &str) -> scaled_nl_core::Result<()> {
    match out {
        Some(path) => std::fs::write(path, content).map_err(Into::into),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn emit_bytes(out: &Option<PathBuf>, content: &[u8]) -> scaled_nl_core::Result<()> {
    use std::io::Write;
    match out {
        Some(path) => std::fs::write(path, content).map_err(Into::into),
        None => std::io::stdout().write_all(content).map_err(Into::into),
    }
}

fn cmd_equiv_check(args: &EquivCheckArgs) -> scaled_nl_core::Result<bool> {
    let mut csv = String::from("h,w,c,c_e,seed,max_rel_diff\n");
    let mut worst: f64 = 0.0;
    for &h in &[1usize, 2, 4, 8] {
        for &w in &[1usize, 2, 4, 8] {
            for &c in &[2usize, 4, 8, 16] {
                let mut widths = vec![1, c / 2, c];
                widths.dedup();
                for c_e in widths {
                    for seed in 0..args.seeds {
                        let mut rng = Rng::new(seed);
                        let x = FeatureMap::random(h, w, c, &mut rng)?;
                        let cfg = AttentionConfig::new(BlockVariant::Scaled, c, c_e);
                        let emb = init_embeddings(&cfg, &mut rng)?;
                        let ym = scaled_nl_forward(&x, &emb, &cfg, ComputeMode::Materialized)?;
                        let ya = scaled_nl_forward(&x, &emb, &cfg, ComputeMode::Associative)?;
                        let mut diff = max_rel_diff(ym.values(), ya.values());
                        if args.inject_error {
                            diff += 1e-6;
                        }
                        worst = worst.max(diff);
                        csv.push_str(&format!("{h},{w},{c},{c_e},{seed},{diff:e}\n"));
                    }
                }
            }
        }
    }
    emit(&args.out, &csv)?;
    let pass = worst <= args.tolerance;
    eprintln!(
        "equiv-check: max relative difference {worst:e} (tolerance {:e}) -> {}",
        args.tolerance,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(pass)
}

fn cmd_grad_check(args: &GradCheckArgs) -> scaled_nl_core::Result<bool> {
    let mut csv = String::from("variant,mode,n_h,residual,max_rel_error,pass\n");
    let mut all_pass = true;
    for variant in [BlockVariant::Softmax, BlockVariant::Scaled] {
        let modes: &[ComputeMode] = match variant {
            BlockVariant::Softmax => &[ComputeMode::Associative],
            BlockVariant::Scaled => &[ComputeMode::Associative, ComputeMode::Materialized],
        };
        for &mode in modes {
            for heads in [1usize, 2, 4] {
                for residual in [true, false] {
                    let cfg = AttentionConfig::multi_head(variant, args.channels, heads)?
                        .with_residual(residual);
                    let report =
                        autodiff::grad_check(&cfg, args.height, args.width, args.seed, mode)?;
                    let pass = report.passed();
                    all_pass &= pass;
                    csv.push_str(&format!(
                        "{},{},{},{},{:e},{}\n",
                        variant.name(),
                        mode.name(),
                        heads,
                        residual,
                        report.max_rel_error,
                        pass
                    ));
                }
            }
        }
    }
    emit(&args.out, &csv)?;
    eprintln!("grad-check: {}", if all_pass { "PASS" } else { "FAIL" });
    Ok(all_pass)
}

fn cmd_cost(args: &CostArgs) -> scaled_nl_core::Result<bool> {
    let mut csv = String::from(csv_header());
    csv.push('\n');
    for &nh in &args.heads {
        let c_e = args.channels / nh;
        let soft = cost_softmax_nl(args.height, args.width, args.channels, c_e, nh)?;
        csv.push_str(&soft.csv_row(
            "softmax_nl",
            args.height,
            args.width,
            args.channels,
            c_e,
            nh,
        ));
        csv.push('\n');
        for (label, mode) in [
            ("scaled_nl_assoc", ComputeMode::Associative),
            ("scaled_nl_mat", ComputeMode::Materialized),
        ] {
            let r = cost_scaled_nl(args.height, args.width, args.channels, c_e, nh, mode)?;
            csv.push_str(&r.csv_row(label, args.height, args.width, args.channels, c_e, nh));
            csv.push('\n');
        }
    }
    emit(&args.out, &csv)?;
    Ok(true)
}

fn cmd_bench(args: &BenchArgs) -> scaled_nl_core::Result<bool> {
    let report = bench_forwards(
        args.height,
        args.width,
        args.channels,
        &args.heads,
        args.warmup,
        args.iters,
        args.seed,
    )?;
    emit(&args.out, &report.to_csv())?;
    if args.heads.len() >= 2 {
        let hi = *args.heads.iter().max().unwrap();
        let lo = *args.heads.iter().min().unwrap();
        for variant in [BlockVariant::Softmax, BlockVariant::Scaled] {
            if let Some(r) = report.ratio(variant, hi, lo) {
                eprintln!(
                    "bench: {} time({hi} heads)/time({lo} heads) = {r:.3}",
                    variant.name()
                );
            }
        }
    }
    Ok(true)
}

fn cmd_dump_attn(args: &RunConfig) -> scaled_nl_core::Result<bool> {
    let cfg = args.attention_config();
    let mut rng = Rng::new(args.seed);
    let x = match &args.input {
        Some(path) => read_fmap(path)?,
        None => FeatureMap::random(args.height, args.width, args.channels, &mut rng)?,
    };
    if x.channels() != cfg.channels {
        return Err(scaled_nl_core::Error::InvalidConfig {
            message: format!(
                "input has {} channels, config expects {}",
                x.channels(),
                cfg.channels
            ),
        });
    }
    let emb = init_embeddings(&cfg, &mut rng)?;
    let map = analysis::extract_map(&x, &emb, &cfg)?;
    match args.format {
        FormatArg::Pgm => emit_bytes(&args.out, &map_to_pgm(&map))?,
        FormatArg::Csv => emit(&args.out, &matrix_to_csv(map.values()))?,
        FormatArg::Fmap => {
            return Err(scaled_nl_core::Error::InvalidConfig {
                message: "dump-attn emits csv or pgm; fmap holds feature maps".into(),
            })
        }
    }
    Ok(true)
}

fn cmd_variance(args: &VarianceArgs) -> scaled_nl_core::Result<bool> {
    let mut rng = Rng::new(args.seed);
    let scaled = variance_stability(args.pixels, args.embed_channels, args.trials, &mut rng)?;
    let mut rng = Rng::new(args.seed);
    let unscaled =
        variance_stability_unscaled(args.pixels, args.embed_channels, args.trials, &mut rng)?;
    println!("quantity,pixels,embed_channels,trials,variance");
    println!(
        "scaled,{},{},{},{}",
        args.pixels, args.embed_channels, args.trials, scaled
    );
    println!(
        "unscaled,{},{},{},{}",
        args.pixels, args.embed_channels, args.trials, unscaled
    );
    let pass = (0.9..=1.1).contains(&scaled);
    eprintln!(
        "variance: scaled {scaled:.4} in [0.9, 1.1] -> {}",
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(pass)
}

fn cmd_train_toy(args: &TrainToyArgs) -> scaled_nl_core::Result<bool> {
    let task = generate_task(
        args.height,
        args.width,
        args.channels,
        args.samples,
        args.seed,
    )?;
    if let Some(path) = &args.dump_sample {
        write_fmap(path, &task.samples[0].features)?;
    }
    if let Some(seeds) = args.study_seeds {
        let (with_scale, without_scale) = divergence_study(&task, args.study_steps, seeds, 1)?;
        let csv = format!(
            "setting,seeds,steps,divergence_frequency\n\
             with_scale,{seeds},{steps},{with_scale}\n\
             without_scale,{seeds},{steps},{without_scale}\n",
            steps = args.study_steps
        );
        emit(&args.out, &csv)?;
        return Ok(true);
    }
    let mut cfg = TrainConfig::new(args.variant.into(), args.steps, args.seed);
    cfg.heads = args.heads;
    cfg.batch_size = args.batch_size;
    cfg.learning_rate = args.learning_rate;
    cfg.block_scale_disabled = args.no_scale;
    let outcome = train_toy(&task, &cfg)?;
    emit(&args.out, &train_log_csv(&outcome.log))?;
    if outcome.diverged {
        eprintln!("train-toy: DIVERGED (non-finite loss)");
        return Ok(false);
    }
    eprintln!(
        "train-toy: initial loss {:.6}, final loss {:.6}, final accuracy {:.4}",
        outcome.initial_loss, outcome.final_loss, outcome.final_accuracy
    );
    Ok(true)
}

fn run(cli: Cli) -> scaled_nl_core::Result<bool> {
    match &cli.command {
        Command::EquivCheck(args) => cmd_equiv_check(args),
        Command::GradCheck(args) => cmd_grad_check(args),
        Command::Cost(args) => cmd_cost(args),
        Command::Bench(args) => cmd_bench(args),
        Command::DumpAttn(args) => cmd_dump_attn(args),
        Command::Variance(args) => cmd_variance(args),
        Command::TrainToy(args) => cmd_train_toy(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips_through_flags() {
        let base = RunConfig {
            height: 6,
            width: 3,
            channels: 12,
            embed_channels: Some(4),
            heads: 3,
            variant: VariantArg::ScaledNl,
            scope: ScopeArg::DirectionOnly,
            init: InitArg::Gaussian0p01,
            residual: false,
            seed: 17,
            trials: 500,
            format: FormatArg::Csv,
            input: Some(PathBuf::from("/tmp/in.fmap")),
            out: Some(PathBuf::from("/tmp/out.csv")),
        };
        let mut argv = vec!["scaled-nl".to_string(), "dump-attn".to_string()];
        argv.extend(base.to_args());
        let parsed = Cli::try_parse_from(&argv).expect("flags parse");
        match parsed.command {
            Command::DumpAttn(cfg) => assert_eq!(cfg, base),
            other => panic!("wrong subcommand parsed: {other:?}"),
        }
    }

    #[test]
    fn default_run_config_round_trips() {
        let argv = ["scaled-nl", "dump-attn"];
        let parsed = Cli::try_parse_from(argv).unwrap();
        let Command::DumpAttn(cfg) = parsed.command else {
            panic!("wrong subcommand");
        };
        let mut argv = vec!["scaled-nl".to_string(), "dump-attn".to_string()];
        argv.extend(cfg.to_args());
        let reparsed = Cli::try_parse_from(&argv).unwrap();
        let Command::DumpAttn(cfg2) = reparsed.command else {
            panic!("wrong subcommand");
        };
        assert_eq!(cfg, cfg2);
    }
}
