use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trigmark::attacks::{self, SweepData};
use trigmark::config::{ExperimentConfig, SuiteKind};
use trigmark::keying::{generate_key, Level, SecretKey};
use trigmark::nn::{self, load_idx, Model, Split};
use trigmark::oracle::evaluate;
use trigmark::protocol::{self, Decision, EvidenceBundle, ProtocolError, DEFAULT_R_MIN};
use trigmark::stats;
use trigmark::usurper::{self, ForgeParams};
use trigmark::watermark::{self, TriggerSet};
use trigmark::Image;

const MODEL_FILE: &str = "model.tmm";
const TRIGGER_FILE: &str = "triggers.tmt";
const KEY_FILE: &str = "key.hex";
const DEFAULT_SERVE_THREADS: usize = 16;

#[derive(Parser)]
#[command(
    name = "trigmark",
    version,
    about = "Keyed trigger-set watermarks for image classifiers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a new secret key file.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        /// Derive the key reproducibly from a seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a watermarked model from a config file.
    Embed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the unwatermarked comparison run.
        #[arg(long)]
        no_baseline: bool,
    },
    /// Run an attack suite against a watermarked model.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        triggers: PathBuf,
        /// Experiment config supplying test and fine-tune data.
        #[arg(long)]
        config: PathBuf,
        /// Override the configured suites.
        #[arg(long, value_delimiter = ',')]
        suite: Option<Vec<String>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seal a trigger set and key into an evidence bundle.
    Bundle {
        #[arg(long)]
        triggers: PathBuf,
        #[arg(long)]
        key: PathBuf,
        /// Ship labels and the key id instead of the key.
        #[arg(long)]
        withhold_key: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify a bundle against a model file or a prediction service.
    Verify {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        target: VerifyTarget,
        #[arg(long, default_value_t = DEFAULT_R_MIN)]
        r_min: f64,
        /// Per-query timeout for remote verification, in milliseconds.
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a model file over the prediction wire protocol.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
    },
    /// Simulate a usurper forging a key for a stolen model.
    Usurp(UsurpArgs),
    /// Rarity, thresholds, trigger sizing and work estimates.
    Stats {
        #[command(subcommand)]
        cmd: StatsCmd,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct VerifyTarget {
    #[arg(long)]
    model: Option<PathBuf>,
    /// host:port of a prediction service.
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Args)]
struct UsurpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    level: Level,
    #[arg(long, default_value_t = 8)]
    s: usize,
    #[arg(long, default_value_t = 100)]
    t: usize,
    /// L-infinity budget in 8-bit levels.
    #[arg(long, default_value_t = 41)]
    eps: u8,
    /// Matches required; all triggers when absent.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// IDX image file to draw source images from; uniform noise otherwise.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_R_MIN)]
    r_min: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum StatsCmd {
    /// Rarity of m matches among s triggers over c classes.
    Rarity { s: u64, m: u64, c: u64 },
    /// Smallest match count reaching the rarity threshold.
    Threshold { s: u64, c: u64, r_min: f64 },
    /// Triggers needed for a rarity at a recovery rate.
    Size { bits: f64, rate: f64, c: u64 },
    /// Expected forgery work at a protocol level.
    Work {
        level: Level,
        #[arg(long)]
        s: u64,
        #[arg(long)]
        t: u64,
        #[arg(long = "R", default_value_t = 0.0)]
        rarity: f64,
        #[arg(long, default_value_t = 10)]
        c: u64,
        /// Cost of one hash in inference units.
        #[arg(long, default_value_t = 1.0)]
        ratio: f64,
    },
}

/// Output directory: flag, then `TRIGMARK_OUT`, then the fallback.
fn out_dir(flag: Option<PathBuf>, fallback: &Path) -> PathBuf {
    flag.or_else(|| std::env::var_os("TRIGMARK_OUT").map(PathBuf::from))
        .unwrap_or_else(|| fallback.to_path_buf())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".into(), |v| format!("{v:.2}%"))
}

fn cmd_keygen(out: &Path, seed: Option<u64>) -> Result<()> {
    let key = generate_key(seed);
    write(out, key.to_key_file())?;
    println!("key_id {}", key.key_id());
    Ok(())
}

fn cmd_embed(config: &Path, out: Option<PathBuf>, no_baseline: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = out_dir(out, &cfg.output_dir);
    let corpus = cfg.load_corpus()?;
    let spec = cfg.spec()?;
    let key = cfg.key()?;
    let ecfg = cfg.embed_config();
    let digest = cfg.digest();

    let (mut model, triggers) = watermark::embed(&corpus.data, &key, &spec, &ecfg)?;
    model.config_digest = Some(digest.clone());
    let rec = watermark::recovery_rate(&model, &triggers)?;
    let acc = evaluate(&model, &corpus.test)?;

    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    model.save(&dir.join(MODEL_FILE))?;
    triggers.save(&dir.join(TRIGGER_FILE))?;
    key.write_file(&dir.join(KEY_FILE))?;

    let base_acc = if no_baseline {
        None
    } else {
        let base = nn::train(&Model::build(&spec, ecfg.model_seed)?, &corpus.data, &ecfg.hyper)?;
        evaluate(&base, &corpus.test)?
    };
    let summary = serde_json::json!({
        "config_digest": digest,
        "key_id": key.key_id(),
        "s": triggers.s(),
        "level": ecfg.level,
        "m": rec.m,
        "rec": rec.rec,
        "rarity_bits": rec.rarity.rarity_bits,
        "test_acc": acc,
        "baseline_test_acc": base_acc,
        "model_fingerprint": model.fingerprint(),
    });
    write(&dir.join("embed.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("accuracy: baseline {} watermarked {}", fmt_acc(base_acc), fmt_acc(acc));
    println!(
        "watermark: m {}/{} rec {:.1}% rarity {:.2} bits (level {}, key {})",
        rec.m,
        rec.s,
        rec.rec,
        rec.rarity.rarity_bits,
        ecfg.level,
        key.key_id()
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn parse_suite(name: &str) -> Result<SuiteKind> {
    Ok(match name {
        "default" => SuiteKind::Default,
        "prune-global-grid" | "prune-global" => SuiteKind::PruneGlobalGrid,
        "prune-fc-grid" | "prune-fc" => SuiteKind::PruneFcGrid,
        "quantization" | "quant" => SuiteKind::Quantization,
        "jpeg" => SuiteKind::Jpeg,
        "finetune" => SuiteKind::Finetune,
        other => bail!("unknown suite {other:?}"),
    })
}

fn cmd_attack(
    model: &Path,
    triggers: &Path,
    config: &Path,
    suite: Option<Vec<String>>,
    repeats: Option<usize>,
    out: Option<PathBuf>,
) -> Result<bool> {
    let model = load_model(model)?;
    let triggers = TriggerSet::load(triggers).with_context(|| format!("loading triggers {}", triggers.display()))?;
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(names) = suite {
        cfg.attack.suites = names.iter().map(|n| parse_suite(n)).collect::<Result<_>>()?;
    }
    if let Some(r) = repeats {
        cfg.attack.repeats = r;
    }
    let dir = out_dir(out, &cfg.output_dir);
    let corpus = cfg.load_corpus()?;
    let finetune = corpus.data.subset(Split::Finetune);
    let calibration: Vec<Image> = corpus
        .data
        .indices(Split::Train)
        .into_iter()
        .take(attacks::CALIBRATION_SAMPLES)
        .map(|i| corpus.data.image(i).clone())
        .collect();
    let data = SweepData {
        test: &corpus.test,
        finetune: (!finetune.is_empty()).then_some(&finetune),
        calibration: &calibration,
    };
    let specs = cfg.attack.specs();
    let report = attacks::run_sweep(&model, &triggers, &data, &specs)?;
    write(&dir.join("attacks.csv"), report.to_csv())?;
    write(&dir.join("attacks.json"), report.to_json())?;
    write(&dir.join("attacks_plot.csv"), report.plot_data())?;
    write(&dir.join("attacks.txt"), report.to_text())?;
    println!(
        "baseline: acc {:.2}% rec {:.1}% rarity {:.2} bits",
        report.baseline.acc_mean, report.baseline.rec_mean, report.baseline.rarity_min
    );
    if let Some(w) = report.worst_rec() {
        println!(
            "worst rec: {} {} acc {:.2}% rec {:.1}% rarity {:.2}..{:.2} bits",
            w.kind, w.params, w.acc_mean, w.rec_mean, w.rarity_min, w.rarity_max
        );
    }
    for r in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("failed: {} {}: {}", r.kind, r.params, r.error.as_deref().unwrap_or(""));
    }
    println!("{} rows written to {}", report.rows.len(), dir.display());
    Ok(report.rows.is_empty() || report.failed_rows() < report.rows.len())
}

fn cmd_bundle(triggers: &Path, key: &Path, withhold: bool, out: &Path) -> Result<()> {
    let t = TriggerSet::load(triggers).with_context(|| format!("loading triggers {}", triggers.display()))?;
    let k = SecretKey::read_file(key).with_context(|| format!("reading key {}", key.display()))?;
    let b = protocol::make_evidence(&k, &t, !withhold)?;
    write(out, b.to_bytes())?;
    println!("sealed {} triggers, digest {}", b.s(), b.digest);
    Ok(())
}

enum VerifyOutcome {
    Decided(Decision),
    Aborted,
}

fn cmd_verify(
    bundle: &Path,
    target: VerifyTarget,
    r_min: f64,
    timeout_ms: u64,
    out: Option<PathBuf>,
) -> Result<VerifyOutcome> {
    let b = EvidenceBundle::load(bundle).with_context(|| format!("loading bundle {}", bundle.display()))?;
    let result = match (target.model, target.endpoint) {
        (Some(path), None) => {
            let m = load_model(&path)?;
            protocol::verify(&b, &m, &m.fingerprint(), r_min)
        }
        (None, Some(ep)) => protocol::verify_remote(&b, &ep, r_min, Duration::from_millis(timeout_ms)),
        _ => unreachable!("clap enforces exactly one target"),
    };
    match result {
        Ok(r) => {
            if let Some(path) = out {
                write(&path, r.to_json())?;
            }
            println!(
                "{}: m {}/{} rec {:.1}% rarity {:.2} bits (R_min {})",
                r.decision, r.m, r.s, r.rec, r.rarity_bits, r.r_min
            );
            Ok(VerifyOutcome::Decided(r.decision))
        }
        Err(e @ ProtocolError::Aborted(_)) => {
            eprintln!("ABORTED: {e}");
            Ok(VerifyOutcome::Aborted)
        }
        Err(e) => Err(e.into()),
    }
}

/// Connection workers for `serve`; `TRIGMARK_THREADS` overrides.
fn thread_cap() -> Result<usize> {
    match std::env::var("TRIGMARK_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("TRIGMARK_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(DEFAULT_SERVE_THREADS),
    }
}

/// Serve on a fixed pool of workers, one connection per worker at a time.
fn cmd_serve(model: &Path, addr: &str) -> Result<()> {
    let m = Arc::new(load_model(model)?);
    let threads = thread_cap()?;
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    println!(
        "serving {} on {} ({threads} workers)",
        m.fingerprint(),
        listener.local_addr()?
    );
    let (tx, rx) = mpsc::sync_channel::<TcpStream>(0);
    let rx = Arc::new(Mutex::new(rx));
    for _ in 0..threads {
        let (rx, m) = (rx.clone(), m.clone());
        std::thread::spawn(move || loop {
            let next = rx.lock().expect("worker queue").recv();
            let Ok(mut stream) = next else { return };
            if let Err(e) = protocol::serve_connection(&mut stream, &*m) {
                eprintln!("connection closed: {e}");
            }
        });
    }
    for conn in listener.incoming() {
        match conn {
            Ok(stream) => tx.send(stream).context("worker pool stopped")?,
            Err(e) => eprintln!("accept failed: {e}"),
        }
    }
    Ok(())
}

fn source_pool(model: &Model, a: &UsurpArgs) -> Result<Vec<Image>> {
    let need = a.s * a.runs.max(1);
    if let Some(images) = &a.images {
        let labels = a.labels.as_ref().ok_or_else(|| anyhow!("--images needs --labels"))?;
        let d = load_idx(images, labels, Some(need.max(a.s * 4)))?;
        return Ok(d.images().to_vec());
    }
    let [h, w, c] = model.spec().input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    Ok((0..need.max(a.s * 4))
        .map(|_| {
            Image::new(
                h as u32,
                w as u32,
                c as u32,
                (0..h * w * c).map(|_| rng.gen()).collect(),
            )
        })
        .collect::<Result<_, _>>()?)
}

fn cmd_usurp(a: UsurpArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let c = model.classes() as u64;
    if a.level == Level::Two {
        let m = a.m.unwrap_or(a.s);
        let bits = stats::rarity(a.s as u64, m as u64, c)?.rarity_bits;
        if bits > usurper::MAX_FORGE_BITS {
            bail!(
                "target rarity {bits:.2} bits exceeds the {} bit cap; desk-infeasible",
                usurper::MAX_FORGE_BITS
            );
        }
    }
    let pool = source_pool(&model, &a)?;
    let mut attempts = Vec::with_capacity(a.runs);
    for run in 0..a.runs {
        let seed = a.seed.wrapping_add(run as u64);
        let key = generate_key(Some(seed ^ 0x5eed));
        let p = ForgeParams {
            t: a.t,
            eps: a.eps,
            seed,
            target_m: a.m,
            full_reverify: false,
        };
        attempts.push(usurper::forge(a.level, &model, &pool, a.s, &key, &p)?);
    }
    let report = usurper::forgery_report(&attempts, a.r_min, a.t)?;
    let dir = out_dir(a.out.clone(), Path::new("out"));
    write(&dir.join("forgery.csv"), report.to_csv())?;
    write(&dir.join("forgery.txt"), report.to_text())?;
    print!("{}", report.to_text());
    let reached = attempts.iter().filter(|a| a.success).count();
    println!("target matches reached in {reached}/{} runs", attempts.len());
    if let Some(l) = report.levels.first() {
        let target_m = a.m.unwrap_or(a.s);
        let bits = stats::rarity(a.s as u64, target_m as u64, c)?.rarity_bits;
        let model_work = stats::work_model(a.level, a.s as u64, a.t as u64, c, bits, 1.0)?;
        println!(
            "measured: {:.1} inference units + {:.1} hashes; work model: {:.1} inference units + {:.1} hashes",
            l.mean_inference_units, l.mean_hashes, model_work.cost_inferences, model_work.cost_hashes
        );
        match a.level {
            Level::One => println!("hashes per matched trigger {:.2} (expected {c})", l.mean_hash_attempts),
            Level::Two => println!(
                "joint-hash attempts per run {:.1} (expected {:.1})",
                l.mean_hash_attempts,
                bits.exp2()
            ),
            Level::Zero => {}
        }
    }
    Ok(())
}

fn cmd_stats(cmd: StatsCmd) -> Result<()> {
    match cmd {
        StatsCmd::Rarity { s, m, c } => {
            let r = stats::rarity(s, m, c)?;
            let hoeff = if m as f64 / s as f64 > 1.0 / c as f64 {
                format!("{:.4}", stats::rarity_hoeffding(s, m, c)?)
            } else {
                "n/a".into()
            };
            println!("{}", r.floor_bits());
            println!(
                "exact {:.4} bits, hoeffding {hoeff} bits, log2 p {:.4}",
                r.rarity_bits, r.log2_pvalue
            );
        }
        StatsCmd::Threshold { s, c, r_min } => {
            let m = stats::match_threshold(s, c, r_min)?;
            println!("{m}");
            println!(
                "{:.1}% of {s} triggers, rarity {:.4} bits",
                100.0 * m as f64 / s as f64,
                stats::rarity(s, m, c)?.rarity_bits
            );
        }
        StatsCmd::Size { bits, rate, c } => {
            let s = stats::required_triggers(bits, rate, c)?;
            let hoeff = (bits * std::f64::consts::LN_2 / (2.0 * (rate - 1.0 / c as f64).powi(2))).ceil();
            println!("{s}");
            println!("exact {s} triggers, hoeffding {hoeff} triggers");
        }
        StatsCmd::Work {
            level,
            s,
            t,
            rarity,
            c,
            ratio,
        } => {
            let w = stats::work_model(level, s, t, c, rarity, ratio)?;
            println!("{}", w.formula());
            println!(
                "{:e} inference units ({:e} inference, {:e} hashes)",
                w.expected_cost, w.cost_inferences, w.cost_hashes
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Command::Keygen { out, seed } => cmd_keygen(&out, seed)?,
        Command::Embed {
            config,
            out,
            no_baseline,
        } => cmd_embed(&config, out, no_baseline)?,
        Command::Attack {
            model,
            triggers,
            config,
            suite,
            repeats,
            out,
        } => {
            if !cmd_attack(&model, &triggers, &config, suite, repeats, out)? {
                eprintln!("every attack row failed");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Bundle {
            triggers,
            key,
            withhold_key,
            out,
        } => cmd_bundle(&triggers, &key, withhold_key, &out)?,
        Command::Verify {
            bundle,
            target,
            r_min,
            timeout_ms,
            out,
        } => {
            return Ok(match cmd_verify(&bundle, target, r_min, timeout_ms, out)? {
                VerifyOutcome::Decided(Decision::Granted) => ExitCode::SUCCESS,
                VerifyOutcome::Decided(Decision::Denied) => ExitCode::from(1),
                VerifyOutcome::Aborted => ExitCode::from(2),
            })
        }
        Command::Serve { model, addr } => cmd_serve(&model, &addr)?,
        Command::Usurp(a) => cmd_usurp(a)?,
        Command::Stats { cmd } => cmd_stats(cmd)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
