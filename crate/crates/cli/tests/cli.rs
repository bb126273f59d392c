use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trigmark"));
    c.env_remove("TRIGMARK_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn trigmark")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Class k lights up row band k; a little deterministic noise elsewhere.
fn write_idx(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let mut img = Vec::new();
    img.extend_from_slice(&0x0803u32.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&28u32.to_be_bytes());
    img.extend_from_slice(&28u32.to_be_bytes());
    let mut lab = Vec::new();
    lab.extend_from_slice(&0x0801u32.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    let mut state = 0x1234_5678u32;
    for i in 0..n {
        let k = i % 10;
        lab.push(k as u8);
        for r in 0..28 {
            for _ in 0..28 {
                state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                let noise = (state >> 27) as u8;
                img.push(if r / 2 == k + 2 { 200 + noise } else { noise });
            }
        }
    }
    let (pi, pl) = (dir.join("images-idx3-ubyte"), dir.join("labels-idx1-ubyte"));
    std::fs::write(&pi, img).unwrap();
    std::fs::write(&pl, lab).unwrap();
    (pi, pl)
}

fn write_config(dir: &Path) -> PathBuf {
    let (pi, pl) = write_idx(dir, 400);
    let cfg = format!(
        r#"output_dir = "{out}"

[dataset]
format = "idx"
train = ["{pi}", "{pl}"]
test = ["{pi}", "{pl}"]
test_limit = 100
split_seed = 3

[model]
preset = "desk-mnist"
seed = 2

[watermark]
s = 8
level = 2
selection_seed = 4
key_seed = 5

[train]
epochs = 2

[attack]
suites = ["quantization", "jpeg"]
repeats = 1
"#,
        out = dir.join("out").display(),
        pi = pi.display(),
        pl = pl.display()
    );
    let p = dir.join("exp.toml");
    std::fs::write(&p, cfg).unwrap();
    p
}

#[test]
fn stats_subcommands() {
    let o = run(&["stats", "rarity", "40", "33", "10"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("86"), "{}", stdout(&o));

    let o = run(&["stats", "threshold", "40", "10", "20"]);
    assert_eq!(stdout(&o).lines().next(), Some("16"));

    let o = run(&["stats", "work", "2", "--s", "40", "--t", "100", "--R", "86"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("2^86"), "{}", stdout(&o));

    let o = run(&["stats", "rarity", "10", "11", "10"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn keygen_is_reproducible_with_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.hex"), dir.path().join("b.hex"));
    for p in [&a, &b] {
        assert!(run(&["keygen", "--out", p.to_str().unwrap(), "--seed", "9"])
            .status
            .success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn missing_config_exits_2_naming_path() {
    let o = run(&["embed", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/exp.toml"));
}

#[test]
fn usurp_refuses_infeasible_level2_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    assert!(bin()
        .args(["embed", "--config", cfg.to_str().unwrap(), "--no-baseline"])
        .output()
        .unwrap()
        .status
        .success());
    let model = out.join("model.tmm");
    let o = run(&["usurp", "--model", model.to_str().unwrap(), "--level", "2", "--s", "40"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("24 bit"));
}

#[test]
fn embed_attack_bundle_verify_serve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");

    let o = run(&["embed", "--config", cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("baseline"));
    for f in ["model.tmm", "triggers.tmt", "key.hex", "embed.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let p = |f: &str| out.join(f).to_str().unwrap().to_string();

    let o = run(&[
        "attack",
        "--model",
        &p("model.tmm"),
        "--triggers",
        &p("triggers.tmt"),
        "--config",
        cfg,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("attacks.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 1 + 3 + 10);

    let o = run(&[
        "bundle",
        "--triggers",
        &p("triggers.tmt"),
        "--key",
        &p("key.hex"),
        "--out",
        &p("ev.tmb"),
    ]);
    assert!(o.status.success());

    // A threshold of zero bits is always met; an impossible one never is.
    let o = run(&[
        "verify",
        "--bundle",
        &p("ev.tmb"),
        "--model",
        &p("model.tmm"),
        "--r-min",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("GRANTED"));
    let o = run(&[
        "verify",
        "--bundle",
        &p("ev.tmb"),
        "--model",
        &p("model.tmm"),
        "--r-min",
        "1000",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("DENIED"));

    let mut text = std::fs::read(out.join("ev.tmb")).unwrap();
    let at = text.windows(5).position(|w| w == b"\ns = ").unwrap();
    text[at + 5] = b'9';
    std::fs::write(out.join("bad.tmb"), &text).unwrap();
    let o = run(&["verify", "--bundle", &p("bad.tmb"), "--model", &p("model.tmm")]);
    assert_eq!(o.status.code(), Some(2));

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut server = bin()
        .args(["serve", "--model", &p("model.tmm"), "--addr", &addr])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    assert!(line.starts_with("serving"), "{line}");
    let local = run(&[
        "verify",
        "--bundle",
        &p("ev.tmb"),
        "--model",
        &p("model.tmm"),
        "--r-min",
        "0",
    ]);
    let remote = run(&["verify", "--bundle", &p("ev.tmb"), "--endpoint", &addr, "--r-min", "0"]);
    server.kill().unwrap();
    let _ = server.wait();
    assert_eq!(remote.status.code(), Some(0));
    let first = |o: &Output| stdout(o).lines().next().unwrap_or("").to_string();
    assert_eq!(first(&local), first(&remote));

    let o = run(&[
        "verify",
        "--bundle",
        &p("ev.tmb"),
        "--endpoint",
        &addr,
        "--timeout-ms",
        "200",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ABORTED"));
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let env_out = dir.path().join("env-out");
    let o = bin()
        .args(["embed", "--config", cfg.to_str().unwrap(), "--no-baseline"])
        .env("TRIGMARK_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_out.join("model.tmm").is_file());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn same_config_gives_identical_model_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut models = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = run_embed(&cfg, &out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        models.push(std::fs::read(out.join("model.tmm")).unwrap());
    }
    assert_eq!(models[0], models[1]);
}

fn run_embed(cfg: &Path, out: &Path) -> Output {
    run(&[
        "embed",
        "--config",
        cfg.to_str().unwrap(),
        "--no-baseline",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn serve_rejects_bad_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("m");
    assert!(run_embed(&cfg, &out).status.success());
    let o = bin()
        .args([
            "serve",
            "--model",
            out.join("model.tmm").to_str().unwrap(),
            "--addr",
            "127.0.0.1:0",
        ])
        .env("TRIGMARK_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("TRIGMARK_THREADS"));
}

#[test]
fn unreadable_model_fails_attack() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let o = run(&[
        "attack",
        "--model",
        "/nonexistent/model.tmm",
        "--triggers",
        "/nonexistent/t.tmt",
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
