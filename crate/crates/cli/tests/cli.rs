use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[protocol]
n_t = 20

[transformer]
l_t = 1
d_e = 8
n_h = 2
d_f = 16

[fno]
l_f = 1
d_v = 8
k_max = 8
n_c = 2

[train]
b = 1
k = 2
m = 8
anchor_samples = 8
steps = 5
checkpoint_every = 1
keep_last = 2

[finetune]
steps = 4
n_samples = 0

[eval]
n_samples = 0
"#;

fn noqs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noqs")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = noqs(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(dir: &Path) -> String {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn train_writes_manifest_checkpoints_and_resumes_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let run = tmp.path().join("run");
    ok(&["train", "--config", &cfg, "--out", s(&run)]);
    for f in ["manifest.toml", "config.toml", "history.tsv", "best.ckpt", "final.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let kept: Vec<_> = std::fs::read_dir(run.join("checkpoints")).unwrap().collect();
    assert_eq!(kept.len(), 2);
    let manifest = std::fs::read_to_string(run.join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 3") && manifest.contains("[config"), "{manifest}");

    // rerunning from the snapshot reproduces the history
    let again = tmp.path().join("again");
    ok(&["train", "--config", s(&run.join("config.toml")), "--out", s(&again)]);
    let h1 = std::fs::read_to_string(run.join("history.tsv")).unwrap();
    assert_eq!(h1, std::fs::read_to_string(again.join("history.tsv")).unwrap());

    // resume from step 4 and continue to 5
    let resumed = tmp.path().join("resumed");
    ok(&["train", "--config", &cfg, "--out", s(&resumed), "--resume", s(&run.join("checkpoints/step-00000004.ckpt"))]);
    assert_eq!(h1, std::fs::read_to_string(resumed.join("history.tsv")).unwrap());

    // a seed override changes the run
    let other = tmp.path().join("other");
    ok(&["train", "--config", &cfg, "--out", s(&other), "--seed", "4"]);
    assert_ne!(h1, std::fs::read_to_string(other.join("history.tsv")).unwrap());
}

#[test]
fn evaluate_compare_finetune_and_superres() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let run = tmp.path().join("run");
    ok(&["pretrain", "--config", &cfg, "--out", s(&run)]);
    let ckpt = run.join("pretrained.ckpt");
    let protos = tmp.path().join("protocols");
    let listed = ok(&["generate-protocols", "--config", &cfg, "--kind", "gaussian", "--hz-amplitude", "0.05", "--out", s(&protos)]);
    let proto = listed.trim().to_string();

    let model = tmp.path().join("model.txt");
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--protocol", &proto, "--out", s(&model), "--exact"]);
    let text = std::fs::read_to_string(&model).unwrap();
    assert!(text.contains("# noqs-trajectory v1") && text.contains("n_samples=exact") && text.contains("lattice=2x2"));

    let exact = tmp.path().join("exact.txt");
    ok(&["oracle", "--protocol", &proto, "--lattice", "2x2", "--out", s(&exact)]);
    let exact_tight = tmp.path().join("exact_tight.txt");
    ok(&["oracle", "--protocol", &proto, "--tol", "1e-11", "--out", s(&exact_tight)]);

    let cmp = tmp.path().join("cmp");
    let printed = ok(&["compare", s(&exact), s(&exact_tight), "--out", s(&cmp)]);
    assert!(printed.contains("mae"));
    for f in ["metrics.toml", "X.svg", "ZZ.svg", "Z.svg", "E.svg", "X.tsv"] {
        assert!(cmp.join(f).exists(), "{f} missing");
    }
    let metrics: toml::Table = toml::from_str(&std::fs::read_to_string(cmp.join("metrics.toml")).unwrap()).unwrap();
    let x_mae = metrics["x"]["mae"].as_float().unwrap();
    assert!(x_mae < 1e-8, "{x_mae}");
    ok(&["compare", s(&model), s(&model), "--out", s(&tmp.path().join("self"))]);

    // measurements at four grid times from the oracle file
    let exact_text = std::fs::read_to_string(&exact).unwrap();
    let lines: Vec<&str> = exact_text.lines().filter(|l| !l.starts_with('#')).collect();
    let mut meas = String::from("# noqs-measurements v1\n# protocol=gaussian\n");
    for i in [4, 8, 12, 16] {
        let c: Vec<&str> = lines[i].split_whitespace().collect();
        meas.push_str(&format!("{} {} {}\n", c[0], c[1], c[2]));
    }
    let meas_path = tmp.path().join("meas.txt");
    std::fs::write(&meas_path, meas).unwrap();
    let ft = tmp.path().join("ft");
    ok(&["finetune", "--checkpoint", s(&ckpt), "--protocol", &proto, "--measurements", s(&meas_path), "--out", s(&ft)]);
    for f in ["before.txt", "after.txt", "losses.tsv", "finetuned.ckpt"] {
        assert!(ft.join(f).exists(), "{f} missing");
    }

    let sr = tmp.path().join("sr");
    let verdict = ok(&["superres", "--checkpoint", s(&ckpt), "--protocol", &proto, "--train-nt", "20", "--eval-nt", "40", "--exact", "--out", s(&sr)]);
    assert!(verdict.trim() == "PASS" || verdict.trim() == "FAIL");
    for f in ["summary.toml", "error_profile.tsv", "error_profile.svg", "fine.txt"] {
        assert!(sr.join(f).exists(), "{f} missing");
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let bad_cfg = tmp.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[train]\nlearning_rate = 1.0\n").unwrap();
    assert_eq!(noqs(&["pretrain", "--config", s(&bad_cfg), "--out", s(tmp.path())]).status.code(), Some(2));

    let run = tmp.path().join("run");
    ok(&["pretrain", "--config", &cfg, "--out", s(&run)]);
    let ckpt = run.join("pretrained.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 5);
    let broken = tmp.path().join("broken.ckpt");
    std::fs::write(&broken, bytes).unwrap();
    let protos = tmp.path().join("p");
    let proto = ok(&["generate-protocols", "--config", &cfg, "--out", s(&protos)]).trim().to_string();
    let out = tmp.path().join("o.txt");
    assert_eq!(noqs(&["evaluate", "--checkpoint", s(&broken), "--protocol", &proto, "--out", s(&out)]).status.code(), Some(4));
    assert_eq!(noqs(&["evaluate", "--checkpoint", s(&tmp.path().join("nope")), "--protocol", &proto, "--out", s(&out)]).status.code(), Some(4));

    // a protocol on a different time window is refused with the field named
    let long_cfg = tmp.path().join("long.toml");
    std::fs::write(&long_cfg, TINY.replace("n_t = 20", "n_t = 20\nt_max = 2.0")).unwrap();
    let long = ok(&["generate-protocols", "--config", s(&long_cfg), "--out", s(&tmp.path().join("long"))]).trim().to_string();
    let res = noqs(&["evaluate", "--checkpoint", s(&ckpt), "--protocol", &long, "--out", s(&out), "--exact"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("T_max"));

    let res = noqs(&["oracle", "--protocol", &proto, "--lattice", "2by2", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
}
