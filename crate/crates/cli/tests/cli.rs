use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bet")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TREEBANK: &str = "\
# sent 1
1\tthe\t2
2\tcat\t3
3\tchased\t0
4\ta\t5
5\tmouse\t3

1\tyes\t0

1\tvery\t2
2\tgood\t0
";

#[test]
fn hints_dump_one_line_per_sentence() {
    let dir = tempfile::tempdir().unwrap();
    let tb = dir.path().join("tb.txt");
    let out = dir.path().join("hints.txt");
    fs::write(&tb, TREEBANK).unwrap();
    let o = bet(&["hints", "--treebank", s(&tb), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&out).unwrap(), "0 1 2 2\n\n0\n");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bet(&[]).status.code(), Some(1));
    assert_eq!(bet(&["train", "--corpus", "x"]).status.code(), Some(1));
    assert_eq!(bet(&["eval", "--checkpoint", "a", "--corpus", "b", "--bogus"]).status.code(), Some(1));
    assert_eq!(bet(&["--help"]).status.code(), Some(0));

    let corpus = dir.path().join("c.txt");
    fs::write(&corpus, "a b c\n").unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"n_layer": 2}"#).unwrap();
    let out = dir.path().join("run");
    let args = ["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&out)];
    assert_eq!(bet(&args).status.code(), Some(2));

    fs::write(&cfg, r#"{"variant": "bet_sg", "tokenization": "word"}"#).unwrap();
    let o = bet(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("treebank"));

    let tb = dir.path().join("tb.txt");
    fs::write(&tb, TREEBANK).unwrap();
    let mut with_tb = args.to_vec();
    with_tb.extend(["--treebank", s(&tb)]);
    let o = bet(&with_tb);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alignment"));

    fs::write(&cfg, r#"{"learning_rate": 1e300, "total_steps": 30, "n_layers": 1, "d_model": 8, "d_ff": 8}"#).unwrap();
    assert_eq!(bet(&args).status.code(), Some(3));

    let missing = dir.path().join("missing.bin");
    assert_eq!(bet(&["eval", "--checkpoint", s(&missing), "--corpus", s(&corpus)]).status.code(), Some(2));
}

#[test]
fn train_then_eval_prints_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    fs::write(&corpus, "hello there, hello world. ".repeat(10)).unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"total_steps": 3, "n_layers": 1, "d_model": 8, "d_ff": 16, "max_seq_len": 16}"#).unwrap();
    let out = dir.path().join("run");
    let o = bet(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = out.join("checkpoint.bin");
    let o = bet(&["eval", "--checkpoint", s(&ckpt), "--corpus", s(&corpus)]);
    assert!(o.status.success());
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let nats = m["cross_entropy_nats"].as_f64().unwrap();
    assert!((m["perplexity"].as_f64().unwrap() - nats.exp()).abs() < 1e-9);
    assert!((m["bpc"].as_f64().unwrap() - nats / std::f64::consts::LN_2).abs() < 1e-9);
    assert_eq!(m["predicted_tokens"].as_u64().unwrap(), 259);

    let stats = dir.path().join("stats.csv");
    let o = bet(&["analyze", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--out", s(&stats), "--layer", "0", "--head", "1"]);
    assert!(o.status.success());
    let text = fs::read_to_string(&stats).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("0,1,"));
    let o = bet(&["analyze", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--out", s(&stats), "--layer", "4"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bet(&["analyze", "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--out", s(&stats), "--top-k", "2"]);
    assert_eq!(o.status.code(), Some(1));
}
