use std::process::Command;

const MINIMAL: &str = r#"{
  "version": 1,
  "seed": 5,
  "world": { "n_ids": 2, "encoder_count": 3 },
  "attack": { "n": 2, "t0": 2, "k_top": 2, "schedule": { "total_steps": 4, "drop_step": 2 } },
  "diagnostics": { "flatness": false, "surfaces": false },
  "ablation": { "n": [1, 2] },
  "sweep": { "parameter": "t0", "values": [1, 2] }
}"#;

fn alsuv(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_alsuv")).args(args).env("ALSUV_THREADS", "1").output().unwrap()
}

#[test]
fn subcommands_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, MINIMAL).unwrap();
    let cfg = cfg.to_str().unwrap();
    let cases: [(&str, &[&str]); 4] = [
        ("run", &["report.json", "config.json", "metrics.csv", "identities.csv", "timings.json"]),
        ("ablate", &["ablation.csv", "ablation.json"]),
        ("sweep", &["sweep.csv", "sweep.json"]),
        ("worldgen", &[]),
    ];
    for (cmd, files) in cases {
        let out = dir.path().join(cmd);
        let o = alsuv(&[cmd, "--config", cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        for f in files {
            assert!(out.join(f).exists(), "{cmd} missing {f}");
        }
    }
    let sweep = std::fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn bad_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    for body in [r#"{"version": 1, "bogus": 3}"#, r#"{"version": 99}"#, r#"{"attack": {"n": 2, "k_top": 5}}"#] {
        std::fs::write(&cfg, body).unwrap();
        let o = alsuv(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{body}");
    }
}
