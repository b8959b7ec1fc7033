use std::fs;
use std::process::Command;

fn semcons() -> Command {
    Command::new(env!("CARGO_BIN_EXE_semcons"))
}

fn error_line(stderr: &[u8]) -> serde_json::Value {
    let text = String::from_utf8_lossy(stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{line}: {e}"))
}

#[test]
fn failures_exit_nonzero_with_a_json_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = semcons()
        .args(["train", "--config"])
        .arg(tmp.path().join("missing.toml"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert_eq!(error_line(&out.stderr)["error"], "config");

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "steps = 3\nunknown_key = 1\n").unwrap();
    let out = semcons().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert!(!out.status.success());
    let err = error_line(&out.stderr);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("unknown_key"));

    let out = semcons().arg("infer").arg(tmp.path()).output().unwrap();
    assert!(!out.status.success());
    assert!(error_line(&out.stderr)["message"].as_str().unwrap().contains("--checkpoint"));
}

#[test]
fn verbs_run_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(
        &cfg,
        "data_dir = \"data\"\nimage_size = 16\ntrain_images = 2\neval_images = 2\nwidths = [4, 4]\nres_blocks = 1\n\
         embed_dim = 8\ndisc_width = 2\nattention_hidden = 2\npatch_count = 16\nglobal_h = 8\nglobal_w = 8\n\
         local_h = 8\nlocal_w = 8\ninfer_stride = 4\nsteps = 2\ncheckpoint_every = 1\n",
    )
    .unwrap();
    let ok = |args: &[&str]| {
        let out = semcons().args(args).arg("--config").arg(&cfg).current_dir(tmp.path()).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    ok(&["generate-data"]);
    assert!(tmp.path().join("data/manifest.json").exists());
    ok(&["train", "--out", "run", "--seed", "4"]);
    ok(&["infer", "data/eval/images", "--checkpoint", "run/final.ckpt", "--out", "pred"]);
    let report = ok(&["eval", "pred", "data/eval", "--out", "scores"]);
    assert!(report.contains("pixel_acc"));

    // infer falls back to the config archived by train
    let out = semcons()
        .args(["infer", "data/eval/images", "--checkpoint", "run/final.ckpt", "--out", "pred2"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let names = ["0000.png", "0001.png"];
    for n in names {
        assert_eq!(fs::read(tmp.path().join("pred").join(n)).unwrap(), fs::read(tmp.path().join("pred2").join(n)).unwrap());
    }
}
