use std::path::Path;
use std::process::{Command, Output};

fn avflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avflow")).args(args).output().unwrap()
}

fn out_dir(tmp: &Path, name: &str) -> String {
    tmp.join(name).display().to_string()
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = avflow(&["gen-data", "--out", &out_dir(tmp.path(), "a"), "--set", "world.kernal=affine_gaussian"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("world.kernal"));

    let o = avflow(&["evaluate", "--out", &out_dir(tmp.path(), "b")]);
    assert_eq!(o.status.code(), Some(1));

    assert_eq!(avflow(&["evaluate"]).status.code(), Some(1));
    assert_eq!(avflow(&["--help"]).status.code(), Some(0));

    let missing = tmp.path().join("nope.avfc").display().to_string();
    let o = avflow(&["evaluate", "--out", &out_dir(tmp.path(), "c"), "--checkpoint", &missing]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_resolve() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        let o = avflow(&[
            "gen-data",
            "--config",
            path.to_str().unwrap(),
            "--set",
            "world.episodes=3",
            "--out",
            &out_dir(tmp.path(), &n.to_string()),
        ]);
        assert!(o.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&o.stderr));
        n += 1;
    }
    assert!(n >= 3);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut sums = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(threads);
        let o = Command::new(env!("CARGO_BIN_EXE_avflow"))
            .env("AVF_THREADS", threads)
            .args(["evaluate", "--oracle", "--seed", "4", "--out", out.to_str().unwrap()])
            .args(["--set", "world.episodes=20", "--set", "eval.horizon=3", "--set", "eval.initializations=6"])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        sums.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(sums[0], sums[1]);
}
