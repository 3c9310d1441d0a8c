use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use protoforge::cache::ActivationCache;
use protoforge::datagen::Split;
use protoforge::protonet::Prototype;
use protoforge::refinery::PatchIndex;
use protoforge::store::{resolve_model, VersionStore};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_protoforge"));
    c.env_remove("PROTOFORGE_DATA");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn desk_workflow_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(&["gen-data", "--out", p(&data), "--seed", "42"]);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run(&["train", "--data", p(&data), "--out", p(out), "--protos", "5", "--seed", "42"]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key(Path::new("v0/model.json")));
    assert!(ta.contains_key(Path::new("v0/weights.bin")));
    assert!(ta.contains_key(Path::new("v0/train_cache.bin")));
    assert!(ta.contains_key(Path::new("v0/test_cache.bin")));
    assert!(ta == tb, "train outputs differ");

    let eval = |m: &Path| run(&["eval", "--model", p(m), "--data", p(&data), "--json"]).stdout;
    let e1 = eval(&a);
    assert_eq!(e1, eval(&a));
    assert_eq!(e1, eval(&b));
    let report: Value = serde_json::from_slice(&e1).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() >= 0.9, "{}", report["accuracy"]);

    let trace = |m: &Path| run(&["trace", "--model", p(m), "--video", "test-manipulated-0000", "--data", p(&data), "--json"]).stdout;
    let t1 = trace(&a);
    assert_eq!(t1, trace(&a));
    assert_eq!(t1, trace(&b));
    let t: Value = serde_json::from_slice(&t1).unwrap();
    assert_eq!(t["model_version"], "v0");
    assert_eq!(t["windows"].as_array().unwrap().len(), 4);

    let renders = dir.path().join("renders");
    let out = run(&["render", "--model", p(&a), "--out", p(&renders), "--data", p(&data), "--json"]);
    let files: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(files.as_array().unwrap().len(), 10 * 12);
    assert!(renders.join("prototypes/p0.png").exists());
    assert!(renders.join("prp/p0.png").exists());
}

#[test]
fn refine_plan_logs_a_null_delta_for_a_zero_weight_prototype() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run(&["gen-data", "--out", p(&data), "--train", "40", "--test", "20", "--seed", "4"]);
    let base = dir.path().join("base");
    run(&["train", "--data", p(&data), "--out", p(&base), "--protos", "2", "--epochs", "4"]);

    // Append a zero-weight prototype to the trained optimum and store it as a fresh root.
    let (m, vdir) = resolve_model(&base).unwrap();
    let train = ActivationCache::load(&vdir.join("train_cache.bin"), &m).unwrap();
    let test = ActivationCache::load(&vdir.join("test_cache.bin"), &m).unwrap();
    let index = PatchIndex::build(&train);
    let entry = index
        .entries()
        .iter()
        .find(|e| !m.prototypes.iter().any(|q| q.source.as_ref() == Some(&e.source)))
        .unwrap();
    let mut z = m.clone();
    z.prototypes.push(Prototype {
        id: m.next_prototype_id(),
        class: entry.label,
        vector: entry.vector.clone(),
        source: Some(entry.source.clone()),
    });
    z.class_layer.weights.push([0.0, 0.0]);
    let ztrain = ActivationCache::build(&z, Split::Train, &train.encoded()).unwrap();
    let ztest = ActivationCache::build(&z, Split::Test, &test.encoded()).unwrap();
    let zstore = dir.path().join("zero");
    VersionStore::create(&zstore, &z, &ztrain, &ztest).unwrap();

    let plan = dir.path().join("plan.json");
    fs::write(&plan, format!(r#"{{"ops": [{{"kind": "delete", "ids": ["{}"]}}]}}"#, z.prototypes.last().unwrap().id)).unwrap();
    let out_dir = dir.path().join("refined");
    let out = run(&["refine", "--model", p(&zstore), "--plan", p(&plan), "--out", p(&out_dir), "--json"]);
    let log = String::from_utf8(out.stderr).unwrap();
    assert!(log.contains("(delta 0.0000)"), "{log}");
    let steps: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(steps[0]["accuracy_delta"], 0.0);
    assert_eq!(steps[0]["version"], "v1");
    assert_eq!(resolve_model(&out_dir).unwrap().0.prototypes.len(), m.prototypes.len());
    assert_eq!(resolve_model(&zstore).unwrap().0.id, "v0");
}

#[test]
fn errors_and_data_env() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["eval", "--model", "/nonexistent", "--json"]).output().unwrap();
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(err["error"].as_str().unwrap().contains("/nonexistent"));
    let out = bin().args(["eval", "--model", "/nonexistent"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let data = dir.path().join("envdata");
    let out = bin().env("PROTOFORGE_DATA", &data).args(["gen-data", "--train", "8", "--test", "4"]).output().unwrap();
    assert!(out.status.success());
    assert!(data.join("manifest.json").exists());
    let store = dir.path().join("s");
    let out = bin()
        .env("PROTOFORGE_DATA", &data)
        .args(["train", "--data", "/does/not/exist", "--out", p(&store), "--protos", "1", "--epochs", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let plan = dir.path().join("bad.json");
    fs::write(&plan, r#"[{"kind": "delete", "ids": []}]"#).unwrap();
    let out = bin().args(["refine", "--model", p(&store), "--plan", p(&plan), "--json"]).output().unwrap();
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(err["error"].as_str().unwrap().contains("at least one"));
}
