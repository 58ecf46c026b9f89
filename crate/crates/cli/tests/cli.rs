use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/toy")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn lsmtcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsmtcr"))
        .args(args)
        .env("LSMTCR_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lsmtcr(args);
    assert!(
        out.status.success(),
        "lsmtcr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn small_gpt(dir: &Path) -> PathBuf {
    let out = dir.join("gpt");
    ok(&[
        "pretrain-cdr3",
        "--set",
        &format!("corpus={}", toy("cdr3_beta.txt")),
        "--set",
        "epochs=1",
        "--out",
        &s(&out),
    ]);
    out
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = lsmtcr(&[
        "pretrain-cdr3",
        "--set",
        "corpus=/nonexistent/corpus.txt",
        "--out",
        &s(&tmp.path().join("x")),
    ]);
    assert_eq!(missing.status.code(), Some(2));

    let gpt = small_gpt(tmp.path());
    let alpha = lsmtcr(&[
        "pretrain-cdr3",
        "--set",
        &format!("corpus={}", toy("cdr3_alpha.txt")),
        "--set",
        "chain=alpha",
        "--set",
        "epochs=1",
        "--out",
        &s(&tmp.path().join("alpha")),
    ]);
    assert!(alpha.status.success());
    let wrong_chain = lsmtcr(&[
        "transfer-alpha",
        "--set",
        &format!("init={}", s(&tmp.path().join("alpha"))),
        "--set",
        &format!("corpus={}", toy("cdr3_alpha.txt")),
        "--out",
        &s(&tmp.path().join("y")),
    ]);
    assert_eq!(wrong_chain.status.code(), Some(3));

    fs::write(gpt.join("weights.bin"), b"garbage").unwrap();
    let corrupt = lsmtcr(&["generate", "--set", &format!("cdr3_model={}", s(&gpt)), "--out", &s(&tmp.path().join("z"))]);
    assert_eq!(corrupt.status.code(), Some(4), "{}", String::from_utf8_lossy(&corrupt.stderr));

    let unknown = lsmtcr(&["evaluate", "--set", "bogus=1", "--out", &s(&tmp.path().join("w"))]);
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn invalid_config_leaves_no_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, format!("corpus = {}\nepochs = many\n", toy("epitopes.txt"))).unwrap();
    let out = tmp.path().join("run");
    let r = lsmtcr(&["pretrain-epitope", "--config", &s(&cfg), "--out", &s(&out)]);
    assert!(!r.status.success());
    let left: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(left, vec![std::ffi::OsString::from("bad.cfg")]);
}

#[test]
fn sweep_writes_fixed_headers_and_block_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let bert = tmp.path().join("bert");
    ok(&[
        "pretrain-epitope",
        "--set",
        &format!("corpus={}", toy("epitopes.txt")),
        "--set",
        "epochs=1",
        "--out",
        &s(&bert),
    ]);
    assert_eq!(header(&bert.join("validation.csv")), "metric,value");
    assert_eq!(header(&bert.join("train_log.csv")), "step,loss,lr");

    let gpt = small_gpt(tmp.path());
    let ft = tmp.path().join("ft");
    ok(&[
        "finetune",
        "--set",
        &format!("data={}", toy("pairs.csv")),
        "--set",
        &format!("epitope_model={}", s(&bert)),
        "--set",
        &format!("cdr3_model={}", s(&gpt)),
        "--set",
        "epochs=1",
        "--set",
        "limit=4",
        "--out",
        &s(&ft),
    ]);
    let gen = tmp.path().join("gen");
    ok(&[
        "generate",
        "--set",
        &format!("cdr3_model={}", s(&ft)),
        "--set",
        &format!("epitope_model={}", s(&bert)),
        "--set",
        "epitopes=GILGFVFTL,NLVPMVATV",
        "--temperature",
        "0.5,1.0,1.5",
        "--set",
        "samples=50",
        "--out",
        &s(&gen),
    ]);
    let csv = gen.join("generated.csv");
    assert_eq!(header(&csv), "epitope,chain,rank,cdr3,logprob,temperature,seed");
    let text = fs::read_to_string(&csv).unwrap();
    for ep in ["GILGFVFTL", "NLVPMVATV"] {
        let n = text.lines().filter(|l| l.starts_with(&format!("{ep},"))).count();
        assert_eq!(n, 150, "{ep}");
    }

    let eval = tmp.path().join("eval");
    ok(&[
        "evaluate",
        "--set",
        &format!("reference={}", toy("cdr3_beta.txt")),
        "--set",
        &format!("inputs={}", s(&csv)),
        "--out",
        &s(&eval),
    ]);
    assert_eq!(
        header(&eval.join("diversity.csv")),
        lsmtcr_core::metrics::DIVERSITY_HEADER
    );
    assert_eq!(header(&eval.join("report_1.csv")), "metric,value");
}

#[test]
fn generated_cdr3s_flow_into_assembly() {
    let tmp = tempfile::tempdir().unwrap();
    let gpt = small_gpt(tmp.path());
    let gen = tmp.path().join("gen");
    ok(&[
        "generate",
        "--set",
        &format!("cdr3_model={}", s(&gpt)),
        "--set",
        "samples=5",
        "--out",
        &s(&gen),
    ]);
    let asm = tmp.path().join("asm");
    ok(&[
        "train-assembler",
        "--set",
        &format!("data={}", toy("pairs.csv")),
        "--set",
        "stage1_epochs=1",
        "--set",
        "stage2_epochs=1",
        "--set",
        "max_full=48",
        "--out",
        &s(&asm),
    ]);
    let genes = tmp.path().join("genes");
    ok(&[
        "predict-genes",
        "--set",
        &format!("assembler_model={}", s(&asm)),
        "--set",
        &format!("input={}", s(&gen.join("generated.csv"))),
        "--out",
        &s(&genes),
    ]);
    assert_eq!(header(&genes.join("genes.csv")), "chain,cdr3,v_gene,v_prob,j_gene,j_prob");
    let out = tmp.path().join("assembled");
    ok(&[
        "assemble",
        "--set",
        &format!("assembler_model={}", s(&asm)),
        "--set",
        &format!("input={}", s(&gen.join("generated.csv"))),
        "--out",
        &s(&out),
    ]);
    let rows = fs::read_to_string(out.join("assembly.csv")).unwrap().lines().count() - 1;
    let generated = fs::read_to_string(gen.join("generated.csv")).unwrap().lines().count() - 1;
    assert_eq!(rows, generated);
    assert!(ok(&["inspect", &s(&asm)]).contains("stage2"));
}
