use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use read_lab::checkpoint::{load_checkpoint, save_checkpoint};
use read_lab::commands::AnalysisRow;
use read_lab::error::{EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC};
use read_lab::manifest::Manifest;
use read_lab::metrics::{read_csv, read_metrics, SummaryRow};

const TINY: [&str; 6] = [
    "train_scenes=120",
    "held_out_scenes=30",
    "pretrain_epochs=1",
    "epochs=2",
    "batch_size=16",
    "warmup=4",
];

fn readlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_readlab")).args(args).output().unwrap()
}

fn tiny(sub: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub];
    args.extend_from_slice(extra);
    let out = out.to_str().unwrap();
    args.extend(["--out", out]);
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    readlab(&args)
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data and a decoder under `root`.
fn prepared(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    ok(tiny("gen", &data, &[]));
    let dec = root.join("dec");
    ok(tiny("pretrain-decoder", &dec, &["--data", s(&data)]));
    (data, dec.join("decoder.ckpt"))
}

#[test]
fn gen_is_deterministic_and_guards_its_output() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(tiny("gen", &a, &["--seed", "5"]));
    ok(tiny("gen", &b, &["--seed", "5"]));
    for f in ["train.jsonl", "suite_swap.jsonl", "suite_replace.jsonl", "suite_paraphrase.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let again = tiny("gen", &a, &["--seed", "5"]);
    assert_eq!(code(&again), EXIT_CONFIG);
    ok(tiny("gen", &a, &["--seed", "6", "--force"]));
    assert_ne!(std::fs::read(a.join("train.jsonl")).unwrap(), std::fs::read(b.join("train.jsonl")).unwrap());
    assert_eq!(Manifest::read(&a).unwrap().seed, 6);

    let one = dir.path().join("one");
    ok(tiny("gen", &one, &["--suite", "swap"]));
    assert!(one.join("suite_swap.jsonl").exists());
    assert!(!one.join("suite_replace.jsonl").exists());
}

#[test]
fn config_precedence_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("toy.cfg");
    std::fs::write(&file, "noise_fraction = 0.2\nseed = 3\ntrain_scenes = 100\nheld_out_scenes = 20\n").unwrap();
    let out = dir.path().join("d");
    ok(readlab(&["gen", "--config", s(&file), "--seed", "4", "--out", s(&out)]));
    let m = Manifest::read(&out).unwrap();
    assert_eq!(m.seed, 4);
    assert_eq!(m.config["noise_fraction"], "0.2");
    assert_eq!(m.config["train_scenes"], "100");
    assert_eq!(m.config["alpha"], "0.1");

    std::fs::write(&file, "alpha = 0.1\nbogus = 1\n").unwrap();
    let o = readlab(&["gen", "--config", s(&file), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), EXIT_CONFIG);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    let o = readlab(&["gen", "--alpha", "-1", "--out", s(&dir.path().join("y"))]);
    assert_eq!(code(&o), EXIT_CONFIG);
    let o = readlab(&["gen", "--config", s(&dir.path().join("missing.cfg")), "--out", s(&dir.path().join("z"))]);
    assert_eq!(code(&o), EXIT_MISSING);
    assert!(!dir.path().join("y").join("manifest.json").exists());
}

#[test]
fn noise_fraction_reaches_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    let noisy = dir.path().join("noisy");
    ok(tiny("gen", &clean, &[]));
    ok(tiny("gen", &noisy, &["--noise-fraction", "0.2"]));
    assert_eq!(Manifest::read(&noisy).unwrap().config["noise_fraction"], "0.2");
    let a = std::fs::read(clean.join("suite_swap.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(noisy.join("suite_swap.jsonl")).unwrap());
    assert_ne!(
        std::fs::read(clean.join("train.jsonl")).unwrap(),
        std::fs::read(noisy.join("train.jsonl")).unwrap()
    );
    // training inherits the dataset's noise setting and refuses to contradict it
    let (_, dec) = prepared(dir.path());
    let run = dir.path().join("run");
    ok(tiny("train", &run, &["--data", s(&noisy), "--decoder", s(&dec)]));
    assert_eq!(Manifest::read(&run).unwrap().config["noise_fraction"], "0.2");
    let o = tiny("train", &dir.path().join("bad"), &["--data", s(&noisy), "--decoder", s(&dec), "--noise-fraction", "0.1"]);
    assert_eq!(code(&o), EXIT_CONFIG);
}

#[test]
fn pretrain_rejects_a_small_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(readlab(&["gen", "--set", "train_scenes=4", "--set", "batch_size=2", "--set", "held_out_scenes=5", "--out", s(&data)]));
    let o = readlab(&["pretrain-decoder", "--data", s(&data), "--out", s(&dir.path().join("dec"))]);
    assert_eq!(code(&o), EXIT_CONFIG, "{}", String::from_utf8_lossy(&o.stderr));
    let o = readlab(&["pretrain-decoder", "--data", s(&dir.path().join("none")), "--out", s(&dir.path().join("dec2"))]);
    assert_eq!(code(&o), EXIT_MISSING);
}

#[test]
fn train_resume_and_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (data, dec) = prepared(dir.path());
    let full = dir.path().join("full");
    ok(tiny("train", &full, &["--data", s(&data), "--decoder", s(&dec)]));
    assert_eq!(read_metrics(&full.join("metrics.jsonl")).unwrap().len(), 2);

    // the epoch-1 checkpoint of the same config, through the library
    let inputs = read_lab::commands::load_train_inputs(&data, &dec).unwrap();
    let cfg = Manifest::read(&full).unwrap().lab_config().unwrap();
    let mut epoch1 = None;
    read_core::train::run_training(&cfg.train, inputs.dims, &inputs.dataset, &inputs.decoder, &inputs.suites, None, |m, c| {
        if m.epoch == 1 {
            epoch1 = Some(c.clone());
        }
        Ok(())
    })
    .unwrap();
    let first = dir.path().join("first.ckpt");
    save_checkpoint(&first, &epoch1.unwrap()).unwrap();

    let resumed = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    let text = std::fs::read_to_string(full.join("metrics.jsonl")).unwrap();
    std::fs::write(resumed.join("metrics.jsonl"), text.lines().next().unwrap().to_string() + "\n").unwrap();
    ok(tiny("train", &resumed, &["--data", s(&data), "--decoder", s(&dec), "--resume", s(&first)]));
    for f in ["metrics.jsonl", "checkpoint.ckpt"] {
        assert_eq!(std::fs::read(resumed.join(f)).unwrap(), std::fs::read(full.join(f)).unwrap(), "{f}");
    }

    let mut poisoned = load_checkpoint(&first).unwrap();
    let table = poisoned.bundle.image.ids()[0];
    poisoned.bundle.store.get_mut(table).value.data_mut().iter_mut().for_each(|x| *x = f64::NAN);
    let bad = dir.path().join("nan.ckpt");
    save_checkpoint(&bad, &poisoned).unwrap();
    let o = tiny("train", &dir.path().join("nan"), &["--data", s(&data), "--decoder", s(&dec), "--resume", s(&bad)]);
    assert_eq!(code(&o), EXIT_NUMERIC, "{}", String::from_utf8_lossy(&o.stderr));

    let o = tiny("train", &dir.path().join("other"), &["--data", s(&data), "--decoder", s(&dec), "--resume", s(&first), "--seed", "1"]);
    assert_eq!(code(&o), EXIT_CONFIG);
    let o = tiny("train", &dir.path().join("nodec"), &["--data", s(&data), "--decoder", s(&dir.path().join("no.ckpt"))]);
    assert_eq!(code(&o), EXIT_MISSING);
}

#[test]
fn ablation_row_one_is_plain_training() {
    let dir = tempfile::tempdir().unwrap();
    let (data, dec) = prepared(dir.path());
    let abl = dir.path().join("abl");
    let o = ok(tiny("ablate", &abl, &["--data", s(&data), "--decoder", s(&dec), "--set", "ablation_seeds=2", "--jobs", "2"]));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 4);
    let plain = dir.path().join("plain");
    ok(tiny("train", &plain, &["--data", s(&data), "--decoder", s(&dec), "--alpha", "0", "--beta", "0"]));
    assert_eq!(
        std::fs::read(abl.join("row1_seed0").join("metrics.jsonl")).unwrap(),
        std::fs::read(plain.join("metrics.jsonl")).unwrap()
    );
    let rows: Vec<read_lab::commands::AblationRow> = read_csv(&abl.join("ablation.csv")).unwrap();
    assert_eq!(rows.len(), 4 * 3);
    let mean = rows.iter().find(|r| r.row == 4 && r.seed == "mean").unwrap();
    let seeds: Vec<_> = rows.iter().filter(|r| r.row == 4 && r.seed != "mean").collect();
    assert!((mean.acc_tot - (seeds[0].acc_tot + seeds[1].acc_tot) / 2.0).abs() < 1e-12);
    assert_eq!((mean.alpha, mean.beta), (0.1, 0.5));
    let o = tiny("ablate", &dir.path().join("abl0"), &["--data", s(&data), "--decoder", s(&dec), "--alpha", "0"]);
    assert_eq!(code(&o), EXIT_CONFIG);
}

#[test]
fn eval_is_repeatable_and_checks_versions() {
    let dir = tempfile::tempdir().unwrap();
    let (data, dec) = prepared(dir.path());
    let run = dir.path().join("run");
    ok(tiny("train", &run, &["--data", s(&data), "--decoder", s(&dec)]));
    let ck = run.join("checkpoint.ckpt");
    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    ok(readlab(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&e1)]));
    ok(readlab(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&e2)]));
    for f in ["summary.csv", "rankings_swap.jsonl", "rankings_replace.jsonl", "rankings_paraphrase.jsonl"] {
        assert_eq!(std::fs::read(e1.join(f)).unwrap(), std::fs::read(e2.join(f)).unwrap(), "{f}");
    }
    let rows: Vec<SummaryRow> = read_csv(&e1.join("summary.csv")).unwrap();
    let metrics = read_metrics(&run.join("metrics.jsonl")).unwrap();
    let last = metrics.last().unwrap();
    let all = |suite: &str| rows.iter().find(|r| r.suite == suite && r.category == "all").unwrap();
    assert_eq!(all("swap").acc_single, last.acc_swap);
    assert_eq!(all("paraphrase").acc_tot, Some(last.acc_tot));
    assert_eq!(all("paraphrase").items, 30);

    let mut m = Manifest::read(&data).unwrap();
    m.format_version += 1;
    m.write(&data).unwrap();
    let o = readlab(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&dir.path().join("e3"))]);
    assert_eq!(code(&o), EXIT_CONFIG);
    let o = readlab(&["eval", "--checkpoint", s(&dir.path().join("none")), "--data", s(&data), "--out", s(&dir.path().join("e4"))]);
    assert_eq!(code(&o), EXIT_MISSING);
}

#[test]
fn analyze_joins_traces() {
    let dir = tempfile::tempdir().unwrap();
    let (data, dec) = prepared(dir.path());
    let alt = dir.path().join("alt");
    let orig = dir.path().join("orig");
    ok(tiny("train", &alt, &["--data", s(&data), "--decoder", s(&dec)]));
    ok(tiny("train", &orig, &["--data", s(&data), "--decoder", s(&dec), "--recon-target", "original"]));
    let out = dir.path().join("an");
    ok(readlab(&["analyze", s(&alt), s(&orig), "--out", s(&out)]));
    let text = std::fs::read_to_string(out.join("analysis.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "run,recon_target,alpha,beta,epoch,sim_pos_pos,sim_pos_neg,acc_tot"
    );
    let rows: Vec<AnalysisRow> = read_csv(&out.join("analysis.csv")).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].recon_target, "alternative");
    assert_eq!(rows[3].recon_target, "original");
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2, 1, 2]);
    let o = readlab(&["analyze", s(&dir.path().join("nothing")), "--out", s(&dir.path().join("an2"))]);
    assert_eq!(code(&o), EXIT_MISSING);
}
