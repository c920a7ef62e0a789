//! End-to-end runs of the scaled-nl binary: exit codes, file outputs, and
//! byte-for-byte determinism of the reports.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scaled-nl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn temp_path(name: &str) -> PathBuf {
    let mut p = std::env::temp_dir();
    p.push(format!("scaled-nl-test-{}-{name}", std::process::id()));
    p
}

#[test]
fn usage_error_exits_2() {
    let out = run(&["no-such-subcommand"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["bench", "--iters", "not-a-number"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn equiv_check_passes_and_is_deterministic() {
    let out1 = run(&["equiv-check", "--seeds", "2"]);
    assert_eq!(out1.status.code(), Some(0), "{:?}", out1);
    let out2 = run(&["equiv-check", "--seeds", "2"]);
    assert_eq!(out1.stdout, out2.stdout, "report bytes must be identical");
    assert!(String::from_utf8_lossy(&out1.stdout).starts_with("h,w,c,c_e,seed,max_rel_diff\n"));
}

#[test]
fn equiv_check_error_injection_fails() {
    let out = run(&["equiv-check", "--seeds", "1", "--inject-error"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cost_scaled_peak_column_is_flat_and_softmax_grows() {
    let out = run(&["cost", "--height", "8", "--width", "8", "--channels", "16"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let peak_of = |variant: &str, nh: &str| -> u64 {
        text.lines()
            .find(|l| l.starts_with(variant) && l.split(',').nth(5) == Some(nh))
            .and_then(|l| l.split(',').nth(7))
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| panic!("row {variant}/{nh} in:\n{text}"))
    };
    let concat = 8 * 8 * 16;
    let s1 = peak_of("scaled_nl_assoc", "1");
    let s2 = peak_of("scaled_nl_assoc", "2");
    let s4 = peak_of("scaled_nl_assoc", "4");
    let spread = s1.max(s2).max(s4) - s1.min(s2).min(s4);
    assert!(spread <= concat, "scaled peaks {s1},{s2},{s4}");
    let x1 = peak_of("softmax_nl", "1");
    let x2 = peak_of("softmax_nl", "2");
    let x4 = peak_of("softmax_nl", "4");
    assert!(x1 < x2 && x2 < x4, "softmax peaks {x1},{x2},{x4}");
}

#[test]
fn dump_attn_zero_init_softmax_is_constant_gray() {
    let out = run(&[
        "dump-attn",
        "--height",
        "3",
        "--width",
        "3",
        "--channels",
        "4",
        "--init",
        "zeros",
        "--format",
        "pgm",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let pgm = out.stdout;
    assert!(pgm.starts_with(b"P5\n"));
    let header_end = pgm.windows(4).position(|w| w == b"255\n").unwrap() + 4;
    let body = &pgm[header_end..];
    assert_eq!(body.len(), 81);
    assert!(body.iter().all(|&b| b == body[0]));
}

#[test]
fn dump_attn_reads_fmap_input_and_rejects_bad_files() {
    let sample = temp_path("sample.fmap");
    let out = run(&[
        "train-toy",
        "--steps",
        "0",
        "--samples",
        "2",
        "--dump-sample",
        sample.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");

    let ok = run(&[
        "dump-attn",
        "--channels",
        "8",
        "--input",
        sample.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_eq!(ok.status.code(), Some(0), "{ok:?}");

    // Truncated file: format error, exit 2.
    let bytes = std::fs::read(&sample).unwrap();
    let truncated = temp_path("truncated.fmap");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let bad = run(&[
        "dump-attn",
        "--channels",
        "8",
        "--input",
        truncated.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("byte offset"));

    // Corrupted magic: exit 2.
    let mut corrupt = bytes.clone();
    corrupt[0] = b'Z';
    let corrupt_path = temp_path("corrupt.fmap");
    std::fs::write(&corrupt_path, &corrupt).unwrap();
    let bad = run(&[
        "dump-attn",
        "--channels",
        "8",
        "--input",
        corrupt_path.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(2));

    for p in [sample, truncated, corrupt_path] {
        let _ = std::fs::remove_file(p);
    }
}

#[test]
fn variance_subcommand_passes_at_default_sizes() {
    let out = run(&["variance", "--pixels", "16", "--embed-channels", "4", "--trials", "2000"]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("quantity,pixels,embed_channels,trials,variance\n"));
    assert!(text.contains("\nscaled,") && text.contains("\nunscaled,"));
}

#[test]
fn grad_check_cli_passes() {
    let out = run(&["grad-check", "--height", "2", "--width", "2"]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let text = String::from_utf8(out.stdout).unwrap();
    // 2 softmax configs per head count and residual + 2 modes x scaled.
    assert_eq!(text.lines().count(), 1 + 6 + 12, "{text}");
    assert!(text.lines().skip(1).all(|l| l.ends_with("true")));
}

#[test]
fn train_toy_short_run_logs_and_exits_zero() {
    let csv_path = temp_path("train.csv");
    let out = run(&[
        "train-toy",
        "--steps",
        "40",
        "--samples",
        "16",
        "--height",
        "4",
        "--width",
        "4",
        "--channels",
        "4",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{out:?}");
    let text = std::fs::read_to_string(&csv_path).unwrap();
    assert!(text.starts_with("epoch,step,learning_rate,loss,accuracy\n"));
    assert!(text.lines().count() > 1);
    let _ = std::fs::remove_file(csv_path);
}
