use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use relax51::baselines::{FIG4_SOURCE, FIG3_SOURCE};
use relax51::dump::parse_sigma_dump;
use relax51::invariants::check_specification;
use relax51::isa::IsaParams;
use relax51::program::{build_label_map, parse_program};

fn relax51(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_relax51"));
    for a in args {
        cmd.arg(a);
    }
    cmd.output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn minimal_program_report() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "a.asm", "L0: nop 1\njmp L0\n");
    let o = relax51(&[&src, &"--strategy", &"lfp", &"--report"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("total bytes: 3"));
    assert!(out.contains("iterations used: 1 (bound 2n = 4)"), "{out}");
    for name in ["lfp", "all-long", "gfp", "optimal"] {
        assert!(out.lines().any(|l| l.starts_with(name)), "{out}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.asm", "jmp\n");
    assert_eq!(relax51(&[&bad]).status.code(), Some(1));

    let undefined = write(dir.path(), "undef.asm", "jmp nowhere\n");
    let o = relax51(&[&undefined]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere"));

    let big = write(dir.path(), "big.asm", "other 70000\n");
    let o = relax51(&[&big]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("64 KB"));

    let many = write(dir.path(), "many.asm", &("L: nop 1\n".to_string() + &"jmp L\n".repeat(20)));
    let o = relax51(&[&many, &"--strategy", &"optimal"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("too many branches"));

    let slow = write(dir.path(), "slow.asm", "jmp L\nother 200\nL: nop 1\n");
    assert_eq!(relax51(&[&slow, &"--max-iterations", &"1"]).status.code(), Some(3));

    assert_eq!(relax51(&[&dir.path().join("missing.asm")]).status.code(), Some(4));
    let out_dir = dir.path().join("no/such/dir/out.bin");
    assert_eq!(relax51(&[&slow, &"--emit-bin", &out_dir]).status.code(), Some(4));

    assert_eq!(relax51(&[&slow, &"--strategy", &"fast"]).status.code(), Some(1));
    assert_eq!(relax51(&[&slow, &"--isa", &"z80"]).status.code(), Some(1));
    assert_eq!(relax51(&[&"--help"]).status.code(), Some(0));
}

#[test]
fn params_file() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "a.asm", "L0: nop 1\njz L0\n");
    let params = write(dir.path(), "p.toml", "conditional_size = 3\n");
    let o = relax51(&[&src, &"--params", &params]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("total bytes: 4"));
    let broken = write(dir.path(), "q.toml", "segment_bits = 3\n");
    assert_eq!(relax51(&[&src, &"--params", &broken]).status.code(), Some(1));
}

#[test]
fn outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "fig3.asm", FIG3_SOURCE);
    let mut runs = Vec::new();
    for k in 0..2 {
        let bin = dir.path().join(format!("out{k}.bin"));
        let dump = dir.path().join(format!("out{k}.jsonl"));
        let iters = dir.path().join(format!("iter{k}.jsonl"));
        let o = relax51(&[&src, &"--emit-bin", &bin, &"--dump-sigma", &dump, &"--dump-iterations", &iters, &"--report"]);
        assert_eq!(o.status.code(), Some(0));
        runs.push((o.stdout, fs::read(bin).unwrap(), fs::read(dump).unwrap(), fs::read(iters).unwrap()));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn dumped_policies_reload_consistently() {
    let dir = tempfile::tempdir().unwrap();
    let src_text = "L0: nop 1\njmp L1\nother 300\ncall L0\nL1: cjne L0\n";
    let src = write(dir.path(), "a.asm", src_text);
    let p = parse_program(src_text).unwrap();
    let labels = build_label_map(&p).unwrap();
    for strategy in ["lfp", "all-long", "gfp", "optimal"] {
        let dump = dir.path().join(format!("{strategy}.jsonl"));
        let o = relax51(&[&src, &"--strategy", &strategy, &"--dump-sigma", &dump, &"--check-invariants"]);
        assert_eq!(o.status.code(), Some(0), "{strategy}: {}", stderr(&o));
        let parsed = parse_sigma_dump(&fs::read_to_string(&dump).unwrap()).unwrap();
        assert!(check_specification(&p, &labels, &parsed.to_policy(), &IsaParams::mcs51()).holds());
    }
}

#[test]
fn empty_program_dump() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "empty.asm", "; nothing\n");
    let dump = dir.path().join("d.jsonl");
    assert_eq!(relax51(&[&src, &"--dump-sigma", &dump]).status.code(), Some(0));
    let parsed = parse_sigma_dump(&fs::read_to_string(&dump).unwrap()).unwrap();
    assert_eq!(parsed.records.len(), 1);
    assert_eq!(parsed.records[0].address, 0);
}

#[test]
fn fig4_dumps_differ_between_lfp_and_optimal() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "fig4.asm", FIG4_SOURCE);
    let mut lengths = Vec::new();
    for strategy in ["lfp", "optimal"] {
        let dump = dir.path().join(format!("{strategy}.jsonl"));
        assert_eq!(relax51(&[&src, &"--strategy", &strategy, &"--dump-sigma", &dump]).status.code(), Some(0));
        lengths.push(parse_sigma_dump(&fs::read_to_string(&dump).unwrap()).unwrap().lengths());
    }
    let differ = lengths[0].iter().zip(&lengths[1]).filter(|(a, b)| a != b).count();
    assert!(differ >= 3, "{differ}");
}

#[test]
fn emitted_binary_matches_size() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "a.asm", "L0: nop 1\njmp L0\n");
    let bin = dir.path().join("a.bin");
    assert_eq!(relax51(&[&src, &"--emit-bin", &bin]).status.code(), Some(0));
    assert_eq!(fs::read(bin).unwrap(), vec![0x00, 0x80, 0xFD]);
}

#[test]
fn exact_fit_reports_end_zero() {
    let dir = tempfile::tempdir().unwrap();
    let src = write(dir.path(), "a.asm", "L0: other 65534\njmp L0\n");
    let o = relax51(&[&src]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("end address: 0x0000"));
    assert!(stdout(&o).contains("total bytes: 65536"));
}
