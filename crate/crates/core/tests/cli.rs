use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wbaug(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wbaug"))
        .args(args)
        .current_dir(cwd)
        .env("WBAUG_WORKERS", "2")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn end_to_end_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let synth = wbaug(&["synth", "data", "--count", "60", "--width", "32", "--height", "24", "--seed", "9"], dir);
    assert_eq!(code(&synth), 0, "{}", String::from_utf8_lossy(&synth.stderr));
    assert!(stdout(&synth).contains("groups: 60"));

    let build = wbaug(&["build-model", "data/manifest.txt", "-o", "emu.wbm", "--bins", "24"], dir);
    assert_eq!(code(&build), 0, "{}", String::from_utf8_lossy(&build.stderr));
    let build = wbaug(
        &["build-model", "data/manifest_correction.txt", "-o", "cor.wbm", "--direction", "correct", "--bins", "24"],
        dir,
    );
    assert_eq!(code(&build), 0, "{}", String::from_utf8_lossy(&build.stderr));

    let info = wbaug(&["info", "emu.wbm"], dir);
    assert_eq!(code(&info), 0);
    let text = stdout(&info);
    assert!(text.contains("records: 60"), "{text}");
    assert!(text.contains("format_version: 1"), "{text}");

    let aug = wbaug(
        &["augment", "emu.wbm", "data/base0000_7500K_CS.png", "data/base0001.png", "-o", "out", "--settings", "2850K_AS,6500K_CS", "--k", "5"],
        dir,
    );
    assert_eq!(code(&aug), 0, "{}", String::from_utf8_lossy(&aug.stderr));
    assert!(dir.join("out/base0001_6500K_CS.png").exists());
    assert_eq!(fs::read_dir(dir.join("out")).unwrap().count(), 2 * 2 + 1);

    let cor = wbaug(&["correct", "cor.wbm", "data/base0002_2850K_AS.png", "-o", "fixed"], dir);
    assert_eq!(code(&cor), 0, "{}", String::from_utf8_lossy(&cor.stderr));
    assert!(dir.join("fixed/base0002_2850K_AS_corrected.png").exists());

    // exit codes: usage 1, data 2, model 3
    assert_eq!(code(&wbaug(&["augment", "emu.wbm"], dir)), 1);
    assert_eq!(code(&wbaug(&["frobnicate"], dir)), 1);
    assert_eq!(code(&wbaug(&["augment", "emu.wbm", "data/base0001.png", "-o", "x", "--settings", "4000K_AS"], dir)), 1);
    assert_eq!(code(&wbaug(&["correct", "emu.wbm", "data/base0001.png", "-o", "x"], dir)), 1);
    assert_eq!(code(&wbaug(&["build-model", "missing.txt", "-o", "m.wbm"], dir)), 2);
    fs::write(dir.join("junk.wbm"), b"definitely not a model").unwrap();
    assert_eq!(code(&wbaug(&["info", "junk.wbm"], dir)), 3);
    assert_eq!(code(&wbaug(&["augment", "junk.wbm", "data/base0001.png", "-o", "x"], dir)), 3);
    assert_eq!(code(&wbaug(&["--help"], dir)), 0);
}
