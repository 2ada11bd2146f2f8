// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use serde_json::Value;
use tokenlens::eval::toy::{make_toy_model, ToyFixture, ToyKind, ToySpec};
use tokenlens_ffi::*;

struct Toy {
    _dir: tempfile::TempDir,
    bundle: CString,
    vocab: CString,
    class_vocab: Option<CString>,
    fx: ToyFixture,
}

fn toy(kind: ToyKind) -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let fx = make_toy_model(&ToySpec::new(kind, 2)).unwrap();
    fx.bundle.save(&dir.path().join("bundle")).unwrap();
    fx.vocab.save(&dir.path().join("words.tlv")).unwrap();
    let class_vocab = fx.class_vocab.as_ref().map(|cv| {
        let p = dir.path().join("classes.tlv");
        cv.save(&p).unwrap();
        cpath(&p)
    });
    Toy {
        bundle: cpath(&dir.path().join("bundle")),
        vocab: cpath(&dir.path().join("words.tlv")),
        class_vocab,
        _dir: dir,
        fx,
    }
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

unsafe fn take_json(s: *mut c_char) -> Value {
    assert!(!s.is_null());
    let v = serde_json::from_str(CStr::from_ptr(s).to_str().unwrap()).unwrap();
    tl_string_free(s);
    v
}

unsafe fn load(t: &Toy) -> (*mut TlBundle, *mut TlVocab) {
    let mut b = ptr::null_mut();
    let mut v = ptr::null_mut();
    assert_eq!(tl_bundle_load(t.bundle.as_ptr(), &mut b), TlStatus::Ok);
    assert_eq!(tl_vocab_load(t.vocab.as_ptr(), &mut v), TlStatus::Ok);
    (b, v)
}

#[test]
fn interpret_matches_library() {
    let t = toy(ToyKind::Identity);
    unsafe {
        let (b, v) = load(&t);
        assert_eq!(tl_vocab_len(v), t.fx.vocab.len());
        let png = t.fx.images[0].image.encode_png().unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(tl_interpret(b, v, png.as_ptr(), png.len(), 1, 1, 2, &mut out), TlStatus::Ok);
        let got = take_json(out);
        assert_eq!(got[0]["ranking"][0]["text"], "apple");
        assert_eq!(got[0]["ranking"].as_array().unwrap().len(), 2);

        let patches = tokenlens::preprocess(&t.fx.images[0].image, &t.fx.bundle.manifest).unwrap();
        let trace = tokenlens::forward_full(&patches, &t.fx.bundle, None).unwrap();
        let lib = tokenlens::interpret(tokenlens::TokenRef::new(1, 1), &trace, &t.fx.bundle, &t.fx.vocab, Some(2)).unwrap();
        assert_eq!(got[0], serde_json::to_value(&lib).unwrap());

        let mut all = ptr::null_mut();
        assert_eq!(tl_interpret(b, v, png.as_ptr(), png.len(), 2, -1, 0, &mut all), TlStatus::Ok);
        let all = take_json(all);
        assert_eq!(all.as_array().unwrap().len(), t.fx.bundle.manifest.seq_len());

        let mut summary = ptr::null_mut();
        assert_eq!(tl_bundle_summary(b, &mut summary), TlStatus::Ok);
        assert_eq!(take_json(summary)["manifest"]["num_layers"], 2);
        tl_vocab_free(v);
        tl_bundle_free(b);
    }
}

#[test]
fn classify_with_plan_repairs_attack() {
    let t = toy(ToyKind::PlantedAttack);
    unsafe {
        let mut b = ptr::null_mut();
        let mut cv = ptr::null_mut();
        assert_eq!(tl_bundle_load(t.bundle.as_ptr(), &mut b), TlStatus::Ok);
        assert_eq!(tl_vocab_load(t.class_vocab.as_ref().unwrap().as_ptr(), &mut cv), TlStatus::Ok);
        let png = t.fx.images[1].image.encode_png().unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(tl_classify(b, cv, png.as_ptr(), png.len(), ptr::null(), &mut out), TlStatus::Ok);
        assert_eq!(take_json(out)[0]["text"], "ocean");
        let pos = t.fx.attack_patch.unwrap() + 1;
        let plan = CString::new(format!(r#"{{"replacements": [{{"layer": 1, "position": {pos}, "value": "zero"}}]}}"#)).unwrap();
        assert_eq!(tl_classify(b, cv, png.as_ptr(), png.len(), plan.as_ptr(), &mut out), TlStatus::Ok);
        assert_eq!(take_json(out)[0]["text"], "forest");

        let mut sal = ptr::null_mut();
        assert_eq!(tl_saliency(b, png.as_ptr(), png.len(), 2, pos, &mut sal), TlStatus::Ok);
        let sal = take_json(sal);
        assert_eq!(sal["grid"].as_array().unwrap().len(), 16);
        tl_vocab_free(cv);
        tl_bundle_free(b);
    }
}

#[test]
fn errors_set_status_and_message() {
    let t = toy(ToyKind::Identity);
    unsafe {
        let mut b = ptr::null_mut();
        let missing = CString::new("/nonexistent/bundle").unwrap();
        assert_eq!(tl_bundle_load(missing.as_ptr(), &mut b), TlStatus::Io);
        assert!(b.is_null());
        assert!(!tl_last_error_message().is_null());
        assert_eq!(tl_bundle_load(ptr::null(), &mut b), TlStatus::NullArgument);
        let msg = CStr::from_ptr(tl_last_error_message()).to_str().unwrap();
        assert!(msg.contains("path"), "{msg}");

        let (b, v) = load(&t);
        assert!(tl_last_error_message().is_null());
        let mut out = ptr::null_mut();
        assert_eq!(tl_interpret(b, v, b"not an image".as_ptr(), 12, 1, 0, 1, &mut out), TlStatus::Image);
        let png = t.fx.images[0].image.encode_png().unwrap();
        assert_eq!(tl_interpret(b, v, png.as_ptr(), png.len(), 9, 0, 1, &mut out), TlStatus::Input);
        assert!(out.is_null());
        let bad = CString::new("{").unwrap();
        assert_eq!(tl_classify(b, v, png.as_ptr(), png.len(), bad.as_ptr(), &mut out), TlStatus::Json);
        assert_eq!(tl_vocab_len(ptr::null()), 0);
        tl_string_free(ptr::null_mut());
        tl_vocab_free(v);
        tl_bundle_free(b);
    }
    let version = unsafe { CStr::from_ptr(tl_version()) };
    assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn target_dir() -> PathBuf {
    // tests/<name>-<hash> lives in target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_header() {
    let lib_dir = target_dir();
    let so = lib_dir.join("libtokenlens_ffi.so");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("tokenlens.h").is_file());
    let t = toy(ToyKind::Identity);
    let work = tempfile::tempdir().unwrap();
    let src = work.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "tokenlens.h"
int main(int argc, char **argv) {
    TlBundle *b = NULL;
    TlVocab *v = NULL;
    if (tl_bundle_load(argv[1], &b) != TL_STATUS_OK) return 2;
    if (tl_vocab_load(argv[2], &v) != TL_STATUS_OK) return 3;
    char *json = NULL;
    if (tl_bundle_summary(b, &json) != TL_STATUS_OK) return 4;
    printf("%s\n", json);
    tl_string_free(json);
    if (tl_bundle_load("/nonexistent", &b) != TL_STATUS_IO) return 5;
    printf("%zu %s\n", tl_vocab_len(v), tl_last_error_message() ? "err" : "none");
    tl_vocab_free(v);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = work.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg("-L")
        .arg(&lib_dir)
        .arg("-ltokenlens_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .expect("a C compiler is available");
    assert!(status.success(), "compile failed; library at {}", so.display());
    let out = Command::new(&exe)
        .arg(t.bundle.to_str().unwrap())
        .arg(t.vocab.to_str().unwrap())
        .env("LD_LIBRARY_PATH", &lib_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut lines = stdout.lines();
    let summary: Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(summary["manifest"]["hidden_dim"], 16);
    assert_eq!(lines.next().unwrap(), format!("{} err", t.fx.vocab.len()));
}
