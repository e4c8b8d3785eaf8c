use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use pmlm_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pmlm_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn tiny_model() -> *mut PmlmModel {
    let mut m = ptr::null_mut();
    let s = unsafe { pmlm_model_new(pmlm_model_config_tiny(20), 3, &mut m) };
    assert_eq!(s, PmlmStatus::Ok, "{}", last_error());
    m
}

fn figure_instance() -> *mut PmlmInstance {
    let s1 = [11u32, 12, 13, 14, 15, 16];
    let positions = [4usize, 5, 2];
    let lens = [2usize, 1];
    let mut inst = ptr::null_mut();
    let s = unsafe {
        pmlm_instance_assemble(
            s1.as_ptr(),
            s1.len(),
            ptr::null(),
            0,
            positions.as_ptr(),
            lens.as_ptr(),
            lens.len(),
            16,
            &mut inst,
        )
    };
    assert_eq!(s, PmlmStatus::Ok, "{}", last_error());
    inst
}

#[test]
fn instance_round_trip() {
    let inst = figure_instance();
    unsafe {
        // [SOS] s1 [EOS] [EOS] plus 3 pseudo and 3 original rows
        assert_eq!(pmlm_instance_len(inst), 15);
        let mut len = 0;
        assert_eq!(
            pmlm_instance_tokens(inst, ptr::null_mut(), 0, &mut len),
            PmlmStatus::BufferTooSmall
        );
        assert_eq!(len, 15);
        let mut tokens = vec![0u32; len];
        assert_eq!(pmlm_instance_tokens(inst, tokens.as_mut_ptr(), len, &mut len), PmlmStatus::Ok);
        assert_eq!(&tokens[..3], &[2, 11, 4]);
        let mut mask = vec![0u8; 15 * 15];
        assert_eq!(pmlm_instance_mask(inst, mask.as_mut_ptr(), mask.len(), &mut len), PmlmStatus::Ok);
        assert_eq!(len, 225);
        assert!(mask.iter().all(|&b| b <= 1));
        let mut violations = 1;
        assert_eq!(pmlm_instance_audit(inst, &mut violations), PmlmStatus::Ok);
        assert_eq!(violations, 0);
        pmlm_instance_free(inst);
    }
}

#[test]
fn logits_and_generation() {
    let model = tiny_model();
    let inst = figure_instance();
    unsafe {
        let mut len = 0;
        let mut rows = 0;
        let mut buf = vec![0f32; 6 * 20];
        let s = pmlm_model_target_logits(model, inst, buf.as_mut_ptr(), buf.len(), &mut len, &mut rows);
        assert_eq!(s, PmlmStatus::Ok, "{}", last_error());
        assert_eq!((rows, len), (6, 120));
        assert!(buf.iter().all(|v| v.is_finite()));

        let src = [11u32, 12, 13];
        let mut out = vec![0u32; 8];
        let s = pmlm_generate(model, src.as_ptr(), 3, 2, 0.7, 4, out.as_mut_ptr(), 8, &mut len);
        assert_eq!(s, PmlmStatus::Ok, "{}", last_error());
        assert!(len <= 4);
        assert!(out[..len].iter().all(|&t| t >= 6 || t == 1));
        assert_eq!(
            pmlm_generate(model, src.as_ptr(), 3, 0, 0.7, 4, out.as_mut_ptr(), 8, &mut len),
            PmlmStatus::InvalidArgument
        );
        pmlm_instance_free(inst);
        pmlm_model_free(model);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    unsafe {
        let mut inst = ptr::null_mut();
        let s1 = [11u32, 12];
        let pos = [0usize];
        let lens = [1usize];
        let s = pmlm_instance_assemble(s1.as_ptr(), 2, ptr::null(), 0, pos.as_ptr(), lens.as_ptr(), 1, 16, &mut inst);
        assert_eq!(s, PmlmStatus::Data);
        assert!(inst.is_null());
        assert!(!last_error().is_empty());

        let mut vocab = ptr::null_mut();
        let missing = CString::new("/nonexistent/vocab.txt").unwrap();
        assert_eq!(pmlm_vocab_load(missing.as_ptr(), &mut vocab), PmlmStatus::Io);
        assert!(last_error().contains("nonexistent"));
        assert_eq!(pmlm_vocab_load(ptr::null(), &mut vocab), PmlmStatus::NullArgument);
        assert_eq!(pmlm_vocab_size(ptr::null()), 0);
        let mut n = 0;
        assert_eq!(pmlm_instance_audit(ptr::null(), &mut n), PmlmStatus::NullArgument);
        pmlm_vocab_free(ptr::null_mut());
        pmlm_model_free(ptr::null_mut());
        pmlm_instance_free(ptr::null_mut());

        let mut cfg = pmlm_model_config_tiny(20);
        cfg.heads = 3;
        let mut model = ptr::null_mut();
        assert_eq!(pmlm_model_new(cfg, 1, &mut model), PmlmStatus::Config);
        assert!(model.is_null());
    }
}

#[test]
fn vocab_and_checkpoint_files() {
    let dir = tempfile::tempdir().unwrap();
    let vocab_path = dir.path().join("vocab.txt");
    let mut lines: Vec<String> = pmlm::corpus::SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    lines.extend(["hello".into(), "world".into()]);
    std::fs::write(&vocab_path, lines.join("\n") + "\n").unwrap();
    let ck_path = dir.path().join("m.ckpt");
    unsafe {
        let mut vocab = ptr::null_mut();
        let p = CString::new(vocab_path.to_str().unwrap()).unwrap();
        assert_eq!(pmlm_vocab_load(p.as_ptr(), &mut vocab), PmlmStatus::Ok);
        assert_eq!(pmlm_vocab_size(vocab), 8);
        let text = CString::new("Hello there world").unwrap();
        let mut ids = [0u32; 4];
        let mut len = 0;
        assert_eq!(pmlm_vocab_encode(vocab, text.as_ptr(), ids.as_mut_ptr(), 4, &mut len), PmlmStatus::Ok);
        assert_eq!(&ids[..len], &[6, 1, 7]);
        pmlm_vocab_free(vocab);

        let model = tiny_model();
        let c = CString::new(ck_path.to_str().unwrap()).unwrap();
        assert_eq!(pmlm_model_save(model, c.as_ptr()), PmlmStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(pmlm_model_load(c.as_ptr(), &mut loaded), PmlmStatus::Ok, "{}", last_error());
        let mut cfg = pmlm_model_config_tiny(0);
        assert_eq!(pmlm_model_config(loaded, &mut cfg), PmlmStatus::Ok);
        assert_eq!((cfg.vocab_size, cfg.hidden_size, cfg.layers), (20, 8, 2));
        pmlm_model_free(model);
        pmlm_model_free(loaded);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pmlm.h")).unwrap();
    for name in [
        "pmlm_last_error_message",
        "pmlm_vocab_load",
        "pmlm_model_new",
        "pmlm_model_load",
        "pmlm_instance_assemble",
        "pmlm_instance_audit",
        "pmlm_model_target_logits",
        "pmlm_generate",
        "typedef struct PmlmModel PmlmModel",
        "PMLM_STATUS_BUFFER_TOO_SMALL = 8",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

fn static_lib() -> Option<PathBuf> {
    // target/<profile>/deps/abi-xxxx -> target/<profile>/libpmlm_ffi.a
    let exe = std::env::current_exe().ok()?;
    let lib = exe.parent()?.parent()?.join("libpmlm_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_against_the_header() {
    let Some(lib) = static_lib() else {
        eprintln!("skipping: static library not built");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("rows=6 violations=0 n=15"), "{stdout}");
}
