use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dynsub::checkpoint::save_model;
use dynsub::evaluation::normalized_embeddings;
use dynsub::layout::SubspaceLayout;
use dynsub::model::{EmbeddingModel, InputSpec, ModelConfig, SmallCnnConfig};
use dynsub::synthetic::{generate_synthetic, SyntheticSpec};
use dynsub::wss::extract_attention;
use dynsub_ffi::*;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        input: InputSpec::square(3, 16),
        backbone: SmallCnnConfig { in_channels: 3, widths: vec![4, 8] },
        embedding_dim: 6,
        use_attention: true,
    }
}

fn saved_model(dir: &Path) -> (PathBuf, EmbeddingModel<f32>, SubspaceLayout) {
    let cfg = tiny_config();
    let model = EmbeddingModel::<f32>::new(&cfg, 4).unwrap();
    let layout = SubspaceLayout::single(6).commit(&[4, 1]).unwrap();
    let path = dir.join("m.ckpt");
    save_model(&path, &model, &cfg, &layout, None).unwrap();
    (path, model, layout)
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    let n = unsafe { dsl_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(511)].iter().map(|c| *c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn load(path: &Path) -> *mut DslModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dsl_model_load(c.as_ptr(), &mut m) }, DslStatus::Ok, "{}", last_error());
    m
}

#[test]
fn embed_and_attention_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model, layout) = saved_model(dir.path());
    let m = load(&path);
    let (mut c, mut h, mut w, mut d) = (0, 0, 0, 0);
    assert_eq!(unsafe { dsl_model_shape(m, &mut c, &mut h, &mut w, &mut d) }, DslStatus::Ok);
    assert_eq!((c, h, w, d), (3, 16, 16, 6));
    let mut sizes = [0usize; 4];
    let mut k = 0;
    assert_eq!(unsafe { dsl_model_slices(m, sizes.as_mut_ptr(), 4, &mut k) }, DslStatus::Ok);
    assert_eq!(&sizes[..k], layout.slice_sizes().as_slice());
    assert_eq!(unsafe { dsl_model_slices(m, sizes.as_mut_ptr(), 1, &mut k) }, DslStatus::BufferTooSmall);

    let data = generate_synthetic(&SyntheticSpec { n_samples: 3, image_size: 16, ..Default::default() }, 2).unwrap();
    let images: Vec<f32> = data.samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    let mut emb = vec![0f32; 3 * 6];
    assert_eq!(unsafe { dsl_model_embed(m, images.as_ptr(), 3, emb.as_mut_ptr(), emb.len()) }, DslStatus::Ok);
    let expected = normalized_embeddings(&model, &data).unwrap();
    let order = layout.concat_order();
    for i in 0..3 {
        for (j, &src) in order.iter().enumerate() {
            assert_eq!(emb[i * 6 + j], expected[i * 6 + src] as f32);
        }
    }
    let mut att = vec![0f32; 3 * 256];
    assert_eq!(unsafe { dsl_model_attention(m, images.as_ptr(), 3, att.as_mut_ptr(), att.len()) }, DslStatus::Ok);
    let maps = extract_attention(&model, &data).unwrap();
    for (i, map) in maps.iter().enumerate() {
        for p in 0..256 {
            assert_eq!(att[i * 256 + p], map.upsampled[p] as f32);
        }
    }
    let mut short = vec![0f32; 5];
    assert_eq!(unsafe { dsl_model_embed(m, images.as_ptr(), 3, short.as_mut_ptr(), 5) }, DslStatus::BufferTooSmall);
    unsafe { dsl_model_free(m) };
}

#[test]
fn errors_map_to_status_codes() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { dsl_model_load(ptr::null(), &mut m) }, DslStatus::NullPointer);
    assert!(last_error().contains("path"));
    let missing = CString::new("/definitely/not/here.ckpt").unwrap();
    assert_eq!(unsafe { dsl_model_load(missing.as_ptr(), &mut m) }, DslStatus::Io);
    assert!(m.is_null());
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"garbage bytes").unwrap();
    let junk_c = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { dsl_model_load(junk_c.as_ptr(), &mut m) }, DslStatus::Format);

    let (path, _, _) = saved_model(dir.path());
    let model = load(&path);
    let mut out = vec![0f32; 6];
    assert_eq!(unsafe { dsl_model_embed(model, ptr::null(), 1, out.as_mut_ptr(), 6) }, DslStatus::NullPointer);
    let bad = vec![2.0f32; 3 * 256];
    assert_eq!(unsafe { dsl_model_embed(model, bad.as_ptr(), 1, out.as_mut_ptr(), 6) }, DslStatus::InvalidInput);
    unsafe { dsl_model_free(model) };
    unsafe { dsl_model_free(ptr::null_mut()) };

    let mut v = 0.0;
    assert_eq!(unsafe { dsl_dice([1u8, 2].as_ptr(), [1u8, 0].as_ptr(), 2, &mut v) }, DslStatus::InvalidInput);
    assert_eq!(unsafe { dsl_recall_at_k(ptr::null(), 4, 2, ptr::null(), 1, &mut v) }, DslStatus::NullPointer);
    // success clears the message
    assert_eq!(unsafe { dsl_dice([1u8].as_ptr(), [1u8].as_ptr(), 1, &mut v) }, DslStatus::Ok);
    assert_eq!(last_error(), "");
}

#[test]
fn metrics_match_the_library() {
    let labels = [0usize, 0, 1, 1, 2, 2];
    let clusters = [0usize, 0, 1, 2, 2, 2];
    let mut v = 0.0;
    assert_eq!(unsafe { dsl_nmi(labels.as_ptr(), clusters.as_ptr(), 6, &mut v) }, DslStatus::Ok);
    assert_eq!(v, dynsub::evaluation::nmi(&labels, &clusters).unwrap());
    let emb = [0.0, 0.0, 0.1, 0.0, 5.0, 5.0, 5.1, 5.0, 9.0, 0.0, 9.0, 0.2];
    assert_eq!(unsafe { dsl_recall_at_k(emb.as_ptr(), 6, 2, labels.as_ptr(), 1, &mut v) }, DslStatus::Ok);
    assert_eq!(v, 1.0);
    assert_eq!(unsafe { dsl_dice([1u8, 1, 0, 0].as_ptr(), [1u8, 0, 0, 0].as_ptr(), 4, &mut v) }, DslStatus::Ok);
    assert!((v - 2.0 / 3.0).abs() < 1e-15);
    let mut len = 0usize;
    assert_eq!(unsafe { dsl_recall_at_k(emb.as_ptr(), 6, 2, labels.as_ptr(), 6, &mut v) }, DslStatus::InvalidInput);
    len += unsafe { dsl_last_error_message(ptr::null_mut(), 0) };
    assert!(len > 0);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dynsub.h")).unwrap();
    for name in [
        "typedef struct DslModel DslModel",
        "dsl_last_error_message",
        "dsl_model_load",
        "dsl_model_free",
        "dsl_model_shape",
        "dsl_model_slices",
        "dsl_model_embed",
        "dsl_model_attention",
        "dsl_nmi",
        "dsl_recall_at_k",
        "dsl_dice",
        "DSL_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

/// Compiles a C program against the generated header and the shared
/// library and runs it on a saved checkpoint.
#[test]
fn c_program_links_and_runs() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test binary>
    let lib_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    assert!(lib_dir.join("libdynsub_ffi.so").exists() || lib_dir.join("libdynsub_ffi.dylib").exists(), "{}", lib_dir.display());
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _, _) = saved_model(dir.path());
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .arg("-ldynsub_ffi")
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-o")
        .arg(&exe)
        .status()
        .expect("a C compiler named cc");
    assert!(status.success());
    let out = Command::new(&exe).arg(&ckpt).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "dice=0.666667 d=6");
}
