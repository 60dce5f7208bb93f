//! End-to-end exercise of the C ABI from Rust: generate data, train a tiny
//! run, load both roles, and score an image through the boundary.

use std::ffi::{CStr, CString};
use std::os::raw::c_char;

use stssl_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn write_tiny_config(dir: &std::path::Path) -> std::path::PathBuf {
    let data_dir = dir.join("data");
    let text = format!(
        r#"
[dataset]
dir = "{}"
train_fraction = 0.8
split = {{ stratified = {{ labeled_fraction = 0.2 }} }}

[dataset.synthetic]
num_classes = 3
num_regions = 4
image_size = 8
samples_total = 60
spatial_dependence_strength = 0.8
seasonal_dependence_strength = 0.0
label_noise = 0.0
seed = 11

[model]
patch_size = 4
embed_dim = 16
depth = 1
num_heads = 2
mlp_ratio = 2.0

[ssl]
algorithm = "fixmatch"
tau = 0.95

[train]
total_steps = 3
base_lr = 0.001
n_l = 4
n_u = 4
seed = 11
log_interval = 1
"#,
        data_dir.display()
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn c_abi_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = c(write_tiny_config(dir.path()).to_str().unwrap());
    let out_dir = c(dir.path().join("run").to_str().unwrap());

    unsafe {
        let rc = stssl_generate_data(config_path.as_ptr(), std::ptr::null(), std::ptr::null());
        assert_eq!(rc, 0, "generate: {:?}", last_error());

        let rc = stssl_train(config_path.as_ptr(), std::ptr::null(), out_dir.as_ptr());
        assert_eq!(rc, 0, "train: {:?}", last_error());

        let ckpt = c(dir.path().join("run/checkpoint_final.stck").to_str().unwrap());
        for role in ["teacher", "student"] {
            let role_c = c(role);
            let model = stssl_model_load(
                config_path.as_ptr(),
                std::ptr::null(),
                ckpt.as_ptr(),
                role_c.as_ptr(),
            );
            assert!(!model.is_null(), "load {role}: {:?}", last_error());
            assert_eq!(stssl_model_num_classes(model), 3);
            assert_eq!(stssl_model_image_size(model), 8);

            let pixels = vec![0.5f64; 8 * 8 * 3];
            let mut probs = vec![0.0f64; 3];
            let rc = stssl_model_predict(
                model,
                pixels.as_ptr(),
                48.0,
                11.0,
                120.0,
                probs.as_mut_ptr(),
            );
            assert_eq!(rc, 0, "predict {role}: {:?}", last_error());
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "{role} probs sum to {sum}");
            stssl_model_free(model);
        }

        // Unknown role fails with a message and NULL.
        let bad_role = c("oracle");
        let model = stssl_model_load(
            config_path.as_ptr(),
            std::ptr::null(),
            ckpt.as_ptr(),
            bad_role.as_ptr(),
        );
        assert!(model.is_null());
        assert!(last_error().unwrap().contains("unknown role"));
    }
}

#[test]
fn version_and_errors_are_strings() {
    let v = stssl_version();
    assert!(!v.is_null());
    let version = unsafe { CStr::from_ptr(v) }.to_str().unwrap();
    assert!(version.starts_with(|c: char| c.is_ascii_digit()));

    unsafe {
        let rc = stssl_generate_data(std::ptr::null(), std::ptr::null(), std::ptr::null());
        assert_ne!(rc, 0);
        assert!(last_error().is_some());
    }
}

fn last_error() -> Option<String> {
    let p: *const c_char = stssl_last_error_message();
    if p.is_null() {
        None
    } else {
        Some(unsafe { CStr::from_ptr(p) }.to_string_lossy().to_string())
    }
}
