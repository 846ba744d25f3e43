use std::ffi::{CStr, CString};
use std::ptr;

use salfmos::audio::{write_wav_pcm16, AudioBuffer};
use salfmos::features::{encode_features, CepstralConfig, FeatureKind, FeatureMatrix};
use salfmos::inference;
use salfmos::metrics::{self, KendallVariant, ScorePairs};
use salfmos::model::{encode_checkpoint, SalfConfig, SalfModel as Model};
use salfmos_ffi::*;

fn mfcc_model() -> Model {
    let mut m = Model::new(SalfConfig::with_depth(4, 24), 3).unwrap();
    m.set_feature_contract(FeatureKind::Mfcc, 20).unwrap();
    m.round_to_f32();
    m
}

fn load(m: &Model) -> *mut SalfModel {
    let bytes = encode_checkpoint(m);
    let mut h = ptr::null_mut();
    let st = unsafe { salf_model_from_bytes(bytes.as_ptr(), bytes.len(), &mut h) };
    assert_eq!(st, SalfStatus::Ok, "{}", last_error());
    assert!(!h.is_null());
    h
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(salf_last_error()) }.to_string_lossy().into_owned()
}

fn tone_wav(freq: f64, rate: u32, secs: f64) -> Vec<u8> {
    let n = (rate as f64 * secs) as usize;
    let s = (0..n)
        .map(|i| 0.3 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
        .collect();
    write_wav_pcm16(&AudioBuffer::new(s, rate).unwrap())
}

fn vector(dim: usize) -> Vec<f64> {
    (0..dim).map(|i| (i as f64 * 0.37).sin() * 3.0).collect()
}

#[test]
fn handle_reports_model_shape() {
    let m = mfcc_model();
    let h = load(&m);
    unsafe {
        assert_eq!(salf_model_feature_dim(h), 20);
        assert_eq!(salf_model_input_dim(h), 24);
        assert_eq!(salf_model_feature_kind(h), FeatureKind::Mfcc.tag() as i32);
        assert_eq!(salf_model_num_params(h), m.num_params());
        salf_model_free(h);
        assert_eq!(salf_model_feature_dim(ptr::null()), 0);
        assert_eq!(salf_model_feature_kind(ptr::null()), -1);
        salf_model_free(ptr::null_mut());
    }
}

#[test]
fn predictions_match_library() {
    let m = mfcc_model();
    let h = load(&m);
    let x = vector(20);
    let mut mos = 0.0;
    assert_eq!(unsafe { salf_predict_features(h, x.as_ptr(), x.len(), &mut mos) }, SalfStatus::Ok);
    assert_eq!(mos, inference::predict_vector(&m, &x).unwrap());
    assert!((1.0..=5.0).contains(&mos));

    let file = encode_features(&FeatureMatrix::from_rows(&[x.clone(), vector(20)], FeatureKind::Mfcc).unwrap());
    assert_eq!(unsafe { salf_predict_feature_file(h, file.as_ptr(), file.len(), &mut mos) }, SalfStatus::Ok);
    assert_eq!(mos, inference::predict_feature_bytes(&m, &file).unwrap());

    let wav = tone_wav(300.0, 22_050, 0.5);
    assert_eq!(unsafe { salf_predict_wav(h, wav.as_ptr(), wav.len(), &mut mos) }, SalfStatus::Ok);
    assert_eq!(mos, inference::predict_wav(&m, &wav, &CepstralConfig::default()).unwrap());
    unsafe { salf_model_free(h) };
}

#[test]
fn load_from_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.slc");
    std::fs::write(&path, encode_checkpoint(&mfcc_model())).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { salf_model_load(c.as_ptr(), &mut h) }, SalfStatus::Ok);
    assert_eq!(unsafe { salf_model_feature_dim(h) }, 20);
    unsafe { salf_model_free(h) };

    let missing = CString::new(dir.path().join("absent.slc").to_str().unwrap()).unwrap();
    let mut h = 1 as *mut SalfModel;
    assert_eq!(unsafe { salf_model_load(missing.as_ptr(), &mut h) }, SalfStatus::Io);
    assert!(h.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn null_pointers_are_rejected() {
    let mut h = ptr::null_mut();
    let mut v = 0.0;
    unsafe {
        assert_eq!(salf_model_load(ptr::null(), &mut h), SalfStatus::NullPointer);
        assert!(last_error().contains("null"));
        assert_eq!(salf_model_from_bytes(ptr::null(), 4, &mut h), SalfStatus::NullPointer);
        assert_eq!(salf_model_from_bytes(b"SLC1".as_ptr(), 4, ptr::null_mut()), SalfStatus::NullPointer);
        let x = [1.0; 20];
        assert_eq!(salf_predict_features(ptr::null(), x.as_ptr(), 20, &mut v), SalfStatus::NullPointer);
        let m = load(&mfcc_model());
        assert_eq!(salf_predict_features(m, x.as_ptr(), 20, ptr::null_mut()), SalfStatus::NullPointer);
        assert_eq!(salf_predict_wav(m, ptr::null(), 10, &mut v), SalfStatus::NullPointer);
        salf_model_free(m);
        assert_eq!(salf_metric_mse(ptr::null(), x.as_ptr(), 3, &mut v), SalfStatus::NullPointer);
    }
}

#[test]
fn malformed_and_mismatched_inputs() {
    let h = load(&mfcc_model());
    let mut out = ptr::null_mut();
    let mut v = 0.0;
    unsafe {
        let junk = b"not a checkpoint";
        assert_eq!(salf_model_from_bytes(junk.as_ptr(), junk.len(), &mut out), SalfStatus::Format);
        assert!(out.is_null());
        let mut ck = encode_checkpoint(&mfcc_model());
        ck.truncate(ck.len() - 5);
        assert_eq!(salf_model_from_bytes(ck.as_ptr(), ck.len(), &mut out), SalfStatus::Format);

        assert_eq!(salf_predict_wav(h, junk.as_ptr(), junk.len(), &mut v), SalfStatus::Format);
        assert_eq!(salf_predict_feature_file(h, junk.as_ptr(), junk.len(), &mut v), SalfStatus::Format);

        let x = vector(19);
        assert_eq!(salf_predict_features(h, x.as_ptr(), x.len(), &mut v), SalfStatus::Mismatch);
        assert!(last_error().contains("20"));
        let lfcc = encode_features(&FeatureMatrix::from_rows(&[vector(20)], FeatureKind::Lfcc).unwrap());
        assert_eq!(salf_predict_feature_file(h, lfcc.as_ptr(), lfcc.len(), &mut v), SalfStatus::Mismatch);
        salf_model_free(h);

        let mut w = Model::new(SalfConfig::with_depth(2, 8), 1).unwrap();
        w.set_feature_contract(FeatureKind::Wav2vec, 8).unwrap();
        let h = load(&w);
        let wav = tone_wav(440.0, 16_000, 0.3);
        assert_eq!(salf_predict_wav(h, wav.as_ptr(), wav.len(), &mut v), SalfStatus::Mismatch);
        salf_model_free(h);
    }
}

#[test]
fn metrics_match_library() {
    let a = [1.0, 2.5, 3.0, 4.0, 4.5, 2.0];
    let p = [1.5, 2.0, 3.5, 3.5, 4.8, 2.2];
    let pairs = ScorePairs::new(&a, &p).unwrap();
    let mut v = 0.0;
    unsafe {
        assert_eq!(salf_metric_mse(a.as_ptr(), p.as_ptr(), a.len(), &mut v), SalfStatus::Ok);
        assert_eq!(v, metrics::mse(pairs).unwrap());
        assert_eq!(salf_metric_lcc(a.as_ptr(), p.as_ptr(), a.len(), &mut v), SalfStatus::Ok);
        assert_eq!(v, metrics::lcc(pairs).unwrap());
        assert_eq!(salf_metric_srcc(a.as_ptr(), p.as_ptr(), a.len(), &mut v), SalfStatus::Ok);
        assert_eq!(v, metrics::srcc(pairs).unwrap());
        assert_eq!(salf_metric_ktau(a.as_ptr(), p.as_ptr(), a.len(), SalfKendall::Gamma, &mut v), SalfStatus::Ok);
        assert_eq!(v, metrics::ktau(pairs, KendallVariant::Gamma).unwrap());
        assert_eq!(salf_metric_ktau(a.as_ptr(), p.as_ptr(), a.len(), SalfKendall::TauB, &mut v), SalfStatus::Ok);
        assert_eq!(v, metrics::ktau(pairs, KendallVariant::TauB).unwrap());
    }
}

#[test]
fn metric_failures() {
    let a = [1.0, 2.0, 3.0];
    let c = [3.0, 3.0, 3.0];
    let mut v = 0.0;
    unsafe {
        assert_eq!(salf_metric_lcc(a.as_ptr(), c.as_ptr(), 3, &mut v), SalfStatus::Undefined);
        assert!(!last_error().is_empty());
        assert_eq!(salf_metric_ktau(a.as_ptr(), c.as_ptr(), 3, SalfKendall::Gamma, &mut v), SalfStatus::Undefined);
        assert_eq!(salf_metric_mse(a.as_ptr(), c.as_ptr(), 0, &mut v), SalfStatus::InvalidArgument);
        let nan = [1.0, f64::NAN, 3.0];
        assert_eq!(salf_metric_srcc(a.as_ptr(), nan.as_ptr(), 3, &mut v), SalfStatus::InvalidArgument);
        assert_eq!(salf_metric_mse(a.as_ptr(), c.as_ptr(), 3, &mut v), SalfStatus::Ok);
        assert_eq!(last_error(), "");
    }
}

#[test]
fn errors_are_per_thread() {
    let mut v = 0.0;
    unsafe { salf_metric_mse(ptr::null(), ptr::null(), 3, &mut v) };
    assert!(!last_error().is_empty());
    std::thread::spawn(|| assert_eq!(last_error(), "")).join().unwrap();
}

#[test]
fn status_strings_and_version() {
    for st in [
        SalfStatus::Ok,
        SalfStatus::NullPointer,
        SalfStatus::InvalidArgument,
        SalfStatus::Io,
        SalfStatus::Format,
        SalfStatus::Mismatch,
        SalfStatus::Undefined,
        SalfStatus::Internal,
    ] {
        assert!(!unsafe { CStr::from_ptr(salf_status_str(st)) }.to_bytes().is_empty());
    }
    let v = unsafe { CStr::from_ptr(salf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
