use std::path::PathBuf;

use proptest::prelude::*;
use tactiforce::formats::{
    decode_checkpoint, encode_checkpoint, read_curve, read_samples_csv, write_json, write_samples_csv, CurveFile,
    FormatError, Tfr1,
};
use tactiforce_core::mlp::MlpParams;
use tactiforce_core::regress::{CalibSample, PolyCurve};
use tactiforce_core::sim::{press_frame, GelConfig, Indenter, IndenterShape, LightingModel};

fn tfr1_strategy() -> impl Strategy<Value = Tfr1> {
    (1u32..12, 1u32..12, 1u32..4).prop_flat_map(|(w, h, c)| {
        prop::collection::vec(any::<f32>().prop_filter("NaN has no equality", |v| !v.is_nan()), (w * h * c) as usize)
            .prop_map(move |samples| Tfr1 {
                width: w,
                height: h,
                channels: c,
                samples,
            })
    })
}

proptest! {
    #[test]
    fn tfr1_round_trip(t in tfr1_strategy()) {
        let bytes = t.encode();
        prop_assert_eq!(bytes.len(), 16 + 4 * t.samples.len());
        prop_assert_eq!(Tfr1::decode(&bytes).unwrap(), t);
    }

    #[test]
    fn tfr1_rejects_truncation(t in tfr1_strategy(), cut in 1usize..16) {
        let bytes = t.encode();
        let cut = cut.min(bytes.len());
        prop_assert!(Tfr1::decode(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn checkpoint_round_trip(
        hidden in prop::collection::vec(1usize..24, 1..4),
        seed: u64,
        scale in -10.0f64..10.0,
    ) {
        let mut p = MlpParams::init(&hidden, seed);
        for l in &mut p.layers {
            for w in l.weights.iter_mut().chain(&mut l.bias) {
                *w *= scale;
            }
        }
        let q = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        prop_assert_eq!(q, p);
    }

    #[test]
    fn samples_csv_round_trip(
        samples in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 0..40)
    ) {
        let samples: Vec<CalibSample> = samples
            .into_iter()
            .map(|(depth, force)| CalibSample { depth, force })
            .collect();
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &samples).unwrap();
        prop_assert_eq!(read_samples_csv(buf.as_slice()).unwrap(), samples);
    }

    #[test]
    fn curve_json_round_trip(
        p in prop::array::uniform4(-1e3f64..1e3),
        (d_min, span) in (0.0f64..1.0, 1e-3f64..2.0),
        r_squared in -1.0f64..=1.0,
    ) {
        let curve = PolyCurve {
            p1: p[0],
            p2: p[1],
            p3: p[2],
            p4: p[3],
            r_squared,
            d_min,
            d_max: d_min + span,
            depth_scale: d_min + span,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.json");
        write_json(&path, &CurveFile { curve, config_fingerprint: Some("abc".into()) }).unwrap();
        prop_assert_eq!(read_curve(&path).unwrap(), curve);
    }
}

#[test]
fn checkpoint_errors_are_specific() {
    let p = MlpParams::init(&[4, 4], 1);
    let bytes = encode_checkpoint(&p);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(FormatError::BadMagic { .. })));
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 3]),
        Err(FormatError::Truncated { .. })
    ));
    let mut long = bytes;
    long.push(0);
    assert!(matches!(decode_checkpoint(&long), Err(FormatError::Trailing(1))));
}

#[test]
fn tfr1_channel_mismatch() {
    let t = Tfr1 {
        width: 2,
        height: 2,
        channels: 1,
        samples: vec![0.0; 4],
    };
    assert!(matches!(t.to_frame(0, 0.0), Err(FormatError::Channels { .. })));
    assert!(t.to_normals().is_err());
    assert!(t.to_depth(0.1).is_ok());
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_frame.tfr1")
}

/// A 0.5 mm calibration-ball press on a 48x64 gel.
#[test]
fn golden_frame_matches() {
    let gel = GelConfig {
        width_px: 64,
        height_px: 48,
        pixel_pitch: 0.25,
        ..GelConfig::default()
    };
    let ind = Indenter {
        shape: IndenterShape::CALIBRATION_BALL,
        center: gel.center_mm(),
        press_depth: 0.5,
    };
    let (_, frame) = press_frame(&gel, &LightingModel::default(), &ind).unwrap();
    let now = Tfr1::from_frame(&frame);
    if std::env::var_os("TACTIFORCE_REGEN_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), now.encode()).unwrap();
    }
    let golden = Tfr1::decode(&std::fs::read(golden_path()).unwrap()).unwrap();
    assert_eq!((golden.width, golden.height, golden.channels), (64, 48, 3));
    for (i, (a, b)) in golden.samples.iter().zip(&now.samples).enumerate() {
        assert!((a - b).abs() <= 1e-6, "sample {i}: {a} vs {b}");
    }
    let back = golden.to_frame(7, 1.5).unwrap();
    assert_eq!(Tfr1::from_frame(&back), golden);
}
