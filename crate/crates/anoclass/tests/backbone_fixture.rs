//! Regression check of the backbone inference engine against activations
//! frozen from a reference implementation (see tools/make_backbone_fixture.py).

use std::path::PathBuf;

use ndarray::Array3;
use serde::Deserialize;

use anoclass::backbone::{extract_layer_features, BackboneHandle};
use anoclass::io::TensorArchive;

#[derive(Deserialize)]
struct Fixture {
    input_shape: [usize; 3],
    input: Vec<f32>,
    f2_shape: [usize; 3],
    f2: Vec<f32>,
    f3_shape: [usize; 3],
    f3: Vec<f32>,
    pooled: Vec<f32>,
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

fn max_abs_diff(got: &[f32], want: &[f32]) -> f32 {
    assert_eq!(got.len(), want.len());
    got.iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max)
}

#[test]
fn stage_activations_match_reference() {
    let archive = TensorArchive::read(&data_dir().join("backbone_fixture.anoc")).unwrap();
    let handle = BackboneHandle::from_archive(&archive).unwrap();
    let fixture: Fixture = serde_json::from_str(
        &std::fs::read_to_string(data_dir().join("backbone_fixture.json")).unwrap(),
    )
    .unwrap();

    let [c, h, w] = fixture.input_shape;
    let input = Array3::from_shape_vec((c, h, w), fixture.input.clone()).unwrap();
    let (f2, f3) = extract_layer_features(&handle, &input).unwrap();

    assert_eq!(
        f2.tensor.dim(),
        (fixture.f2_shape[0], fixture.f2_shape[1], fixture.f2_shape[2])
    );
    assert_eq!(
        f3.tensor.dim(),
        (fixture.f3_shape[0], fixture.f3_shape[1], fixture.f3_shape[2])
    );

    let d2 = max_abs_diff(f2.tensor.as_slice().unwrap(), &fixture.f2);
    let d3 = max_abs_diff(f3.tensor.as_slice().unwrap(), &fixture.f3);
    assert!(d2 < 1e-4, "stage-2 activations diverge: max abs diff {d2}");
    assert!(d3 < 1e-4, "stage-3 activations diverge: max abs diff {d3}");

    let pooled = handle.net().forward_pooled(&input);
    let dp = max_abs_diff(pooled.as_slice().unwrap(), &fixture.pooled);
    assert!(dp < 1e-4, "pooled stage-4 vector diverges: max abs diff {dp}");
}

#[test]
fn channel_metadata_comes_from_tensor_shapes() {
    let archive = TensorArchive::read(&data_dir().join("backbone_fixture.anoc")).unwrap();
    let handle = BackboneHandle::from_archive(&archive).unwrap();
    // width-2 fixture: stage widths [2,4,8,16] with expansion 4
    assert_eq!(handle.c2(), 16);
    assert_eq!(handle.c3(), 32);
}
