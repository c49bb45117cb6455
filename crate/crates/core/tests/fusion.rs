use gifnet::fixtures::synthetic_scene;
use gifnet::fusion::{enhance_single, fuse_luma, fuse_pair, ColorSource, FusionRequest};
use gifnet::{ArchConfig, Error, Image, ModelParams};

fn params() -> ModelParams {
    let arch = ArchConfig {
        base_channels: 4,
        enc_layers: 3,
        branch_layers: 4,
        embed_dim: 8,
        heads: 2,
        window: 4,
        mlp_ratio: 2.0,
    };
    ModelParams::init(&arch, 17).unwrap()
}

fn bits(img: &Image) -> Vec<u32> {
    img.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn padding_is_invisible_in_the_output() {
    let p = params();
    let (vis, ir) = synthetic_scene(1, 18, 22);
    let (a, b) = (vis.luma(), ir.luma());
    let fused = fuse_luma(&p, &a, &b).unwrap();
    assert_eq!(fused.dims(), (18, 22));
    let padded = fuse_luma(&p, &a.pad_replicate(20, 24), &b.pad_replicate(20, 24)).unwrap();
    assert_eq!(bits(&fused), bits(&padded.crop(0, 0, 18, 22).unwrap()));
}

#[test]
fn enhancement_is_self_fusion() {
    let p = params();
    let (vis, _) = synthetic_scene(2, 16, 20);
    let fused = fuse_pair(&p, &FusionRequest::new(vis.clone(), vis.clone())).unwrap();
    let enhanced = enhance_single(&p, &vis).unwrap();
    assert_eq!(bits(&fused), bits(&enhanced));
    assert_eq!(bits(&enhanced), bits(&enhance_single(&p, &vis).unwrap()));
}

#[test]
fn outputs_are_images_with_the_donor_channels() {
    let p = params();
    let (vis, ir) = synthetic_scene(3, 16, 16);
    assert_eq!(vis.channels(), 3);
    let mut req = FusionRequest::new(vis.clone(), ir.clone());
    let color = fuse_pair(&p, &req).unwrap();
    assert_eq!(color.channels(), 3);
    color.validate().unwrap();
    req.color_source = ColorSource::B;
    assert_eq!(fuse_pair(&p, &req).unwrap().channels(), 1);
    req.color_source = ColorSource::None;
    let gray = fuse_pair(&p, &req).unwrap();
    assert_eq!(gray.channels(), 1);
    assert_eq!(
        bits(&gray),
        bits(&fuse_luma(&p, &vis.luma(), &ir.luma()).unwrap())
    );
    let back = color.luma();
    let max_dev = back
        .data()
        .iter()
        .zip(gray.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(max_dev < 1e-3, "{max_dev}");
}

#[test]
fn mismatched_or_tiny_inputs_are_rejected() {
    let p = params();
    let (a, _) = synthetic_scene(4, 16, 16);
    let (b, _) = synthetic_scene(4, 16, 20);
    assert!(matches!(
        fuse_pair(&p, &FusionRequest::new(a, b)),
        Err(Error::Shape(_))
    ));
    let tiny = Image::filled(3, 3, 1, 0.5);
    assert!(matches!(
        enhance_single(&p, &tiny),
        Err(Error::TooSmall { min: 4, .. })
    ));
}
