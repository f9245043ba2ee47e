// scratch: magnitude of CNN features vs positional encoding at init
use satrn::config::ModelConfig;
use satrn::model::Model;
use satrn::synth::{generate, GenSpec, GlyphFont};
use satrn::tensor::Tensor;

#[test]
fn feature_vs_pe_scale() {
    let cfg = ModelConfig::preset("tiny").unwrap();
    let model = Model::<f64>::build(cfg.clone()).unwrap();
    let ds = generate(&GenSpec { count: 8, ..GenSpec::default() }, &GlyphFont::digits()).unwrap();
    let mut images = Tensor::<f64>::zeros(&[8, 1, 32, 64]);
    for (i, s) in ds.samples.iter().enumerate() {
        for (j, &p) in s.pixels.iter().enumerate() {
            images.data_mut()[i * 32 * 64 + j] = p as f64 / 255.0;
        }
    }
    let mut fwd = model.start_forward(false, 0);
    let img = fwd.g.constant(images);
    let feature = model.encoder.cnn.forward(&mut fwd, img).unwrap();
    let injected = model.encoder.pe.inject(&mut fwd, feature).unwrap();
    let std = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    let e = fwd.g.value(feature).data();
    let ep = fwd.g.value(injected).data();
    let pe_part: Vec<f64> = ep.iter().zip(e).map(|(a, b)| a - b).collect();
    println!("std(E) = {:.4}, std(P) = {:.4}, max|E| = {:.4}, max|P| = {:.4}",
        std(e), std(&pe_part),
        e.iter().fold(0.0f64, |a, &b| a.max(b.abs())),
        pe_part.iter().fold(0.0f64, |a, &b| a.max(b.abs())));
}
