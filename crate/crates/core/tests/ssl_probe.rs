use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use isup_grading::nn::{Encoder, ParamSet};
use isup_grading::pipeline::PipelineConfig;
use isup_grading::record::PatchPixels;
use isup_grading::ssl::{linear_probe_accuracy, pretrain, ProbeConfig, SslModel};
use isup_grading::synth::{generate_corpus, SynthSpec};
use isup_grading::tiling::TissueThresholds;

const PATCH: usize = 256;

/// Patches of the synthetic corpus with their planted class (benign, GG3,
/// GG4, GG5), split by slide parity.
fn labeled_patches() -> (Vec<(PatchPixels, usize)>, Vec<(PatchPixels, usize)>) {
    let spec = SynthSpec {
        slides_per_grade: 4,
        ..SynthSpec::default()
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, slide) in generate_corpus(&spec).unwrap().iter().enumerate() {
        let record = slide.record(PATCH, &TissueThresholds::default()).unwrap();
        for p in record.patches {
            let (cx, cy) = (p.x as usize + PATCH / 2, p.y as usize + PATCH / 2);
            let class = match slide.mask[cy * slide.image.width + cx] {
                0 => 0,
                v => v as usize - 2,
            };
            if i % 2 == 0 { &mut train } else { &mut test }.push((p.pixels, class));
        }
    }
    (train, test)
}

fn features(encoder: &Encoder, params: &ParamSet<f32>, patches: &[(PatchPixels, usize)]) -> (Array2<f64>, Vec<usize>) {
    let refs: Vec<&PatchPixels> = patches.iter().map(|p| &p.0).collect();
    let mut rows = Vec::new();
    for chunk in refs.chunks(32) {
        let input = encoder.prepare_input::<f32>(chunk).unwrap();
        let (emb, _) = encoder.forward(params.params(), &input).unwrap();
        rows.extend(emb.outer_iter().map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
    }
    let dim = rows[0].len();
    let x = Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j]);
    (x, patches.iter().map(|p| p.1).collect())
}

#[test]
fn pretraining_halves_the_loss_and_keeps_probe_accuracy() {
    let (train, test) = labeled_patches();
    let mut config = PipelineConfig::desk().resolved().ssl;
    config.epochs = 10;

    let corpus: Vec<&PatchPixels> = train.iter().map(|p| &p.0).collect();
    let trained = pretrain(&corpus, &config).unwrap();
    let random_model = SslModel::new(config.model.clone()).unwrap();
    let random_state = random_model.init(&mut ChaCha8Rng::seed_from_u64(config.seed), config.momentum, config.lambda);

    let probe = |model: &SslModel, params: &ParamSet<f32>| {
        let (xtr, ytr) = features(model.encoder(), params, &train);
        let (xte, yte) = features(model.encoder(), params, &test);
        linear_probe_accuracy(&xtr, &ytr, &xte, &yte, 4, &ProbeConfig::default()).unwrap()
    };
    let pretrained = probe(&trained.model, &trained.model.backbone(&trained.state));
    let random = probe(&random_model, &random_model.backbone(&random_state));
    println!("linear probe accuracy: pre-trained {pretrained:.3}, random {random:.3}");

    let first = trained.loss_trace.first().unwrap().total;
    let last = trained.loss_trace.last().unwrap().total;
    assert!(last <= 0.5 * first, "loss {first} -> {last}");
    assert!(random > 0.8, "random probe {random:.3}");
    assert!(pretrained >= random - 0.05, "pre-trained {pretrained:.3} vs random {random:.3}");
}
