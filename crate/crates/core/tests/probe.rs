//! Temporary diagnostic probe, not part of the suite. Run with
//! `cargo test -p mga-core --test probe -- --nocapture --ignored`.

use mga_core::backbone::BackboneConfig;
use mga_core::head::LossWeights;
use mga_core::model::{Model, ModelConfig, Variant};
use mga_core::synth::SynthSpec;
use mga_core::Tape;

#[test]
#[ignore]
fn trace_magnitudes() {
    let spec = SynthSpec {
        classes: 2,
        samples_per_class: 1,
        image_size: 64,
        branch_angle_base: 25.0,
        angle_delta: 6.0,
        noise_std: 0.0,
        seed: 1,
    };
    let samples = mga_core::synth::generate(&spec).unwrap();
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            in_channels: 3,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            frozen_stages: 0,
        },
        num_classes: 2,
        variant: Variant::Mga,
        lambda: 0.5,
    };
    let model = Model::new(&cfg, 1).unwrap();

    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt(), v.iter().fold(0.0f64, |a, &b| a.max(b.abs())))
    };

    let mut pooled = Vec::new();
    for sample in &samples {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape);
        let pass = model
            .forward(&mut tape, &binding, &sample.image, None)
            .unwrap();
        // Recompute the backbone pieces to inspect them.
        let ids = binding.all_ids();
        let image_id = tape.input(&sample.image);
        let feat = model
            .backbone()
            .forward(&mut tape, &ids[..ids.len() - 4], image_id)
            .unwrap();
        let (m, s, mx) = stats(tape.value(feat));
        println!(
            "label {}: backbone features mean {m:.4} std {s:.4} max {mx:.4} shape {:?}",
            sample.label,
            tape.shape(feat)
        );
        let gap = tape.global_avg_pool(feat).unwrap();
        println!("  pooled: {:?}", tape.value(gap));
        pooled.push(tape.value(gap).to_vec());

        let loss = model
            .loss(&mut tape, &pass, sample.label, &LossWeights::new(0.0).unwrap())
            .unwrap();
        tape.backward(loss).unwrap();
        println!("  logits {:?}", tape.value(pass.logits));
        let names: Vec<String> = model
            .named_parameters()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        for (name, &id) in names.iter().zip(ids) {
            if let Some(g) = tape.grad(id) {
                let (gm, gs, gmx) = stats(g);
                println!("  grad {name}: mean {gm:.2e} std {gs:.2e} max {gmx:.2e}");
            }
        }
    }
    let diff: f64 = pooled[0]
        .iter()
        .zip(&pooled[1])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = pooled[0].iter().map(|a| a * a).sum::<f64>().sqrt();
    println!("pooled feature diff norm {diff:.3e} vs magnitude {norm:.3e}");
}
