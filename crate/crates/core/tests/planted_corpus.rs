//! End-to-end behavioral checks of the planted-bias construction: the
//! planted model hallucinates bias tokens, the fitted subspace recovers
//! the planted one, and the null-space edit restores clean behavior.

use nullu_core::analysis::decode_direction;
use nullu_core::data::corpus::{build_planted_bias_corpus, PairedCorpus, PlantedBiasSpec};
use nullu_core::linalg::principal_angles;
use nullu_core::pipeline::{run_nullu, EditConfig, PipelineInput};
use nullu_core::toymodel::{ModelDims, TokenSequence, ToyModel};

fn testbed() -> PlantedBiasSpec {
    PlantedBiasSpec::recommended(
        ModelDims {
            vocab_size: 96,
            hidden_dim: 24,
            mlp_dim: 48,
            num_layers: 5,
        },
        2,
    )
}

fn incidence_of(model: &ToyModel, corpus: &PairedCorpus) -> f64 {
    let conts: Vec<Vec<usize>> = corpus
        .pairs
        .iter()
        .map(|pair| {
            let prompt = TokenSequence::new(pair.prompt.clone()).unwrap();
            let out = model
                .greedy_decode(&prompt, pair.hallucinated.len())
                .unwrap();
            out.ids()[pair.prompt.len()..].to_vec()
        })
        .collect();
    PairedCorpus::incidence(&conts, &corpus.bias_tokens)
}

#[test]
fn null_space_edit_suppresses_planted_bias() {
    let spec = testbed();
    let bundle = build_planted_bias_corpus(&spec, 0).unwrap();

    let biased_incidence = incidence_of(&bundle.biased_model, &bundle.corpus);
    assert!(
        biased_incidence >= 0.8,
        "planted model incidence {biased_incidence}"
    );
    assert_eq!(incidence_of(&bundle.base_model, &bundle.corpus), 0.0);

    let config = EditConfig::new(&[spec.designated_layer], spec.k_true);
    let (edited, report) = run_nullu(
        &bundle.biased_model,
        PipelineInput::Corpus(&bundle.corpus),
        &config,
    )
    .unwrap();

    let edited_incidence = incidence_of(&edited, &bundle.corpus);
    assert!(
        edited_incidence <= 0.25,
        "edited incidence {edited_incidence} did not collapse (planted {biased_incidence})"
    );

    let angles = principal_angles(&bundle.true_subspace, &report.layers[0].subspace).unwrap();
    let max_sin = angles.iter().fold(0.0_f64, |m, a| m.max(a.sin()));
    assert!(max_sin <= 0.2, "fitted subspace is off by sin {max_sin}");
}

#[test]
fn edit_is_robust_across_generation_seeds() {
    let spec = testbed();
    for seed in [5u64, 11, 19] {
        let bundle = build_planted_bias_corpus(&spec, seed).unwrap();
        let config = EditConfig::new(&[spec.designated_layer], spec.k_true);
        let (edited, _) = run_nullu(
            &bundle.biased_model,
            PipelineInput::Corpus(&bundle.corpus),
            &config,
        )
        .unwrap();
        let before = incidence_of(&bundle.biased_model, &bundle.corpus);
        let after = incidence_of(&edited, &bundle.corpus);
        assert!(
            after < before && after <= 0.3,
            "seed {seed}: incidence {before} -> {after}"
        );
    }
}

#[test]
fn fitted_directions_decode_to_bias_tokens() {
    let spec = testbed();
    let bundle = build_planted_bias_corpus(&spec, 0).unwrap();
    let config = EditConfig::new(&[spec.designated_layer], spec.k_true);
    let (_, report) = run_nullu(
        &bundle.biased_model,
        PipelineInput::Corpus(&bundle.corpus),
        &config,
    )
    .unwrap();

    let direction = report.layers[0].subspace.direction(0).unwrap();
    let top = decode_direction(bundle.biased_model.unembed(), &direction, 5).unwrap();
    let hits = top
        .iter()
        .filter(|t| bundle.corpus.bias_tokens.contains(t))
        .count();
    assert!(hits >= 1, "no bias token among decoded leaders {top:?}");
}

#[test]
fn edit_touches_only_the_requested_input_matrix() {
    let spec = testbed();
    let bundle = build_planted_bias_corpus(&spec, 0).unwrap();
    let config = EditConfig::new(&[spec.designated_layer], spec.k_true);
    let (edited, _) = run_nullu(
        &bundle.biased_model,
        PipelineInput::Corpus(&bundle.corpus),
        &config,
    )
    .unwrap();

    assert_eq!(edited.embed(), bundle.biased_model.embed());
    assert_eq!(edited.unembed(), bundle.biased_model.unembed());
    for l in 0..spec.dims.num_layers {
        let before = bundle.biased_model.layer(l).unwrap();
        let after = edited.layer(l).unwrap();
        assert_eq!(before.w2, after.w2, "layer {l} w2 changed");
        if l == spec.designated_layer {
            assert_ne!(before.w1, after.w1, "designated w1 unchanged");
        } else {
            assert_eq!(before.w1, after.w1, "layer {l} w1 changed");
        }
    }
}
