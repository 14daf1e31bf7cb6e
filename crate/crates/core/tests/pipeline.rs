use scorealign::align::{align, transfer_labels};
use scorealign::audio::{decode_wav, encode_wav};
use scorealign::dataset::{make_segments, read_csv, write_csv};
use scorealign::eval::evaluate;
use scorealign::experiments::{generate_score, readout_energy, render_performance};
use scorealign::models::{build_examples, select_threshold, train, LinearModel};
use scorealign::score::{encode_midi, parse_midi};
use scorealign::{
    AlignConfig, FeatureKind, Model, SampleFormat, SegmentSpec, Subset, SynthConfig, SyntheticSpec, TrainConfig,
};

#[test]
fn score_to_trained_model() {
    let spec = SyntheticSpec {
        note_low: 60,
        note_high: 67,
        duration_s: 15.0,
        seed: 21,
        ..SyntheticSpec::default()
    };
    let score = generate_score(&spec).unwrap();
    let score = parse_midi(&encode_midi(&score)).unwrap();
    let perf = render_performance(&score, &spec).unwrap();
    let audio = decode_wav(&encode_wav(&perf.audio, SampleFormat::Float32).unwrap()).unwrap();

    let cfg = AlignConfig::default();
    let alignment = align(&audio, &score, &cfg, &SynthConfig::default()).unwrap();
    let labels = transfer_labels(&alignment.path, &score, audio.sample_rate(), &cfg).unwrap();
    assert_eq!(labels.len(), score.events().len());

    let mut csv = Vec::new();
    write_csv(&labels, &mut csv, true).unwrap();
    let labels = read_csv(csv.as_slice()).unwrap();

    let segments = make_segments(&audio, &labels, &SegmentSpec {
        end_s: audio.duration_s(),
        ..SegmentSpec::default()
    })
    .unwrap();
    let mut model = Model::Linear(LinearModel::new(FeatureKind::LogSpectrogram, 2048));
    let data = build_examples(&model, &audio, &segments).unwrap();
    let learning_rate = 0.5 / readout_energy(&model, &data).unwrap();
    let report = train(&mut model, &data, None, &TrainConfig {
        learning_rate,
        batch_size: 32,
        epochs: 5,
        ..TrainConfig::default()
    })
    .unwrap();
    assert!(report.train_loss.last().unwrap() < report.train_loss.first().unwrap());

    let scores = model.forward_batch(data.inputs.view()).unwrap();
    let c = select_threshold(scores.view(), &data.labels, 256).unwrap();
    let r = evaluate(scores.view(), &data.labels, c, 256, Subset::All).unwrap();
    assert!(r.average_precision > 0.8, "{}", r.average_precision);
    assert!((r.mirex.e_tot - (r.mirex.e_sub + r.mirex.e_miss + r.mirex.e_fa)).abs() < 1e-15);
}
