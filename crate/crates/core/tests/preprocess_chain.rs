use kanvox_core::preprocess::{
    prepare_slices, prepare_volume, resample, synth_generate, DatasetManifest, Label, SynthSpec,
    Volume,
};
use kanvox_core::Tensor;

fn central_mean(v: &Volume) -> f64 {
    let s = v.depth();
    let (lo, hi) = (s / 2 - s / 16, s / 2 + s / 16);
    let mut sum = 0.0;
    let mut n = 0;
    for z in lo..hi {
        for y in lo..hi {
            for x in lo..hi {
                sum += v.data.data()[(z * s + y) * s + x];
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Best training accuracy of a single threshold on a scalar feature, either direction.
fn best_threshold_accuracy(feature: &[f64], labels: &[usize]) -> f64 {
    let mut best: f64 = 0.0;
    for &t in feature {
        for dir in [1.0, -1.0] {
            let correct = feature
                .iter()
                .zip(labels)
                .filter(|(f, &l)| ((dir * (**f - t) >= 0.0) as usize) == l)
                .count();
            best = best.max(correct as f64 / labels.len() as f64);
        }
    }
    best
}

#[test]
fn phantom_effect_is_linearly_detectable() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(&SynthSpec::new(60, 0.5, 0.05, 3), dir.path()).unwrap();
    let feats: Vec<f64> = m
        .subjects
        .iter()
        .map(|s| central_mean(&m.load_volume(s).unwrap()))
        .collect();
    let labels: Vec<usize> = m.subjects.iter().map(|s| s.label.index()).collect();
    let acc = best_threshold_accuracy(&feats, &labels);
    assert!(acc > 0.9, "threshold accuracy {acc}");
}

#[test]
fn null_phantom_classes_share_one_law() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::new(8, 0.0, 0.05, 11);
    spec.size = 16;
    let m = synth_generate(&spec, dir.path()).unwrap();
    // with no effect, a PD subject's volume is what the generator would
    // produce for a control drawn from the same stream
    for (i, s) in m.subjects.iter().enumerate() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
        rng.set_stream(i as u64);
        let other = if s.label == Label::Pd {
            Label::Control
        } else {
            Label::Pd
        };
        let twin = kanvox_core::preprocess::phantom_volume(16, other, 0.0, 0.05, &mut rng).unwrap();
        assert_eq!(
            m.load_volume(s).unwrap().data.data(),
            twin.data()
                .iter()
                .map(|&v| v as f32 as f64)
                .collect::<Vec<_>>()
                .as_slice()
        );
    }
}

#[test]
fn synth_is_deterministic_and_balanced() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut spec = SynthSpec::new(6, 0.5, 0.05, 9);
    spec.size = 12;
    let ma = synth_generate(&spec, a.path()).unwrap();
    synth_generate(&spec, b.path()).unwrap();
    for s in &ma.subjects {
        let fa = std::fs::read(a.path().join(&s.path)).unwrap();
        let fb = std::fs::read(b.path().join(&s.path)).unwrap();
        assert_eq!(fa, fb);
    }
    assert_eq!(
        ma.subjects.iter().filter(|s| s.label == Label::Pd).count(),
        3
    );
    let loaded = DatasetManifest::load(a.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.subjects, ma.subjects);
    assert!(synth_generate(&SynthSpec::new(2, 0.5, 0.05, 1), a.path()).is_err());
    assert!(synth_generate(&SynthSpec::new(5, 0.5, 0.05, 1), a.path()).is_err());
}

#[test]
fn chains_stay_finite_and_in_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SynthSpec::new(4, 0.5, 0.1, 2);
    spec.size = 24;
    let m = synth_generate(&spec, dir.path()).unwrap();
    let vol = m.load_volume(&m.subjects[1]).unwrap();
    for s in prepare_slices(&vol, 12, 10, 40, 1.0).unwrap() {
        assert_eq!(s.shape(), &[40, 40]);
        assert!(s
            .data()
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
    let v = prepare_volume(&vol, 32, 1.0).unwrap();
    assert_eq!(v.shape(), &[32, 32, 32]);
    assert!(v
        .data()
        .iter()
        .all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
}

#[test]
fn resample_round_trip_on_smooth_phantom() {
    let n = 32;
    let f = |y: usize, x: usize| {
        let (u, v) = (y as f64 / n as f64, x as f64 / n as f64);
        0.5 + 0.3 * (2.0 * std::f64::consts::PI * u).sin() * (std::f64::consts::PI * v).cos()
    };
    let img = Tensor::new((0..n * n).map(|i| f(i / n, i % n)).collect(), &[n, n]).unwrap();
    let back = resample(&resample(&img, &[57, 45]).unwrap(), &[n, n]).unwrap();
    let rms = (img
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / (n * n) as f64)
        .sqrt();
    let scale = (img.data().iter().map(|a| a * a).sum::<f64>() / (n * n) as f64).sqrt();
    assert!(rms / scale < 0.05, "relative rms {}", rms / scale);
}
