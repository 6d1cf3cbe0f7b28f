use psgalign::corpus::{encode_nights, Corpus};
use psgalign::edf::{quantization_step, read_edf_file};
use psgalign::prep::{prepare_night_raw, PrepConfig};
use psgalign::synth::*;
use psgalign::Modality;

fn small(seed: u64) -> SynthSpec {
    SynthSpec {
        n_subjects: 6,
        nights_per_subject: 1,
        epochs_per_night: 6,
        seed,
        ..SynthSpec::default()
    }
}

/// A chain that never leaves N2.
fn constant_n2() -> SynthSpec {
    let mut identity = [[0.0; 5]; 5];
    for (i, row) in identity.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    SynthSpec {
        transition: identity,
        initial: [0.0, 0.0, 1.0, 0.0, 0.0],
        hr_latent_gain: 0.0,
        trait_fraction: 0.0,
        ..small(3)
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let a = generate(&small(1), false).unwrap();
    let b = generate(&small(1), false).unwrap();
    assert_eq!(encode_nights(&a.corpus.nights), encode_nights(&b.corpus.nights));
    assert_eq!(a.corpus.labels, b.corpus.labels);
    let c = generate(&small(2), false).unwrap();
    assert_ne!(encode_nights(&a.corpus.nights), encode_nights(&c.corpus.nights));
}

#[test]
fn every_modality_is_prepared() {
    let out = generate(&small(1), false).unwrap();
    for n in &out.corpus.nights {
        assert_eq!(n.modality_set(), Modality::ALL.to_vec());
        assert_eq!(n.n_epochs(), 6);
    }
}

#[test]
fn absorbing_chain_keeps_one_stage() {
    let raw = generate_raw(&constant_n2()).unwrap();
    for n in &raw {
        assert!(n.truth.stages.iter().all(|&s| s == 2));
    }
}

#[test]
fn sixty_bpm_stage_gives_one_second_ibi() {
    let raw = generate_raw(&constant_n2()).unwrap();
    for n in &raw {
        let p = prepare_night_raw(&n.recording, &PrepConfig::default()).unwrap();
        let ibi = &p.epochs[&Modality::Ibi];
        // Skip the first and last epoch where the series is edge-filled.
        let inner = ibi.rows_f64(1, ibi.rows - 2);
        let mean = inner.iter().sum::<f64>() / inner.len() as f64;
        assert!((mean - 1.0).abs() <= 0.005, "mean IBI {mean}");
    }
}

#[test]
fn edf_export_matches_in_memory_preparation() {
    let raw = generate_raw(&small(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for n in raw.iter().take(2) {
        let path = dir.path().join("night.edf");
        export_edf(&n.recording, &path).unwrap();
        let back = read_edf_file(&path).unwrap();
        let labels: Vec<&str> = back.channels.iter().map(|c| c.label.as_str()).collect();
        let want: Vec<&str> = n.recording.channels.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, want);
        let cfg = PrepConfig::default();
        let a = prepare_night_raw(&n.recording, &cfg).unwrap();
        let b = prepare_night_raw(&back, &cfg).unwrap();
        for (m, ma) in &a.epochs {
            let mb = &b.epochs[m];
            let diff = ma.data.iter().zip(&mb.data).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max);
            let tol = match m {
                // One sample of R-peak jitter at 128 Hz.
                Modality::Ibi => 1.0 / 128.0 + 1e-6,
                _ => {
                    let src = match m {
                        Modality::Resp => n.recording.channel("Thor belt").unwrap(),
                        _ => n.recording.channels.iter().find(|c| cfg.aliases.resolve(&c.label) == Some(*m)).unwrap(),
                    };
                    let lo = src.samples.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = src.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    4.0 * quantization_step(lo.floor(), hi.ceil()) + 1e-5
                }
            };
            assert!(diff <= tol, "{m}: {diff} > {tol}");
        }
    }
}

#[test]
fn empty_night_cannot_be_exported() {
    let mut rec = generate_raw(&small(5)).unwrap().remove(0).recording;
    for c in &mut rec.channels {
        c.samples.clear();
    }
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(export_edf(&rec, &dir.path().join("x.edf")), Err(SynthError::Io(_))));
}

#[test]
fn labels_survive_the_sidecar() {
    let out = generate(&small(6), false).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.corpus.save(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back.labels, out.corpus.labels);
    assert_eq!(back.splits, out.corpus.splits);
}

#[test]
fn invalid_specs_are_rejected() {
    let mut bad = small(1);
    bad.transition[0][0] = 0.5;
    assert!(matches!(generate_raw(&bad), Err(SynthError::InvalidSpec(_))));
    let bad = SynthSpec { confound: 1.5, ..small(1) };
    assert!(matches!(generate_raw(&bad), Err(SynthError::InvalidSpec(_))));
    let bad = SynthSpec { holdout_site: Some("Z".into()), ..small(1) };
    assert!(matches!(generate_raw(&bad), Err(SynthError::InvalidSpec(_))));
}

#[test]
fn holdout_site_goes_to_test() {
    let spec = SynthSpec {
        holdout_site: Some("B".into()),
        n_subjects: 12,
        ..small(7)
    };
    let out = generate(&spec, false).unwrap();
    for (n, s) in out.corpus.nights.iter().zip(&out.corpus.splits) {
        let held = n.meta.site.as_deref() == Some("B");
        assert_eq!(held, *s == psgalign::corpus::Split::Test);
    }
}

/// Power of `x` in `[lo, hi)` Hz by direct DFT.
fn band_power(x: &[f64], rate: f64, lo: f64, hi: f64) -> f64 {
    let n = x.len();
    let k0 = (lo * n as f64 / rate).ceil() as usize;
    let k1 = (hi * n as f64 / rate).ceil() as usize;
    (k0.max(1)..k1)
        .map(|k| {
            let w = std::f64::consts::TAU * k as f64 / n as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                re += v * (w * t as f64).cos();
                im -= v * (w * t as f64).sin();
            }
            re * re + im * im
        })
        .sum()
}

#[test]
fn eeg_band_powers_separate_stages() {
    let spec = SynthSpec {
        n_subjects: 16,
        epochs_per_night: 20,
        ..small(8)
    };
    let out = generate(&spec, false).unwrap();
    let bands = [(0.5, 3.0), (3.0, 6.0), (6.0, 8.5), (8.5, 11.5), (11.5, 16.0), (16.0, 30.0)];
    let mut rows: Vec<(Vec<f64>, u8, bool)> = Vec::new();
    for (i, n) in out.corpus.nights.iter().enumerate() {
        let stages = &out.corpus.labels_of(i).unwrap().stages;
        let eeg = &n.epochs[&Modality::Eeg];
        for (e, &s) in stages.iter().enumerate() {
            // Decimate by 2 to keep the direct DFT cheap; all bands stay below 32 Hz.
            let x: Vec<f64> = eeg.row(e).iter().step_by(2).map(|&v| v as f64).collect();
            let p: Vec<f64> = bands.iter().map(|&(lo, hi)| band_power(&x, 64.0, lo, hi)).collect();
            let total: f64 = p.iter().sum();
            let feat = p.iter().map(|v| (v / total).ln()).collect();
            rows.push((feat, s, i % 2 == 0));
        }
    }
    let mut centroids = vec![(vec![0.0; bands.len()], 0usize); 5];
    for (f, s, train) in &rows {
        if *train {
            let c = &mut centroids[*s as usize];
            c.0.iter_mut().zip(f).for_each(|(a, b)| *a += b);
            c.1 += 1;
        }
    }
    let centroids: Vec<Vec<f64>> = centroids
        .into_iter()
        .map(|(s, n)| s.into_iter().map(|v| v / n.max(1) as f64).collect())
        .collect();
    let test: Vec<_> = rows.iter().filter(|r| !r.2).collect();
    let correct = test
        .iter()
        .filter(|(f, s, _)| {
            let d = |c: &Vec<f64>| c.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..5).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))).unwrap();
            best == *s as usize
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.7, "spectral accuracy {acc}");
}

#[test]
fn heart_rhythm_depends_on_stage() {
    // Contingency of stage against the IBI tercile of each epoch.
    let out = generate(&SynthSpec { n_subjects: 20, ..small(9) }, false).unwrap();
    let mut pairs = Vec::new();
    for (i, n) in out.corpus.nights.iter().enumerate() {
        let stages = &out.corpus.labels_of(i).unwrap().stages;
        let ibi = &n.epochs[&Modality::Ibi];
        for (e, &s) in stages.iter().enumerate() {
            let m = ibi.row(e).iter().map(|&v| v as f64).sum::<f64>() / ibi.cols as f64;
            pairs.push((s as usize, m));
        }
    }
    let mut sorted: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    sorted.sort_by(f64::total_cmp);
    let cut = [sorted[sorted.len() / 3], sorted[2 * sorted.len() / 3]];
    let mut table = [[0.0f64; 3]; 5];
    for &(s, m) in &pairs {
        let bin = (m > cut[0]) as usize + (m > cut[1]) as usize;
        table[s][bin] += 1.0;
    }
    let n = pairs.len() as f64;
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..3).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let mut chi2 = 0.0;
    let mut dof = 0;
    for i in 0..5 {
        if rows[i] == 0.0 {
            continue;
        }
        dof += 1;
        for j in 0..3 {
            let e = rows[i] * cols[j] / n;
            chi2 += (table[i][j] - e).powi(2) / e;
        }
    }
    // 99.9% quantile of chi-square with (5-1)*(3-1) = 8 degrees of freedom.
    assert!(dof >= 4);
    assert!(chi2 > 26.12, "chi2 {chi2}");
}
